//! Newline-delimited JSON over TCP.
//!
//! Control socket, one reply line per request line:
//! `{"cmd":"start","source":"synth:seed=1","config":{...}}`, `{"cmd":"stop"}`,
//! `{"cmd":"review_get"}`, `{"cmd":"review_submit","edits":[...],"journal":[...]}`
//! and `{"cmd":"status"}`. Replies carry `"ok":true` plus a payload, or
//! `"ok":false` with an `error` code and `message`.
//!
//! Event socket: the server writes one event per line to every connected
//! client and ignores anything the client sends.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::PipelineConfig;
use crate::events::{Event, SUBSCRIBER_BUFFER};
use crate::service::{ControlError, Controller, EditRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Request {
    Start {
        source: String,
        #[serde(default)]
        config: Option<PipelineConfig>,
    },
    Stop,
    ReviewGet,
    ReviewSubmit {
        #[serde(default)]
        edits: Vec<EditRequest>,
        #[serde(default)]
        journal: Vec<u64>,
    },
    Status,
}

fn ok(payload: Value) -> Value {
    let mut v = json!({ "ok": true });
    if let (Value::Object(m), Value::Object(p)) = (&mut v, payload) {
        m.extend(p);
    }
    v
}

fn fail(code: &str, message: impl Into<String>) -> Value {
    json!({ "ok": false, "error": code, "message": message.into() })
}

fn from_control(e: ControlError) -> Value {
    let mut v = fail(e.code(), e.to_string());
    if let ControlError::UnknownFrame(f) = e {
        v["frame"] = json!(f);
    }
    v
}

/// Executes one request line against the controller.
pub fn handle_line(controller: &Controller, line: &str) -> Value {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return fail("BadRequest", e.to_string()),
    };
    let result = match request {
        Request::Start { source, config } => controller
            .start(&source, config)
            .map(|id| json!({ "session_id": id })),
        Request::Stop => controller.stop().map(|b| json!({ "bundle": b })),
        Request::ReviewGet => controller.review_get().map(|b| json!({ "bundle": b })),
        Request::ReviewSubmit { edits, journal } => controller
            .review_submit(&edits, &journal)
            .map(|()| json!({})),
        Request::Status => Ok(json!(controller.status())),
    };
    match result {
        Ok(payload) => ok(payload),
        Err(e) => from_control(e),
    }
}

fn serve_control_connection(controller: &Controller, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(controller, &line);
        writer.write_all(reply.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn serve_event_connection(controller: &Controller, mut stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let events = controller.events().subscribe(SUBSCRIBER_BUFFER);
    // Start from the current lifecycle so a reconnecting client is in sync.
    let status = controller.status();
    let current = Event::Lifecycle {
        state: status.state,
        session_id: status.session_id,
    };
    writeln!(stream, "{}", current.to_line())?;
    for line in events {
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
    }
    Ok(())
}

/// Bound control and event listeners.
pub struct Server {
    controller: Arc<Controller>,
    control: TcpListener,
    events: TcpListener,
}

impl Server {
    pub fn bind(
        controller: Arc<Controller>,
        control_addr: impl ToSocketAddrs,
        events_addr: impl ToSocketAddrs,
    ) -> io::Result<Self> {
        Ok(Self {
            controller,
            control: TcpListener::bind(control_addr)?,
            events: TcpListener::bind(events_addr)?,
        })
    }

    pub fn control_addr(&self) -> io::Result<SocketAddr> {
        self.control.local_addr()
    }

    pub fn events_addr(&self) -> io::Result<SocketAddr> {
        self.events.local_addr()
    }

    /// Accepts connections on both sockets in background threads.
    pub fn spawn(self) -> io::Result<(SocketAddr, SocketAddr)> {
        let addrs = (self.control_addr()?, self.events_addr()?);
        let Self {
            controller,
            control,
            events,
        } = self;
        {
            let controller = controller.clone();
            thread::Builder::new()
                .name("hector-events-accept".into())
                .spawn(move || accept_loop(events, controller, serve_event_connection))?;
        }
        thread::Builder::new()
            .name("hector-control-accept".into())
            .spawn(move || accept_loop(control, controller, serve_control_connection))?;
        Ok(addrs)
    }
}

fn accept_loop(
    listener: TcpListener,
    controller: Arc<Controller>,
    serve: fn(&Controller, TcpStream) -> io::Result<()>,
) {
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let controller = controller.clone();
                let peer = stream.peer_addr().ok();
                let spawned = thread::Builder::new().spawn(move || {
                    if let Err(e) = serve(&controller, stream) {
                        log::debug!("connection {peer:?} closed: {e}");
                    }
                });
                if let Err(e) = spawned {
                    log::error!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}
