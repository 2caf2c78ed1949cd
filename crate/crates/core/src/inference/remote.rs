//! Length-implied binary protocol to an external model server.
//!
//! ```text
//! request  = "HCT1" | frame_index u64 LE | width u16 LE | height u16 LE | RGB8 payload
//! response = "HCT1" | frame_index u64 LE | 4 x f32 LE logits
//! ```
//!
//! One request/response pair per frame over a reused connection. Any failure
//! drops the connection; the next frame reconnects.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{InferenceError, LogitProvider, ProviderDescriptor};
use crate::domain::{Frame, LogitVector};

pub const MAGIC: &[u8; 4] = b"HCT1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(100);
const RESPONSE_LEN: usize = 4 + 8 + 16;

pub fn encode_request(frame: &Frame) -> Result<Vec<u8>, InferenceError> {
    let (w, h) = (frame.width(), frame.height());
    let (Ok(w16), Ok(h16)) = (u16::try_from(w), u16::try_from(h)) else {
        return Err(InferenceError::Protocol(format!(
            "frame {w}x{h} exceeds the u16 size fields"
        )));
    };
    let mut buf = Vec::with_capacity(16 + frame.pixels().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&frame.index().to_le_bytes());
    buf.extend_from_slice(&w16.to_le_bytes());
    buf.extend_from_slice(&h16.to_le_bytes());
    buf.extend_from_slice(frame.pixels());
    Ok(buf)
}

/// Reads one request. Returns `Ok(None)` on a clean end of stream.
pub fn decode_request(reader: &mut impl Read) -> Result<Option<Frame>, InferenceError> {
    let mut header = [0u8; 16];
    match reader.read_exact(&mut header[..4]) {
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        r => r?,
    }
    reader.read_exact(&mut header[4..])?;
    if &header[..4] != MAGIC {
        return Err(InferenceError::Protocol("bad request magic".into()));
    }
    let index = u64::from_le_bytes(header[4..12].try_into().unwrap());
    let w = u16::from_le_bytes([header[12], header[13]]) as u32;
    let h = u16::from_le_bytes([header[14], header[15]]) as u32;
    let mut payload = vec![0u8; w as usize * h as usize * 3];
    reader.read_exact(&mut payload)?;
    Frame::new(index, 0, w, h, payload)
        .map(Some)
        .map_err(|e| InferenceError::Protocol(e.to_string()))
}

pub fn encode_response(frame_index: u64, logits: &LogitVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RESPONSE_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&frame_index.to_le_bytes());
    for &l in logits.values() {
        buf.extend_from_slice(&(l as f32).to_le_bytes());
    }
    buf
}

/// Parses a complete response, checking it answers `expected_index`.
pub fn decode_response(bytes: &[u8], expected_index: u64) -> Result<LogitVector, InferenceError> {
    if bytes.len() != RESPONSE_LEN {
        return Err(InferenceError::Protocol(format!(
            "response is {} bytes, expected {RESPONSE_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(InferenceError::Protocol("bad response magic".into()));
    }
    let index = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    if index != expected_index {
        return Err(InferenceError::Protocol(format!(
            "response for frame {index}, expected {expected_index}"
        )));
    }
    let mut logits = [0.0f64; 4];
    for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        logits[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    LogitVector::new(logits).map_err(|e| InferenceError::Protocol(e.to_string()))
}

/// Reads until `buf` is full. A short read followed by end of stream is a
/// protocol violation (the peer sent a truncated message), not a transport
/// fault.
fn read_response(stream: &mut TcpStream, buf: &mut [u8]) -> Result<(), InferenceError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed").into())
            }
            Ok(0) => {
                return Err(InferenceError::Protocol(format!(
                    "truncated response: {filled} of {} bytes",
                    buf.len()
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Client for a model server speaking the `HCT1` protocol.
pub struct RemoteProvider {
    addr: SocketAddr,
    timeout: Duration,
    stream: Option<TcpStream>,
}

impl RemoteProvider {
    pub fn new(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(Self {
            addr,
            timeout: DEFAULT_TIMEOUT,
            stream: None,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn exchange(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
        let deadline = Instant::now() + self.timeout;
        let request = encode_request(frame)?;
        let remaining = |deadline: Instant| {
            deadline
                .checked_duration_since(Instant::now())
                .filter(|d| !d.is_zero())
                .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "inference deadline"))
        };
        if self.stream.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, remaining(deadline)?)?;
            s.set_nodelay(true)?;
            self.stream = Some(s);
        }
        let stream = self.stream.as_mut().expect("connected above");
        stream.set_write_timeout(Some(remaining(deadline)?))?;
        stream.write_all(&request)?;
        stream.set_read_timeout(Some(remaining(deadline)?))?;
        let mut buf = [0u8; RESPONSE_LEN];
        read_response(stream, &mut buf)?;
        decode_response(&buf, frame.index())
    }
}

impl LogitProvider for RemoteProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: format!("remote:{}", self.addr),
            input_size: None,
        }
    }

    fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
        let result = self.exchange(frame);
        if result.is_err() {
            self.stream = None;
        }
        result
    }
}

/// Answers requests on one connection with `provider` until the peer hangs up.
pub fn serve_connection(
    mut stream: TcpStream,
    provider: &mut dyn LogitProvider,
) -> Result<(), InferenceError> {
    stream.set_nodelay(true)?;
    let mut reader = io::BufReader::new(stream.try_clone()?);
    while let Some(frame) = decode_request(&mut reader)? {
        let logits = provider.infer(&frame)?;
        stream.write_all(&encode_response(frame.index(), &logits))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{StubModel, StubModelSpec};
    use std::net::TcpListener;
    use std::thread;

    #[test]
    fn request_round_trip() {
        let frame = Frame::new(77, 0, 3, 2, (0..18).collect::<Vec<u8>>()).unwrap();
        let bytes = encode_request(&frame).unwrap();
        assert_eq!(&bytes[..4], b"HCT1");
        assert_eq!(bytes.len(), 16 + 18);
        let back = decode_request(&mut &bytes[..]).unwrap().unwrap();
        assert_eq!(back.index(), 77);
        assert_eq!(back.pixels(), frame.pixels());
        assert!(decode_request(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn response_checks() {
        let l = LogitVector::new([1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_response(5, &l);
        assert_eq!(decode_response(&bytes, 5).unwrap(), l);
        assert!(matches!(
            decode_response(&bytes, 6),
            Err(InferenceError::Protocol(_))
        ));
        assert!(matches!(
            decode_response(&bytes[..24], 5),
            Err(InferenceError::Protocol(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_response(&bad, 5),
            Err(InferenceError::Protocol(_))
        ));
        let mut nan = bytes;
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_response(&nan, 5),
            Err(InferenceError::Protocol(_))
        ));
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let f = Frame::solid(0, 70_000, 1, [0, 0, 0]).unwrap();
        assert!(matches!(
            encode_request(&f),
            Err(InferenceError::Protocol(_))
        ));
    }

    #[test]
    fn stub_behind_socket_matches_local_stub() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut m = StubModel::new(StubModelSpec::new(4));
            serve_connection(s, &mut m).unwrap();
        });
        let mut remote = RemoteProvider::new(addr)
            .unwrap()
            .with_timeout(Duration::from_secs(2));
        let mut local = StubModel::new(StubModelSpec::new(4));
        for i in 0..3u64 {
            let f = Frame::solid(i, 40, 40, [200, (i * 40) as u8, 30]).unwrap();
            let r = remote.infer(&f).unwrap();
            let l = local.infer_frame(&f);
            for (a, b) in r.values().iter().zip(l.values()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
        drop(remote);
        server.join().unwrap();
    }
}
