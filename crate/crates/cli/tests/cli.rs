use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use hector_core::domain::PipelineConfig;
use hector_core::pipeline::ReviewBundle;
use hector_core::session::{load_sessions, MANIFEST_FILE};
use serde_json::{json, Value};

fn hector() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hector"));
    c.env_remove("HECTOR_DATA_DIR").env("RUST_LOG", "error");
    c
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn headless(data: &Path, source: &str) -> ReviewBundle {
    let stdout = run_ok(
        hector()
            .args(["run", "--source", source])
            .env("HECTOR_DATA_DIR", data),
    );
    bundle_line(&stdout)
}

/// The bundle is the only thing a headless run prints.
fn bundle_line(text: &str) -> ReviewBundle {
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn headless_run_then_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = "synth:seed=5,noise=1,size=128x96,plan=u1:40/blur:10/u3:30/ood:20";
    let bundle = headless(&data, spec);
    assert_eq!(bundle.session_id, 1);
    assert_eq!(bundle.verdicts.total, 100);
    assert_eq!(bundle.video_score.unwrap().overall_mes.value(), 3);

    // Headless sessions are closed so they can be evaluated and exported.
    let sessions = load_sessions(&data).unwrap();
    assert!(sessions[0].0.is_closed());

    let report = dir.path().join("report");
    let stdout = run_ok(
        hector()
            .args(["eval", "--sessions"])
            .arg(&data)
            .arg("--out")
            .arg(&report),
    );
    assert!(stdout.contains("sess1"), "{stdout}");
    assert!(stdout.contains("macro AUROC"), "{stdout}");
    assert!(stdout.contains("kappa"), "{stdout}");
    let auroc = std::fs::read_to_string(report.join("auroc.csv")).unwrap();
    assert!(auroc.starts_with("video_id,auroc\nsess1,"), "{auroc}");
    let roc = std::fs::read_to_string(report.join("roc_sess1.csv")).unwrap();
    assert!(roc.starts_with("tau,tpr,fpr\n"), "{roc}");

    let out = dir.path().join("export");
    run_ok(
        hector()
            .args(["export", "--sessions"])
            .arg(&data)
            .arg("--out")
            .arg(&out),
    );
    let manifest = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), bundle.selection.len() + 1);
    for row in manifest.lines().skip(1) {
        let image = row.split(',').next().unwrap();
        assert!(out.join(image).is_file(), "{image}");
    }
}

#[test]
fn config_file_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hector.toml");
    std::fs::write(&cfg, "k = 2\nmin_gap = 5\n").unwrap();
    let stdout = run_ok(
        hector()
            .args(["run", "--source", "synth:seed=2,size=96x96,plan=u2:60"])
            .arg("--config")
            .arg(&cfg)
            .env("HECTOR_DATA_DIR", dir.path().join("d")),
    );
    assert_eq!(bundle_line(&stdout).selection.len(), 2);

    std::fs::write(&cfg, "window = 0\n").unwrap();
    let out = hector()
        .args(["run", "--source", "synth"])
        .arg("--config")
        .arg(&cfg)
        .env("HECTOR_DATA_DIR", dir.path().join("d"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn calibrate_writes_loadable_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("val.csv");
    let mut text = String::from("l0,l1,l2,l3,label\n");
    // Overconfident logits: every row is right 3 times out of 4.
    for i in 0..40 {
        let label = if i % 4 == 3 { (i / 4) % 4 } else { i % 4 };
        let mut l = [0.0; 4];
        l[i % 4] = 12.0;
        text += &format!("{},{},{},{},{label}\n", l[0], l[1], l[2], l[3]);
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("calib.toml");
    let stdout = run_ok(
        hector()
            .args(["calibrate", "--validation"])
            .arg(&csv)
            .arg("--out")
            .arg(&out),
    );
    assert!(stdout.contains("temperature"), "{stdout}");
    let fitted = PipelineConfig::from_config_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(fitted.temperature > 1.5, "{}", fitted.temperature);

    std::fs::write(&csv, "l0,l1,l2,l3,label\n1,2,3,4,9\n").unwrap();
    let bad = hector()
        .args(["calibrate", "--validation"])
        .arg(&csv)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = hector()
        .args(["run"])
        .env("HECTOR_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = hector()
        .args(["run", "--source", "/definitely/not/here.hvid"])
        .env("HECTOR_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unavailable"));
    let out = hector()
        .args(["run", "--source", "synth", "--model", "gpu:0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

struct Served {
    child: Child,
    control: String,
    events: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(data: &Path) -> Served {
    let mut child = hector()
        .args(["run", "--listen", "127.0.0.1:0"])
        .env("HECTOR_DATA_DIR", data)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut addr = |prefix: &str| {
        let line = lines.next().unwrap().unwrap();
        line.strip_prefix(prefix).unwrap().to_string()
    };
    let control = addr("control ");
    let events = addr("events ");
    Served {
        child,
        control,
        events,
    }
}

fn request(conn: &mut (TcpStream, BufReader<TcpStream>), line: &str) -> Value {
    writeln!(conn.0, "{line}").unwrap();
    let mut reply = String::new();
    conn.1.read_line(&mut reply).unwrap();
    serde_json::from_str(&reply).unwrap()
}

#[test]
fn listen_mode_speaks_ndjson() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path());
    let events = TcpStream::connect(&server.events).unwrap();
    events
        .set_read_timeout(Some(Duration::from_secs(30)))
        .unwrap();
    let mut events = BufReader::new(events).lines();
    let mut next_event =
        || serde_json::from_str::<Value>(&events.next().unwrap().unwrap()).unwrap();
    assert_eq!(next_event(), json!({"evt": "lifecycle", "state": "idle"}));

    let s = TcpStream::connect(&server.control).unwrap();
    let mut conn = (s.try_clone().unwrap(), BufReader::new(s));
    assert_eq!(
        request(&mut conn, r#"{"cmd":"status"}"#),
        json!({"ok": true, "state": "idle"})
    );
    let started = request(
        &mut conn,
        r#"{"cmd":"start","source":"synth:seed=1,size=96x96,plan=u2:30/dark:5"}"#,
    );
    assert_eq!(started, json!({"ok": true, "session_id": 1}));

    let mut verdicts = 0;
    loop {
        let e = next_event();
        match e["evt"].as_str().unwrap() {
            "verdict" => {
                assert_eq!(e["frame"], json!(verdicts), "{e}");
                verdicts += 1;
            }
            _ if e["state"] == "review" => break,
            _ => {}
        }
    }
    assert_eq!(verdicts, 35);

    let reply = request(&mut conn, r#"{"cmd":"review_get"}"#);
    assert_eq!(reply["ok"], true);
    assert_eq!(reply["bundle"]["verdicts"]["total"], 35);
    let frame = reply["bundle"]["selection"][0]["frame_index"]
        .as_u64()
        .unwrap();

    let reply = request(
        &mut conn,
        r#"{"cmd":"review_submit","edits":[{"frame_index":999,"corrected_mes":1}]}"#,
    );
    assert_eq!(
        (reply["error"].as_str(), reply["frame"].as_u64()),
        (Some("UnknownFrame"), Some(999))
    );
    let submit = json!({"cmd": "review_submit", "edits": [{"frame_index": frame, "corrected_mes": 0}], "journal": [frame]});
    assert_eq!(request(&mut conn, &submit.to_string()), json!({"ok": true}));
    assert_eq!(next_event(), json!({"evt": "lifecycle", "state": "idle"}));
    assert_eq!(request(&mut conn, "not json")["error"], "BadRequest");

    let (record, _) = load_sessions(dir.path()).unwrap().remove(0);
    assert!(record.is_closed());
    assert_eq!(
        record.effective_edit(frame).unwrap().corrected_mes.value(),
        0
    );
}
