//! The process backend against small shell-script backends.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use cspl_core::backend::TrainingExample;
use cspl_core::{BoundingBox, DomainTag, GroundTruthObject, ImageRecord};
use cspl::protocol::{HandleState, ProcessBackend, ProcessOptions, ProtocolError};

const HELLO_OK: &str = r#"{"ok":true,"protocol":1,"capabilities":["train","predict"]}"#;
const PREDICT_OK: &str = r#"{"ok":true,"detections":{"a":[{"class":"car","bbox":[1,2,3,4],"score":0.9}]}}"#;

#[derive(Clone, Default)]
struct Wire(Arc<Mutex<Vec<u8>>>);

impl Write for Wire {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl Wire {
    fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

struct Fake {
    _dir: tempfile::TempDir,
    script: PathBuf,
}

/// A backend answering each op with the given line. `shutdown` replies
/// and exits unless overridden.
fn fake(hello: &str, train: &str, predict: &str, shutdown: &str) -> Fake {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("backend.sh");
    let body = format!(
        "#!/bin/sh\nwhile IFS= read -r line; do\n  case \"$line\" in\n    *'\"op\":\"hello\"'*) {hello};;\n    *'\"op\":\"train\"'*) {train};;\n    *'\"op\":\"predict\"'*) {predict};;\n    *'\"op\":\"shutdown\"'*) {shutdown};;\n  esac\ndone\n"
    );
    std::fs::write(&script, body).unwrap();
    let mut perms = std::fs::metadata(&script).unwrap().permissions();
    std::os::unix::fs::PermissionsExt::set_mode(&mut perms, 0o755);
    std::fs::set_permissions(&script, perms).unwrap();
    Fake { _dir: dir, script }
}

fn echo(line: &str) -> String {
    format!("echo '{line}'")
}

fn good(predict: &str) -> Fake {
    fake(&echo(HELLO_OK), &echo(r#"{"ok":true}"#), &echo(predict), &format!("{}; exit 0", echo(r#"{"ok":true}"#)))
}

fn options(wire: &Wire) -> ProcessOptions {
    ProcessOptions {
        timeout: Duration::from_secs(10),
        shutdown_grace: Duration::from_secs(5),
        wire_log: Some(Box::new(wire.clone())),
    }
}

fn start(f: &Fake, wire: &Wire) -> Result<ProcessBackend, ProtocolError> {
    ProcessBackend::spawn(f.script.to_str().unwrap(), &[], options(wire))
}

fn image(id: &str) -> ImageRecord {
    ImageRecord::new(id, 100, 100, format!("/img/{id}.jpg"), DomainTag::Source)
        .with_annotations(vec![GroundTruthObject::new("car", BoundingBox::new(1.0, 1.0, 10.0, 10.0).unwrap()).unwrap()])
}

#[test]
fn handshake_reaches_idle() {
    let f = good(PREDICT_OK);
    let wire = Wire::default();
    let b = start(&f, &wire).unwrap();
    assert_eq!(b.state(), HandleState::Idle);
    assert_eq!(b.capabilities(), ["train", "predict"]);
    assert_eq!(wire.text(), format!("> {{\"op\":\"hello\",\"protocol\":1}}\n< {HELLO_OK}\n"));
}

#[test]
fn garbage_reply_fails_the_handle_and_keeps_the_wire_log() {
    let f = fake("echo 'hello there'", "true", "true", "exit 0");
    let wire = Wire::default();
    let err = start(&f, &wire).err().unwrap();
    assert!(matches!(err, ProtocolError::Malformed { ref op, .. } if op == "hello"), "{err}");
    assert!(wire.text().contains("< hello there"));
}

#[test]
fn failed_handle_refuses_further_requests() {
    let f = fake("echo 'hello there'", "true", "true", "exit 0");
    let wire = Wire::default();
    let mut b = ProcessBackend::launch(f.script.to_str().unwrap(), &[], options(&wire)).unwrap();
    assert!(b.handshake().is_err());
    assert_eq!(b.state(), HandleState::Failed);
    let err = b.request_predict(&[image("a")]).unwrap_err();
    assert!(matches!(err, ProtocolError::Unavailable(HandleState::Failed)));
}

#[test]
fn version_mismatch_names_both_versions() {
    let f = fake(&echo(r#"{"ok":true,"protocol":2,"capabilities":[]}"#), "true", "true", "exit 0");
    let err = start(&f, &Wire::default()).err().unwrap();
    assert!(matches!(err, ProtocolError::VersionMismatch { engine: 1, backend: 2 }));
    let msg = err.to_string();
    assert!(msg.contains('1') && msg.contains('2'), "{msg}");
}

#[test]
fn hello_without_capabilities_is_malformed() {
    let f = fake(&echo(r#"{"ok":true}"#), "true", "true", "exit 0");
    assert!(matches!(start(&f, &Wire::default()).err().unwrap(), ProtocolError::Malformed { .. }));
}

#[test]
fn slow_reply_times_out() {
    let f = fake(&echo(HELLO_OK), "true", "exec sleep 30", "exit 0");
    let wire = Wire::default();
    let mut b = ProcessBackend::spawn(
        f.script.to_str().unwrap(),
        &[],
        ProcessOptions {
            timeout: Duration::from_millis(200),
            shutdown_grace: Duration::from_millis(100),
            wire_log: Some(Box::new(wire.clone())),
        },
    )
    .unwrap();
    let t = Instant::now();
    let err = b.request_predict(&[image("a")]).unwrap_err();
    assert!(matches!(err, ProtocolError::Timeout { ref op, .. } if op == "predict"), "{err}");
    assert!(t.elapsed() < Duration::from_secs(5));
    assert_eq!(b.state(), HandleState::Failed);
    b.shutdown();
    assert!(b.was_force_killed());
}

#[test]
fn missing_image_is_a_protocol_violation() {
    let f = good(r#"{"ok":true,"detections":{"a":[]}}"#);
    let mut b = start(&f, &Wire::default()).unwrap();
    let err = b.request_predict(&[image("a"), image("b")]).unwrap_err();
    assert!(matches!(err, ProtocolError::MissingImage(ref id) if id == "b"));
    assert!(err.to_string().contains("protocol violation") && err.to_string().contains('b'));
    assert_eq!(b.state(), HandleState::Failed);
    assert!(matches!(cspl_core::Error::from(err), cspl_core::Error::Backend(_)));
}

#[test]
fn out_of_range_score_is_a_validation_error() {
    let f = good(r#"{"ok":true,"detections":{"a":[{"class":"car","bbox":[1,2,3,4],"score":1.3}]}}"#);
    let mut b = start(&f, &Wire::default()).unwrap();
    let err = b.request_predict(&[image("a")]).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(matches!(cspl_core::Error::from(err), cspl_core::Error::Validation(_)));
}

#[test]
fn rejection_is_surfaced_verbatim() {
    let f = fake(&echo(HELLO_OK), &echo(r#"{"ok":false,"error":"CUDA out of memory"}"#), "true", "exit 0");
    let mut b = start(&f, &Wire::default()).unwrap();
    let err = b.request_train(&[TrainingExample::from_annotated(&image("a"))]).unwrap_err();
    match err {
        ProtocolError::Rejected { op, message } => {
            assert_eq!(op, "train");
            assert_eq!(message, "CUDA out of memory");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn predictions_are_parsed() {
    let f = good(PREDICT_OK);
    let mut b = start(&f, &Wire::default()).unwrap();
    let preds = b.request_predict(&[image("a")]).unwrap();
    let d = &preds["a"][0];
    assert_eq!(d.class_name, "car");
    assert_eq!(d.score(), 0.9);
    assert_eq!(b.state(), HandleState::Idle);
}

#[test]
fn train_sends_all_examples_in_one_line() {
    let f = good(PREDICT_OK);
    let wire = Wire::default();
    let mut b = start(&f, &wire).unwrap();
    b.request_train(&[TrainingExample::from_annotated(&image("a")), TrainingExample::from_annotated(&image("b"))]).unwrap();
    let text = wire.text();
    let train: Vec<&str> = text.lines().filter(|l| l.starts_with("> ") && l.contains("\"train\"")).collect();
    assert_eq!(train.len(), 1);
    let v: serde_json::Value = serde_json::from_str(&train[0][2..]).unwrap();
    let ids: Vec<&str> = v["examples"].as_array().unwrap().iter().map(|e| e["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(v["examples"][0]["path"], "/img/a.jpg");
    assert_eq!(v["examples"][0]["labels"][0]["class"], "car");
}

#[test]
fn empty_requests_send_nothing() {
    let f = good(PREDICT_OK);
    let mut b = start(&f, &Wire::default()).unwrap();
    let before = b.requests_sent();
    assert!(matches!(b.request_train(&[]).unwrap_err(), ProtocolError::EmptyTrain));
    assert!(b.request_predict(&[]).unwrap().is_empty());
    assert_eq!(b.requests_sent(), before);
    assert_eq!(b.state(), HandleState::Idle);
}

#[test]
fn clean_shutdown() {
    let f = good(PREDICT_OK);
    let mut b = start(&f, &Wire::default()).unwrap();
    let status = b.shutdown().unwrap();
    assert!(status.success());
    assert!(!b.was_force_killed());
    assert_eq!(b.state(), HandleState::Closed);
    let sent = b.requests_sent();
    assert_eq!(b.shutdown(), Some(status));
    assert_eq!(b.requests_sent(), sent);
}

#[test]
fn unresponsive_backend_is_killed_on_shutdown() {
    let f = fake(&echo(HELLO_OK), "true", "true", "exec sleep 30");
    let mut b = ProcessBackend::spawn(
        f.script.to_str().unwrap(),
        &[],
        ProcessOptions {
            shutdown_grace: Duration::from_millis(200),
            ..ProcessOptions::default()
        },
    )
    .unwrap();
    let t = Instant::now();
    let status = b.shutdown();
    assert!(b.was_force_killed());
    assert!(!status.is_some_and(|s| s.success()));
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn wire_log_alternates_requests_and_replies() {
    let f = good(PREDICT_OK);
    let wire = Wire::default();
    let mut b = start(&f, &wire).unwrap();
    b.request_train(&[TrainingExample::from_annotated(&image("a"))]).unwrap();
    b.request_predict(&[image("a")]).unwrap();
    b.shutdown();
    let text = wire.text();
    let prefixes: Vec<char> = text.lines().map(|l| l.chars().next().unwrap()).collect();
    assert_eq!(prefixes, ['>', '<', '>', '<', '>', '<', '>', '<']);
}

#[test]
fn missing_program_is_a_spawn_error() {
    let err = ProcessBackend::spawn("/nonexistent/backend", &[], ProcessOptions::default()).err().unwrap();
    assert!(matches!(err, ProtocolError::Spawn { .. }));
}
