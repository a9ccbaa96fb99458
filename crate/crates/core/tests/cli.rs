use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_neural-assistant");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("NEURAL_ASSISTANT_CHECKPOINT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn label_prints_one_row_per_assistant_turn() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let kb = dir.path().join("kb.tsv");
    std::fs::write(
        &data,
        r#"{"id": "d1", "turns": [
            {"speaker": "user", "text": "any cheap food in the south?"},
            {"speaker": "assistant", "text": "La Mimosa is in the south.", "action": "restaurant-find(area=south)"},
            {"speaker": "user", "text": "and its phone?"},
            {"speaker": "assistant", "text": "sorry, I do not know."}
        ]}"#
        .replace('\n', " "),
    )
    .unwrap();
    std::fs::write(&kb, "la mimosa\tarea\tsouth\npizza hut\tarea\tnorth\ncurry garden\tfood\tindian\n").unwrap();
    let out = ok(&["label", "--data", p(&data), "--kb", p(&kb)]);
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["turn"], 1);
    assert_eq!(rows[0]["labels"], serde_json::json!([1, 0, 0]));
    // "area" only appears as a relation, which never counts
    assert_eq!(rows[1]["labels"], serde_json::json!([0, 0, 0]));
}

#[test]
fn usage_and_input_errors_exit_nonzero() {
    let out = run(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    let out = run(&["train", "--train", "/nonexistent.jsonl", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.jsonl"));
    let out = run(&["sweep", "--kb-sizes", "10", "--data", "a", "--kb", "b", "--checkpoint", "c", "--train", "d"]);
    assert_eq!(out.status.code(), Some(2));
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let body = resp.split_once("\r\n\r\n").unwrap().1;
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

#[test]
fn train_eval_sweep_chat_and_serve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--task", "grounding", "--subjects", "8", "--pool", "3", "--out", p(d)]);
    let run_dir = d.join("run");
    let small = [
        "--steps", "6", "--warmup-steps", "2", "--batch-tokens", "200", "--d-model", "16", "--heads", "2", "--layers", "1",
        "--d-ff", "16", "--kb-mode", "sampled:4", "--log-every", "0",
    ];
    let (train, kb) = (d.join("train.jsonl"), d.join("kb.tsv"));
    let mut args = vec!["train", "--train", p(&train), "--kb", p(&kb), "--out", p(&run_dir)];
    args.extend(small);
    let out = ok(&args);
    assert!(out.contains("trained 6 steps"));
    let ck = run_dir.join("final.ckpt");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(run_dir.join("vocab.txt").exists());

    let report = d.join("report.json");
    let out = ok(&[
        "eval", "--checkpoint", p(&ck), "--data", p(&d.join("test.jsonl")), "--kb", p(&d.join("kb.tsv")), "--vocab",
        p(&run_dir.join("vocab.txt")), "--report", p(&report), "--max-len", "8",
    ]);
    assert!(out.lines().next().unwrap().starts_with('S'));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["examples"].as_array().unwrap().len(), 8);
    assert_eq!(r["checkpoint_step"], 6);

    let out = ok(&[
        "sweep", "--kb-sizes", "2,5", "--checkpoint", p(&ck), "--data", p(&d.join("test.jsonl")), "--kb", p(&d.join("kb.tsv")),
        "--max-len", "8",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2 ") && lines[2].starts_with("5 "));

    let mut chat = Command::new(BIN)
        .args(["chat", "--kb", p(&d.join("kb.tsv")), "--max-len", "8"])
        .env("NEURAL_ASSISTANT_CHECKPOINT", &ck)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    chat.stdin.take().unwrap().write_all(b"what is the area ?\n\nhello\n/quit\nignored\n").unwrap();
    let out = chat.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("response: ").count(), 2);

    let mut server = Command::new(BIN)
        .args(["serve", "--checkpoint", p(&ck), "--kb", p(&d.join("kb.tsv")), "--addr", "127.0.0.1:0", "--max-len", "8"])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(server.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some(a) = line.split("listening on ").nth(1) {
            break a.trim().to_string();
        }
    };
    let (status, v) = http(&addr, "POST", "/sessions", "");
    assert_eq!(status, 201);
    let id = v["session_id"].as_str().unwrap().to_string();
    let (status, v) = http(&addr, "POST", &format!("/sessions/{id}/messages"), r#"{"text": "what is the area ?"}"#);
    assert_eq!(status, 200);
    assert_eq!(v["turn_index"], 1);
    let (status, _) = http(&addr, "DELETE", &format!("/sessions/{id}"), "");
    assert_eq!(status, 204);
    let (status, v) = http(&addr, "GET", &format!("/sessions/{id}"), "");
    assert_eq!(status, 404);
    assert!(v["error"].is_string());
    server.kill().unwrap();
    server.wait().unwrap();
}
