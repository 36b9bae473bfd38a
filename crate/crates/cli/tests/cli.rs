use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;

use pseudolabel::ensemble::load_consensus;
use pseudolabel::{Dataset, LabelSchema, Origin};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pseudolabel"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    assert!(
        out.stdout.is_empty(),
        "stdout must stay clean: {}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[track_caller]
fn fails(args: &[&str], code: i32, needle: &str) -> String {
    let out = run(args);
    let err = stderr(&out);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(needle), "{args:?}: expected {needle:?} in {err}");
    err
}

fn write_config(dir: &Path, name: &str, config: Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

fn schema() -> Arc<LabelSchema> {
    Arc::new(LabelSchema::risk_levels())
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&read(path)).unwrap()
}

/// A small corpus for the quick tests: 80 labeled, 120 unlabeled, 40 test.
fn small_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let config = write_config(
        dir,
        "small.json",
        json!({
            "synth": {"labeled": [20, 20, 20, 20], "unlabeled": [30, 30, 30, 30], "test": [10, 10, 10, 10], "separation": 3.0},
            "selftrain": {"stop_threshold": 40},
            "classifier": {"epochs": 10},
            "runs": 3
        }),
    );
    let data = dir.join("data");
    ok(&["synth", "--config", p(&config), "--out", p(&data)]);
    (config, data)
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("review-serve"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));

    fails(&["no-such-stage"], 1, "unrecognized subcommand");
    fails(&["vote"], 1, "--votes");
    fails(&["baseline", "--out", "/tmp/never"], 1, "no labeled path");

    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.json", json!({"rnus": 5}));
    fails(&["baseline", "--config", p(&unknown)], 1, "unknown field");
    let rate = write_config(dir.path(), "rate.json", json!({"selftrain": {"acquisition_rate": 0.0}}));
    fails(&["baseline", "--config", p(&rate)], 1, "acquisition rate");
    fails(
        &["baseline", "--config", "/no/such/config.json"],
        1,
        "/no/such/config.json",
    );
    fails(
        &["baseline", "--parallel", "0", "--labeled", "x", "--out", "y"],
        1,
        "parallel",
    );
}

#[test]
fn data_errors_exit_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fails(
        &["baseline", "--labeled", "/no/such/train.jsonl", "--out", p(&out)],
        2,
        "/no/such/train.jsonl",
    );
    assert!(!out.exists());

    let empty = dir.path().join("votes.jsonl");
    std::fs::write(&empty, "").unwrap();
    fails(&["vote", "--votes", p(&empty), "--out", p(&out)], 2, "no votes");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"a\", \"text\": \"x\", \"label\": \"Nope\"}\n").unwrap();
    fails(&["baseline", "--labeled", p(&bad), "--out", p(&out)], 2, "Nope");
}

#[test]
fn pseudolabel_refuses_posts_that_are_already_labeled() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = small_corpus(dir.path());
    let labeled = data.join("labeled.jsonl");
    let err = fails(
        &[
            "pseudolabel",
            "--config",
            p(&config),
            "--labeled",
            p(&labeled),
            "--unlabeled",
            p(&labeled),
            "--out",
            p(&dir.path().join("out")),
        ],
        2,
        "also in the labeled set",
    );
    assert!(err.contains("l0000") || err.contains("l00"), "{err}");
}

#[test]
fn backend_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = small_corpus(dir.path());
    let config = write_config(
        dir.path(),
        "external.json",
        json!({"backend": {"kind": "external", "command": ["/no/such/backend"]}}),
    );
    fails(
        &[
            "baseline",
            "--config",
            p(&config),
            "--labeled",
            p(&data.join("labeled.jsonl")),
            "--out",
            p(&dir.path().join("out")),
        ],
        3,
        "/no/such/backend",
    );
}

#[test]
fn the_backend_subcommand_matches_the_builtin_model() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = small_corpus(dir.path());
    let labeled = data.join("labeled.jsonl");
    let mut external: Value = serde_json::from_slice(&read(&config)).unwrap();
    external["backend"] = json!({"kind": "external", "command": [env!("CARGO_BIN_EXE_pseudolabel"), "backend"]});
    let external = write_config(dir.path(), "external.json", external);
    let (a, b) = (dir.path().join("builtin"), dir.path().join("external"));
    ok(&[
        "baseline",
        "--config",
        p(&config),
        "--labeled",
        p(&labeled),
        "--out",
        p(&a),
    ]);
    ok(&[
        "baseline",
        "--config",
        p(&external),
        "--labeled",
        p(&labeled),
        "--out",
        p(&b),
    ]);
    assert_eq!(read(&a.join("report.json")), read(&b.join("report.json")));
}

#[test]
fn a_single_run_is_its_own_unanimous_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = small_corpus(dir.path());
    let out = dir.path().join("one");
    ok(&[
        "pseudolabel",
        "--config",
        p(&config),
        "--labeled",
        p(&data.join("labeled.jsonl")),
        "--unlabeled",
        p(&data.join("unlabeled.jsonl")),
        "--runs",
        "1",
        "--out",
        p(&out),
    ]);
    let votes = load_consensus(&out.join("votes.jsonl")).unwrap();
    assert_eq!(votes.len(), 120);
    assert!(votes
        .iter()
        .all(|v| v.votes.len() == 1 && v.unanimity == 1 && v.label == v.votes[0]));
    assert!(out.join("traces/run0.jsonl").exists());

    ok(&["vote", "--votes", p(&out.join("votes.jsonl")), "--out", p(&out)]);
    let summary = read_json(&out.join("vote_summary.json"));
    assert_eq!(summary["non_unanimous"], 0);
    assert_eq!(summary["kappa_vs_consensus"], json!([1.0]));

    // Nothing to review: an empty log reproduces the consensus labels.
    let log = dir.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    ok(&[
        "apply-corrections",
        "--consensus",
        p(&out.join("consensus.jsonl")),
        "--posts",
        p(&data.join("unlabeled.jsonl")),
        "--annotations",
        p(&log),
        "--out",
        p(&out),
    ]);
    let corrected = Dataset::load_auto(&out.join("corrected.jsonl"), schema()).unwrap();
    let consensus = load_consensus(&out.join("consensus.jsonl")).unwrap();
    assert_eq!(corrected.len(), consensus.len());
    for (item, c) in corrected.items().iter().zip(&consensus) {
        assert_eq!(item.id(), c.id);
        assert_eq!(item.class(), Some(c.label));
        assert_eq!(item.label.unwrap().origin, Origin::Pseudo);
    }
    assert_eq!(read_json(&out.join("corrections.json"))["reviewed"], 0);
}

/// Kills the server when the test ends, pass or fail.
struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(args: &[&str]) -> Server {
    let mut child = bin()
        .arg("review-serve")
        .args(args)
        .args(["--port", "0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited before listening").unwrap();
        if let Some(addr) = line.strip_prefix("listening on http://") {
            break addr.to_string();
        }
    };
    std::thread::spawn(move || lines.for_each(drop));
    Server { child, addr }
}

fn http(addr: &str, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let status = response[9..12].parse().unwrap();
    let (_, payload) = response.split_once("\r\n\r\n").unwrap();
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

/// Every stage run twice into separate directories; all outputs must match
/// byte for byte. The scripted annotator reviews through the HTTP service.
#[test]
fn full_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--seed", "3", "--out", p(&data)]);
    let labeled = data.join("labeled.jsonl");
    let unlabeled = data.join("unlabeled.jsonl");
    let test = data.join("test.jsonl");
    let truth = Dataset::load_auto(&data.join("truth.jsonl"), schema()).unwrap();

    for round in ["a", "b"] {
        let out = root.join(round);
        ok(&[
            "baseline",
            "--labeled",
            p(&labeled),
            "--test",
            p(&test),
            "--out",
            p(&out.join("baseline")),
        ]);
        ok(&[
            "pseudolabel",
            "--labeled",
            p(&labeled),
            "--unlabeled",
            p(&unlabeled),
            "--parallel",
            if round == "a" { "1" } else { "3" },
            "--out",
            p(&out.join("pl")),
        ]);
        ok(&[
            "vote",
            "--votes",
            p(&out.join("pl/votes.jsonl")),
            "--out",
            p(&out.join("vote")),
        ]);
    }
    for file in [
        "baseline/report.json",
        "baseline/report.txt",
        "pl/votes.jsonl",
        "pl/summary.json",
        "pl/traces/run0.jsonl",
        "pl/traces/run4.jsonl",
        "vote/consensus.jsonl",
        "vote/histogram.txt",
        "vote/vote_summary.json",
    ] {
        assert_eq!(
            read(&root.join("a").join(file)),
            read(&root.join("b").join(file)),
            "{file} differs"
        );
    }

    let out = root.join("a");
    let votes = load_consensus(&out.join("pl/votes.jsonl")).unwrap();
    assert_eq!(votes.len(), 600);
    assert!(votes.iter().all(|v| v.votes.len() == 5));
    let consensus = out.join("vote/consensus.jsonl");
    let queue_len = read_json(&out.join("vote/vote_summary.json"))["non_unanimous"]
        .as_u64()
        .unwrap() as usize;
    assert!(queue_len > 0);
    let overlap = (queue_len * 104 / 444).to_string();

    let review = root.join("review");
    let serve_args = [
        "--consensus",
        p(&consensus),
        "--posts",
        p(&unlabeled),
        "--dir",
        p(&review),
        "--annotators",
        "a1,a2",
        "--overlap",
        overlap.as_str(),
    ];
    {
        let server = serve(&serve_args);
        for annotator in ["a1", "a2"] {
            let (status, queue) = http(&server.addr, "GET", &format!("/api/queue?annotator={annotator}"), None);
            assert_eq!(status, 200);
            for item in queue["items"].as_array().unwrap() {
                let id = item["id"].as_str().unwrap();
                let actual = truth.get(id).unwrap().class().unwrap();
                let body = if item["label"] == actual {
                    json!({"item_id": id, "annotator": annotator, "verdict": "correct"})
                } else {
                    json!({"item_id": id, "annotator": annotator, "verdict": "incorrect", "corrected_label": actual})
                };
                let (status, reply) = http(&server.addr, "POST", "/api/annotations", Some(body));
                assert_eq!(status, 200, "{reply}");
            }
        }
        let (_, stats) = http(&server.addr, "GET", "/api/stats", None);
        assert_eq!(stats["total"], queue_len);
        assert_eq!(stats["done"], queue_len);
        assert_eq!(stats["agreement_rate"], 1.0);
        let (_, conflicts) = http(&server.addr, "GET", "/api/conflicts", None);
        assert_eq!(conflicts, json!([]));
    }
    // A restarted service picks the log back up.
    {
        let server = serve(&serve_args);
        let (_, stats) = http(&server.addr, "GET", "/api/stats", None);
        assert_eq!(stats["done"], queue_len);
        let (_, queue) = http(&server.addr, "GET", "/api/queue?annotator=a1", None);
        assert_eq!(queue["items"], json!([]));
    }
    let queue: Vec<Value> = String::from_utf8(read(&review.join("queue.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(queue.len(), queue_len);
    let assignment = read_json(&review.join("assignment.json"));
    assert_eq!(assignment["shared"].as_array().unwrap().len(), queue_len * 104 / 444);

    for round in ["a", "b"] {
        let out = root.join(round);
        ok(&[
            "apply-corrections",
            "--consensus",
            p(&consensus),
            "--posts",
            p(&unlabeled),
            "--annotations",
            p(&review.join("annotations.jsonl")),
            "--out",
            p(&out.join("corrected")),
        ]);
        ok(&[
            "evaluate",
            "--labeled",
            p(&labeled),
            "--extra",
            p(&out.join("corrected/corrected.jsonl")),
            "--test",
            p(&test),
            "--out",
            p(&out.join("eval")),
        ]);
    }
    for file in [
        "corrected/corrected.jsonl",
        "corrected/corrections.json",
        "eval/report.json",
        "eval/report.txt",
    ] {
        assert_eq!(
            read(&root.join("a").join(file)),
            read(&root.join("b").join(file)),
            "{file} differs"
        );
    }

    let summary = read_json(&out.join("corrected/corrections.json"));
    assert_eq!(summary["reviewed"], queue_len);
    let corrected = Dataset::load_auto(&out.join("corrected/corrected.jsonl"), schema()).unwrap();
    for item in corrected.items() {
        if item.label.unwrap().origin == Origin::Corrected {
            assert_eq!(item.class(), truth.get(item.id()).unwrap().class());
        }
    }

    let baseline = read_json(&out.join("baseline/report.json"));
    let augmented = read_json(&out.join("eval/report.json"));
    let macro_f1 = |r: &Value, split: &str| r[split]["macro_f1"]["mean"].as_f64().unwrap();
    assert!(
        macro_f1(&augmented, "validation") >= macro_f1(&baseline, "validation"),
        "validation macro-F1 {} < baseline {}",
        macro_f1(&augmented, "validation"),
        macro_f1(&baseline, "validation")
    );
    eprintln!(
        "macro-F1 validation {:.4} -> {:.4}, test {:.4} -> {:.4}",
        macro_f1(&baseline, "validation"),
        macro_f1(&augmented, "validation"),
        macro_f1(&baseline, "test"),
        macro_f1(&augmented, "test")
    );
}
