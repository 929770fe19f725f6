use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use evgraph_sentinel::SentinelHandle;
use serde_json::Value;

fn evgraph() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evgraph"))
}

fn run(args: &[&str]) -> Output {
    evgraph().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn generate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = path(dir, name);
    let mut args = vec![
        "generate",
        "--scenario",
        "simple-exchange-loop",
        "--processes",
        "2",
        "--iterations",
        "10",
        "--out",
        &out,
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn wait_until(mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !f() {
        assert!(Instant::now() < deadline, "condition not reached");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn wait_exit(child: &mut Child) -> i32 {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code().unwrap_or(-1);
        }
        if Instant::now() > deadline {
            child.kill().ok();
            panic!("process did not exit");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.jsonl", &["--seed", "7"]);
    let b = generate(dir.path(), "b.jsonl", &["--seed", "7"]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn generate_rejects_bad_flags() {
    let o = run(&["generate", "--scenario", "simple-exchange-loop", "--processes", "3", "--iterations", "4"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
    let o = run(&["generate", "--scenario", "nope", "--processes", "2", "--iterations", "4"]);
    assert_eq!(code(&o), 2);
    let o = run(&["generate", "--scenario", "random", "--processes", "2", "--iterations", "4", "--fault", "drop@1"]);
    assert_eq!(code(&o), 2);
}

fn anomaly_kinds(report: &Value) -> Vec<String> {
    report["anomalies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["kind"].as_str().unwrap().to_owned())
        .collect()
}

#[test]
fn analyze_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = generate(dir.path(), "clean.jsonl", &[]);
    let o = run(&["analyze", "--trace", &clean]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(anomaly_kinds(&report).is_empty());

    let bad = generate(dir.path(), "mm.jsonl", &["--fault", "length-mismatch@3"]);
    let out = path(dir.path(), "mm.json");
    assert_eq!(code(&run(&["analyze", "--trace", &bad, "--report", &out])), 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(anomaly_kinds(&report), vec!["LengthMismatch"]);

    let wd = generate(dir.path(), "wd.jsonl", &["--fault", "wrong-dest=5"]);
    let o = run(&["analyze", "--trace", &wd]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(anomaly_kinds(&report), vec!["IsolatedSend", "IsolatedReceive"]);

    assert_eq!(code(&run(&["analyze", "--trace", &path(dir.path(), "missing.jsonl")])), 2);
    let junk = path(dir.path(), "junk.jsonl");
    fs::write(&junk, "{\"dewiz_trace\":1,\"processes\":2}\nnot json\n").unwrap();
    assert_eq!(code(&run(&["analyze", "--trace", &junk])), 2);
}

#[test]
fn analyze_reads_template_directory() {
    let dir = tempfile::tempdir().unwrap();
    let trace = generate(dir.path(), "t.jsonl", &[]);
    let templates = dir.path().join("templates");
    fs::create_dir(&templates).unwrap();
    fs::write(templates.join("broken.json"), "{\"name\":\"x\"}").unwrap();
    let t = templates.display().to_string();
    assert_eq!(code(&run(&["analyze", "--trace", &trace, "--templates", &t])), 2);
}

fn svg_count(svg: &str, class: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants()
        .filter(|n| n.attribute("class").is_some_and(|c| c.split(' ').any(|x| x == class)))
        .count()
}

#[test]
fn render_draws_lanes_blocks_and_anomalies() {
    let dir = tempfile::tempdir().unwrap();
    let trace = generate(dir.path(), "t.jsonl", &[]);
    let svg = path(dir.path(), "t.svg");
    assert_eq!(code(&run(&["render", "--trace", &trace, "--svg", &svg, "--collapse"])), 0);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(svg_count(&text, "lane"), 2);
    assert_eq!(svg_count(&text, "collapse-block"), 1);

    let bad = generate(dir.path(), "mm.jsonl", &["--fault", "length-mismatch@3"]);
    let report = path(dir.path(), "mm.json");
    run(&["analyze", "--trace", &bad, "--report", &report]);
    let out = run(&["render", "--trace", &bad, "--report", &report]);
    assert_eq!(code(&out), 0);
    assert_eq!(svg_count(&String::from_utf8(out.stdout).unwrap(), "length-mismatch"), 1);

    let other = generate(dir.path(), "wd.jsonl", &["--fault", "wrong-dest@5"]);
    assert_eq!(code(&run(&["render", "--trace", &other, "--report", &report])), 2);
}

#[test]
fn serve_lists_nothing_and_stops_on_interrupt() {
    let (control, http) = (free_port(), free_port());
    let mut child = evgraph()
        .args(["serve", "--control-port", &control.to_string(), "--http-port", &http.to_string()])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{http}/modules");
    wait_until(|| ureq::get(&url).call().is_ok());
    let list: Value = ureq::get(&url).call().unwrap().into_json().unwrap();
    assert_eq!(list, serde_json::json!([]));

    let busy = run(&["serve", "--control-port", &control.to_string(), "--http-port", &free_port().to_string()]);
    assert_eq!(code(&busy), 2);

    assert!(Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap().success());
    assert_eq!(wait_exit(&mut child), 0);
}

#[test]
fn stage_connect_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = generate(dir.path(), "t.jsonl", &[]);
    let dead = format!("tcp://127.0.0.1:{}", free_port());
    let o = run(&["stage", "--role", "generate", "--in", &trace, "--out", &dead, "--retries", "3"]);
    assert_eq!(code(&o), 2);
    let o = run(&["stage", "--role", "bogus", "--in", &trace, "--out", &dead]);
    assert_eq!(code(&o), 2);
}

fn spawn_stage(args: &[&str]) -> Child {
    evgraph().arg("stage").args(args).stderr(Stdio::null()).spawn().unwrap()
}

fn module_id(modules: &Value, name: &str) -> u64 {
    modules
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .map(|m| m["id"].as_u64().unwrap())
        .unwrap()
}

#[test]
fn sentinel_wires_registered_stages() {
    let dir = tempfile::tempdir().unwrap();
    let trace = generate(dir.path(), "t.jsonl", &["--fault", "length-mismatch@4"]);
    let expected = run(&["analyze", "--trace", &trace]).stdout;

    let s = SentinelHandle::start("127.0.0.1:0".parse().unwrap(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let control = s.control_addr.to_string();
    let base = format!("http://{}", s.http_addr);
    let report = path(dir.path(), "report.json");
    let mut children = vec![
        spawn_stage(&["--role", "sink-json", "--name", "sink", "--in", "tcp://127.0.0.1:0", "--out", &report, "--sentinel", &control]),
        spawn_stage(&["--role", "analyze", "--name", "analyzer", "--in", "tcp://127.0.0.1:0", "--sentinel", &control]),
        spawn_stage(&["--role", "generate", "--name", "generator", "--in", &trace, "--sentinel", &control]),
    ];
    let modules = || -> Value { ureq::get(&format!("{base}/modules")).call().unwrap().into_json().unwrap() };
    wait_until(|| modules().as_array().unwrap().len() == 3);
    let m = modules();
    let (g, a, k) = (module_id(&m, "generator"), module_id(&m, "analyzer"), module_id(&m, "sink"));
    for (p, c) in [(a, k), (g, a)] {
        ureq::post(&format!("{base}/wire"))
            .send_json(serde_json::json!({ "producer": p, "consumer": c }))
            .unwrap();
    }
    for c in &mut children {
        assert_eq!(wait_exit(c), 0);
    }
    assert_eq!(fs::read(&report).unwrap(), expected);

    wait_until(|| modules().as_array().unwrap().iter().all(|m| m["status"] == "finished"));
    let view: Value = ureq::get(&format!("{base}/view")).call().unwrap().into_json().unwrap();
    assert_eq!(view["processes"], 2);
    assert_eq!(view["anomalies"].as_array().unwrap().len(), 1);
    let topo: Value = ureq::get(&format!("{base}/topology")).call().unwrap().into_json().unwrap();
    assert_eq!(topo["links"].as_array().unwrap().len(), 2);
    s.stop().unwrap();
}

#[test]
fn pipeline_config_matches_analyze() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "t.jsonl", &["--fault", "wrong-dest@5"]);
    let config: PathBuf = dir.path().join("pipeline.toml");
    fs::write(
        &config,
        r#"
[[module]]
name = "gen"
role = "generate"
input = "t.jsonl"

[[module]]
name = "failures"
role = "analyze-failures"

[[module]]
name = "patterns"
role = "analyze-patterns"

[[module]]
name = "out"
role = "sink-json"
output = "report.json"

[[edge]]
producer = "gen"
consumer = "failures"

[[edge]]
producer = "failures"
consumer = "patterns"

[[edge]]
producer = "patterns"
consumer = "out"
"#,
    )
    .unwrap();
    let o = run(&["pipeline", "--config", &config.display().to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let expected = run(&["analyze", "--trace", &path(dir.path(), "t.jsonl")]).stdout;
    assert_eq!(fs::read(dir.path().join("report.json")).unwrap(), expected);
}
