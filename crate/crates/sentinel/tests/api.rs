use std::time::{Duration, Instant};

use evgraph_core::module::{Direction, Feature, ModuleDescriptor, ModuleState};
use evgraph_sentinel::{ControlClient, SentinelHandle, Topology};
use serde_json::Value;

fn start() -> SentinelHandle {
    SentinelHandle::start("127.0.0.1:0".parse().unwrap(), "127.0.0.1:0".parse().unwrap()).unwrap()
}

fn get(s: &SentinelHandle, path: &str) -> Value {
    ureq::get(&format!("http://{}{}", s.http_addr, path)).call().unwrap().into_json().unwrap()
}

fn post_wire(s: &SentinelHandle, producer: u32, consumer: u32) -> Result<Value, (u16, Value)> {
    match ureq::post(&format!("http://{}/wire", s.http_addr))
        .send_json(serde_json::json!({ "producer": producer, "consumer": consumer }))
    {
        Ok(r) => Ok(r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => Err((code, r.into_json().unwrap())),
        Err(e) => panic!("{e}"),
    }
}

fn wait_until(mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !f() {
        assert!(Instant::now() < deadline, "condition not reached");
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn register(s: &SentinelHandle, name: &str, features: &[Feature], input: Option<&str>) -> ControlClient {
    let mut d = ModuleDescriptor::unregistered(name, features);
    if let Some(a) = input {
        d = d.with_interface("in", Direction::In, a);
    }
    ControlClient::register(&s.control_addr.to_string(), d, 5).unwrap()
}

#[test]
fn empty_sentinel_lists_nothing() {
    let s = start();
    assert_eq!(get(&s, "/modules"), serde_json::json!([]));
    let err = ureq::get(&format!("http://{}/view", s.http_addr)).call().unwrap_err();
    assert!(matches!(err, ureq::Error::Status(404, _)));
    s.stop().unwrap();
}

#[test]
fn register_wire_and_report_status() {
    let s = start();
    let mut generator = register(&s, "generate", &[Feature::Send], None);
    let mut analyzer = register(&s, "analyze", &[Feature::Send, Feature::Receive], Some("127.0.0.1:9101"));
    let sink = register(&s, "sink-json", &[Feature::Receive], Some("127.0.0.1:9102"));
    assert_eq!((generator.id(), analyzer.id(), sink.id()), (1, 2, 3));

    let ok = post_wire(&s, 1, 2).unwrap();
    assert_eq!(ok["address"], "127.0.0.1:9101");
    post_wire(&s, 2, 3).unwrap();
    assert_eq!(generator.wait_directive(Some(Duration::from_secs(5))).unwrap(), "127.0.0.1:9101");
    assert_eq!(analyzer.wait_directive(Some(Duration::from_secs(5))).unwrap(), "127.0.0.1:9102");

    let modules = get(&s, "/modules");
    assert_eq!(modules[0]["consumers"], serde_json::json!([2]));
    assert_eq!(modules[1]["producers"], serde_json::json!([1]));
    assert_eq!(modules[1]["consumers"], serde_json::json!([3]));
    assert_eq!(modules[2]["producers"], serde_json::json!([2]));

    let before = get(&s, "/topology");
    let (code, body) = post_wire(&s, 3, 1).unwrap_err();
    assert_eq!((code, body["error"].as_str().unwrap()), (409, "FeatureMismatch"));
    let (code, body) = post_wire(&s, 1, 99).unwrap_err();
    assert_eq!((code, body["error"].as_str().unwrap()), (404, "UnknownModule"));
    assert_eq!(get(&s, "/topology"), before);
    let topo: Topology = serde_json::from_value(before).unwrap();
    assert_eq!(topo.links.len(), 2);

    generator.set_status(ModuleState::Running).unwrap();
    generator.set_status(ModuleState::Finished).unwrap();
    analyzer.send_view("{\"processes\":0}".into()).unwrap();
    wait_until(|| get(&s, "/modules")[0]["status"] == "finished");
    wait_until(|| {
        ureq::get(&format!("http://{}/view", s.http_addr))
            .call()
            .map(|r| r.into_string().unwrap() == "{\"processes\":0}")
            .unwrap_or(false)
    });

    drop(analyzer);
    wait_until(|| get(&s, "/modules")[1]["status"] == "failed");
    s.stop().unwrap();
}

#[test]
fn malformed_wire_request() {
    let s = start();
    let err = ureq::post(&format!("http://{}/wire", s.http_addr))
        .send_string("{\"producer\":1}")
        .unwrap_err();
    assert!(matches!(err, ureq::Error::Status(400, _)));
}

#[test]
fn busy_port_is_reported() {
    let s = start();
    assert!(SentinelHandle::start(s.control_addr, "127.0.0.1:0".parse().unwrap()).is_err());
}
