use std::collections::BTreeMap;
use std::time::Duration;

use gryphon::client::SubSpec;
use gryphon::graph::FlowGraph;
use gryphon::model::Value;
use gryphon::net::{serve, ServeConfig, Session};
use gryphon::wire::{Frame, Mode};

fn stocks() -> FlowGraph {
    FlowGraph::from_json(include_str!("../../../fixtures/stocks.json")).unwrap()
}

fn config(id: &str, peers: &[(&str, String)], data: Option<&std::path::Path>) -> ServeConfig {
    ServeConfig {
        id: id.into(),
        listen: "127.0.0.1:0".into(),
        graph: stocks(),
        data_dir: data.map(|d| d.to_path_buf()),
        peers: peers.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
    }
}

fn trade(sym: &str, price: f64, volume: i64) -> Vec<Value> {
    vec![Value::from(sym), Value::Float(price), Value::Int(volume)]
}

#[test]
fn trades_flow_across_three_brokers_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let b3 = serve(config("b3", &[], Some(dir.path()))).unwrap();
    let b3_addr = b3.addr().to_string();
    let b1 = serve(config("b1", &[("b3", b3_addr.clone())], Some(dir.path()))).unwrap();
    let b2 = serve(config("b2", &[("b3", b3_addr.clone())], Some(dir.path()))).unwrap();

    let mut alice = Session::connect(&b3_addr, "alice").unwrap();
    let spec = SubSpec { sub: "s".into(), space: "BigCapitals".into(), predicate: None, mode: Mode::Ordered };
    let f = alice.client.subscribe(spec, None);
    alice.send(&f).unwrap();

    let mut nyse = Session::connect(&b1.addr().to_string(), "nyse").unwrap();
    let mut nasdaq = Session::connect(&b2.addr().to_string(), "nasdaq").unwrap();
    // Give the links and the subscription route time to come up; publishes
    // before that are still delivered because the sources are durable.
    let input = [("IBM", 150.0, 10_000), ("ACME", 2.0, 100), ("MSFT", 300.0, 5_000), ("IBM", 10.0, 100_000)];
    for (i, (s, p, v)) in input.iter().enumerate() {
        let sess = if i % 2 == 0 { &mut nyse } else { &mut nasdaq };
        let now = sess.now();
        let (_, frame) = sess.client.publish(now, if i % 2 == 0 { "NYSE" } else { "NASDAQ" }, trade(s, *p, *v));
        sess.send(&frame).unwrap();
    }
    nyse.pump_until(Duration::from_secs(10), |c| c.acked.len() == 2).unwrap();
    nasdaq.pump_until(Duration::from_secs(10), |c| c.acked.len() == 2).unwrap();
    alice.pump_until(Duration::from_secs(10), |c| c.subs["s"].delivered.len() == 3).unwrap();
    let mut got: Vec<String> = alice.client.subs["s"].delivered.iter().map(|e| e.values[0].to_string()).collect();
    got.sort();
    assert_eq!(got, ["\"IBM\"", "\"IBM\"", "\"MSFT\""]);

    let stats = alice.request(&Frame::Stats { stats: None }, Duration::from_secs(5), |f| matches!(f, Frame::Stats { .. })).unwrap();
    let Frame::Stats { stats: Some(s) } = stats else { panic!() };
    assert_eq!(s["broker"], "b3");

    for b in [b1, b2, b3] {
        b.shutdown().unwrap();
    }
}

#[test]
fn garbage_on_a_client_socket_is_dropped_without_killing_the_broker() {
    use std::io::Write;
    let b = serve(config("b1", &[], None)).unwrap();
    let addr = b.addr().to_string();
    let mut raw = std::net::TcpStream::connect(&addr).unwrap();
    raw.write_all(b"\xff\xff\xff\xffnot a frame").unwrap();
    drop(raw);
    let mut c = Session::connect(&addr, "c").unwrap();
    let now = c.now();
    let (_, f) = c.client.publish(now, "NYSE", trade("IBM", 1.0, 1));
    c.send(&f).unwrap();
    c.pump_until(Duration::from_secs(5), |c| c.acked.len() == 1).unwrap();
    b.shutdown().unwrap();
}
