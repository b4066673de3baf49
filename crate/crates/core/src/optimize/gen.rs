//! Random pipelines of the shape the rewrites target: sources merged at a
//! hub, an optional transform, a chain of selects, a sink and sometimes an
//! interpretation of it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::graph::FlowGraph;

const TRADE: &str = "trade(symbol:string, price:float64, volume:int64)";

struct Shape {
    schema: &'static str,
    text: &'static str,
    transform: &'static str,
}

const TRANSFORMS: [Shape; 3] = [
    Shape { schema: "capital", text: "capital(symbol:string, capital:float64)", transform: "symbol := symbol, capital := price * volume" },
    Shape {
        schema: "scaled",
        text: "scaled(symbol:string, price:float64, volume:int64)",
        transform: "symbol := symbol, price := price + 1.5, volume := volume * 2",
    },
    Shape { schema: "halves", text: "halves(symbol:string, half:float64, lots:int64)", transform: "symbol := symbol, half := price / 2, lots := volume / 100" },
];

fn atom(schema: &str, rng: &mut impl Rng) -> String {
    let sym = crate::sim::SYMBOLS[rng.gen_range(0..10)];
    let cmp = ["<", "<=", ">", ">="].choose(rng).expect("non-empty");
    match (schema, rng.gen_range(0..4)) {
        (_, 0) => format!(r#"symbol {} "{sym}""#, if rng.gen_bool(0.5) { "=" } else { "!=" }),
        ("capital", _) => format!("capital {cmp} {}", rng.gen_range(1..40) * 100_000),
        ("halves", 1) => format!("half {cmp} {}.5", rng.gen_range(1..100)),
        ("halves", _) => format!("lots {cmp} {}", rng.gen_range(1..200)),
        (_, 1) => format!("price {cmp} {}.25", rng.gen_range(1..200)),
        (_, 2) => format!("volume {cmp} {}", rng.gen_range(1..200) * 100),
        _ => format!("price * volume {cmp} {}", rng.gen_range(1..40) * 100_000),
    }
}

fn predicate(schema: &str, rng: &mut impl Rng) -> String {
    let conj = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..=2)).map(|_| atom(schema, rng)).collect::<Vec<_>>().join(" and ");
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    (0..r.gen_range(1..=2)).map(|_| conj(&mut r)).collect::<Vec<_>>().join(" or ")
}

/// A random graph and the spaces its clients subscribe to. Not every
/// graph admits a rewrite; see [`random_applicable_graph`].
pub fn random_graph(seed: u64) -> (FlowGraph, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3usize);
    let brokers: Vec<String> = (0..=k).map(|i| format!("b{i}")).collect();
    let links: Vec<(String, String)> = (1..=k).map(|i| ("b0".to_string(), format!("b{i}"))).collect();
    let mut schemas = serde_json::Map::new();
    schemas.insert("trade".into(), json!(TRADE));
    let mut spaces = Vec::new();
    let mut arcs = Vec::new();
    let mut subscribed = Vec::new();
    let any_broker = |rng: &mut ChaCha8Rng| format!("b{}", rng.gen_range(0..=k));

    for i in 1..=k {
        spaces.push(json!({"name": format!("S{i}"), "kind": "history", "schema": "trade", "broker": format!("b{i}"), "durable": rng.gen_bool(0.3)}));
    }
    let mut cur = "S1".to_string();
    let mut schema = "trade";
    if k > 1 || rng.gen_bool(0.3) {
        spaces.push(json!({"name": "M", "kind": "history", "schema": "trade", "broker": "b0"}));
        for i in 1..=k {
            arcs.push(json!({"id": format!("in{i}"), "type": "merge", "from": format!("S{i}"), "to": "M"}));
        }
        cur = "M".into();
    }
    if rng.gen_bool(0.6) {
        let t = TRANSFORMS.choose(&mut rng).expect("non-empty");
        schemas.insert(t.schema.into(), json!(t.text));
        spaces.push(json!({"name": "T", "kind": "history", "schema": t.schema, "broker": any_broker(&mut rng)}));
        arcs.push(json!({"id": "t", "type": "transform", "from": cur, "to": "T", "transform": t.transform}));
        cur = "T".into();
        schema = t.schema;
    }
    let selects = rng.gen_range(1..=3);
    for j in 1..=selects {
        let to = if j == selects { "C".to_string() } else { format!("Y{j}") };
        let durable = j == selects && rng.gen_bool(0.5);
        spaces.push(json!({"name": to, "kind": "history", "schema": schema, "broker": any_broker(&mut rng), "durable": durable}));
        arcs.push(json!({"id": format!("s{j}"), "type": "select", "from": cur, "to": to, "predicate": predicate(schema, &mut rng)}));
        cur = to;
    }
    subscribed.push("C".to_string());
    // Occasionally watch an intermediate space, which pins it.
    if rng.gen_bool(0.15) {
        let names: Vec<String> = spaces.iter().filter_map(|s| s["name"].as_str()).filter(|n| !n.starts_with('S')).map(str::to_string).collect();
        if let Some(n) = names.choose(&mut rng) {
            if !subscribed.contains(n) {
                subscribed.push(n.clone());
            }
        }
    }
    if schema != "halves" && rng.gen_bool(0.4) {
        let attr = if schema == "capital" { "capital" } else { "price" };
        spaces.push(json!({"name": "Latest", "kind": "interpretation", "schema": schema,
            "interp": format!("by(symbol) last := latest({attr}), high := max({attr})"), "broker": any_broker(&mut rng)}));
        arcs.push(json!({"id": "latest", "type": "interpret", "from": "C", "to": "Latest"}));
        subscribed.push("Latest".into());
    }
    let doc = json!({"schemas": schemas, "spaces": spaces, "arcs": arcs, "brokers": brokers, "links": links});
    let g = FlowGraph::from_json(&doc.to_string()).expect("generated graphs are valid");
    (g, subscribed)
}

/// The first graph from `seed` onwards that at least one rule rewrites,
/// and the seed that produced it.
pub fn random_applicable_graph(seed: u64) -> (FlowGraph, Vec<String>, u64) {
    let mut s = seed;
    loop {
        let (g, subs) = random_graph(s);
        let keep = super::Keep::new(subs.iter().cloned());
        if !super::rewrite_fixpoint(&g, &super::Rule::ALL, &keep).1.is_empty() {
            return (g, subs, s);
        }
        s = s.wrapping_add(0x1_0000_0000);
    }
}
