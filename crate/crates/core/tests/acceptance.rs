//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Every expected value here comes from code in this file (direct
//! comparisons, hand-rolled aggregates), not from the library under test.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use gryphon::broker::{parse_activation, MetaRow};
use gryphon::graph::{FlowGraph, META_SPACE};
use gryphon::interp::{expand_state, expansion_spec, interpret_history, states_equal};
use gryphon::matching::{MatchTree, Subscription};
use gryphon::model::{Event, InterpSpec, Predicate, Schema, Value};
use gryphon::optimize::{self, gen, EquivConfig, Keep, Rule};
use gryphon::sim::{Scenario, Sim};
use gryphon::wire::EventFrame;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn graph(name: &str) -> FlowGraph {
    FlowGraph::from_json(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn scenario(v: serde_json::Value) -> Scenario {
    Scenario::from_json(&v.to_string()).unwrap()
}

fn float(v: &Value) -> f64 {
    match v {
        Value::Float(f) => *f,
        Value::Int(i) => *i as f64,
        other => panic!("not numeric: {other:?}"),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Predicates with an independent evaluator.

#[derive(Clone, Copy, Debug)]
enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Cmp {
    fn text(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Eq => "=",
            Cmp::Ne => "!=",
        }
    }

    fn holds<T: PartialOrd>(self, a: T, b: T) -> bool {
        match self {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
        }
    }

    fn random(rng: &mut impl Rng) -> Cmp {
        *[Cmp::Lt, Cmp::Le, Cmp::Gt, Cmp::Ge, Cmp::Eq, Cmp::Ne].choose(rng).unwrap()
    }
}

#[derive(Clone, Debug)]
enum Lit {
    Str(String),
    Float(f64),
    Int(i64),
}

#[derive(Clone, Debug)]
struct Atom {
    attr: usize,
    name: &'static str,
    cmp: Cmp,
    lit: Lit,
}

impl Atom {
    fn text(&self) -> String {
        let lit = match &self.lit {
            Lit::Str(s) => format!("{s:?}"),
            Lit::Float(f) => format!("{f:?}"),
            Lit::Int(i) => i.to_string(),
        };
        format!("{} {} {lit}", self.name, self.cmp.text())
    }

    fn holds(&self, values: &[Value]) -> bool {
        match (&values[self.attr], &self.lit) {
            (Value::Str(v), Lit::Str(c)) => self.cmp.holds(v.as_str(), c.as_str()),
            (Value::Float(v), Lit::Float(c)) => self.cmp.holds(*v, *c),
            (Value::Int(v), Lit::Int(c)) => self.cmp.holds(*v, *c),
            (v, l) => panic!("ill-typed atom {v:?} {l:?}"),
        }
    }
}

fn conj_text(c: &[Atom]) -> String {
    c.iter().map(Atom::text).collect::<Vec<_>>().join(" and ")
}

// ---------------------------------------------------------------------------
// 1. Arc algebra laws.

const SYMS: [&str; 5] = ["IBM", "ACME", "GE", "KO", "MSFT"];

fn trade_values(rng: &mut impl Rng) -> Vec<Value> {
    vec![
        Value::from(*SYMS.choose(rng).unwrap()),
        Value::Float(rng.gen_range(0..800) as f64 * 0.25),
        Value::Int(rng.gen_range(0..2000)),
    ]
}

fn trade_atom(rng: &mut impl Rng) -> Atom {
    match rng.gen_range(0..3) {
        0 => Atom {
            attr: 0,
            name: "symbol",
            cmp: if rng.gen_bool(0.5) { Cmp::Eq } else { Cmp::Ne },
            lit: Lit::Str(SYMS.choose(rng).unwrap().to_string()),
        },
        1 => Atom { attr: 1, name: "price", cmp: Cmp::random(rng), lit: Lit::Float(rng.gen_range(0..800) as f64 * 0.25) },
        _ => Atom { attr: 2, name: "volume", cmp: Cmp::random(rng), lit: Lit::Int(rng.gen_range(0..2000)) },
    }
}

fn random_spec(rng: &mut impl Rng, input: &Schema) -> InterpSpec {
    let attr = if rng.gen_bool(0.5) { "price" } else { "volume" };
    let mut aggs: Vec<String> = if rng.gen_bool(0.3) {
        vec!["n := count".into(), format!("total := sum({attr})")]
    } else {
        let mut v = vec![format!("last := latest({attr})")];
        if rng.gen_bool(0.6) {
            v.push(format!("high := max({attr})"));
        }
        if rng.gen_bool(0.6) {
            v.push(format!("low := min({attr})"));
        }
        v
    };
    aggs.shuffle(rng);
    let by = if rng.gen_bool(0.8) { "by(symbol) " } else { "" };
    InterpSpec::parse(&format!("{by}{}", aggs.join(", ")), input).unwrap()
}

fn algebra_graph(pred: &str) -> FlowGraph {
    let doc = json!({
        "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)",
                    "capital": "capital(symbol:string, capital:float64)"},
        "spaces": [
            {"name": "A", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "A2", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "B", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "C", "kind": "history", "schema": "capital", "broker": "b1"},
            {"name": "M", "kind": "history", "schema": "trade", "broker": "b1"}
        ],
        "arcs": [
            {"id": "sel", "type": "select", "from": "A", "to": "B", "predicate": pred},
            {"id": "cap", "type": "transform", "from": "A", "to": "C", "transform": "symbol := symbol, capital := price * volume"},
            {"id": "m1", "type": "merge", "from": "A", "to": "M"},
            {"id": "m2", "type": "merge", "from": "A2", "to": "M"}
        ],
        "brokers": ["b1"]
    });
    FlowGraph::from_json(&doc.to_string()).unwrap()
}

fn arc_algebra() -> Outcome {
    const TRIALS: u64 = 1000;
    let input = Schema::parse("trade(symbol:string, price:float64, volume:int64)").unwrap();
    let mut kept_total = 0usize;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let disj: Vec<Vec<Atom>> = (0..rng.gen_range(1..=2)).map(|_| (0..rng.gen_range(1..=3)).map(|_| trade_atom(&mut rng)).collect()).collect();
        let pred = disj.iter().map(|c| conj_text(c)).collect::<Vec<_>>().join(" or ");
        let a: Vec<Vec<Value>> = (0..rng.gen_range(0..40)).map(|_| trade_values(&mut rng)).collect();
        let a2: Vec<Vec<Value>> = (0..rng.gen_range(0..40)).map(|_| trade_values(&mut rng)).collect();

        let mut workload = Vec::new();
        for (i, v) in a.iter().enumerate() {
            workload.push(json!({"tick": 2 + 2 * i, "client": "p", "space": "A", "values": v}));
        }
        for (i, v) in a2.iter().enumerate() {
            workload.push(json!({"tick": 3 + 2 * i, "client": "p", "space": "A2", "values": v}));
        }
        let scn = scenario(json!({"graph": "unused", "clients": [{"id": "p", "broker": "b1"}], "workload": workload}));
        let mut sim = Sim::new(&scn, algebra_graph(&pred), trial).map_err(|e| e.to_string())?;
        ensure(sim.run(), || format!("trial {trial}: no quiescence"))?;
        let b1 = sim.broker("b1").unwrap();
        let vals = |s: &str| b1.log(s).into_iter().map(|e| e.values).collect::<Vec<_>>();
        let (la, lb, lc, lm) = (vals("A"), vals("B"), vals("C"), vals("M"));
        ensure(la == a, || format!("trial {trial}: source history altered"))?;

        // select: the kept events are exactly the matching ones, in order
        // (so a subsequence), and each satisfies the predicate.
        let want: Vec<&Vec<Value>> = a.iter().filter(|v| disj.iter().any(|c| c.iter().all(|x| x.holds(v)))).collect();
        ensure(lb.iter().eq(want.iter().copied()), || format!("trial {trial}: select `{pred}` kept {lb:?}, want {want:?}"))?;
        kept_total += lb.len();

        // transform: one output per input, computed per event.
        ensure(lc.len() == a.len(), || format!("trial {trial}: transform changed length"))?;
        for (x, y) in a.iter().zip(&lc) {
            let cap = float(&x[1]) * float(&x[2]);
            ensure(y[0] == x[0] && float(&y[1]).to_bits() == cap.to_bits(), || format!("trial {trial}: {x:?} -> {y:?}"))?;
        }

        // merge: every input event exactly once, each input's order kept.
        ensure(lm.len() == a.len() + a2.len(), || format!("trial {trial}: merge length {} != {}+{}", lm.len(), a.len(), a2.len()))?;
        let by_arc = |id: &str| b1.log("M").into_iter().filter(|e| e.arc.as_deref().and_then(|a| a.split('@').next()) == Some(id)).map(|e| e.values).collect::<Vec<_>>();
        ensure(by_arc("m1") == a && by_arc("m2") == a2, || format!("trial {trial}: merge reordered an input"))?;

        // interpret ∘ expand ∘ interpret = interpret.
        let spec = random_spec(&mut rng, &input);
        let h: Vec<Event> = a.iter().chain(&a2).enumerate().map(|(i, v)| Event::sequenced(v.clone(), "p", i as u64 + 1)).collect();
        let st = interpret_history(&spec, &h).map_err(|e| e.to_string())?;
        let exp: Vec<Event> = expand_state(&st).map_err(|e| e.to_string())?.into_iter().enumerate().map(|(i, e)| Event::sequenced(e.values, "x", i as u64 + 1)).collect();
        let again = interpret_history(&expansion_spec(&spec), &exp).map_err(|e| e.to_string())?;
        ensure(states_equal(&again, &st).map_err(|e| e.to_string())?, || format!("trial {trial}: `{spec}` not restored by its expansion"))?;
    }
    Ok(format!("{TRIALS} randomized histories and specs, {kept_total} events selected"))
}

// ---------------------------------------------------------------------------
// 2 & 3. Matching.

const VENUES: [&str; 4] = ["N", "Q", "A", "X"];
const MSYMS: [&str; 8] = ["IBM", "ACME", "GE", "KO", "MSFT", "T", "F", "GM"];

fn quote_schema() -> Schema {
    Schema::parse("quote(symbol:string, price:float64, volume:int64, venue:string)").unwrap()
}

fn quote_atom(rng: &mut impl Rng) -> Atom {
    match rng.gen_range(0..5) {
        0 | 1 => Atom {
            attr: 0,
            name: "symbol",
            cmp: if rng.gen_bool(0.8) { Cmp::Eq } else { Cmp::Ne },
            lit: Lit::Str(MSYMS.choose(rng).unwrap().to_string()),
        },
        2 => Atom { attr: 1, name: "price", cmp: Cmp::random(rng), lit: Lit::Float(rng.gen_range(0..200) as f64 * 0.5) },
        3 => Atom { attr: 2, name: "volume", cmp: Cmp::random(rng), lit: Lit::Int(rng.gen_range(0..100) * 10) },
        _ => Atom { attr: 3, name: "venue", cmp: Cmp::Eq, lit: Lit::Str(VENUES.choose(rng).unwrap().to_string()) },
    }
}

fn quote_event(rng: &mut impl Rng) -> Vec<Value> {
    vec![
        Value::from(*MSYMS.choose(rng).unwrap()),
        Value::Float(rng.gen_range(0..200) as f64 * 0.5),
        Value::Int(rng.gen_range(0..100) * 10),
        Value::from(*VENUES.choose(rng).unwrap()),
    ]
}

fn subscription(id: String, text: &str, schema: &Schema) -> Subscription {
    let p = Predicate::parse(text, schema).unwrap();
    Subscription::new(id, p.disjuncts()[0].clone(), "c")
}

fn matching_oracle() -> Outcome {
    let schema = quote_schema();
    let mut report = Vec::new();
    for (k, n) in [16usize, 256, 1024, 4096].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let conj: Vec<Vec<Atom>> = (0..n).map(|_| (0..rng.gen_range(1..=3)).map(|_| quote_atom(&mut rng)).collect()).collect();
        let subs = conj.iter().enumerate().map(|(i, c)| subscription(format!("s{i:05}"), &conj_text(c), &schema));
        let tree = MatchTree::build(subs, schema.clone()).map_err(|e| e.to_string())?;
        let mut matched = 0usize;
        for j in 0..10_000 {
            let e = quote_event(&mut rng);
            let want: Vec<String> = conj.iter().enumerate().filter(|(_, c)| c.iter().all(|a| a.holds(&e))).map(|(i, _)| format!("s{i:05}")).collect();
            let got = tree.match_values(&e).sub_ids;
            ensure(got == want, || format!("N={n} event {j} {e:?}: got {} ids, want {}", got.len(), want.len()))?;
            matched += want.len();
        }
        report.push(format!("N={n}: {matched} matches"));
    }
    Ok(format!("zero discrepancies over 4 x 10000 events ({})", report.join(", ")))
}

/// W(N): conjunctions of equality tests over 4 attributes with 64 values
/// each; every attribute is constrained with probability 1/2.
fn mean_visits(n: usize) -> f64 {
    let schema = Schema::parse("w(a:int64, b:int64, c:int64, d:int64)").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let names = ["a", "b", "c", "d"];
    let subs = (0..n).map(|i| {
        let mut atoms: Vec<String> = Vec::new();
        while atoms.is_empty() {
            for a in names {
                if rng.gen_bool(0.5) {
                    atoms.push(format!("{a} = {}", rng.gen_range(0..64)));
                }
            }
        }
        subscription(format!("w{i}"), &atoms.join(" and "), &schema)
    });
    let tree = MatchTree::build(subs.collect::<Vec<_>>(), schema).unwrap();
    let events = 10_000;
    let total: u64 = (0..events).map(|_| tree.match_values(&(0..4).map(|_| Value::Int(rng.gen_range(0..64))).collect::<Vec<_>>()).visits).sum();
    total as f64 / events as f64
}

fn matching_sublinear() -> Outcome {
    let v1024 = mean_visits(1024);
    let v4096 = mean_visits(4096);
    let ratio = v4096 / v1024;
    let frac = v4096 / 4096.0;
    let line = format!("visits(1024)={v1024:.2} visits(4096)={v4096:.2} visits/N at 4096={frac:.4} growth ratio={ratio:.3}");
    ensure(frac <= 0.25 && ratio < 4.0, || line.clone())?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 4. Stocks demo.

fn stocks_demo() -> Outcome {
    let csv = std::fs::read_to_string(fixture("trades.csv")).unwrap();
    let trades = gryphon::demo::parse_trades(&csv).map_err(|e| e.to_string())?;
    let run = gryphon::demo::run_stocks(&gryphon::demo::stocks_graph(), &trades, 1).map_err(|e| e.to_string())?;
    let mut want: Vec<(String, u64)> = csv
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1].parse::<f64>().unwrap() * f[2].parse::<f64>().unwrap() >= 1e6)
        .map(|f| (f[0].to_string(), (f[1].parse::<f64>().unwrap() * f[2].parse::<f64>().unwrap()).to_bits()))
        .collect();
    let mut got: Vec<(String, u64)> = run
        .delivered
        .iter()
        .map(|v| (match &v[0] {
            Value::Str(s) => s.clone(),
            other => other.to_string(),
        }, float(&v[1]).to_bits()))
        .collect();
    want.sort();
    got.sort();
    ensure(got == want, || format!("delivered {} trades, oracle says {}", got.len(), want.len()))?;
    let again = gryphon::demo::run_stocks(&gryphon::demo::stocks_graph(), &trades, 1).map_err(|e| e.to_string())?;
    ensure(gryphon::demo::render(&again.delivered) == gryphon::demo::render(&run.delivered), || "output differs between runs".into())?;
    Ok(format!("{} of {} trades delivered, equal to the filter oracle", got.len(), trades.len()))
}

// ---------------------------------------------------------------------------
// 5. Ordered delivery.

fn stocks_clients() -> serde_json::Value {
    json!([
        {"id": "nyse-feed", "broker": "b1"},
        {"id": "nasdaq-feed", "broker": "b2"},
        {"id": "alice", "broker": "b3", "subs": [{"sub": "big", "space": "BigCapitals"}]},
        {"id": "carol", "broker": "b1", "subs": [{"sub": "big", "space": "BigCapitals"}]},
        {"id": "bob", "broker": "b1", "subs": [{"sub": "all", "space": "Capitals", "predicate": "capital >= 500000"}]},
        {"id": "dave", "broker": "b2", "subs": [{"sub": "all", "space": "Capitals", "predicate": "capital >= 500000"}]}
    ])
}

/// Gap-free, in-order, prefix-consistent views of the authoritative log,
/// with the predicate evaluated here.
fn check_ordered(sim: &Sim, client: &str, sub: &str, space: &str, host: &str, keep: impl Fn(&[Value]) -> bool) -> Result<usize, String> {
    let log: BTreeMap<u64, EventFrame> = sim.broker(host).unwrap().log(space).into_iter().filter(|e| !e.values.is_empty()).map(|e| (e.seq, e)).collect();
    let got = &sim.client(client).unwrap().subs[sub].delivered;
    let want: Vec<(u64, &Vec<Value>)> = log.values().filter(|e| keep(&e.values)).map(|e| (e.seq, &e.values)).collect();
    let have: Vec<(u64, &Vec<Value>)> = got.iter().map(|e| (e.seq, &e.values)).collect();
    if have != want {
        let at = have.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(have.len().min(want.len()));
        return Err(format!("{client}/{sub}: {} delivered vs {} in the log, first difference at #{at}", have.len(), want.len()));
    }
    Ok(have.len())
}

fn ordered_consistency() -> Outcome {
    let fault_sets = [
        ("drop", json!([
            {"kind": "drop", "link": ["b1", "b3"], "seqs": [5, 12]},
            {"kind": "drop", "link": ["b3", "b1"], "space": "Capitals", "seqs": [30, 36]},
            {"kind": "drop", "link": ["b3", "alice"], "seqs": [3, 6]}
        ])),
        ("dup", json!([
            {"kind": "duplicate", "link": ["b2", "b3"], "seq": 9},
            {"kind": "duplicate", "link": ["b3", "b1"], "seq": 20},
            {"kind": "duplicate", "link": ["b3", "alice"], "seq": 4}
        ])),
        ("reorder", json!([
            {"kind": "reorder", "link": ["b1", "b3"], "window": 6},
            {"kind": "reorder", "link": ["b3", "b2"], "window": 6},
            {"kind": "reorder", "link": ["b1", "carol"], "window": 4}
        ])),
        ("all", json!([
            {"kind": "drop", "link": ["b2", "b3"], "seqs": [15, 19]},
            {"kind": "duplicate", "link": ["b1", "b3"], "seq": 7},
            {"kind": "reorder", "link": ["b3", "b1"], "window": 5},
            {"kind": "reorder", "link": ["b2", "dave"], "window": 5},
            {"kind": "drop", "link": ["b1", "bob"], "seqs": [10, 12]}
        ])),
    ];
    let big = |v: &[Value]| float(&v[1]) >= 500_000.0;
    let mut views = 0;
    for (name, faults) in &fault_sets {
        let scn = scenario(json!({
            "graph": "unused", "jitter": 1, "clients": stocks_clients(),
            "generate": [
                {"client": "nyse-feed", "space": "NYSE", "count": 80, "start": 5, "every": 1},
                {"client": "nasdaq-feed", "space": "NASDAQ", "count": 80, "start": 5, "every": 1}
            ],
            "faults": faults,
            "assertions": ["ordered_consistency", "quiescence"]
        }));
        for seed in 1..=20 {
            let mut sim = Sim::new(&scn, graph("stocks.json"), seed).map_err(|e| e.to_string())?;
            ensure(sim.run(), || format!("{name} seed {seed}: no quiescence"))?;
            let ctx = |e: String| format!("{name} seed {seed}: {e}");
            for c in ["alice", "carol"] {
                check_ordered(&sim, c, "big", "BigCapitals", "b3", |_| true).map_err(ctx)?;
            }
            for c in ["bob", "dave"] {
                check_ordered(&sim, c, "all", "Capitals", "b3", big).map_err(ctx)?;
            }
            views += 4;
            let r = sim.finish();
            for c in &r.checks {
                ensure(c.passed, || format!("{name} seed {seed}: {} {}", c.name, c.detail))?;
            }
        }
    }
    Ok(format!("{} scenarios x seeds 1-20, {views} client views, zero violations", fault_sets.len()))
}

// ---------------------------------------------------------------------------
// 6. Crash durability.

fn crash_durability() -> Outcome {
    const PUBLISHES: u64 = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let values: Vec<Vec<Value>> = (0..PUBLISHES).map(|_| trade_values(&mut rng)).collect();
    let workload: Vec<_> = values.iter().enumerate().map(|(i, v)| json!({"tick": 5 + i, "client": "pub", "space": "NYSE", "values": v})).collect();
    let mut runs = 0;
    let mut acked_total = 0;
    for torn in [false, true] {
        for k in 1..=PUBLISHES {
            let scn = scenario(json!({
                "graph": "unused",
                "clients": [
                    {"id": "pub", "broker": "b1"},
                    {"id": "local", "broker": "b1", "subs": [{"sub": "n", "space": "NYSE"}]},
                    {"id": "remote", "broker": "b3", "subs": [{"sub": "n", "space": "NYSE"}]}
                ],
                "workload": workload,
                "faults": [{"kind": "crash", "broker": "b1", "after_publish": k, "torn": torn, "restart_after": 10}],
                "assertions": ["durability", "quiescence"]
            }));
            let mut sim = Sim::new(&scn, graph("stocks.json"), k).map_err(|e| e.to_string())?;
            let ctx = |e: String| format!("crash after publish {k} (torn={torn}): {e}");
            ensure(sim.run(), || ctx("no quiescence".into()))?;
            let log: BTreeMap<u64, Vec<Value>> = sim.broker("b1").unwrap().log("NYSE").into_iter().map(|e| (e.seq, e.values)).collect();
            let acked = &sim.client("pub").unwrap().acked;
            ensure(acked.len() as u64 == PUBLISHES, || ctx(format!("only {} of {PUBLISHES} publishes acknowledged", acked.len())))?;
            for (&pub_id, (_, seq)) in acked {
                let want = &values[pub_id as usize - 1];
                ensure(log.get(seq) == Some(want), || ctx(format!("acked publish {pub_id} (seq {seq}) missing from the restored log")))?;
                for c in ["local", "remote"] {
                    let seen = sim.client(c).unwrap().subs["n"].delivered.iter().any(|e| e.seq == *seq && &e.values == want);
                    ensure(seen, || ctx(format!("acked publish {pub_id} (seq {seq}) never delivered to {c}")))?;
                }
            }
            acked_total += acked.len();
            for c in sim.finish().checks {
                ensure(c.passed, || ctx(format!("{} {}", c.name, c.detail)))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} crash points (plain and torn), {acked_total} acknowledged events all restored and delivered"))
}

// ---------------------------------------------------------------------------
// 7 & 8. Interpretations.

/// symbol → (latest price, max price), folded here from the source log.
fn latest_oracle(log: &[EventFrame]) -> BTreeMap<String, (f64, f64)> {
    let mut m: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for e in log {
        let Value::Str(sym) = &e.values[0] else { panic!("symbol") };
        let p = float(&e.values[1]);
        m.entry(sym.clone()).and_modify(|(l, h)| {
            *l = p;
            *h = h.max(p);
        }).or_insert((p, p));
    }
    m
}

fn table_map(st: &gryphon::interp::InterpState) -> BTreeMap<String, (f64, f64)> {
    st.table()
        .into_iter()
        .map(|r| {
            let Value::Str(sym) = &r[0] else { panic!("symbol") };
            (sym.clone(), (float(&r[1]), float(&r[2])))
        })
        .collect()
}

fn same_state(a: &BTreeMap<String, (f64, f64)>, b: &BTreeMap<String, (f64, f64)>) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, (la, ha)), (kb, (lb, hb)))| ka == kb && la.to_bits() == lb.to_bits() && ha.to_bits() == hb.to_bits())
}

fn optimistic_convergence() -> Outcome {
    let scn = scenario(json!({
        "graph": "unused",
        "clients": [
            {"id": "feed", "broker": "b1"},
            {"id": "opt", "broker": "b3", "subs": [{"sub": "l", "space": "Latest", "mode": "optimistic"}]},
            {"id": "opt2", "broker": "b1", "subs": [{"sub": "l", "space": "Latest", "mode": "optimistic"}]},
            {"id": "host", "broker": "b2", "subs": [{"sub": "l", "space": "Latest", "mode": "optimistic"}]}
        ],
        "generate": [{"client": "feed", "space": "NYSE", "count": 200, "start": 2, "every": 1}],
        "faults": [
            {"kind": "reorder", "link": ["b3", "opt"], "window": 8},
            {"kind": "duplicate", "link": ["b3", "opt"], "seq": 5},
            {"kind": "drop", "link": ["b3", "opt"], "seqs": [10, 14]},
            {"kind": "drop", "link": ["b3", "opt"], "seqs": [195, 200]},
            {"kind": "reorder", "link": ["b2", "b1"], "window": 6},
            {"kind": "drop", "link": ["b2", "b1"], "seqs": [60, 64]},
            {"kind": "duplicate", "link": ["b2", "b3"], "seq": 30},
            {"kind": "drop", "link": ["b1", "b2"], "seqs": [40, 41]},
            {"kind": "reorder", "link": ["b2", "host"], "window": 4}
        ],
        "assertions": ["optimistic_convergence", "quiescence"]
    }));
    let mut checked = 0;
    for seed in 1..=20 {
        let mut sim = Sim::new(&scn, graph("latest.json"), seed).map_err(|e| e.to_string())?;
        ensure(sim.run(), || format!("seed {seed}: no quiescence"))?;
        let oracle = latest_oracle(&sim.broker("b1").unwrap().log("NYSE"));
        for c in ["opt", "opt2", "host"] {
            let st = sim.client(c).unwrap().subs["l"].state.as_ref().ok_or_else(|| format!("{c} keeps no state"))?;
            ensure(same_state(&table_map(st), &oracle), || format!("seed {seed}: {c} diverged from interpret(log)"))?;
            checked += 1;
        }
        for c in sim.finish().checks {
            ensure(c.passed, || format!("seed {seed}: {} {}", c.name, c.detail))?;
        }
    }
    Ok(format!("seeds 1-20, {checked} optimistic client states equal to interpret(authoritative log)"))
}

fn compression_bound() -> Outcome {
    let scn = scenario(json!({
        "graph": "unused",
        "clients": [
            {"id": "feed", "broker": "b1"},
            {"id": "snap", "broker": "b3", "subs": [{"sub": "l", "space": "Latest", "mode": "snapshot"}], "offline": [[5, 1200]]}
        ],
        "generate": [{"client": "feed", "space": "NYSE", "count": 1000, "start": 10, "every": 1, "keys": 10}],
        "assertions": ["snapshot_convergence", "quiescence"]
    }));
    let mut sim = Sim::new(&scn, graph("latest.json"), 8).map_err(|e| e.to_string())?;
    sim.run_until(1199);
    let before = {
        let s = &sim.client("snap").unwrap().subs["l"];
        s.catchup_events + s.delivered.len() as u64
    };
    ensure(before == 0, || format!("{before} events reached the client while offline"))?;
    ensure(sim.run(), || "no quiescence".into())?;
    let log = sim.broker("b1").unwrap().log("NYSE");
    ensure(log.len() == 1000, || format!("{} source events", log.len()))?;
    let s = &sim.client("snap").unwrap().subs["l"];
    let sent = s.catchup_events + s.delivered.len() as u64;
    let oracle = latest_oracle(&log);
    let st = s.state.as_ref().ok_or("no client state")?;
    ensure(same_state(&table_map(st), &oracle), || "client state differs from the oracle".into())?;
    ensure(sent <= 20, || format!("{sent} events delivered for 1000 missed"))?;
    Ok(format!("1000 missed events over {} symbols caught up with {sent} events; state equals the oracle", oracle.len()))
}

// ---------------------------------------------------------------------------
// 9. Optimizer.

fn optimizer() -> Outcome {
    let mut rewrites = 0;
    for i in 0..50u64 {
        let (g, subs, used) = gen::random_applicable_graph(i);
        let (out, log) = optimize::rewrite_fixpoint(&g, &Rule::ALL, &Keep::new(subs.iter().cloned()));
        rewrites += log.len();
        let cfg = EquivConfig { subscribed: subs, events: 1000, trials: 1, seed: i };
        let v = optimize::check_graph_equivalence(&g, &out, &cfg);
        ensure(v.equivalent, || format!("graph {i} (seed {used}): {:?}", v.counterexample))?;
    }

    let g = gryphon::demo::stocks_graph();
    let keep = Keep::new(["BigCapitals"]);
    let (out, _) = optimize::rewrite_fixpoint(&g, &Rule::ALL, &keep);
    let cfg = EquivConfig { subscribed: vec!["BigCapitals".into()], events: 1000, trials: 3, seed: 9 };
    let v = optimize::check_graph_equivalence(&g, &out, &cfg);
    ensure(v.equivalent, || format!("stocks rewrite: {:?}", v.counterexample))?;
    let (before, after): (u64, u64) = v.transmissions.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    ensure(after <= before, || format!("stocks transmissions {before} -> {after}"))?;

    let mut doc = g.to_doc();
    doc.arcs.iter_mut().find(|a| a.id == "big").unwrap().predicate = Some("capital >= 900000".into());
    let mutated = FlowGraph::from_doc(&doc).unwrap();
    let bug = optimize::check_graph_equivalence(&g, &mutated, &cfg);
    ensure(!bug.equivalent, || "mutated predicate not detected".into())?;
    Ok(format!(
        "50 random graphs equivalent after {rewrites} rewrites; stocks link transmissions {before} -> {after}; mutant caught ({})",
        bug.counterexample.unwrap_or_default()
    ))
}

// ---------------------------------------------------------------------------
// 10. Reconfiguration.

fn delivery_lines(trace: &[String], client: &str) -> Vec<String> {
    let tag = format!(r#""client":"{client}""#);
    trace.iter().filter(|l| l.contains(r#""ev":"deliver""#) && l.contains(&tag)).cloned().collect()
}

fn reconfiguration() -> Outcome {
    let (scn, g) = Scenario::load(&fixture("scenarios/reconfig.json")).map_err(|e| e.to_string())?;
    let mut control = scn.clone();
    control.meta.clear();
    control.clients.retain(|c| c.id != "carol");
    let seed = 11;

    let mut sim = Sim::new(&scn, g.clone(), seed).map_err(|e| e.to_string())?;
    ensure(sim.run(), || "no quiescence".into())?;
    let row = sim
        .broker("b1")
        .unwrap()
        .log(META_SPACE)
        .iter()
        .filter_map(|e| MetaRow::from_values(&e.values))
        .find(|r| r.kind == "add_arc" && r.status == "confirmed")
        .ok_or("add_arc never confirmed")?;
    let (space, activation) = parse_activation(&row.activation).ok_or("no activation")?;
    ensure(space == "Capitals", || format!("barrier on {space}"))?;
    let b3 = sim.broker("b3").unwrap();
    let caps: BTreeMap<u64, EventFrame> = b3.log("Capitals").into_iter().filter(|e| !e.values.is_empty()).map(|e| (e.seq, e)).collect();
    let routed: BTreeSet<u64> = b3.log("Huge").into_iter().filter_map(|e| e.src).collect();
    let huge = |e: &EventFrame| float(&e.values[1]) >= 2_000_000.0;

    let prev = caps.get(&(activation - 1)).ok_or("no event at activation-1")?;
    let first = caps.get(&activation).ok_or("no event at the activation seq")?;
    ensure(!routed.contains(&prev.seq), || format!("event {} before the barrier was routed", prev.seq))?;
    ensure(routed.contains(&first.seq) == huge(first), || format!("activation event {} routed={} matching={}", first.seq, routed.contains(&first.seq), huge(first)))?;
    let want: BTreeSet<u64> = caps.values().filter(|e| e.seq >= activation && huge(e)).map(|e| e.seq).collect();
    ensure(routed == want, || format!("Huge holds {routed:?}, want {want:?}"))?;

    let r = sim.finish();
    let c = Sim::new(&control, g, seed).map_err(|e| e.to_string())?.finish();
    for client in ["alice", "bob"] {
        let (a, b) = (delivery_lines(&r.trace, client), delivery_lines(&c.trace, client));
        ensure(!a.is_empty() && a == b, || format!("{client}'s deliveries differ from the control run"))?;
    }
    Ok(format!("barrier at Capitals@{activation}; {} events routed after it; alice and bob traces identical to control", want.len()))
}

// ---------------------------------------------------------------------------
// 11. Determinism.

fn determinism() -> Outcome {
    let dir = fixture("scenarios");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    names.sort();
    let mut runs = 0;
    for path in &names {
        let (scn, g) = Scenario::load(path).map_err(|e| e.to_string())?;
        for seed in [1, 7, 42] {
            let a = Sim::new(&scn, g.clone(), seed).map_err(|e| e.to_string())?.finish().trace_text();
            let b = Sim::new(&scn, g.clone(), seed).map_err(|e| e.to_string())?.finish().trace_text();
            ensure(a == b, || format!("{} seed {seed}: traces differ", path.display()))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} scenario/seed pairs across {} scenarios re-run byte-identically", names.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 11] = [
        ("arc-algebra laws", arc_algebra, Some(Duration::from_secs(30))),
        ("matching equals brute force", matching_oracle, Some(Duration::from_secs(60))),
        ("matching visits grow sub-linearly", matching_sublinear, None),
        ("stocks demo fidelity", stocks_demo, None),
        ("ordered-delivery consistency", ordered_consistency, None),
        ("crash durability", crash_durability, None),
        ("optimistic convergence", optimistic_convergence, None),
        ("compression bound", compression_bound, None),
        ("optimizer soundness and benefit", optimizer, None),
        ("reconfiguration safety", reconfiguration, None),
        ("determinism", determinism, None),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > *l => Err(format!("took {took:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{took:.1?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
