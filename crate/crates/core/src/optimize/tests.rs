use super::*;
use crate::sim::tests::stocks_graph;

fn chain(p1: &str, p2: &str) -> FlowGraph {
    let doc = serde_json::json!({
        "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)"},
        "spaces": [
            {"name": "A", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "B", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "C", "kind": "history", "schema": "trade", "broker": "b1"}
        ],
        "arcs": [
            {"id": "s1", "type": "select", "from": "A", "to": "B", "predicate": p1},
            {"id": "s2", "type": "select", "from": "B", "to": "C", "predicate": p2}
        ],
        "brokers": ["b1"]
    });
    FlowGraph::from_json(&doc.to_string()).unwrap()
}

fn select_text(g: &FlowGraph, id: &str) -> String {
    match &g.arc(id).unwrap().op {
        ArcOp::Select(p) => p.to_string(),
        other => panic!("{other:?}"),
    }
}

fn small() -> EquivConfig {
    EquivConfig { subscribed: vec![], events: 300, trials: 1, seed: 3 }
}

#[test]
fn fusing_two_selects() {
    let g = chain("volume > 1000", "price > 50");
    let keep = Keep::new(["C"]);
    let fused = fuse_selects(&g, "s1", "s2", &keep).unwrap();
    assert!(fused.space("B").is_none());
    assert_eq!(fused.arcs().len(), 1);
    assert_eq!(select_text(&fused, "s1"), "price > 50 and volume > 1000");
    assert!(check_graph_equivalence(&g, &fused, &small()).equivalent);
}

#[test]
fn fusing_is_refused_when_the_middle_is_watched() {
    let g = chain("volume > 1000", "price > 50");
    let err = fuse_selects(&g, "s1", "s2", &Keep::new(["B", "C"])).unwrap_err();
    assert!(matches!(err, RewriteError::NotApplicable(m) if m.contains("subscribers")));
}

#[test]
fn fusing_identical_predicates_dedups() {
    let g = chain("price > 50", "price > 50");
    let fused = fuse_selects(&g, "s1", "s2", &Keep::new(["C"])).unwrap();
    assert_eq!(select_text(&fused, "s1"), "price > 50");
}

#[test]
fn pushing_the_capital_select_before_the_transform() {
    let g = stocks_graph();
    let keep = Keep::new(["BigCapitals"]);
    let (out, division) = push_select_through_transform(&g, "capital", "big", &keep).unwrap();
    assert!(!division);
    assert_eq!(select_text(&out, "big"), "price * volume >= 1000000");
    let big = out.arc("big").unwrap();
    assert_eq!(big.src, "AllTrades");
    assert!(out.space("Capitals").is_none());
    assert_eq!(out.arc("capital").unwrap().dst, "BigCapitals");
}

#[test]
fn copies_substitute_their_source_attribute() {
    let g = stocks_graph();
    let doc = g.to_doc();
    let mut doc = doc;
    doc.arcs.iter_mut().find(|a| a.id == "big").unwrap().predicate = Some(r#"symbol = "IBM""#.into());
    let g = FlowGraph::from_doc(&doc).unwrap();
    let (out, _) = push_select_through_transform(&g, "capital", "big", &Keep::new(["BigCapitals"])).unwrap();
    assert_eq!(select_text(&out, "big"), r#"symbol = "IBM""#);
}

#[test]
fn division_introduced_by_substitution_is_flagged() {
    let doc = serde_json::json!({
        "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)",
                    "per": "per(symbol:string, unit:float64)"},
        "spaces": [
            {"name": "A", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "B", "kind": "history", "schema": "per", "broker": "b1"},
            {"name": "C", "kind": "history", "schema": "per", "broker": "b1"}
        ],
        "arcs": [
            {"id": "t", "type": "transform", "from": "A", "to": "B", "transform": "symbol := symbol, unit := price / volume"},
            {"id": "s", "type": "select", "from": "B", "to": "C", "predicate": "unit > 0.01"}
        ],
        "brokers": ["b1"]
    });
    let g = FlowGraph::from_json(&doc.to_string()).unwrap();
    let (out, division) = push_select_through_transform(&g, "t", "s", &Keep::new(["C"])).unwrap();
    assert!(division);
    let (_, log) = rewrite_fixpoint(&g, &Rule::ALL, &Keep::new(["C"]));
    assert!(log[0].introduces_division);
    assert!(check_graph_equivalence(&g, &out, &small()).equivalent);
}

#[test]
fn pushing_through_a_merge() {
    let g = stocks_graph();
    let keep = Keep::new(["BigCapitals"]);
    let (g1, _) = push_select_through_transform(&g, "capital", "big", &keep).unwrap();
    let g2 = push_select_through_merge(&g1, "big", &keep).unwrap();
    assert!(g2.space("AllTrades").is_none());
    let ins: Vec<_> = g2.arcs().iter().filter(|a| matches!(a.op, ArcOp::Select(_))).map(|a| a.src.clone()).collect();
    assert_eq!(ins, ["NYSE", "NASDAQ"]);
}

#[test]
fn single_input_merge_is_a_relabel() {
    let doc = serde_json::json!({
        "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)"},
        "spaces": [
            {"name": "A", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "M", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "C", "kind": "history", "schema": "trade", "broker": "b1"}
        ],
        "arcs": [
            {"id": "m", "type": "merge", "from": "A", "to": "M"},
            {"id": "s", "type": "select", "from": "M", "to": "C", "predicate": "price > 10"}
        ],
        "brokers": ["b1"]
    });
    let g = FlowGraph::from_json(&doc.to_string()).unwrap();
    let out = push_select_through_merge(&g, "s", &Keep::new(["C"])).unwrap();
    assert_eq!(out.arcs().len(), 1);
    let s = out.arc("s").unwrap();
    assert_eq!((s.src.as_str(), s.dst.as_str()), ("A", "C"));
}

#[test]
fn durable_merge_point_is_refused() {
    let doc = stocks_graph().to_doc();
    let mut doc = doc;
    doc.spaces.iter_mut().find(|s| s.name == "AllTrades").unwrap().durable = true;
    doc.arcs.retain(|a| a.id != "capital" && a.id != "big");
    doc.spaces.retain(|s| s.name != "Capitals" && s.name != "BigCapitals");
    doc.schemas.remove("capital");
    doc.spaces.push(SpaceDoc {
        name: "C".into(),
        kind: SpaceKind::History,
        schema: "trade".into(),
        interp: None,
        broker: "b3".into(),
        durable: false,
    });
    doc.arcs.push(select_doc("s", "AllTrades", "C", &Predicate::parse("price > 1", &stocks_graph().space("NYSE").unwrap().schema).unwrap()));
    let g = FlowGraph::from_doc(&doc).unwrap();
    let err = push_select_through_merge(&g, "s", &Keep::new(["C"])).unwrap_err();
    assert!(err.to_string().contains("durable"));
}

#[test]
fn fixpoint_on_the_stocks_graph() {
    let g = stocks_graph();
    let keep = Keep::new(["BigCapitals"]);
    let (out, log) = rewrite_fixpoint(&g, &Rule::ALL, &keep);
    let rules: Vec<Rule> = log.iter().map(|r| r.rule).collect();
    assert_eq!(rules, [Rule::PushSelectThroughTransform, Rule::PushSelectThroughMerge]);
    // Already optimal.
    let (again, more) = rewrite_fixpoint(&out, &Rule::ALL, &keep);
    assert!(more.is_empty());
    assert_eq!(again, out);
}

#[test]
fn graph_without_selects_is_unchanged() {
    let doc = serde_json::json!({
        "schemas": {"trade": "trade(symbol:string, price:float64, volume:int64)"},
        "spaces": [
            {"name": "A", "kind": "history", "schema": "trade", "broker": "b1"},
            {"name": "C", "kind": "history", "schema": "trade", "broker": "b1"}
        ],
        "arcs": [{"id": "m", "type": "merge", "from": "A", "to": "C"}],
        "brokers": ["b1"]
    });
    let g = FlowGraph::from_json(&doc.to_string()).unwrap();
    let (out, log) = rewrite_fixpoint(&g, &Rule::ALL, &default_keep(&g));
    assert!(log.is_empty());
    assert_eq!(out, g);
}

#[test]
fn equivalence_is_reflexive_and_catches_a_changed_constant() {
    let g = stocks_graph();
    let cfg = EquivConfig { subscribed: vec!["BigCapitals".into()], ..small() };
    assert!(check_graph_equivalence(&g, &g, &cfg).equivalent);
    let mut doc = g.to_doc();
    doc.arcs.iter_mut().find(|a| a.id == "big").unwrap().predicate = Some("capital >= 1000001".into());
    let mutated = FlowGraph::from_doc(&doc).unwrap();
    let v = check_graph_equivalence(&g, &mutated, &cfg);
    // One-unit shifts can miss on small samples; the verdict says which.
    let mut doc = g.to_doc();
    doc.arcs.iter_mut().find(|a| a.id == "big").unwrap().predicate = Some("capital >= 900000".into());
    let mutated = FlowGraph::from_doc(&doc).unwrap();
    let w = check_graph_equivalence(&g, &mutated, &cfg);
    assert!(!w.equivalent, "{v:?}");
    assert!(w.counterexample.unwrap().contains("BigCapitals"));
}

#[test]
fn stocks_rewrite_is_equivalent_and_cheaper() {
    let g = stocks_graph();
    let keep = Keep::new(["BigCapitals"]);
    let (out, _) = rewrite_fixpoint(&g, &Rule::ALL, &keep);
    let cfg = EquivConfig { subscribed: vec!["BigCapitals".into()], ..small() };
    let v = check_graph_equivalence(&g, &out, &cfg);
    assert!(v.equivalent, "{:?}", v.counterexample);
    let (before, after) = v.transmissions[0];
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn random_graphs_rewrite_soundly() {
    for i in 0..8 {
        let (g, subs, _) = gen::random_applicable_graph(i);
        let (out, log) = rewrite_fixpoint(&g, &Rule::ALL, &Keep::new(subs.iter().cloned()));
        assert!(!log.is_empty());
        let cfg = EquivConfig { subscribed: subs, events: 200, trials: 1, seed: i };
        let v = check_graph_equivalence(&g, &out, &cfg);
        assert!(v.equivalent, "graph {i}: {:?}\n{g}\n{out}", v.counterexample);
    }
}
