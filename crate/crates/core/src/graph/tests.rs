use super::*;

const STOCKS: &str = include_str!("../../../../fixtures/stocks.json");

fn stocks_doc() -> GraphDoc {
    serde_json::from_str(STOCKS).unwrap()
}

fn minimal() -> GraphDoc {
    serde_json::from_value(serde_json::json!({
        "schemas": {"s": "s(x:int64)"},
        "spaces": [{"name": "A", "kind": "history", "schema": "s", "broker": "b1"}],
        "brokers": ["b1"]
    }))
    .unwrap()
}

fn with_space(doc: &mut GraphDoc, name: &str) {
    doc.spaces.push(SpaceDoc {
        name: name.into(),
        kind: SpaceKind::History,
        schema: "s".into(),
        interp: None,
        broker: "b1".into(),
        durable: false,
    });
}

fn arc(id: &str, kind: ArcType, from: &str, to: &str) -> ArcDoc {
    ArcDoc { id: id.into(), kind, from: from.into(), to: to.into(), predicate: None, transform: None, interp: None }
}

#[test]
fn stocks_graph_loads() {
    let g = FlowGraph::from_json(STOCKS).unwrap();
    assert_eq!(g.spaces().len(), 5);
    assert_eq!(g.arcs().len(), 4);
    assert_eq!(g.in_arcs("AllTrades").count(), 2);
    assert_eq!(g.coordinator(), "b1");
}

#[test]
fn minimal_graph_loads() {
    let g = FlowGraph::from_doc(&minimal()).unwrap();
    assert_eq!(g.spaces().len(), 1);
    assert!(g.downstream_closure("A").is_empty());
}

#[test]
fn two_cycle_rejected() {
    let mut doc = minimal();
    with_space(&mut doc, "B");
    doc.arcs.push(arc("ab", ArcType::Merge, "A", "B"));
    doc.arcs.push(arc("ba", ArcType::Merge, "B", "A"));
    match FlowGraph::from_doc(&doc) {
        Err(GraphError::Cycle(c)) => {
            assert_eq!(c.first(), c.last());
            assert_eq!(c.len(), 3);
        }
        other => panic!("expected cycle, got {other:?}"),
    }
}

#[test]
fn cyclic_fixture_rejected() {
    let text = include_str!("../../../../fixtures/cyclic.json");
    assert_eq!(FlowGraph::from_json(text).unwrap_err().code(), "cycle");
}

#[test]
fn unknown_keys_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(STOCKS).unwrap();
    v["extra"] = serde_json::json!(1);
    assert!(matches!(FlowGraph::from_json(&v.to_string()), Err(GraphError::Document(_))));
    let mut v: serde_json::Value = serde_json::from_str(STOCKS).unwrap();
    v["spaces"][0]["colour"] = serde_json::json!("red");
    assert!(matches!(FlowGraph::from_json(&v.to_string()), Err(GraphError::Document(_))));
}

#[test]
fn select_between_trade_histories_ok_but_not_across_schemas() {
    let g = FlowGraph::from_json(STOCKS).unwrap();
    let p = Predicate::parse("volume > 1000", &g.space("NYSE").unwrap().schema).unwrap();
    let ok = Arc { id: "x".into(), src: "NYSE".into(), dst: "AllTrades".into(), op: ArcOp::Select(p.clone()) };
    assert_eq!(g.validate_arc(&ok), Ok(()));
    let bad = Arc { id: "y".into(), src: "NYSE".into(), dst: "Capitals".into(), op: ArcOp::Select(p) };
    assert!(matches!(g.validate_arc(&bad), Err(GraphError::SchemaMismatch { arc, .. }) if arc == "y"));
}

#[test]
fn interpret_into_history_is_kind_mismatch() {
    let mut doc = stocks_doc();
    doc.arcs.push(arc("bad", ArcType::Interpret, "NYSE", "AllTrades"));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "kind-mismatch");
}

#[test]
fn dangling_references() {
    let mut doc = stocks_doc();
    doc.arcs.push(arc("bad", ArcType::Merge, "NYSE", "Nowhere"));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "dangling-reference");
    let mut doc = stocks_doc();
    doc.spaces[0].broker = "b9".into();
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "dangling-reference");
    let mut doc = stocks_doc();
    doc.spaces[0].schema = "nope".into();
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "dangling-reference");
}

#[test]
fn broker_links_must_form_a_tree() {
    let mut doc = stocks_doc();
    doc.links.push(("b1".into(), "b2".into()));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "not-a-tree");
    let mut doc = stocks_doc();
    doc.links.pop();
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "not-a-tree");
}

#[test]
fn merge_inputs_must_deliver_destination_schema() {
    let mut doc = stocks_doc();
    doc.arcs.push(arc("bad", ArcType::Merge, "Capitals", "AllTrades"));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "schema-mismatch");
}

#[test]
fn interpretation_spaces() {
    let mut doc = stocks_doc();
    doc.spaces.push(SpaceDoc {
        name: "Latest".into(),
        kind: SpaceKind::Interpretation,
        schema: "trade".into(),
        interp: Some("by(symbol) latestprice := latest(price), highestprice := max(price)".into()),
        broker: "b3".into(),
        durable: false,
    });
    doc.spaces.push(SpaceDoc {
        name: "Replayed".into(),
        kind: SpaceKind::History,
        schema: "trade".into(),
        interp: None,
        broker: "b3".into(),
        durable: false,
    });
    doc.arcs.push(arc("interp", ArcType::Interpret, "AllTrades", "Latest"));
    let g = FlowGraph::from_doc(&doc).unwrap();
    assert_eq!(
        g.space("Latest").unwrap().schema.to_string(),
        "trade_state(symbol:string, latestprice:float64, highestprice:float64)"
    );
    // Expansion schema is (symbol, price), not the full trade schema.
    doc.arcs.push(arc("exp", ArcType::Expand, "Latest", "Replayed"));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "schema-mismatch");

    doc.arcs.pop();
    doc.arcs.push(arc("interp2", ArcType::Interpret, "NYSE", "Latest"));
    assert_eq!(FlowGraph::from_doc(&doc).unwrap_err().code(), "multiple-interp-inputs");
}

#[test]
fn closure_of_stocks_from_nyse() {
    let g = FlowGraph::from_json(STOCKS).unwrap();
    let c = g.downstream_closure("NYSE");
    let spaces: Vec<_> = c.iter().map(|s| s.space.as_str()).collect();
    assert_eq!(spaces, ["AllTrades", "Capitals", "BigCapitals"]);
    assert_eq!(c[0].arcs, ["nyse-in"]);
    assert_eq!(c[1].arcs, ["capital"]);
    assert_eq!(c[2].arcs, ["big"]);
    assert!(g.downstream_closure("BigCapitals").is_empty());
}

#[test]
fn closure_of_diamond() {
    let mut doc = minimal();
    for s in ["B", "C", "D"] {
        with_space(&mut doc, s);
    }
    doc.arcs = vec![
        arc("ab", ArcType::Merge, "A", "B"),
        arc("ac", ArcType::Merge, "A", "C"),
        arc("bd", ArcType::Merge, "B", "D"),
        arc("cd", ArcType::Merge, "C", "D"),
    ];
    let g = FlowGraph::from_doc(&doc).unwrap();
    let c = g.downstream_closure("A");
    let spaces: Vec<_> = c.iter().map(|s| s.space.as_str()).collect();
    assert_eq!(spaces, ["B", "C", "D"]);
    assert_eq!(c[2].arcs, ["bd", "cd"]);
}

#[test]
fn document_round_trip() {
    let g = FlowGraph::from_json(STOCKS).unwrap();
    let again = FlowGraph::from_doc(&g.to_doc()).unwrap();
    assert_eq!(again, g);
}

#[test]
fn broker_paths() {
    let g = FlowGraph::from_json(STOCKS).unwrap();
    assert_eq!(g.broker_path("b1", "b2"), ["b1", "b3", "b2"]);
    assert_eq!(g.next_hop("b1", "b2").as_deref(), Some("b3"));
    assert_eq!(g.next_hop("b1", "b1"), None);
}

#[test]
fn placement_does_not_affect_validity() {
    let base = stocks_doc();
    for b in ["b1", "b2", "b3"] {
        let mut doc = base.clone();
        for s in &mut doc.spaces {
            s.broker = b.into();
        }
        assert!(FlowGraph::from_doc(&doc).is_ok());
    }
}
