use super::*;
use proptest::prelude::*;

fn trade() -> Schema {
    Schema::parse("trade(symbol:string, price:float64, volume:int64)").unwrap()
}

fn sub(id: &str, text: &str) -> Subscription {
    let p = Predicate::parse(text, &trade()).unwrap();
    Subscription::new(id, p.disjuncts()[0].clone(), "c")
}

fn vals(sym: &str, price: f64, volume: i64) -> Vec<Value> {
    vec![sym.into(), price.into(), volume.into()]
}

#[test]
fn shared_prefix_example() {
    let t = MatchTree::build([sub("s1", "volume > 1000"), sub("s2", "volume > 1000 and price >= 50")], trade()).unwrap();
    assert_eq!(t.match_values(&vals("IBM", 50.0, 30000)).sub_ids, ["s1", "s2"]);
    assert!(t.match_values(&vals("IBM", 10.0, 500)).sub_ids.is_empty());
}

#[test]
fn empty_tree_matches_nothing() {
    let t = MatchTree::new(trade());
    assert!(t.match_values(&vals("IBM", 1.0, 1)).sub_ids.is_empty());
}

#[test]
fn vacuous_conjunction_matches_everything() {
    let t = MatchTree::build([Subscription::new("all", vec![], "c")], trade()).unwrap();
    let out = t.match_values(&vals("X", -3.0, 0));
    assert_eq!(out.sub_ids, ["all"]);
    assert_eq!(out.visits, 1);
}

#[test]
fn equality_edges_are_followed() {
    let t = MatchTree::build(
        [sub("ibm", "symbol = \"IBM\""), sub("ibm50", "symbol = \"IBM\" and price = 50"), sub("any", "volume >= 0")],
        trade(),
    )
    .unwrap();
    assert_eq!(t.match_values(&vals("IBM", 50.0, 1)).sub_ids, ["any", "ibm", "ibm50"]);
    assert_eq!(t.match_values(&vals("IBM", 51.0, 1)).sub_ids, ["any", "ibm"]);
    assert_eq!(t.match_values(&vals("HP", 50.0, -1)).sub_ids, Vec::<String>::new());
}

#[test]
fn negative_zero_shares_the_zero_edge() {
    let t = MatchTree::build([sub("z", "price = 0.0")], trade()).unwrap();
    assert_eq!(t.match_values(&vals("A", -0.0, 1)).sub_ids, ["z"]);
}

#[test]
fn duplicate_and_unknown_ids() {
    let mut t = MatchTree::new(trade());
    t.add(sub("a", "volume > 1")).unwrap();
    assert_eq!(t.add(sub("a", "volume > 2")), Err(MatchError::DuplicateId("a".into())));
    assert_eq!(t.remove("zz").unwrap_err(), MatchError::UnknownId("zz".into()));
}

#[test]
fn remove_prunes_and_keeps_others() {
    let mut t = MatchTree::new(trade());
    t.add(sub("a", "symbol = \"IBM\" and volume = 5")).unwrap();
    t.add(sub("b", "symbol = \"IBM\"")).unwrap();
    let before = t.node_count();
    t.remove("a").unwrap();
    assert!(t.node_count() < before);
    assert_eq!(t.match_values(&vals("IBM", 0.0, 5)).sub_ids, ["b"]);
    t.remove("b").unwrap();
    assert_eq!(t.node_count(), 1);
    assert!(t.match_values(&vals("IBM", 0.0, 5)).sub_ids.is_empty());
}

#[test]
fn division_error_is_no_match() {
    let s = Schema::parse("s(x:int64, y:int64)").unwrap();
    let p = Predicate::parse("x / y > 1", &s).unwrap();
    let t = MatchTree::build(subscriptions_for(Some(&p), "d", "c"), s).unwrap();
    assert!(t.match_values(&[Value::Int(4), Value::Int(0)]).sub_ids.is_empty());
    assert_eq!(t.match_values(&[Value::Int(4), Value::Int(1)]).sub_ids, ["d#0"]);
}

#[test]
fn metrics_accumulate() {
    let t = MatchTree::build([sub("a", "volume > 1")], trade()).unwrap();
    t.match_values(&vals("A", 1.0, 2));
    t.match_values(&vals("A", 1.0, 0));
    let m = t.metrics();
    assert_eq!((m.matches, m.subs_active), (2, 1));
    assert!(m.visits >= 2);
}

fn arb_sub_text() -> impl Strategy<Value = String> {
    let atom = prop_oneof![
        (0..4i64).prop_map(|v| format!("volume = {v}")),
        (0..4i64).prop_map(|v| format!("volume > {v}")),
        (0..3i64).prop_map(|v| format!("price = {v}.0")),
        (0..3i64).prop_map(|v| format!("price <= {v}.5")),
        (0..3u8).prop_map(|c| format!("symbol = \"{}\"", (b'A' + c) as char)),
        (0..3u8).prop_map(|c| format!("symbol != \"{}\"", (b'A' + c) as char)),
        (0..6i64).prop_map(|v| format!("price * volume >= {v}")),
    ];
    proptest::collection::vec(atom, 1..4).prop_map(|atoms| atoms.join(" and "))
}

fn arb_event() -> impl Strategy<Value = Vec<Value>> {
    (0..3u8, 0..3i64, 0..5i64).prop_map(|(c, p, v)| vals(&((b'A' + c) as char).to_string(), p as f64, v))
}

proptest! {
    #[test]
    fn matches_brute_force(texts in proptest::collection::vec(arb_sub_text(), 0..25),
                           events in proptest::collection::vec(arb_event(), 1..30)) {
        let subs: Vec<Subscription> = texts.iter().enumerate().map(|(i, t)| sub(&format!("s{i:02}"), t)).collect();
        let tree = MatchTree::build(subs.clone(), trade()).unwrap();
        for e in &events {
            let mut expected: Vec<String> = subs.iter().filter(|s| s.matches(e)).map(|s| s.sub_id.clone()).collect();
            expected.sort();
            prop_assert_eq!(tree.match_values(e).sub_ids, expected);
        }
    }

    #[test]
    fn insertion_order_is_irrelevant(texts in proptest::collection::vec(arb_sub_text(), 0..20),
                                     events in proptest::collection::vec(arb_event(), 1..20)) {
        let subs: Vec<Subscription> = texts.iter().enumerate().map(|(i, t)| sub(&format!("s{i:02}"), t)).collect();
        let fwd = MatchTree::build(subs.clone(), trade()).unwrap();
        let rev = MatchTree::build(subs.into_iter().rev(), trade()).unwrap();
        for e in &events {
            prop_assert_eq!(fwd.match_values(e).sub_ids, rev.match_values(e).sub_ids);
        }
    }

    #[test]
    fn remove_then_add_is_identity(texts in proptest::collection::vec(arb_sub_text(), 1..20),
                                   pick in any::<prop::sample::Index>(),
                                   events in proptest::collection::vec(arb_event(), 1..20)) {
        let subs: Vec<Subscription> = texts.iter().enumerate().map(|(i, t)| sub(&format!("s{i:02}"), t)).collect();
        let tree = MatchTree::build(subs.clone(), trade()).unwrap();
        let victim = subs[pick.index(subs.len())].clone();
        let mut churned = tree.clone();
        churned.remove(&victim.sub_id).unwrap();
        churned.add(victim).unwrap();
        for e in &events {
            prop_assert_eq!(tree.match_values(e).sub_ids, churned.match_values(e).sub_ids);
        }
    }
}
