use super::*;
use crate::model::Schema;

fn trade() -> Schema {
    Schema::parse("trade(symbol:string, price:float64, volume:int64)").unwrap()
}

fn latest_max() -> InterpSpec {
    InterpSpec::parse("by(symbol) latestprice := latest(price), highestprice := max(price)", &trade()).unwrap()
}

fn ev(sym: &str, price: f64, seq: u64) -> Event {
    Event::sequenced(vec![sym.into(), price.into(), Value::Int(100)], "t", seq)
}

#[test]
fn seq_guarded_latest() {
    let mut st = init_state(&latest_max());
    assert!(st.is_empty());
    st.apply_event(&ev("IBM", 60.0, 1)).unwrap();
    assert_eq!(st.row(&["IBM".into()]), Some(vec![60.0.into(), 60.0.into()]));
    st.apply_event(&ev("IBM", 55.0, 2)).unwrap();
    assert_eq!(st.row(&["IBM".into()]), Some(vec![55.0.into(), 60.0.into()]));
    assert!(!st.apply_event(&ev("IBM", 55.0, 2)).unwrap());
    assert_eq!(st.row(&["IBM".into()]), Some(vec![55.0.into(), 60.0.into()]));
}

#[test]
fn missing_seq_rejected() {
    let mut st = init_state(&latest_max());
    let e = Event::new(vec!["IBM".into(), 1.0.into(), Value::Int(1)], "t");
    assert_eq!(st.apply_event(&e), Err(InterpError::MissingSeq));
}

#[test]
fn reverse_order_gives_same_state() {
    let spec = latest_max();
    let h = [ev("IBM", 60.0, 1), ev("IBM", 55.0, 2)];
    let fwd = interpret_history(&spec, &h).unwrap();
    let rev = interpret_history(&spec, h.iter().rev()).unwrap();
    assert!(states_equal(&fwd, &rev).unwrap());
    assert_eq!(fwd.row(&["IBM".into()]), Some(vec![55.0.into(), 60.0.into()]));
}

#[test]
fn equal_aggregates_from_different_histories() {
    let spec = latest_max();
    let a = interpret_history(&spec, &[ev("IBM", 60.0, 1), ev("IBM", 55.0, 2)]).unwrap();
    let b = interpret_history(&spec, &[ev("IBM", 60.0, 1), ev("IBM", 60.0, 2), ev("IBM", 55.0, 3)]).unwrap();
    assert!(states_equal(&a, &b).unwrap());
    let c = interpret_history(&spec, &[ev("IBM", 61.0, 1), ev("IBM", 55.0, 2)]).unwrap();
    assert!(!states_equal(&a, &c).unwrap());
}

#[test]
fn spec_mismatch_is_an_error() {
    let a = init_state(&latest_max());
    let b = init_state(&InterpSpec::parse("n := count, s := sum(volume)", &trade()).unwrap());
    assert_eq!(states_equal(&a, &b), Err(InterpError::SpecMismatch));
}

#[test]
fn canonical_latest_max_expansion() {
    let spec = latest_max();
    let st = interpret_history(&spec, &[ev("IBM", 60.0, 1), ev("IBM", 55.0, 2)]).unwrap();
    let out: Vec<_> = expand_state(&st).unwrap().into_iter().map(|e| e.values).collect();
    assert_eq!(out, vec![vec!["IBM".into(), 60.0.into()], vec!["IBM".into(), 55.0.into()]]);

    let st = interpret_history(&spec, &[ev("IBM", 60.0, 1)]).unwrap();
    assert_eq!(expand_state(&st).unwrap().len(), 1);
}

#[test]
fn canonical_count_sum_expansion() {
    let spec = InterpSpec::parse("by(symbol) n := count, total := sum(volume)", &trade()).unwrap();
    let h: Vec<Event> = [10, 30, 50]
        .iter()
        .enumerate()
        .map(|(i, v)| Event::sequenced(vec!["IBM".into(), 1.0.into(), Value::Int(*v)], "t", i as u64 + 1))
        .collect();
    let st = interpret_history(&spec, &h).unwrap();
    assert_eq!(st.row(&["IBM".into()]), Some(vec![Value::Int(3), Value::Int(90)]));
    let out: Vec<_> = expand_state(&st).unwrap().into_iter().map(|e| e.values).collect();
    assert_eq!(
        out,
        vec![
            vec!["IBM".into(), Value::Int(0)],
            vec!["IBM".into(), Value::Int(0)],
            vec!["IBM".into(), Value::Int(90)]
        ]
    );
}

#[test]
fn compression_shortens_and_preserves_state() {
    let spec = latest_max();
    let h = [ev("IBM", 60.0, 1), ev("IBM", 58.0, 2), ev("IBM", 55.0, 3)];
    let c = compress_history(&spec, &h).unwrap();
    assert_eq!(c.len(), 2);
    let re = interpret_history(&expansion_spec(&spec), &sequence_from(&c, 1)).unwrap();
    assert!(states_equal(&re, &interpret_history(&spec, &h).unwrap()).unwrap());
    assert!(compress_history(&spec, &[]).unwrap().is_empty());
}

#[test]
fn canonical_history_is_a_fixpoint() {
    let spec = latest_max();
    let h = [ev("IBM", 60.0, 1), ev("IBM", 55.0, 2)];
    let c = compress_history(&spec, &h).unwrap();
    let vals: Vec<_> = c.iter().map(|e| e.values.clone()).collect();
    assert_eq!(vals, vec![vec!["IBM".into(), 60.0.into()], vec!["IBM".into(), 55.0.into()]]);
}

#[test]
fn non_expandable_spec_rejected() {
    let spec = InterpSpec::parse("l := latest(price), s := sum(price)", &trade()).unwrap();
    assert!(matches!(compress_history(&spec, &[]), Err(InterpError::NotExpandable(_))));
}

#[test]
fn snapshot_round_trip_is_deterministic() {
    let spec = InterpSpec::parse("by(symbol) n := count, s := sum(price)", &trade()).unwrap();
    let h: Vec<Event> = (1..=20).map(|i| ev(if i % 2 == 0 { "A" } else { "B" }, 0.1 * i as f64, i)).collect();
    let st = interpret_history(&spec, &h).unwrap();
    let snap = st.snapshot();
    let json = serde_json::to_string(&snap).unwrap();
    let back: StateSnapshot = serde_json::from_str(&json).unwrap();
    assert_eq!(back, snap);
    let mut restored = InterpState::from_snapshot(spec.clone(), &back).unwrap();
    assert!(states_equal(&restored, &st).unwrap());
    // Continuing to fold after a restore matches folding without one.
    let more = ev("A", 0.7, 21);
    restored.apply_event(&more).unwrap();
    let mut direct = st.clone();
    direct.apply_event(&more).unwrap();
    assert!(states_equal(&restored, &direct).unwrap());
}

#[test]
fn snapshot_json_shape() {
    let st = interpret_history(&latest_max(), &[ev("IBM", 60.0, 1), ev("IBM", 55.0, 2)]).unwrap();
    assert_eq!(
        serde_json::to_string(&st.snapshot()).unwrap(),
        r#"{"rows":[{"key":["IBM"],"values":[55.0,60.0],"last_seq":2}]}"#
    );
}
