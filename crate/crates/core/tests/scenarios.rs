use std::path::PathBuf;

use gryphon::sim::{run_scenario, Scenario};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios").join(name)
}

#[test]
fn bundled_scenarios_pass_their_assertions() {
    for name in ["crash.json", "lossy.json", "latest.json", "reconfig.json"] {
        let (scn, graph) = Scenario::load(&fixture(name)).unwrap();
        for seed in [1, 7] {
            let r = run_scenario(&scn, graph.clone(), seed).unwrap();
            assert!(r.quiesced, "{name} seed {seed} did not quiesce");
            for c in &r.checks {
                assert!(c.passed, "{name} seed {seed}: {} {}", c.name, c.detail);
            }
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let (scn, graph) = Scenario::load(&fixture("crash.json")).unwrap();
    let a = run_scenario(&scn, graph.clone(), 7).unwrap().trace_text();
    let b = run_scenario(&scn, graph.clone(), 7).unwrap().trace_text();
    assert_eq!(a, b);
    let c = run_scenario(&scn, graph, 8).unwrap().trace_text();
    assert_ne!(a, c);
}
