use klgame::sim::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short(mut spec: ScenarioSpec) -> ScenarioSpec {
    spec.sim_length = 12;
    spec.planning_horizon = 10;
    spec
}

#[test]
fn straight_rollout_progress() {
    let states: Vec<Vec<f64>> = (0..=45).map(|t| vec![t as f64, 1.85, 0.0, 10.0]).collect();
    assert_eq!(metric_progress(&states), 45.0);
    // a 10 m/s constant-speed rollout over 45 steps of 0.1 s
    let dt = 0.1;
    let states: Vec<Vec<f64>> = (0..=45).map(|t| vec![10.0 * dt * t as f64, 1.85, 0.0, 10.0]).collect();
    assert!((metric_progress(&states) - 45.0 * 10.0 * dt).abs() < 1e-12);
}

#[test]
fn coordination_and_safety_metrics() {
    let spec = ScenarioSpec::tollbooth();
    let c = &spec.cost;
    let same = vec![vec![0.0, 1.85, 0.0, 10.0, 8.0, 1.8, 0.0, 10.0]];
    assert!(!metric_coordinated(c, &same));
    let opposite = vec![vec![0.0, -1.85, 0.0, 10.0, 8.0, 1.8, 0.0, 10.0]];
    assert!(metric_coordinated(c, &opposite));
    assert!(metric_safe(c, &opposite));
    let close = vec![vec![0.0, 1.85, 0.0, 10.0, 0.9 * c.collision_radius, 1.85, 0.0, 10.0]];
    assert!(!metric_safe(c, &close));
    let out = vec![vec![0.0, 3.8, 0.0, 10.0, 8.0, 1.8, 0.0, 10.0]];
    assert!(!metric_safe(c, &out));
}

#[test]
fn spec_validation() {
    let mut s = ScenarioSpec::tollbooth();
    s.replan_interval = 0;
    assert!(s.validate().is_err());
    let mut s = ScenarioSpec::tollbooth();
    s.replan_interval = 30;
    assert!(s.validate().is_err());
    let mut s = ScenarioSpec::tollbooth();
    s.references[0] = ReferenceSpec::None;
    assert!(s.validate().is_err());
    let mut s = ScenarioSpec::tollbooth();
    s.cost.control_weights[1] = 0.0;
    assert!(s.validate().is_err());
    assert!(ScenarioSpec::tollbooth().validate().is_ok());
}

#[test]
fn spec_round_trips_through_json() {
    let s = ScenarioSpec::tollbooth();
    let text = serde_json::to_string_pretty(&s).unwrap();
    let back: ScenarioSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
}

#[test]
fn zero_lambda_klgame_matches_ilqgames() {
    let mut spec = short(ScenarioSpec::tollbooth());
    spec.lambda = vec![0.0, 0.0];
    let a = run_trial(&spec, Method::Klgame, 0, &mut trial_rng(3, 0)).unwrap();
    let b = run_trial(&spec, Method::Ilqgames, 0, &mut trial_rng(3, 0)).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.time_avg_cost, b.time_avg_cost);
}

#[test]
fn batches_are_seeded_and_deterministic() {
    let spec = short(ScenarioSpec::tollbooth());
    let a = run_batch(&spec, Method::Klgame, 4, 9).unwrap();
    let b = run_batch(&spec, Method::Klgame, 4, 9).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = run_batch(&spec, Method::Klgame, 4, 10).unwrap();
    assert_ne!(a.trials[0].states, c.trials[0].states);
    // a batch trial is the same as running that trial alone
    let alone = run_trial(&spec, Method::Klgame, 2, &mut trial_rng(9, 2)).unwrap();
    assert_eq!(alone, a.trials[2]);
}

#[test]
fn deterministic_method_has_zero_spread() {
    let spec = short(ScenarioSpec::tollbooth());
    let b = run_batch(&spec, Method::Ilqgames, 3, 1).unwrap();
    assert_eq!(b.stats.cost.std, 0.0);
    assert_eq!(b.stats.progress.std, 0.0);
    let one = run_batch(&spec, Method::Maxent, 1, 1).unwrap();
    assert_eq!(one.stats.cost.std, 0.0);
    assert_eq!(one.stats.coordination_rate.std, 0.0);
    assert!(run_batch(&spec, Method::Maxent, 0, 1).is_err());
}

#[test]
fn mean_execution_is_deterministic() {
    let mut spec = short(ScenarioSpec::tollbooth());
    spec.execution = Execution::Mean;
    let a = run_trial(&spec, Method::Klgame, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = run_trial(&spec, Method::Klgame, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trial_shapes() {
    let mut spec = short(ScenarioSpec::tollbooth());
    spec.replan_interval = 3;
    let r = run_trial(&spec, Method::MmKlgame, 0, &mut trial_rng(0, 0)).unwrap();
    assert!(r.failure.is_none());
    assert_eq!(r.states.len(), spec.sim_length + 1);
    assert_eq!(r.controls.len(), spec.sim_length);
    assert_eq!(r.stage_costs.len(), spec.sim_length);
    assert_eq!(r.states[0], vec![0.0, 1.85, 0.0, 10.0, 8.0, -1.85, 0.0, 10.0]);
}

#[test]
fn method_names_parse() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("ilq".parse::<Method>().is_err());
}
