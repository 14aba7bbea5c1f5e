use std::sync::Arc;

use klgame::cost::{ControlEffort, GameCostSet, PlayerCost, StateTracking};
use klgame::dynamics::KinematicBicycle;
use klgame::game::JointState;
use klgame::ilq::{self, LQLConfig};
use klgame::klqg::KLWeights;
use klgame::reference::{GMMRef, GaussianRef, RefComponent};
use klgame::scenario::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: usize = 12;

fn yaw_mode(yaw: f64) -> RefComponent {
    RefComponent::Open(GaussianRef::constant(DVector::from_vec(vec![0.0, yaw]), DMatrix::identity(2, 2) * 0.05, T).unwrap())
}

fn problem(modes: Vec<RefComponent>, weights: Vec<f64>, max_modes: usize) -> (MMProblem, JointState) {
    let player = PlayerCost::new()
        .with(StateTracking::speed(0, 5.0, 1.0))
        .with(StateTracking::heading(0, 0.5))
        .with(ControlEffort {
            player: 0,
            weights: vec![0.1, 1.0],
        });
    let cost = GameCostSet::new(4, vec![2], vec![player]).unwrap();
    let p = MMProblem::new(
        Arc::new(KinematicBicycle::new(1, 0.1)),
        Arc::new(cost),
        vec![Some(GMMRef::constant(modes, weights).unwrap())],
        KLWeights::new(vec![1.0]).unwrap(),
        T,
        max_modes,
    )
    .unwrap();
    (p, JointState::from_slice(&[0.0, 0.0, 0.0, 4.0]).unwrap())
}

#[test]
fn single_mode_tree_matches_chain_solver() {
    let (p, x0) = problem(vec![yaw_mode(0.3)], vec![1.0], 3);
    let cfg = LQLConfig::default();
    let mm = solve_mm(&p, &x0, None, &cfg).unwrap();
    let chain = ilq::solve(&p.chain_problem(0).unwrap(), &x0, None, &cfg).unwrap();
    assert_eq!(mm.tree.len(), 1 + T);
    assert_eq!(mm.iterations_used, chain.iterations_used);
    for (t, &id) in (0..=T).map(|t| (t, &mm.tree.level(t)[0])) {
        let d = (&mm.tree.nodes[id].state.0 - &chain.nominal.state(t).0).amax();
        assert!(d < 1e-8, "t={t}: {d}");
    }
    let root = &mm.root_policy[0];
    assert_eq!(root.components.len(), 1);
    assert!(root.components[0].max_deviation(&chain.policies[0].stages[0]) < 1e-8);
}

#[test]
fn duplicated_mode_collapses_to_chain() {
    let (p, x0) = problem(vec![yaw_mode(0.3), yaw_mode(0.3)], vec![0.4, 0.6], 2);
    let cfg = LQLConfig::default();
    let mm = solve_mm(&p, &x0, None, &cfg).unwrap();
    let chain = ilq::solve(&p.chain_problem(0).unwrap(), &x0, None, &cfg).unwrap();
    for c in &mm.root_policy[0].components {
        assert!(c.max_deviation(&chain.policies[0].stages[0]) < 1e-8);
    }
}

#[test]
fn node_count_and_renormalized_weights() {
    let (p, x0) = problem(vec![yaw_mode(0.3), yaw_mode(0.0), yaw_mode(-0.3)], vec![0.2, 0.5, 0.3], 2);
    let tree = build_tree(&p, &x0, None).unwrap();
    assert_eq!(tree.len(), 1 + 2 * T);
    let kids: Vec<(usize, f64)> = tree.root().children.iter().map(|&c| (tree.nodes[c].mode, tree.nodes[c].weight)).collect();
    assert_eq!(kids[0].0, 1);
    assert_eq!(kids[1].0, 2);
    assert!((kids[0].1 - 0.625).abs() < 1e-12 && (kids[1].1 - 0.375).abs() < 1e-12);
    let leaf_mass: f64 = tree.leaves().iter().map(|&l| tree.nodes[l].probability).sum();
    assert!((leaf_mass - 1.0).abs() < 1e-12);

    let deeper = p.clone().with_branch_times(vec![0, 3]).unwrap();
    let tree = build_tree(&deeper, &x0, None).unwrap();
    assert_eq!(tree.len(), 1 + 2 * 3 + 4 * (T - 3));
    assert_eq!(tree.path_states(tree.leaves()[0]).len(), T + 1);
}

#[test]
fn ties_go_to_lower_index() {
    let (p, x0) = problem(vec![yaw_mode(0.3), yaw_mode(0.0), yaw_mode(-0.3)], vec![0.4, 0.2, 0.4], 2);
    let tree = build_tree(&p, &x0, None).unwrap();
    let modes: Vec<usize> = tree.root().children.iter().map(|&c| tree.nodes[c].mode).collect();
    assert_eq!(modes, vec![0, 2]);
}

#[test]
fn branches_follow_their_modes() {
    let (p, x0) = problem(vec![yaw_mode(0.4), yaw_mode(-0.4)], vec![0.5, 0.5], 2);
    let sol = solve_mm(&p, &x0, None, &LQLConfig::default()).unwrap();
    assert!(sol.converged);
    for w in sol.social_cost_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
    }
    let leaves = sol.tree.leaves();
    let y = |id: usize| sol.tree.nodes[id].state.0[1];
    assert!(y(leaves[0]) > 0.1 && y(leaves[1]) < -0.1, "{} {}", y(leaves[0]), y(leaves[1]));
    let root = &sol.root_policy[0];
    let x = &x0.0;
    assert!(root.components[0].mean(x)[1] > 0.0 && root.components[1].mean(x)[1] < 0.0);
    assert!(root.mean(x)[1].abs() < 1e-6);
}

#[test]
fn root_sampling_follows_weights() {
    let (p, x0) = problem(vec![yaw_mode(0.4), yaw_mode(-0.4)], vec![0.7, 0.3], 2);
    let sol = solve_mm(&p, &x0, None, &LQLConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let left = (0..n)
        .filter(|_| sample_root_action(&sol.root_policy, &x0, &mut rng).unwrap().per_player[0][1] > 0.0)
        .count();
    let frac = left as f64 / n as f64;
    assert!((frac - 0.7).abs() < 0.04, "{frac}");
}
