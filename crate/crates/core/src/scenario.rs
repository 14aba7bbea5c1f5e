//! Scenario-tree solver for multi-modal (Gaussian mixture) references.
//!
//! The tree branches into the highest-weight reference modes at the scheduled
//! times; every edge carries its own control and its own mode's reference. The
//! backward pass solves one KL-LQG stage per edge against the child's value and
//! averages the resulting node values by branch weight. With one mode the tree is
//! a single chain and the solve reduces to [`crate::ilq::solve`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::cost::{GameCost, QuadraticStageCost};
use crate::dynamics::{Dynamics, LinearGameStage};
use crate::error::{dim_err, KlError, Result};
use crate::game::{GameDims, JointControl, JointState};
use crate::ilq::{local_model, run_lql, IterationRecord, LQLConfig, Plan, PlayerReference, Problem};
use crate::klqg::{solve_stage, KLWeights, PolicyStage, ReferenceStage};
use crate::par;
use crate::reference::{gaussian_sample, sample_index, GMMRef, RefComponent, StochasticPolicy};

/// A game whose players may carry Gaussian-mixture references.
#[derive(Clone)]
pub struct MMProblem {
    pub dynamics: Arc<dyn Dynamics>,
    pub cost: Arc<dyn GameCost>,
    /// `None` for players without a reference (they need `λ = 0`).
    pub refs: Vec<Option<GMMRef>>,
    pub lambda: KLWeights,
    pub horizon: usize,
    /// Largest number of modes kept at a branching point.
    pub max_modes: usize,
    /// Times at which the tree branches. Defaults to the root only.
    pub branch_times: Vec<usize>,
}

impl std::fmt::Debug for MMProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MMProblem")
            .field("refs", &self.refs)
            .field("lambda", &self.lambda)
            .field("horizon", &self.horizon)
            .field("max_modes", &self.max_modes)
            .field("branch_times", &self.branch_times)
            .finish()
    }
}

impl MMProblem {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        cost: Arc<dyn GameCost>,
        refs: Vec<Option<GMMRef>>,
        lambda: KLWeights,
        horizon: usize,
        max_modes: usize,
    ) -> Result<Self> {
        let p = MMProblem {
            dynamics,
            cost,
            refs,
            lambda,
            horizon,
            max_modes,
            branch_times: vec![0],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_branch_times(mut self, mut times: Vec<usize>) -> Result<Self> {
        times.sort_unstable();
        times.dedup();
        self.branch_times = times;
        self.validate()?;
        Ok(self)
    }

    pub fn n_players(&self) -> usize {
        self.dynamics.control_dims().len()
    }

    pub fn dims(&self) -> Result<GameDims> {
        GameDims::new(
            self.dynamics.state_dim(),
            self.dynamics.control_dims().to_vec(),
            self.horizon,
            self.dynamics.dt(),
        )
    }

    /// Number of modes shared by every multi-modal player.
    pub fn n_modes(&self) -> usize {
        self.refs.iter().flatten().map(GMMRef::n_modes).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        let np = self.n_players();
        if self.cost.n_players() != np || self.refs.len() != np || self.lambda.len() != np {
            return dim_err("dynamics, cost, references and lambda disagree on the number of players");
        }
        if self.max_modes == 0 {
            return Err(KlError::Precondition("max_modes must be >= 1".into()));
        }
        let m = self.n_modes();
        for (i, r) in self.refs.iter().enumerate() {
            match r {
                None if self.lambda.get(i) > 0.0 => {
                    return Err(KlError::Precondition(format!("player {i} has lambda > 0 but no reference")));
                }
                Some(g) if g.n_modes() != 1 && g.n_modes() != m => {
                    return Err(KlError::Precondition(format!(
                        "player {i} has {} modes; multi-modal players must share {m}",
                        g.n_modes()
                    )));
                }
                Some(g) if g.control_dim() != self.dynamics.control_dims()[i] => {
                    return dim_err(format!("player {i} reference has the wrong control dimension"));
                }
                _ => {}
            }
        }
        if self.branch_times.iter().any(|&t| t >= self.horizon) {
            return Err(KlError::Precondition("branch times must lie inside the horizon".into()));
        }
        Ok(())
    }

    /// Mixture that decides branch selection and weights: the first player with
    /// the most modes.
    fn lead(&self) -> Option<&GMMRef> {
        let m = self.n_modes();
        self.refs.iter().flatten().find(|g| g.n_modes() == m)
    }

    /// The modes kept at time `t` with renormalized weights.
    pub fn branches_at(&self, t: usize) -> Result<Vec<(usize, f64)>> {
        match self.lead() {
            Some(g) => g.top_modes(t, self.max_modes.min(g.n_modes())),
            None => Ok(vec![(0, 1.0)]),
        }
    }

    /// Per-player references under mode `k`.
    pub fn mode_refs(&self, k: usize) -> Vec<PlayerReference> {
        self.refs
            .iter()
            .map(|r| match r {
                None => PlayerReference::Absent,
                Some(g) => component_ref(g.mode(if g.n_modes() == 1 { 0 } else { k }).clone()),
            })
            .collect()
    }

    /// The single-chain problem obtained by fixing mode `k`.
    pub fn chain_problem(&self, k: usize) -> Result<Problem> {
        Problem::new(
            self.dynamics.clone(),
            self.cost.clone(),
            self.mode_refs(k),
            self.lambda.clone(),
            self.horizon,
        )
    }
}

fn component_ref(c: RefComponent) -> PlayerReference {
    match c {
        RefComponent::Open(g) => PlayerReference::Gaussian(g),
        RefComponent::Feedback(f) => PlayerReference::Feedback(f),
    }
}

/// A tree node: the state at time `t`, reached by the control on its incoming edge.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub t: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Reference mode active on the incoming edge (and inherited by descendants
    /// until the next branching).
    pub mode: usize,
    /// Probability of this node given its parent.
    pub weight: f64,
    /// Probability of the path from the root.
    pub probability: f64,
    pub state: JointState,
    /// Control applied at the parent to reach this node; `None` at the root.
    pub control: Option<JointControl>,
}

/// A rolled-out scenario tree. Nodes are stored level by level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    pub nodes: Vec<TreeNode>,
    levels: Vec<Vec<usize>>,
}

impl ScenarioTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids at time `t`.
    pub fn level(&self, t: usize) -> &[usize] {
        &self.levels[t]
    }

    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    /// Largest state change between two trees of identical shape.
    pub fn max_state_deviation(&self, other: &ScenarioTree) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| (&a.state.0 - &b.state.0).amax())
            .fold(0.0, f64::max)
    }

    /// States from the root to leaf `leaf`.
    pub fn path_states(&self, leaf: usize) -> Vec<&JointState> {
        let mut out = vec![];
        let mut n = Some(leaf);
        while let Some(id) = n {
            out.push(&self.nodes[id].state);
            n = self.nodes[id].parent;
        }
        out.reverse();
        out
    }

    pub fn leaves(&self) -> &[usize] {
        self.levels.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Builds the tree for `problem` from `x0` and rolls it out with
/// `initial_controls[t]` on every edge leaving time `t` (zeros when `None`).
pub fn build_tree(problem: &MMProblem, x0: &JointState, initial_controls: Option<&[JointControl]>) -> Result<ScenarioTree> {
    problem.validate()?;
    let dims = problem.dims()?;
    if x0.dim() != dims.state_dim {
        return dim_err(format!("x0 has length {}, expected {}", x0.dim(), dims.state_dim));
    }
    if let Some(c) = initial_controls {
        if c.len() != dims.horizon {
            return dim_err(format!("{} initial controls for horizon {}", c.len(), dims.horizon));
        }
    }
    let root_branches = problem.branches_at(0)?;
    let mut nodes = vec![TreeNode {
        t: 0,
        parent: None,
        children: vec![],
        mode: root_branches[0].0,
        weight: 1.0,
        probability: 1.0,
        state: x0.clone(),
        control: None,
    }];
    let mut levels = vec![vec![0]];
    for t in 0..dims.horizon {
        let branching = problem.branch_times.contains(&t);
        let branches = if branching { problem.branches_at(t)? } else { vec![] };
        let u = initial_controls.map_or_else(|| JointControl::zeros(&dims.control_dims), |c| c[t].clone());
        let mut next_level = vec![];
        for &p in &levels[t] {
            let edges: Vec<(usize, f64)> = if branching { branches.clone() } else { vec![(nodes[p].mode, 1.0)] };
            let state = problem.dynamics.step(&nodes[p].state, &u)?;
            for (mode, w) in edges {
                let id = nodes.len();
                nodes.push(TreeNode {
                    t: t + 1,
                    parent: Some(p),
                    children: vec![],
                    mode,
                    weight: w,
                    probability: nodes[p].probability * w,
                    state: state.clone(),
                    control: Some(u.clone()),
                });
                nodes[p].children.push(id);
                next_level.push(id);
            }
        }
        levels.push(next_level);
    }
    Ok(ScenarioTree { nodes, levels })
}

/// Per-edge equilibrium policies and per-node values from a tree backward pass.
#[derive(Debug, Clone)]
pub struct TreePolicy {
    /// For each node, the per-player policy on its incoming edge in deviation
    /// coordinates around the parent state and the edge control. Empty at the root.
    pub edges: Vec<Vec<PolicyStage>>,
    /// Per node, per player value `(Z, z)` in deviation coordinates.
    pub values: Vec<Vec<(DMatrix<f64>, DVector<f64>)>>,
    pub max_asymmetry: f64,
    pub max_condition: f64,
}

type EdgeModel = (LinearGameStage, Vec<QuadraticStageCost>, Vec<ReferenceStage>);

/// Solves the local KL-LQG game on every edge of the tree, leaves to root.
pub fn mm_backward_pass(problem: &MMProblem, tree: &ScenarioTree) -> Result<TreePolicy> {
    let np = problem.n_players();
    let n = problem.dynamics.state_dim();
    let mode_refs: Vec<Problem> = (0..problem.n_modes())
        .map(|k| problem.chain_problem(k))
        .collect::<Result<_>>()?;
    let models: Vec<Option<Result<EdgeModel>>> = par::map_indices(tree.len(), |id| {
        let node = &tree.nodes[id];
        let parent = node.parent?;
        let u = node.control.as_ref()?;
        Some(local_model(&mode_refs[node.mode], tree.nodes[parent].t, &tree.nodes[parent].state, u))
    });
    let mut models: Vec<Option<EdgeModel>> = models
        .into_iter()
        .enumerate()
        .map(|(id, m)| m.transpose().map_err(|e| e.with_context(format!("building local model for tree node {id}"))))
        .collect::<Result<_>>()?;
    let zero = (DMatrix::zeros(n, n), DVector::zeros(n));
    let mut values: Vec<Vec<(DMatrix<f64>, DVector<f64>)>> = vec![vec![zero.clone(); np]; tree.len()];
    let mut edges: Vec<Vec<PolicyStage>> = vec![vec![]; tree.len()];
    let (mut asym, mut cond) = (0.0f64, 0.0f64);
    for t in (0..tree.horizon()).rev() {
        let level = tree.level(t);
        let solved = par::map_slice(level, |&id| -> Result<Vec<_>> {
            tree.nodes[id]
                .children
                .iter()
                .map(|&c| {
                    let (stage, costs, refs) = models[c].as_ref().expect("edge model");
                    solve_stage(t, stage, costs, refs, &problem.lambda, &values[c]).map(|s| (c, s))
                })
                .collect()
        });
        for (&id, res) in level.iter().zip(solved) {
            let res = res.map_err(|e| e.with_context(format!("tree node {id} at t={t}")))?;
            let mut v = vec![(DMatrix::zeros(n, n), DVector::zeros(n)); np];
            for (c, sol) in res {
                let w = tree.nodes[c].weight;
                for (vi, si) in v.iter_mut().zip(&sol.values) {
                    vi.0 += &si.0 * w;
                    vi.1 += &si.1 * w;
                }
                asym = asym.max(sol.asymmetry);
                cond = cond.max(sol.condition);
                edges[c] = sol.policies;
                models[c] = None;
            }
            values[id] = v;
        }
    }
    Ok(TreePolicy {
        edges,
        values,
        max_asymmetry: asym,
        max_condition: cond,
    })
}

/// Rolls the tree forward under `u = ū + ε(-K(x - x̄) - κ)` on every edge.
pub fn mm_forward_pass(problem: &MMProblem, tree: &ScenarioTree, policy: &TreePolicy, eps: f64) -> Result<ScenarioTree> {
    let mut out = tree.clone();
    for t in 0..tree.horizon() {
        let level = tree.level(t);
        let updates = par::map_slice(level, |&id| -> Result<Vec<(usize, JointControl, JointState)>> {
            let x = &out.nodes[id].state;
            let dx = &x.0 - &tree.nodes[id].state.0;
            tree.nodes[id]
                .children
                .iter()
                .map(|&c| {
                    let ubar = tree.nodes[c].control.as_ref().expect("edge control");
                    let per_player = policy.edges[c]
                        .iter()
                        .zip(&ubar.per_player)
                        .map(|(s, u)| u - (&s.gain * &dx + &s.offset) * eps)
                        .collect();
                    let u = JointControl::new(per_player)?;
                    let next = problem.dynamics.step(x, &u)?;
                    Ok((c, u, next))
                })
                .collect()
        });
        for res in updates {
            for (c, u, x) in res? {
                out.nodes[c].control = Some(u);
                out.nodes[c].state = x;
            }
        }
    }
    Ok(out)
}

/// Probability-weighted social cost over all edges.
pub fn tree_social_cost(problem: &MMProblem, tree: &ScenarioTree, include_kl: bool) -> f64 {
    let refs: Vec<Vec<PlayerReference>> = (0..problem.n_modes()).map(|k| problem.mode_refs(k)).collect();
    let mut total = 0.0;
    for node in &tree.nodes[1..] {
        let parent = &tree.nodes[node.parent.expect("non-root node")];
        let u = node.control.as_ref().expect("edge control");
        let x = &parent.state;
        let mut c = problem.cost.total(x, u);
        if include_kl {
            for (i, r) in refs[node.mode].iter().enumerate() {
                let l = problem.lambda.get(i);
                if l > 0.0 {
                    c += l * r.penalty(parent.t, &x.0, &u.per_player[i]);
                }
            }
        }
        total += node.probability * c;
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

#[derive(Clone)]
struct TreePlan<'a> {
    problem: &'a MMProblem,
    tree: ScenarioTree,
}

impl Plan for TreePlan<'_> {
    type Policy = TreePolicy;

    fn backward(&self) -> Result<TreePolicy> {
        mm_backward_pass(self.problem, &self.tree)
    }

    fn forward(&self, policy: &TreePolicy, eps: f64) -> Result<Self> {
        Ok(TreePlan {
            problem: self.problem,
            tree: mm_forward_pass(self.problem, &self.tree, policy, eps)?,
        })
    }

    fn social_cost(&self, include_kl: bool) -> f64 {
        tree_social_cost(self.problem, &self.tree, include_kl)
    }

    fn distance(&self, other: &Self) -> f64 {
        self.tree.max_state_deviation(&other.tree)
    }
}

/// One player's mixture policy at a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct GMMPolicy {
    /// Absolute-coordinate components `N(-K x - κ, Σ)`.
    pub components: Vec<PolicyStage>,
    pub modes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GMMPolicy {
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut m = DVector::zeros(self.components[0].offset.len());
        for (c, w) in self.components.iter().zip(&self.weights) {
            m += c.mean(x) * *w;
        }
        m
    }
}

/// Result of a scenario-tree solve.
#[derive(Debug, Clone)]
pub struct MMSolution {
    pub tree: ScenarioTree,
    pub tree_policy: TreePolicy,
    /// Per-player root policies in absolute coordinates.
    pub root_policy: Vec<GMMPolicy>,
    pub iterations_used: usize,
    pub converged: bool,
    pub social_cost_history: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

fn root_policies(problem: &MMProblem, tree: &ScenarioTree, policy: &TreePolicy) -> Vec<GMMPolicy> {
    let root = tree.root();
    (0..problem.n_players())
        .map(|i| {
            let mut out = GMMPolicy {
                components: vec![],
                modes: vec![],
                weights: vec![],
            };
            for &c in &root.children {
                let s = &policy.edges[c][i];
                let u = &tree.nodes[c].control.as_ref().expect("edge control").per_player[i];
                out.components.push(PolicyStage {
                    gain: s.gain.clone(),
                    offset: &s.offset - &s.gain * &root.state.0 - u,
                    cov: s.cov.clone(),
                });
                out.modes.push(tree.nodes[c].mode);
                out.weights.push(tree.nodes[c].weight);
            }
            out
        })
        .collect()
}

/// Solves the scenario-tree game from `x0`.
pub fn solve_mm(problem: &MMProblem, x0: &JointState, initial_controls: Option<&[JointControl]>, config: &LQLConfig) -> Result<MMSolution> {
    let tree = build_tree(problem, x0, initial_controls)?;
    let out = run_lql(TreePlan { problem, tree }, config)?;
    let tree = out.plan.tree;
    Ok(MMSolution {
        root_policy: root_policies(problem, &tree, &out.policy),
        tree,
        tree_policy: out.policy,
        iterations_used: out.iterations,
        converged: out.converged,
        social_cost_history: out.history,
        trace: out.trace,
    })
}

/// Draws one joint root action: each player picks a component by weight, then
/// samples that component's Gaussian at `x`.
pub fn sample_root_action(policy: &[GMMPolicy], x: &JointState, rng: &mut dyn RngCore) -> Result<JointControl> {
    let per_player = policy
        .iter()
        .map(|p| {
            if p.components.is_empty() {
                return Err(KlError::Precondition("empty mixture policy".into()));
            }
            let k = sample_index(&p.weights, &mut *rng);
            let c = &p.components[k];
            Ok(gaussian_sample(&c.mean(&x.0), &c.cov, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    JointControl::new(per_player)
}
