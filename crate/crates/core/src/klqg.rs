//! Exact feedback Nash equilibria of KL-regularized linear-quadratic-Gaussian games.
//!
//! Player `i` minimizes `E Σ_t [l^i(x_t, u_t) + λ^i KL(π^i_t(·|x_t) || π̃^i_t(·|x_t))]`
//! under `x_{t+1} = A x + Σ_j B^j u^j + c + w`. Every equilibrium policy is
//! `N(-K x - κ, Σ)` and every value function is `½xᵀZx + zᵀx + const`, computed
//! backward from `Z_T = 0`, `z_T = 0`.

use nalgebra::{DMatrix, DVector};

use crate::cost::QuadraticStageCost;
use crate::dynamics::LinearGameStage;
use crate::error::{dim_err, KlError, Result};
use crate::linalg::{max_abs, max_asymmetry, norm1, spd_inverse, symmetrize};
use crate::reference::{gaussian_kl, FeedbackGaussianRef, GaussianRef};

/// Condition estimate above which the stacked Riccati system is reported singular.
pub const MAX_CONDITION: f64 = 1e12;

/// `N(-K x - κ, Σ)` at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStage {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PolicyStage {
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gain * x) - &self.offset
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        PolicyStage {
            gain: DMatrix::zeros(m, n),
            offset: DVector::zeros(m),
            cov: DMatrix::zeros(m, m),
        }
    }

    /// Largest entry-wise difference in gain, offset and covariance.
    pub fn max_deviation(&self, other: &PolicyStage) -> f64 {
        max_abs(&(&self.gain - &other.gain))
            .max((&self.offset - &other.offset).amax())
            .max(max_abs(&(&self.cov - &other.cov)))
    }
}

/// One player's time-varying affine Gaussian policy. `deterministic` marks the
/// unregularized case, whose covariances are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianPolicy {
    pub stages: Vec<PolicyStage>,
    pub deterministic: bool,
}

impl AffineGaussianPolicy {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, t: usize) -> &PolicyStage {
        &self.stages[t]
    }

    pub fn mean(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        self.stages[t].mean(x)
    }

    pub fn max_deviation(&self, other: &AffineGaussianPolicy) -> f64 {
        self.stages
            .iter()
            .zip(&other.stages)
            .map(|(a, b)| a.max_deviation(b))
            .fold(0.0, f64::max)
    }
}

/// Value parameters `(Z_t, z_t)` for `t = 0..=T`; the last entry is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueQuadratic {
    pub z_mat: Vec<DMatrix<f64>>,
    pub z_vec: Vec<DVector<f64>>,
}

impl ValueQuadratic {
    pub fn at(&self, t: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.z_mat[t], &self.z_vec[t])
    }

    pub fn max_deviation(&self, other: &ValueQuadratic) -> f64 {
        let a = self
            .z_mat
            .iter()
            .zip(&other.z_mat)
            .map(|(x, y)| max_abs(&(x - y)))
            .fold(0.0, f64::max);
        let b = self
            .z_vec
            .iter()
            .zip(&other.z_vec)
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max);
        a.max(b)
    }
}

/// Per-player regularization weights `λ^i >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct KLWeights {
    lambda: Vec<f64>,
}

impl KLWeights {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(KlError::Precondition("every lambda must be finite and >= 0".into()));
        }
        Ok(KLWeights { lambda })
    }

    pub fn uniform(n_players: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; n_players])
    }

    pub fn zeros(n_players: usize) -> Self {
        KLWeights {
            lambda: vec![0.0; n_players],
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambda
    }
}

/// A player's reference at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceStage {
    Open {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    Feedback {
        gain: DMatrix<f64>,
        offset: DVector<f64>,
        cov: DMatrix<f64>,
    },
    /// No reference; only valid for players with `λ = 0`.
    Absent,
}

impl ReferenceStage {
    pub fn cov(&self) -> Option<&DMatrix<f64>> {
        match self {
            ReferenceStage::Open { cov, .. } | ReferenceStage::Feedback { cov, .. } => Some(cov),
            ReferenceStage::Absent => None,
        }
    }

    pub fn mean_at(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            ReferenceStage::Open { mean, .. } => Some(mean.clone()),
            ReferenceStage::Feedback { gain, offset, .. } => Some(-(gain * x) - offset),
            ReferenceStage::Absent => None,
        }
    }
}

/// A player's reference over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Open(GaussianRef),
    Feedback(FeedbackGaussianRef),
    Absent,
}

impl Reference {
    pub fn stage(&self, t: usize) -> ReferenceStage {
        match self {
            Reference::Open(g) => ReferenceStage::Open {
                mean: g.mean(t).clone(),
                cov: g.cov(t).clone(),
            },
            Reference::Feedback(f) => ReferenceStage::Feedback {
                gain: f.gain(t).clone(),
                offset: f.offset(t).clone(),
                cov: f.cov(t).clone(),
            },
            Reference::Absent => ReferenceStage::Absent,
        }
    }
}

impl From<GaussianRef> for Reference {
    fn from(g: GaussianRef) -> Self {
        Reference::Open(g)
    }
}

impl From<FeedbackGaussianRef> for Reference {
    fn from(f: FeedbackGaussianRef) -> Self {
        Reference::Feedback(f)
    }
}

/// Output of one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSolution {
    pub policies: Vec<PolicyStage>,
    pub values: Vec<(DMatrix<f64>, DVector<f64>)>,
    /// Largest asymmetry of any `Z` before symmetrization.
    pub asymmetry: f64,
    /// Condition estimate of the row-equilibrated stacked system.
    pub condition: f64,
}

/// Equilibrium of a whole game.
#[derive(Debug, Clone, PartialEq)]
pub struct KlqgSolution {
    pub policies: Vec<AffineGaussianPolicy>,
    pub values: Vec<ValueQuadratic>,
    pub max_asymmetry: f64,
    pub max_condition: f64,
}

fn check_stage_inputs(
    t: usize,
    stage: &LinearGameStage,
    costs: &[QuadraticStageCost],
    refs: &[ReferenceStage],
    lambda: &KLWeights,
    next: &[(DMatrix<f64>, DVector<f64>)],
) -> Result<()> {
    let n = stage.state_dim();
    let dims = stage.control_dims();
    let np = dims.len();
    if costs.len() != np || refs.len() != np || lambda.len() != np || next.len() != np {
        return dim_err(format!("t={t}: per-player inputs must all have {np} entries"));
    }
    for i in 0..np {
        costs[i].validate(i, n, &dims)?;
        if next[i].0.shape() != (n, n) || next[i].1.len() != n {
            return dim_err(format!("t={t}: successor value of player {i} has wrong shape"));
        }
        let m = dims[i];
        match &refs[i] {
            ReferenceStage::Open { mean, cov } => {
                if mean.len() != m || cov.shape() != (m, m) {
                    return dim_err(format!("t={t}: reference of player {i} has wrong shape"));
                }
            }
            ReferenceStage::Feedback { gain, offset, cov } => {
                if gain.shape() != (m, n) || offset.len() != m || cov.shape() != (m, m) {
                    return dim_err(format!("t={t}: feedback reference of player {i} has wrong shape"));
                }
            }
            ReferenceStage::Absent => {
                if lambda.get(i) > 0.0 {
                    return Err(KlError::Precondition(format!(
                        "player {i} has lambda > 0 but no reference"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One backward step: given successor values `next[i] = (Z'_i, z'_i)`, solves the
/// stacked coupled Riccati system for every player's `(K, κ)`, the policy
/// covariances, and the current values.
pub fn solve_stage(
    t: usize,
    stage: &LinearGameStage,
    costs: &[QuadraticStageCost],
    refs: &[ReferenceStage],
    lambda: &KLWeights,
    next: &[(DMatrix<f64>, DVector<f64>)],
) -> Result<StageSolution> {
    check_stage_inputs(t, stage, costs, refs, lambda, next)?;
    let n = stage.state_dim();
    let dims = stage.control_dims();
    let np = dims.len();
    let offs = crate::game::offsets(&dims);
    let total: usize = dims.iter().sum();
    let (a, b, c) = (&stage.a, &stage.b, &stage.drift);

    // Reference precision per player (None when the KL term is inactive).
    let mut precision: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(np);
    for i in 0..np {
        if lambda.get(i) > 0.0 {
            let cov = refs[i].cov().ok_or_else(|| KlError::Precondition(format!("player {i} lacks a reference")))?;
            precision.push(Some(spd_inverse(cov).map_err(|e| e.with_context(format!("t={t}: reference covariance of player {i}")))?));
        } else {
            precision.push(None);
        }
    }

    let mut lhs = DMatrix::zeros(total, total);
    let mut rhs_k = DMatrix::zeros(total, n);
    let mut rhs_kappa = DVector::zeros(total);
    for i in 0..np {
        let (zn, zvn) = &next[i];
        let bt_z = b[i].transpose() * zn;
        for j in 0..np {
            let block = &bt_z * &b[j];
            lhs.view_mut((offs[i], offs[j]), (dims[i], dims[j])).copy_from(&block);
        }
        let mut diag = lhs.view((offs[i], offs[i]), (dims[i], dims[i])).into_owned() + &costs[i].r_uu[i];
        let mut row_k = &bt_z * a;
        let mut row_kappa = b[i].transpose() * (zvn + zn * c) + &costs[i].r_u[i];
        if let Some(p) = &precision[i] {
            let l = lambda.get(i);
            diag += p * l;
            match &refs[i] {
                ReferenceStage::Open { mean, .. } => row_kappa -= p * mean * l,
                ReferenceStage::Feedback { gain, offset, .. } => {
                    row_k += p * gain * l;
                    row_kappa += p * offset * l;
                }
                ReferenceStage::Absent => unreachable!("checked above"),
            }
        }
        lhs.view_mut((offs[i], offs[i]), (dims[i], dims[i])).copy_from(&diag);
        rhs_k.view_mut((offs[i], 0), (dims[i], n)).copy_from(&row_k);
        rhs_kappa.rows_mut(offs[i], dims[i]).copy_from(&row_kappa);
    }

    // Row equilibration keeps the condition estimate meaningful when players'
    // regularization weights differ by many orders of magnitude.
    for r in 0..total {
        let s = lhs.row(r).iter().map(|v| v.abs()).sum::<f64>();
        if !(s > 0.0 && s.is_finite()) {
            return Err(KlError::SingularRiccati { t, condition: f64::INFINITY });
        }
        lhs.row_mut(r).scale_mut(1.0 / s);
        rhs_k.row_mut(r).scale_mut(1.0 / s);
        rhs_kappa[r] /= s;
    }
    let lu = lhs.clone().lu();
    let inv = lu.try_inverse().ok_or(KlError::SingularRiccati { t, condition: f64::INFINITY })?;
    let condition = norm1(&lhs) * norm1(&inv);
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Err(KlError::SingularRiccati { t, condition });
    }
    let k_all = &inv * &rhs_k;
    let kappa_all = &inv * &rhs_kappa;

    let mut policies = Vec::with_capacity(np);
    let mut f = a.clone();
    let mut beta = DVector::zeros(n);
    for i in 0..np {
        let k = k_all.view((offs[i], 0), (dims[i], n)).into_owned();
        let kappa = kappa_all.rows(offs[i], dims[i]).into_owned();
        f -= &b[i] * &k;
        beta -= &b[i] * &kappa;
        let cov = match &precision[i] {
            Some(p) => {
                let l = lambda.get(i);
                let (zn, _) = &next[i];
                let curvature = &costs[i].r_uu[i] + b[i].transpose() * zn * &b[i] + p * l;
                let cov = spd_inverse(&curvature)
                    .map_err(|e| e.with_context(format!("t={t}: policy covariance of player {i}")))?
                    * l;
                symmetrize(&cov)
            }
            None => DMatrix::zeros(dims[i], dims[i]),
        };
        policies.push(PolicyStage { gain: k, offset: kappa, cov });
    }

    let mut values = Vec::with_capacity(np);
    let mut asymmetry = 0.0f64;
    let shift = &beta + c;
    for i in 0..np {
        let (zn, zvn) = &next[i];
        let cost = &costs[i];
        let mut z = cost.q_xx.clone() + f.transpose() * zn * &f;
        let mut zv = &cost.q_x + f.transpose() * (zvn + zn * &shift);
        for (j, pj) in policies.iter().enumerate() {
            let rk = &cost.r_uu[j] * &pj.gain;
            z += pj.gain.transpose() * &rk;
            zv += pj.gain.transpose() * (&cost.r_uu[j] * &pj.offset - &cost.r_u[j]);
        }
        if let Some(p) = &precision[i] {
            let l = lambda.get(i);
            let pi = &policies[i];
            let (d, delta) = match &refs[i] {
                ReferenceStage::Open { mean, .. } => (pi.gain.clone(), &pi.offset + mean),
                ReferenceStage::Feedback { gain, offset, .. } => (&pi.gain - gain, &pi.offset - offset),
                ReferenceStage::Absent => unreachable!("checked above"),
            };
            let pd = p * &d;
            z += d.transpose() * &pd * l;
            zv += d.transpose() * (p * delta) * l;
        }
        asymmetry = asymmetry.max(max_asymmetry(&z));
        values.push((symmetrize(&z), zv));
    }
    Ok(StageSolution {
        policies,
        values,
        asymmetry,
        condition,
    })
}

fn check_game(stages: &[LinearGameStage], costs: &[Vec<QuadraticStageCost>], n_refs: usize, lambda: &KLWeights) -> Result<()> {
    if stages.is_empty() {
        return Err(KlError::Precondition("horizon must be >= 1".into()));
    }
    if costs.len() != stages.len() {
        return dim_err(format!("{} cost stages for {} dynamics stages", costs.len(), stages.len()));
    }
    let np = stages[0].b.len();
    if n_refs != np || lambda.len() != np {
        return dim_err("need one reference and one lambda per player");
    }
    let dims = stages[0].control_dims();
    let n = stages[0].state_dim();
    for (t, s) in stages.iter().enumerate() {
        if s.state_dim() != n || s.control_dims() != dims {
            return dim_err(format!("stage {t} dimensions differ from stage 0"));
        }
    }
    Ok(())
}

/// Backward recursion over arbitrary per-player references.
pub fn solve_game(
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[Reference],
    lambda: &KLWeights,
) -> Result<KlqgSolution> {
    check_game(stages, costs, refs.len(), lambda)?;
    let staged: Vec<Vec<ReferenceStage>> = (0..stages.len()).map(|t| refs.iter().map(|r| r.stage(t)).collect()).collect();
    solve_game_staged(stages, costs, &staged, lambda)
}

/// Backward recursion with references given per step, indexed `[t][player]`.
pub fn solve_game_staged(
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[Vec<ReferenceStage>],
    lambda: &KLWeights,
) -> Result<KlqgSolution> {
    check_game(stages, costs, refs.first().map_or(0, |r| r.len()), lambda)?;
    if refs.len() != stages.len() {
        return dim_err(format!("{} reference stages for {} dynamics stages", refs.len(), stages.len()));
    }
    let horizon = stages.len();
    let n = stages[0].state_dim();
    let np = stages[0].b.len();
    let mut next: Vec<(DMatrix<f64>, DVector<f64>)> = vec![(DMatrix::zeros(n, n), DVector::zeros(n)); np];
    let mut policy_stages: Vec<Vec<PolicyStage>> = vec![Vec::with_capacity(horizon); np];
    let mut value_stages: Vec<Vec<(DMatrix<f64>, DVector<f64>)>> = vec![vec![next[0].clone()]; np];
    let mut max_asymmetry = 0.0f64;
    let mut max_condition = 0.0f64;
    for t in (0..horizon).rev() {
        let sol = solve_stage(t, &stages[t], &costs[t], &refs[t], lambda, &next)?;
        max_asymmetry = max_asymmetry.max(sol.asymmetry);
        max_condition = max_condition.max(sol.condition);
        for i in 0..np {
            policy_stages[i].push(sol.policies[i].clone());
            value_stages[i].push(sol.values[i].clone());
        }
        next = sol.values;
    }
    let policies = policy_stages
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.reverse();
            AffineGaussianPolicy {
                stages: s,
                deterministic: lambda.get(i) == 0.0,
            }
        })
        .collect();
    let values = value_stages
        .into_iter()
        .map(|mut v| {
            v.reverse();
            let (z_mat, z_vec) = v.into_iter().unzip();
            ValueQuadratic { z_mat, z_vec }
        })
        .collect();
    Ok(KlqgSolution {
        policies,
        values,
        max_asymmetry,
        max_condition,
    })
}

/// Equilibrium under open-loop Gaussian references `N(μ̃_t, Σ̃_t)`.
pub fn solve_klqg(
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[GaussianRef],
    lambda: &KLWeights,
) -> Result<KlqgSolution> {
    let refs: Vec<Reference> = refs.iter().cloned().map(Reference::Open).collect();
    solve_game(stages, costs, &refs, lambda)
}

/// Equilibrium under state-feedback Gaussian references `N(-K̃_t x - κ̃_t, Σ̃_t)`.
pub fn solve_klqg_feedback(
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[FeedbackGaussianRef],
    lambda: &KLWeights,
) -> Result<KlqgSolution> {
    let refs: Vec<Reference> = refs.iter().cloned().map(Reference::Feedback).collect();
    solve_game(stages, costs, &refs, lambda)
}

/// Largest absolute residual of the per-player first-order equations for `K` and
/// `κ`, rebuilt player by player (not from the stacked system) from the solution's
/// own successor values.
pub fn riccati_residual(
    solution: &KlqgSolution,
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[Reference],
    lambda: &KLWeights,
) -> f64 {
    let mut worst = 0.0f64;
    for (t, stage) in stages.iter().enumerate() {
        let np = stage.b.len();
        for i in 0..np {
            let (zn, zvn) = solution.values[i].at(t + 1);
            let bi = &stage.b[i];
            let pi = &solution.policies[i].stages[t];
            let mut own = &costs[t][i].r_uu[i] + bi.transpose() * zn * bi;
            let mut res_k = -(bi.transpose() * zn * &stage.a);
            let mut res_kappa = -(bi.transpose() * (zvn + zn * &stage.drift)) - &costs[t][i].r_u[i];
            let l = lambda.get(i);
            if l > 0.0 {
                let rs = refs[i].stage(t);
                let p = spd_inverse(rs.cov().expect("lambda > 0 requires a reference")).expect("validated reference");
                own += &p * l;
                match rs {
                    ReferenceStage::Open { mean, .. } => res_kappa += &p * mean * l,
                    ReferenceStage::Feedback { gain, offset, .. } => {
                        res_k -= &p * gain * l;
                        res_kappa -= &p * offset * l;
                    }
                    ReferenceStage::Absent => {}
                }
            }
            res_k += &own * &pi.gain;
            res_kappa += &own * &pi.offset;
            for j in (0..np).filter(|&j| j != i) {
                let pj = &solution.policies[j].stages[t];
                let coupling = bi.transpose() * zn * &stage.b[j];
                res_k += &coupling * &pj.gain;
                res_kappa += &coupling * &pj.offset;
            }
            worst = worst.max(max_abs(&res_k)).max(res_kappa.amax());
        }
    }
    worst
}

/// Stationarity of one player's one-step objective at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    /// Largest |∂J/∂μ| over the probe states.
    pub mean_residual: f64,
    /// Largest |∂J/∂Σ_ab| over the probe states; `None` when `λ = 0`.
    pub cov_residual: Option<f64>,
}

impl StationarityReport {
    pub fn max(&self) -> f64 {
        self.mean_residual.max(self.cov_residual.unwrap_or(0.0))
    }
}

/// Expected one-step objective of player `i` at state `x` when it plays `N(μ, Σ)`
/// and everyone else follows `solution`, with the successor value from `solution`
/// (state-independent constants dropped).
#[allow(clippy::too_many_arguments)]
fn one_step_objective(
    solution: &KlqgSolution,
    stage: &LinearGameStage,
    cost: &QuadraticStageCost,
    reference: &ReferenceStage,
    lambda: f64,
    t: usize,
    player: usize,
    x: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let (zn, zvn) = solution.values[player].at(t + 1);
    let bi = &stage.b[player];
    let mut next = &stage.a * x + &stage.drift + bi * mu;
    for (j, pj) in solution.policies.iter().enumerate() {
        if j != player {
            next += &stage.b[j] * pj.stages[t].mean(x);
        }
    }
    let r = &cost.r_uu[player];
    let mut value = 0.5 * mu.dot(&(r * mu)) + 0.5 * (r * sigma).trace() + cost.r_u[player].dot(mu);
    value += 0.5 * next.dot(&(zn * &next)) + zvn.dot(&next);
    value += 0.5 * (zn * bi * sigma * bi.transpose()).trace();
    if lambda > 0.0 {
        let ref_mean = reference.mean_at(x).expect("lambda > 0 requires a reference");
        let ref_cov = reference.cov().expect("lambda > 0 requires a reference");
        value += lambda * gaussian_kl(mu, sigma, &ref_mean, ref_cov)?;
    }
    Ok(value)
}

/// Five-point central difference of `f` at 0 with step `h`.
fn five_point(f: &dyn Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Finite-difference gradient of player `player`'s expected one-step objective
/// with respect to its own policy mean and (symmetric) covariance, at the solved
/// policy, probing the states `0, e_1, …, e_n`.
pub fn verify_stationarity(
    solution: &KlqgSolution,
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[Reference],
    lambda: &KLWeights,
    t: usize,
    player: usize,
) -> Result<StationarityReport> {
    let stage = &stages[t];
    let n = stage.state_dim();
    let cost = &costs[t][player];
    let reference = refs[player].stage(t);
    let l = lambda.get(player);
    let ps = &solution.policies[player].stages[t];
    let m = ps.offset.len();
    let mut mean_res = 0.0f64;
    let mut cov_res = 0.0f64;
    for probe in 0..=n {
        let mut x = DVector::zeros(n);
        if probe > 0 {
            x[probe - 1] = 1.0;
        }
        let mu0 = ps.mean(&x);
        let sigma0 = ps.cov.clone();
        let eval = |mu: &DVector<f64>, s: &DMatrix<f64>| one_step_objective(solution, stage, cost, &reference, l, t, player, &x, mu, s);
        for k in 0..m {
            let h = 1e-3 * mu0[k].abs().max(1.0);
            let g = five_point(
                &|d| {
                    let mut mu = mu0.clone();
                    mu[k] += d;
                    eval(&mu, &sigma0)
                },
                h,
            )?;
            mean_res = mean_res.max(g.abs());
        }
        if l > 0.0 {
            for a in 0..m {
                for b in a..m {
                    let scale = (sigma0[(a, a)] * sigma0[(b, b)]).sqrt();
                    let mut h = 2e-3 * scale;
                    let g = loop {
                        let attempt = five_point(
                            &|d| {
                                let mut s = sigma0.clone();
                                s[(a, b)] += d;
                                if a != b {
                                    s[(b, a)] += d;
                                }
                                eval(&mu0, &s)
                            },
                            h,
                        );
                        match attempt {
                            Ok(g) => break g,
                            Err(_) if h > 1e-8 * scale => h *= 0.25,
                            Err(e) => return Err(e),
                        }
                    };
                    // A symmetric perturbation moves two entries; report per entry.
                    let g = if a == b { g } else { 0.5 * g };
                    cov_res = cov_res.max(g.abs());
                }
            }
        }
    }
    Ok(StationarityReport {
        mean_residual: mean_res,
        cov_residual: (l > 0.0).then_some(cov_res),
    })
}

/// Closed-form expected total objective of `player` when every player follows
/// `policies` from `x_0 ~ N(x0_mean, x0_cov)` on the linear stages, including the
/// λ-weighted expected KL terms and process noise.
#[allow(clippy::too_many_arguments)]
pub fn expected_cost(
    policies: &[AffineGaussianPolicy],
    stages: &[LinearGameStage],
    costs: &[Vec<QuadraticStageCost>],
    refs: &[Reference],
    lambda: &KLWeights,
    x0_mean: &DVector<f64>,
    x0_cov: &DMatrix<f64>,
    player: usize,
) -> Result<f64> {
    let mut m = x0_mean.clone();
    let mut p = x0_cov.clone();
    let mut total = 0.0;
    for (t, stage) in stages.iter().enumerate() {
        let cost = &costs[t][player];
        total += 0.5 * (&cost.q_xx * &p).trace() + 0.5 * m.dot(&(&cost.q_xx * &m)) + cost.q_x.dot(&m);
        let mut f = stage.a.clone();
        let mut next_m = &stage.a * &m + &stage.drift;
        let mut input_cov = stage.noise_cov.clone();
        for (j, pol) in policies.iter().enumerate() {
            let ps = &pol.stages[t];
            let u_mean = ps.mean(&m);
            let u_cov = &ps.gain * &p * ps.gain.transpose() + &ps.cov;
            total += 0.5 * (&cost.r_uu[j] * &u_cov).trace() + 0.5 * u_mean.dot(&(&cost.r_uu[j] * &u_mean)) + cost.r_u[j].dot(&u_mean);
            f -= &stage.b[j] * &ps.gain;
            next_m += &stage.b[j] * &u_mean;
            input_cov += &stage.b[j] * &ps.cov * stage.b[j].transpose();
        }
        let l = lambda.get(player);
        if l > 0.0 {
            let ps = &policies[player].stages[t];
            let rs = refs[player].stage(t);
            let ref_cov = rs.cov().ok_or_else(|| KlError::Precondition("lambda > 0 requires a reference".into()))?;
            let (d, delta) = match &rs {
                ReferenceStage::Open { mean, .. } => (ps.gain.clone(), &ps.offset + mean),
                ReferenceStage::Feedback { gain, offset, .. } => (&ps.gain - gain, &ps.offset - offset),
                ReferenceStage::Absent => unreachable!(),
            };
            // KL at the mean state plus the spread of the mean mismatch over x.
            let zero = DVector::zeros(ps.offset.len());
            let kl_cov = gaussian_kl(&zero, &ps.cov, &zero, ref_cov)?;
            let prec = spd_inverse(ref_cov)?;
            let e = &d * &m + &delta;
            total += l * (kl_cov + 0.5 * e.dot(&(&prec * &e)) + 0.5 * (d.transpose() * &prec * &d * &p).trace());
        }
        p = symmetrize(&(&f * &p * f.transpose() + input_cov));
        m = next_m;
    }
    Ok(total)
}

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} f(x) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = (j + 1) as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

const GH_NODES: usize = 60;

/// The minimizer density `π*(u) ∝ exp(-Q(u)/λ) π̃(u)` for a Gaussian reference,
/// normalized by Gauss–Hermite quadrature centred on the mode of the log-integrand.
/// Supports one- and two-dimensional controls.
pub struct BellmanDensity<'a> {
    q_fn: &'a dyn Fn(&DVector<f64>) -> f64,
    ref_mean: DVector<f64>,
    ref_cov: DMatrix<f64>,
    reference: GaussianRef,
    lambda: f64,
    log_norm: f64,
}

impl<'a> BellmanDensity<'a> {
    pub fn new(q_fn: &'a dyn Fn(&DVector<f64>) -> f64, ref_mean: &DVector<f64>, ref_cov: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let m = ref_mean.len();
        if m == 0 || m > 2 {
            return Err(KlError::Unsupported(format!(
                "quadrature normalization supports 1- or 2-dimensional controls, got {m}"
            )));
        }
        if !(lambda > 0.0) {
            return Err(KlError::Precondition("lambda must be > 0".into()));
        }
        let reference = GaussianRef::constant(ref_mean.clone(), ref_cov.clone(), 1)?;
        let mut dens = BellmanDensity {
            q_fn,
            ref_mean: ref_mean.clone(),
            ref_cov: ref_cov.clone(),
            reference,
            lambda,
            log_norm: 0.0,
        };
        dens.log_norm = dens.log_normalizer()?;
        Ok(dens)
    }

    /// Unnormalized log-density `-Q(u)/λ + log π̃(u)`.
    fn log_integrand(&self, u: &DVector<f64>) -> f64 {
        use crate::reference::StochasticPolicy;
        -(self.q_fn)(u) / self.lambda + self.reference.log_density(u, &DVector::zeros(0), 0)
    }

    fn grad_hess(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = u.len();
        let scale = self.ref_cov.diagonal().map(|v| v.sqrt());
        let f0 = self.log_integrand(u);
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for a in 0..m {
            let ha = 1e-3 * scale[a];
            let mut up = u.clone();
            let mut um = u.clone();
            up[a] += ha;
            um[a] -= ha;
            let (fp, fm) = (self.log_integrand(&up), self.log_integrand(&um));
            g[a] = (fp - fm) / (2.0 * ha);
            h[(a, a)] = (fp - 2.0 * f0 + fm) / (ha * ha);
            for b in 0..a {
                let hb = 1e-3 * scale[b];
                let shift = |sa: f64, sb: f64| {
                    let mut v = u.clone();
                    v[a] += sa * ha;
                    v[b] += sb * hb;
                    self.log_integrand(&v)
                };
                let val = (shift(1.0, 1.0) - shift(1.0, -1.0) - shift(-1.0, 1.0) + shift(-1.0, -1.0)) / (4.0 * ha * hb);
                h[(a, b)] = val;
                h[(b, a)] = val;
            }
        }
        (g, h)
    }

    fn log_normalizer(&self) -> Result<f64> {
        let m = self.ref_mean.len();
        // Newton search for the mode of the log-integrand.
        let mut c = self.ref_mean.clone();
        let mut fc = self.log_integrand(&c);
        for _ in 0..100 {
            let (g, h) = self.grad_hess(&c);
            let step = match (-&h).cholesky() {
                Some(ch) => ch.solve(&g),
                None => &g * 1e-2,
            };
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = &c + &step * alpha;
                let fcand = self.log_integrand(&cand);
                if fcand.is_finite() && fcand >= fc {
                    moved = (&cand - &c).amax() > 0.0;
                    c = cand;
                    fc = fcand;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let (_, h) = self.grad_hess(&c);
        let spread = spd_inverse(&-h).map_err(|e| e.with_context("quadrature: log-integrand has no maximum"))?;
        let l = crate::linalg::cholesky_lower(&spread)?;
        let (nodes, weights) = gauss_hermite(GH_NODES);
        let sqrt2 = std::f64::consts::SQRT_2;
        let log_jac = l.diagonal().iter().map(|d| (sqrt2 * d).ln()).sum::<f64>();
        let mut terms = Vec::new();
        let idx: Vec<Vec<usize>> = if m == 1 {
            (0..GH_NODES).map(|a| vec![a]).collect()
        } else {
            (0..GH_NODES).flat_map(|a| (0..GH_NODES).map(move |b| vec![a, b])).collect()
        };
        for k in idx {
            let y = DVector::from_iterator(m, k.iter().map(|&a| nodes[a]));
            let u = &c + &l * &y * sqrt2;
            let logw: f64 = k.iter().map(|&a| weights[a].ln()).sum();
            terms.push(logw + y.dot(&y) + self.log_integrand(&u) - fc);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|v| (v - mx).exp()).sum();
        Ok(fc + mx + s.ln() + log_jac)
    }

    pub fn log_density(&self, u: &DVector<f64>) -> f64 {
        self.log_integrand(u) - self.log_norm
    }

    pub fn density(&self, u: &DVector<f64>) -> f64 {
        self.log_density(u).exp()
    }
}

/// Density of the minimizer of `E_π[Q] + λ KL(π || N(μ̃, Σ̃))` at `u`.
pub fn bellman_optimal_policy_density(
    q_fn: &dyn Fn(&DVector<f64>) -> f64,
    ref_mean: &DVector<f64>,
    ref_cov: &DMatrix<f64>,
    lambda: f64,
    u: &DVector<f64>,
) -> Result<f64> {
    Ok(BellmanDensity::new(q_fn, ref_mean, ref_cov, lambda)?.density(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::StochasticPolicy;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn scalar_game(horizon: usize) -> (Vec<LinearGameStage>, Vec<Vec<QuadraticStageCost>>) {
        let stage = LinearGameStage::new(s(1.0), vec![s(1.0)], DVector::zeros(1), s(0.0)).unwrap();
        let cost = QuadraticStageCost::pure(s(1.0), vec![s(1.0)]);
        (vec![stage; horizon], vec![vec![cost]; horizon])
    }

    #[test]
    fn scalar_riccati_example() {
        let (stages, costs) = scalar_game(2);
        let sol = solve_game(&stages, &costs, &[Reference::Absent], &KLWeights::zeros(1)).unwrap();
        let p = &sol.policies[0];
        assert!(p.deterministic);
        assert_eq!(p.stages[1].gain[(0, 0)], 0.0);
        assert_eq!(sol.values[0].z_mat[1][(0, 0)], 1.0);
        assert!((p.stages[0].gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((sol.values[0].z_mat[0][(0, 0)] - 1.5).abs() < 1e-15);
        assert_eq!(sol.values[0].z_mat[2][(0, 0)], 0.0);
    }

    #[test]
    fn covariance_example() {
        let (stages, costs) = scalar_game(1);
        let r = GaussianRef::constant(DVector::zeros(1), s(1.0), 1).unwrap();
        let sol = solve_klqg(&stages, &costs, &[r], &KLWeights::uniform(1, 1.0).unwrap()).unwrap();
        assert!((sol.policies[0].stages[0].cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_reference_rejected() {
        let (stages, costs) = scalar_game(2);
        let err = solve_game(&stages, &costs, &[Reference::Absent], &KLWeights::uniform(1, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, KlError::Precondition(_)));
    }

    #[test]
    fn singular_system_reported() {
        // Two players driving the same channel with identical costs and no own
        // control curvature beyond the floor cannot be separated.
        let b = DMatrix::from_element(1, 1, 1.0);
        let stage = LinearGameStage::new(s(1.0), vec![b.clone(), b], DVector::zeros(1), s(0.0)).unwrap();
        let tiny = 1e-9;
        let cost = |i: usize| {
            let mut r = vec![s(0.0), s(0.0)];
            r[i] = s(tiny);
            QuadraticStageCost::pure(s(1e9), r)
        };
        let stages = vec![stage; 3];
        let costs = vec![vec![cost(0), cost(1)]; 3];
        let err = solve_game(&stages, &costs, &[Reference::Absent, Reference::Absent], &KLWeights::zeros(2)).unwrap_err();
        assert!(matches!(err, KlError::SingularRiccati { t: 1, .. }), "{err:?}");
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(GH_NODES);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - sqrt_pi).abs() < 1e-13);
        assert!((m2 - sqrt_pi / 2.0).abs() < 1e-13);
        assert!((m4 - 0.75 * sqrt_pi).abs() < 1e-12);
    }

    #[test]
    fn bellman_density_limits() {
        let mean = DVector::from_vec(vec![0.3]);
        let cov = s(0.5);
        let g = GaussianRef::constant(mean.clone(), cov.clone(), 1).unwrap();
        let zero = |_: &DVector<f64>| 0.0;
        let quad = |u: &DVector<f64>| 2.0 * (u[0] - 1.0).powi(2);
        let flat = BellmanDensity::new(&zero, &mean, &cov, 1.0).unwrap();
        let heavy = BellmanDensity::new(&quad, &mean, &cov, 1e9).unwrap();
        for k in -10..=10 {
            let u = DVector::from_vec(vec![0.3 + 0.2 * k as f64]);
            let r = g.log_density(&u, &DVector::zeros(0), 0).exp();
            assert!((flat.density(&u) - r).abs() < 1e-12);
            assert!((heavy.density(&u) - r).abs() < 1e-8);
        }
        let three = DVector::zeros(3);
        assert!(matches!(
            BellmanDensity::new(&zero, &three, &DMatrix::identity(3, 3), 1.0),
            Err(KlError::Unsupported(_))
        ));
    }

    #[test]
    fn bellman_density_2d_matches_completed_square() {
        let mean = DVector::from_vec(vec![0.5, -0.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.2, 0.4]);
        let hq = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let gq = DVector::from_vec(vec![0.3, -1.0]);
        let lambda = 0.7;
        let q = |u: &DVector<f64>| 0.5 * u.dot(&(&hq * u)) + gq.dot(u);
        let dens = BellmanDensity::new(&q, &mean, &cov, lambda).unwrap();
        let prec = spd_inverse(&cov).unwrap();
        let post_cov = spd_inverse(&(&hq / lambda + &prec)).unwrap();
        let post_mean = &post_cov * (&prec * &mean - &gq / lambda);
        let post = GaussianRef::constant(post_mean, post_cov, 1).unwrap();
        for a in -3..=3 {
            for b in -3..=3 {
                let u = DVector::from_vec(vec![0.4 * a as f64, 0.4 * b as f64]);
                let expect = post.log_density(&u, &DVector::zeros(0), 0);
                assert!((dens.log_density(&u) - expect).abs() < 1e-8);
            }
        }
    }
}
