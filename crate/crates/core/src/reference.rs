//! Reference policies: open-loop and state-feedback Gaussians, Gaussian mixtures,
//! and the fits that turn an arbitrary stochastic policy into a Gaussian the
//! exact solver can consume.

use std::f64::consts::PI;
use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::dynamics::Dynamics;
use crate::error::{dim_err, KlError, Result};
use crate::game::Trajectory;
use crate::linalg::{all_finite_mat, all_finite_vec, cholesky_lower, eigen_floor, logdet_spd, max_asymmetry, min_eigenvalue, symmetrize};

/// Eigenvalue floor for every reference covariance.
pub const COV_FLOOR: f64 = 1e-9;

const LAPLACE_MAX_STEPS: usize = 50;
const LAPLACE_GRAD_TOL: f64 = 1e-8;

/// A per-timestep conditional control density `π(u | x, t)`.
pub trait StochasticPolicy: Send + Sync {
    fn control_dim(&self) -> usize;

    fn log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64;

    fn sample(&self, x: &DVector<f64>, t: usize, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Gradient of the log-density in `u`. Central differences unless overridden.
    fn grad_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DVector<f64> {
        let m = u.len();
        DVector::from_fn(m, |k, _| {
            let h = 1e-5 * u[k].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += h;
            um[k] -= h;
            (self.log_density(&up, x, t) - self.log_density(&um, x, t)) / (2.0 * h)
        })
    }

    /// Hessian of the log-density in `u`. Central differences of the gradient unless overridden.
    fn hess_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DMatrix<f64> {
        let m = u.len();
        let mut h = DMatrix::zeros(m, m);
        for k in 0..m {
            let step = 1e-4 * u[k].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += step;
            um[k] -= step;
            let col = (self.grad_log_density(&up, x, t) - self.grad_log_density(&um, x, t)) / (2.0 * step);
            h.set_column(k, &col);
        }
        symmetrize(&h)
    }
}

fn check_cov(cov: &DMatrix<f64>, m: usize, what: &str) -> Result<()> {
    if cov.shape() != (m, m) {
        return dim_err(format!("{what}: covariance must be {m}x{m}"));
    }
    if !all_finite_mat(cov) {
        return Err(KlError::Numerical(format!("{what}: non-finite covariance")));
    }
    if max_asymmetry(cov) > 1e-12 * (1.0 + crate::linalg::max_abs(cov)) {
        return Err(KlError::Precondition(format!("{what}: covariance not symmetric")));
    }
    if min_eigenvalue(cov) < COV_FLOOR * (1.0 - 1e-6) {
        return Err(KlError::Precondition(format!(
            "{what}: covariance minimum eigenvalue below {COV_FLOOR:e}"
        )));
    }
    Ok(())
}

fn gaussian_log_pdf(u: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let m = u.len() as f64;
    let Some(chol) = cov.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let d = u - mean;
    let w = chol.solve(&d);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d.dot(&w) + logdet + m * (2.0 * PI).ln())
}

pub(crate) fn gaussian_sample(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut *rng));
    match cov.clone().cholesky() {
        Some(c) => mean + c.l() * z,
        None => mean.clone(),
    }
}

fn clamp_t<T>(v: &[T], t: usize) -> &T {
    &v[t.min(v.len() - 1)]
}

/// Open-loop Gaussian reference `N(μ̃_t, Σ̃_t)`; timesteps past the end reuse the last entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRef {
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl GaussianRef {
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.is_empty() || means.len() != covs.len() {
            return dim_err("reference needs matching, non-empty mean and covariance schedules");
        }
        let m = means[0].len();
        for (t, (mu, cov)) in means.iter().zip(&covs).enumerate() {
            if mu.len() != m {
                return dim_err(format!("reference mean at t={t} has wrong length"));
            }
            if !all_finite_vec(mu) {
                return Err(KlError::Numerical(format!("reference mean at t={t} is not finite")));
            }
            check_cov(cov, m, &format!("reference at t={t}"))?;
        }
        Ok(GaussianRef { means, covs })
    }

    pub fn constant(mean: DVector<f64>, cov: DMatrix<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![mean; horizon.max(1)], vec![cov; horizon.max(1)])
    }

    /// Zero-mean isotropic reference with variance `sigma2`; large values make the
    /// KL term an entropy bonus.
    pub fn uninformative(control_dim: usize, sigma2: f64, horizon: usize) -> Result<Self> {
        Self::constant(
            DVector::zeros(control_dim),
            DMatrix::identity(control_dim, control_dim) * sigma2,
            horizon,
        )
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, t: usize) -> &DVector<f64> {
        clamp_t(&self.means, t)
    }

    pub fn cov(&self, t: usize) -> &DMatrix<f64> {
        clamp_t(&self.covs, t)
    }
}

impl StochasticPolicy for GaussianRef {
    fn control_dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_density(&self, u: &DVector<f64>, _x: &DVector<f64>, t: usize) -> f64 {
        gaussian_log_pdf(u, self.mean(t), self.cov(t))
    }

    fn sample(&self, _x: &DVector<f64>, t: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        gaussian_sample(self.mean(t), self.cov(t), rng)
    }

    fn grad_log_density(&self, u: &DVector<f64>, _x: &DVector<f64>, t: usize) -> DVector<f64> {
        match self.cov(t).clone().cholesky() {
            Some(c) => -c.solve(&(u - self.mean(t))),
            None => DVector::zeros(u.len()),
        }
    }

    fn hess_log_density(&self, u: &DVector<f64>, _x: &DVector<f64>, t: usize) -> DMatrix<f64> {
        match self.cov(t).clone().cholesky() {
            Some(c) => -symmetrize(&c.inverse()),
            None => DMatrix::zeros(u.len(), u.len()),
        }
    }
}

/// State-feedback Gaussian reference `N(-K̃_t x - κ̃_t, Σ̃_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGaussianRef {
    gains: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl FeedbackGaussianRef {
    pub fn new(gains: Vec<DMatrix<f64>>, offsets: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.is_empty() || gains.len() != offsets.len() || gains.len() != covs.len() {
            return dim_err("feedback reference needs matching, non-empty schedules");
        }
        let (m, n) = gains[0].shape();
        for t in 0..gains.len() {
            if gains[t].shape() != (m, n) || offsets[t].len() != m {
                return dim_err(format!("feedback reference shapes inconsistent at t={t}"));
            }
            if !all_finite_mat(&gains[t]) || !all_finite_vec(&offsets[t]) {
                return Err(KlError::Numerical(format!("feedback reference not finite at t={t}")));
            }
            check_cov(&covs[t], m, &format!("feedback reference at t={t}"))?;
        }
        Ok(FeedbackGaussianRef { gains, offsets, covs })
    }

    pub fn constant(gain: DMatrix<f64>, offset: DVector<f64>, cov: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let h = horizon.max(1);
        Self::new(vec![gain; h], vec![offset; h], vec![cov; h])
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        clamp_t(&self.gains, t)
    }

    pub fn offset(&self, t: usize) -> &DVector<f64> {
        clamp_t(&self.offsets, t)
    }

    pub fn cov(&self, t: usize) -> &DMatrix<f64> {
        clamp_t(&self.covs, t)
    }

    pub fn mean_at(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        -(self.gain(t) * x) - self.offset(t)
    }
}

impl StochasticPolicy for FeedbackGaussianRef {
    fn control_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    fn log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64 {
        gaussian_log_pdf(u, &self.mean_at(x, t), self.cov(t))
    }

    fn sample(&self, x: &DVector<f64>, t: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        gaussian_sample(&self.mean_at(x, t), self.cov(t), rng)
    }

    fn grad_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DVector<f64> {
        match self.cov(t).clone().cholesky() {
            Some(c) => -c.solve(&(u - self.mean_at(x, t))),
            None => DVector::zeros(u.len()),
        }
    }

    fn hess_log_density(&self, u: &DVector<f64>, _x: &DVector<f64>, t: usize) -> DMatrix<f64> {
        match self.cov(t).clone().cholesky() {
            Some(c) => -symmetrize(&c.inverse()),
            None => DMatrix::zeros(u.len(), u.len()),
        }
    }
}

/// One mixture component.
#[derive(Debug, Clone, PartialEq)]
pub enum RefComponent {
    Open(GaussianRef),
    Feedback(FeedbackGaussianRef),
}

impl RefComponent {
    pub fn mean_at(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        match self {
            RefComponent::Open(g) => g.mean(t).clone(),
            RefComponent::Feedback(f) => f.mean_at(x, t),
        }
    }

    pub fn cov(&self, t: usize) -> &DMatrix<f64> {
        match self {
            RefComponent::Open(g) => g.cov(t),
            RefComponent::Feedback(f) => f.cov(t),
        }
    }

    fn policy(&self) -> &dyn StochasticPolicy {
        match self {
            RefComponent::Open(g) => g,
            RefComponent::Feedback(f) => f,
        }
    }
}

impl StochasticPolicy for RefComponent {
    fn control_dim(&self) -> usize {
        self.policy().control_dim()
    }
    fn log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64 {
        self.policy().log_density(u, x, t)
    }
    fn sample(&self, x: &DVector<f64>, t: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        self.policy().sample(x, t, rng)
    }
    fn grad_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DVector<f64> {
        self.policy().grad_log_density(u, x, t)
    }
    fn hess_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DMatrix<f64> {
        self.policy().hess_log_density(u, x, t)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gaussian mixture reference with per-timestep weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GMMRef {
    modes: Vec<RefComponent>,
    weights: Vec<Vec<f64>>,
}

impl GMMRef {
    pub fn new(modes: Vec<RefComponent>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if modes.is_empty() || weights.is_empty() {
            return dim_err("mixture needs at least one mode and one weight row");
        }
        let m = modes[0].control_dim();
        if modes.iter().any(|c| c.control_dim() != m) {
            return dim_err("mixture components disagree on control dimension");
        }
        for (t, row) in weights.iter().enumerate() {
            if row.len() != modes.len() {
                return dim_err(format!("weight row at t={t} has {} entries for {} modes", row.len(), modes.len()));
            }
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(KlError::Precondition(format!("mixture weights at t={t} must be >= 0")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(KlError::Precondition(format!("mixture weights at t={t} sum to {s}, not 1")));
            }
        }
        Ok(GMMRef { modes, weights })
    }

    /// Time-invariant weights.
    pub fn constant(modes: Vec<RefComponent>, weights: Vec<f64>) -> Result<Self> {
        Self::new(modes, vec![weights])
    }

    pub fn single(mode: RefComponent) -> Self {
        GMMRef {
            modes: vec![mode],
            weights: vec![vec![1.0]],
        }
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[RefComponent] {
        &self.modes
    }

    pub fn mode(&self, k: usize) -> &RefComponent {
        &self.modes[k]
    }

    pub fn weights(&self, t: usize) -> &[f64] {
        clamp_t(&self.weights, t)
    }

    /// The `k` highest-weight modes at `t` (ties to the lower index) with weights
    /// renormalized over the selection.
    pub fn top_modes(&self, t: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.n_modes() {
            return Err(KlError::Precondition(format!(
                "cannot select {k} of {} modes",
                self.n_modes()
            )));
        }
        let w = self.weights(t);
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        idx.truncate(k);
        let total: f64 = idx.iter().map(|&i| w[i]).sum();
        if total <= 0.0 {
            return Err(KlError::Precondition("selected modes carry zero weight".into()));
        }
        Ok(idx.into_iter().map(|i| (i, w[i] / total)).collect())
    }

    /// Posterior mode probabilities of `u` under the mixture at `(x, t)`.
    pub fn responsibilities(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> Vec<f64> {
        let logs: Vec<f64> = self
            .modes
            .iter()
            .zip(self.weights(t))
            .map(|(c, &w)| w.ln() + c.log_density(u, x, t))
            .collect();
        let total = log_sum_exp(&logs);
        logs.iter().map(|l| (l - total).exp()).collect()
    }
}

impl StochasticPolicy for GMMRef {
    fn control_dim(&self) -> usize {
        self.modes[0].control_dim()
    }

    fn log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64 {
        let logs: Vec<f64> = self
            .modes
            .iter()
            .zip(self.weights(t))
            .map(|(c, &w)| w.ln() + c.log_density(u, x, t))
            .collect();
        log_sum_exp(&logs)
    }

    fn sample(&self, x: &DVector<f64>, t: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        let k = sample_index(self.weights(t), rng);
        self.modes[k].sample(x, t, rng)
    }

    fn grad_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DVector<f64> {
        let r = self.responsibilities(u, x, t);
        let mut g = DVector::zeros(u.len());
        for (c, rk) in self.modes.iter().zip(r) {
            if rk > 0.0 {
                g += c.grad_log_density(u, x, t) * rk;
            }
        }
        g
    }

    fn hess_log_density(&self, u: &DVector<f64>, x: &DVector<f64>, t: usize) -> DMatrix<f64> {
        let r = self.responsibilities(u, x, t);
        let m = u.len();
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for (c, rk) in self.modes.iter().zip(r) {
            if rk > 0.0 {
                let gk = c.grad_log_density(u, x, t);
                h += (c.hess_log_density(u, x, t) + &gk * gk.transpose()) * rk;
                g += gk * rk;
            }
        }
        symmetrize(&(h - &g * g.transpose()))
    }
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_index(weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let total: f64 = weights.iter().sum();
    let draw: f64 = Uniform::new(0.0, total).map(|d| d.sample(&mut *rng)).unwrap_or(0.0);
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc && *w > 0.0 {
            return k;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// KL divergence `KL(N(μp, Σp) || N(μq, Σq))`, clamped at zero against round-off.
pub fn gaussian_kl(p_mean: &DVector<f64>, p_cov: &DMatrix<f64>, q_mean: &DVector<f64>, q_cov: &DMatrix<f64>) -> Result<f64> {
    let k = p_mean.len();
    if q_mean.len() != k || p_cov.shape() != (k, k) || q_cov.shape() != (k, k) {
        return dim_err("gaussian_kl: inconsistent dimensions");
    }
    let lq = cholesky_lower(q_cov)?;
    let logdet_p = logdet_spd(p_cov)?;
    let logdet_q = 2.0 * lq.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let chol_q = nalgebra::linalg::Cholesky::new(symmetrize(q_cov))
        .ok_or_else(|| KlError::Numerical("gaussian_kl: covariance not SPD".into()))?;
    let trace = chol_q.solve(&symmetrize(p_cov)).trace();
    let d = q_mean - p_mean;
    let maha = d.dot(&chol_q.solve(&d));
    Ok((0.5 * (trace + maha - k as f64 + logdet_q - logdet_p)).max(0.0))
}

/// Laplace approximation of `policy` along the nominal: for each `t`, Newton ascent
/// on `log π(· | x̄_t, t)` started from player `player`'s nominal control, with the
/// negative inverse Hessian at the located mode as covariance.
pub fn laplace_fit(policy: &dyn StochasticPolicy, nominal: &Trajectory, player: usize) -> Result<GaussianRef> {
    let horizon = nominal.horizon();
    let mut means = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = &nominal.state(t).0;
        let u0 = nominal.control(t).per_player.get(player).ok_or_else(|| {
            KlError::Dimension(format!("nominal has no control for player {player}"))
        })?;
        if u0.len() != policy.control_dim() {
            return dim_err("policy control dimension differs from the nominal control");
        }
        let (mean, cov) = laplace_at(policy, x, t, u0)?;
        means.push(mean);
        covs.push(cov);
    }
    GaussianRef::new(means, covs)
}

/// Mode and Laplace covariance of `policy(· | x, t)` starting the ascent at `start`.
pub fn laplace_at(
    policy: &dyn StochasticPolicy,
    x: &DVector<f64>,
    t: usize,
    start: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut u = start.clone();
    let mut f = policy.log_density(&u, x, t);
    for _ in 0..LAPLACE_MAX_STEPS {
        let g = policy.grad_log_density(&u, x, t);
        if g.amax() < LAPLACE_GRAD_TOL {
            break;
        }
        let neg_h = -policy.hess_log_density(&u, x, t);
        let dir = match neg_h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &u + &dir * alpha;
            let fc = policy.log_density(&cand, x, t);
            if fc.is_finite() && fc >= f {
                u = cand;
                f = fc;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let neg_h = symmetrize(&-policy.hess_log_density(&u, x, t));
    if !all_finite_mat(&neg_h) {
        return Err(KlError::SingularLaplace { t });
    }
    let chol = neg_h.cholesky().ok_or(KlError::SingularLaplace { t })?;
    let cov = eigen_floor(&chol.inverse(), COV_FLOOR)?;
    Ok((u, cov))
}

/// Control-tracking weights of the linear-feedback fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackFitWeights {
    pub state: f64,
    pub control: f64,
}

impl Default for FeedbackFitWeights {
    fn default() -> Self {
        FeedbackFitWeights {
            state: 1.0,
            control: 1e-3,
        }
    }
}

/// Sample-then-track fit of a state-feedback Gaussian: per timestep the policy is
/// sampled at the nominal state, then a single-player LQR on the linearized
/// dynamics supplies gains that hold the fitted mean at the nominal while
/// correcting state deviations.
pub fn feedback_fit(
    policy: &dyn StochasticPolicy,
    nominal: &Trajectory,
    player: usize,
    n_samples: usize,
    dynamics: &dyn Dynamics,
    weights: FeedbackFitWeights,
    rng: &mut dyn RngCore,
) -> Result<FeedbackGaussianRef> {
    if n_samples < 2 {
        return Err(KlError::Precondition("feedback_fit needs at least two samples".into()));
    }
    let horizon = nominal.horizon();
    let n = nominal.initial_state().dim();
    let m = policy.control_dim();
    let mut means = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = &nominal.state(t).0;
        let samples: Vec<DVector<f64>> = (0..n_samples).map(|_| policy.sample(x, t, rng)).collect();
        let mean = samples.iter().fold(DVector::zeros(m), |acc, s| acc + s) / n_samples as f64;
        let mut cov = DMatrix::zeros(m, m);
        for s in &samples {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n_samples - 1) as f64;
        means.push(mean);
        covs.push(eigen_floor(&cov, COV_FLOOR)?);
    }
    // Backward LQR on deviations from the nominal with the player's own input.
    let mut p = DMatrix::<f64>::zeros(n, n);
    let q = DMatrix::<f64>::identity(n, n) * weights.state;
    let r = DMatrix::<f64>::identity(m, m) * weights.control;
    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    for t in (0..horizon).rev() {
        let stage = dynamics.linearize(nominal.state(t), nominal.control(t))?;
        let b = &stage.b[player];
        let lhs = &r + b.transpose() * &p * b;
        let rhs = b.transpose() * &p * &stage.a;
        let k = lhs
            .cholesky()
            .ok_or_else(|| KlError::Numerical("feedback fit: tracking system not SPD".into()))?
            .solve(&rhs);
        let f = &stage.a - b * &k;
        p = symmetrize(&(&q + k.transpose() * &r * &k + f.transpose() * &p * &f));
        gains[t] = k;
    }
    let offsets = (0..horizon)
        .map(|t| -(&gains[t] * &nominal.state(t).0) - &means[t])
        .collect();
    FeedbackGaussianRef::new(gains, offsets, covs)
}
