//! Joint dynamics models with exact stepping and linearization.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, KlError, Result};
use crate::game::{offsets, JointControl, JointState};
use crate::linalg::{all_finite_mat, all_finite_vec};

/// Linearized dynamics `x' = A x + sum_i B_i u_i + drift` with additive noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGameStage {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub drift: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LinearGameStage {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, drift: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let stage = LinearGameStage { a, b, drift, noise_cov };
        stage.validate()?;
        Ok(stage)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.b.iter().map(|b| b.ncols()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.drift.len() != n || self.noise_cov.shape() != (n, n) {
            return dim_err("linear stage shapes inconsistent with state dimension");
        }
        if self.b.iter().any(|b| b.nrows() != n) {
            return dim_err("every B_i must have n rows");
        }
        if !all_finite_mat(&self.a) || !all_finite_vec(&self.drift) || self.b.iter().any(|b| !all_finite_mat(b)) {
            return Err(KlError::Numerical("linear stage has non-finite entries".into()));
        }
        if crate::linalg::max_asymmetry(&self.noise_cov) > 1e-12 || crate::linalg::min_eigenvalue(&self.noise_cov) < -1e-12 {
            return Err(KlError::Numerical("noise covariance must be symmetric PSD".into()));
        }
        Ok(())
    }

    /// Applies the affine map (noise-free).
    pub fn apply(&self, x: &DVector<f64>, u: &JointControl) -> DVector<f64> {
        let mut next = &self.a * x + &self.drift;
        for (b, ui) in self.b.iter().zip(&u.per_player) {
            next += b * ui;
        }
        next
    }
}

/// A discrete-time joint dynamics model.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dims(&self) -> &[usize];
    fn dt(&self) -> f64;

    /// Raw transition on already-validated inputs.
    fn transition(&self, x: &DVector<f64>, u: &JointControl) -> DVector<f64>;

    /// Jacobians `(df/dx, [df/du_i])`. Central differences unless overridden.
    fn jacobians(&self, x: &DVector<f64>, u: &JointControl) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        finite_difference_jacobians(self, x, u)
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.state_dim(), self.state_dim())
    }

    fn step(&self, x: &JointState, u: &JointControl) -> Result<JointState> {
        if x.dim() != self.state_dim() {
            return dim_err(format!("state has length {}, expected {}", x.dim(), self.state_dim()));
        }
        u.check_dims(self.control_dims())?;
        if !all_finite_vec(&x.0) || !u.is_finite() {
            return Err(KlError::Numerical("non-finite input to dynamics step".into()));
        }
        let next = self.transition(&x.0, u);
        if !all_finite_vec(&next) {
            return Err(KlError::Numerical("dynamics produced a non-finite state".into()));
        }
        Ok(JointState(next))
    }

    /// Affine model around `(x, u)`; the drift makes the model exact at that point.
    fn linearize(&self, x: &JointState, u: &JointControl) -> Result<LinearGameStage> {
        if x.dim() != self.state_dim() {
            return dim_err(format!("state has length {}, expected {}", x.dim(), self.state_dim()));
        }
        u.check_dims(self.control_dims())?;
        if !all_finite_vec(&x.0) || !u.is_finite() {
            return Err(KlError::Numerical("non-finite linearization point".into()));
        }
        let (a, b) = self.jacobians(&x.0, u);
        let f = self.transition(&x.0, u);
        let mut drift = f - &a * &x.0;
        for (bi, ui) in b.iter().zip(&u.per_player) {
            drift -= bi * ui;
        }
        let stage = LinearGameStage {
            a,
            b,
            drift,
            noise_cov: self.noise_cov(),
        };
        if !all_finite_mat(&stage.a) || !all_finite_vec(&stage.drift) || stage.b.iter().any(|m| !all_finite_mat(m)) {
            return Err(KlError::Numerical("non-finite linearization".into()));
        }
        Ok(stage)
    }
}

/// Central-difference Jacobians with step `1e-5 * max(1, |entry|)`.
pub fn finite_difference_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &JointControl,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = x.len();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (dynamics.transition(&xp, u) - dynamics.transition(&xm, u)) / (2.0 * h);
        a.set_column(k, &col);
    }
    let b = (0..u.n_players())
        .map(|i| {
            let m = u.per_player[i].len();
            let mut bi = DMatrix::zeros(n, m);
            for k in 0..m {
                let h = 1e-5 * u.per_player[i][k].abs().max(1.0);
                let mut up = u.clone();
                let mut um = u.clone();
                up.per_player[i][k] += h;
                um.per_player[i][k] -= h;
                let col = (dynamics.transition(x, &up) - dynamics.transition(x, &um)) / (2.0 * h);
                bi.set_column(k, &col);
            }
            bi
        })
        .collect();
    (a, b)
}

/// Per-agent 4D kinematic bicycle `[x, y, heading, speed]` with controls `[accel, yaw_rate]`,
/// integrated with forward Euler. Heading is never wrapped.
#[derive(Debug, Clone)]
pub struct KinematicBicycle {
    n_agents: usize,
    dt: f64,
    control_dims: Vec<usize>,
}

impl KinematicBicycle {
    pub const STATE_PER_AGENT: usize = 4;
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const HEADING: usize = 2;
    pub const SPEED: usize = 3;
    pub const ACCEL: usize = 0;
    pub const YAW_RATE: usize = 1;

    pub fn new(n_agents: usize, dt: f64) -> Self {
        KinematicBicycle {
            n_agents,
            dt,
            control_dims: vec![2; n_agents],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Index of `component` for `agent` in the joint state.
    pub fn index(agent: usize, component: usize) -> usize {
        agent * Self::STATE_PER_AGENT + component
    }
}

impl Dynamics for KinematicBicycle {
    fn state_dim(&self) -> usize {
        Self::STATE_PER_AGENT * self.n_agents
    }

    fn control_dims(&self) -> &[usize] {
        &self.control_dims
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &DVector<f64>, u: &JointControl) -> DVector<f64> {
        let mut next = x.clone();
        for (i, ui) in u.per_player.iter().enumerate() {
            let o = i * Self::STATE_PER_AGENT;
            let (theta, v) = (x[o + 2], x[o + 3]);
            next[o] += self.dt * v * theta.cos();
            next[o + 1] += self.dt * v * theta.sin();
            next[o + 2] += self.dt * ui[Self::YAW_RATE];
            next[o + 3] += self.dt * ui[Self::ACCEL];
        }
        next
    }

    fn jacobians(&self, x: &DVector<f64>, _u: &JointControl) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = self.state_dim();
        let dt = self.dt;
        let mut a = DMatrix::identity(n, n);
        let mut b = Vec::with_capacity(self.n_agents);
        for i in 0..self.n_agents {
            let o = i * Self::STATE_PER_AGENT;
            let (theta, v) = (x[o + 2], x[o + 3]);
            let (s, c) = theta.sin_cos();
            a[(o, o + 2)] = -dt * v * s;
            a[(o, o + 3)] = dt * c;
            a[(o + 1, o + 2)] = dt * v * c;
            a[(o + 1, o + 3)] = dt * s;
            let mut bi = DMatrix::zeros(n, 2);
            bi[(o + 2, Self::YAW_RATE)] = dt;
            bi[(o + 3, Self::ACCEL)] = dt;
            b.push(bi);
        }
        (a, b)
    }
}

/// Time-invariant affine dynamics `x' = A x + sum_i B_i u_i + drift`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    drift: DVector<f64>,
    noise_cov: DMatrix<f64>,
    control_dims: Vec<usize>,
    dt: f64,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, drift: DVector<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        let stage = LinearGameStage::new(a, b, drift, DMatrix::zeros(n, n))?;
        let control_dims = stage.control_dims();
        Ok(LinearDynamics {
            a: stage.a,
            b: stage.b,
            drift: stage.drift,
            noise_cov: stage.noise_cov,
            control_dims,
            dt,
        })
    }

    pub fn from_stage(stage: &LinearGameStage, dt: f64) -> Result<Self> {
        stage.validate()?;
        Ok(LinearDynamics {
            a: stage.a.clone(),
            b: stage.b.clone(),
            drift: stage.drift.clone(),
            noise_cov: stage.noise_cov.clone(),
            control_dims: stage.control_dims(),
            dt,
        })
    }

    pub fn with_noise(mut self, noise_cov: DMatrix<f64>) -> Result<Self> {
        let n = self.a.nrows();
        if noise_cov.shape() != (n, n) {
            return dim_err("noise covariance must be n x n");
        }
        self.noise_cov = noise_cov;
        Ok(self)
    }

    /// `x' = x + dt * u`, each player driving its own block of the state.
    pub fn single_integrator(control_dims: &[usize], dt: f64) -> Self {
        let n: usize = control_dims.iter().sum();
        let offs = offsets(control_dims);
        let b = control_dims
            .iter()
            .zip(&offs)
            .map(|(&m, &o)| {
                let mut bi = DMatrix::zeros(n, m);
                for k in 0..m {
                    bi[(o + k, k)] = dt;
                }
                bi
            })
            .collect();
        LinearDynamics {
            a: DMatrix::identity(n, n),
            b,
            drift: DVector::zeros(n),
            noise_cov: DMatrix::zeros(n, n),
            control_dims: control_dims.to_vec(),
            dt,
        }
    }

    /// Per-player planar double integrator, state `[px, py, vx, vy]` per player, control `[ax, ay]`.
    pub fn double_integrator(n_players: usize, dt: f64) -> Self {
        let n = 4 * n_players;
        let mut a = DMatrix::identity(n, n);
        let mut b = Vec::with_capacity(n_players);
        for i in 0..n_players {
            let o = 4 * i;
            a[(o, o + 2)] = dt;
            a[(o + 1, o + 3)] = dt;
            let mut bi = DMatrix::zeros(n, 2);
            bi[(o, 0)] = 0.5 * dt * dt;
            bi[(o + 1, 1)] = 0.5 * dt * dt;
            bi[(o + 2, 0)] = dt;
            bi[(o + 3, 1)] = dt;
            b.push(bi);
        }
        LinearDynamics {
            a,
            b,
            drift: DVector::zeros(n),
            noise_cov: DMatrix::zeros(n, n),
            control_dims: vec![2; n_players],
            dt,
        }
    }

    pub fn stage(&self) -> LinearGameStage {
        LinearGameStage {
            a: self.a.clone(),
            b: self.b.clone(),
            drift: self.drift.clone(),
            noise_cov: self.noise_cov.clone(),
        }
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dims(&self) -> &[usize] {
        &self.control_dims
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &DVector<f64>, u: &JointControl) -> DVector<f64> {
        let mut next = &self.a * x + &self.drift;
        for (b, ui) in self.b.iter().zip(&u.per_player) {
            next += b * ui;
        }
        next
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &JointControl) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        (self.a.clone(), self.b.clone())
    }

    fn noise_cov(&self) -> DMatrix<f64> {
        self.noise_cov.clone()
    }
}

/// Wraps a model and hides its analytic Jacobians, forcing finite differences.
pub struct NumericJacobians<D>(pub D);

impl<D: Dynamics> Dynamics for NumericJacobians<D> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn control_dims(&self) -> &[usize] {
        self.0.control_dims()
    }
    fn dt(&self) -> f64 {
        self.0.dt()
    }
    fn transition(&self, x: &DVector<f64>, u: &JointControl) -> DVector<f64> {
        self.0.transition(x, u)
    }
}
