//! Dimension-checked containers for joint states, joint controls and trajectories.

use nalgebra::DVector;

use crate::dynamics::Dynamics;
use crate::error::{dim_err, KlError, Result};
use crate::linalg::all_finite_vec;

/// Sizes shared by every solver: players, joint state, per-player controls, horizon and step.
#[derive(Debug, Clone, PartialEq)]
pub struct GameDims {
    pub n_players: usize,
    pub state_dim: usize,
    pub control_dims: Vec<usize>,
    pub horizon: usize,
    pub dt: f64,
}

impl GameDims {
    pub fn new(state_dim: usize, control_dims: Vec<usize>, horizon: usize, dt: f64) -> Result<Self> {
        let dims = GameDims {
            n_players: control_dims.len(),
            state_dim,
            control_dims,
            horizon,
            dt,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_players == 0 || self.control_dims.len() != self.n_players {
            return Err(KlError::Precondition("at least one player required".into()));
        }
        if self.state_dim == 0 {
            return Err(KlError::Precondition("state_dim must be >= 1".into()));
        }
        if self.control_dims.iter().any(|&m| m == 0) {
            return Err(KlError::Precondition("every control dimension must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(KlError::Precondition("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KlError::Precondition("dt must be positive".into()));
        }
        Ok(())
    }

    pub fn total_control_dim(&self) -> usize {
        self.control_dims.iter().sum()
    }

    /// Start offset of each player's block in the stacked control vector.
    pub fn control_offsets(&self) -> Vec<usize> {
        offsets(&self.control_dims)
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        GameDims {
            horizon,
            ..self.clone()
        }
    }
}

pub(crate) fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    dims.iter()
        .map(|&m| {
            let o = acc;
            acc += m;
            o
        })
        .collect()
}

/// Stacked state of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState(pub DVector<f64>);

impl JointState {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if !all_finite_vec(&values) {
            return Err(KlError::Numerical("joint state has non-finite entries".into()));
        }
        Ok(JointState(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(n: usize) -> Self {
        JointState(DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }
}

/// One control vector per player.
#[derive(Debug, Clone, PartialEq)]
pub struct JointControl {
    pub per_player: Vec<DVector<f64>>,
}

impl JointControl {
    pub fn new(per_player: Vec<DVector<f64>>) -> Result<Self> {
        if per_player.iter().any(|u| !all_finite_vec(u)) {
            return Err(KlError::Numerical("joint control has non-finite entries".into()));
        }
        Ok(JointControl { per_player })
    }

    pub fn zeros(control_dims: &[usize]) -> Self {
        JointControl {
            per_player: control_dims.iter().map(|&m| DVector::zeros(m)).collect(),
        }
    }

    pub fn from_stacked(control_dims: &[usize], stacked: &DVector<f64>) -> Result<Self> {
        let total: usize = control_dims.iter().sum();
        if stacked.len() != total {
            return dim_err(format!("stacked control has length {}, expected {total}", stacked.len()));
        }
        let per_player = offsets(control_dims)
            .into_iter()
            .zip(control_dims)
            .map(|(o, &m)| stacked.rows(o, m).into_owned())
            .collect();
        Ok(JointControl { per_player })
    }

    pub fn n_players(&self) -> usize {
        self.per_player.len()
    }

    pub fn player(&self, i: usize) -> &DVector<f64> {
        &self.per_player[i]
    }

    pub fn stacked(&self) -> DVector<f64> {
        let total: usize = self.per_player.iter().map(|u| u.len()).sum();
        let mut out = DVector::zeros(total);
        let mut o = 0;
        for u in &self.per_player {
            out.rows_mut(o, u.len()).copy_from(u);
            o += u.len();
        }
        out
    }

    pub fn check_dims(&self, control_dims: &[usize]) -> Result<()> {
        if self.per_player.len() != control_dims.len() {
            return dim_err(format!(
                "joint control has {} players, expected {}",
                self.per_player.len(),
                control_dims.len()
            ));
        }
        for (i, (u, &m)) in self.per_player.iter().zip(control_dims).enumerate() {
            if u.len() != m {
                return dim_err(format!("player {i} control has length {}, expected {m}", u.len()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.per_player.iter().all(all_finite_vec)
    }
}

/// States at `t = 0..=T` and controls at `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<JointState>,
    controls: Vec<JointControl>,
}

impl Trajectory {
    pub fn new(states: Vec<JointState>, controls: Vec<JointControl>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return dim_err(format!(
                "trajectory needs one more state than controls (got {} states, {} controls)",
                states.len(),
                controls.len()
            ));
        }
        Ok(Trajectory { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn states(&self) -> &[JointState] {
        &self.states
    }

    pub fn controls(&self) -> &[JointControl] {
        &self.controls
    }

    pub fn state(&self, t: usize) -> &JointState {
        &self.states[t]
    }

    pub fn control(&self, t: usize) -> &JointControl {
        &self.controls[t]
    }

    pub fn initial_state(&self) -> &JointState {
        &self.states[0]
    }

    pub fn terminal_state(&self) -> &JointState {
        &self.states[self.states.len() - 1]
    }

    /// Largest absolute state difference over all timesteps.
    pub fn max_state_deviation(&self, other: &Trajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (&a.0 - &b.0).amax())
            .fold(0.0, f64::max)
    }

    pub fn into_parts(self) -> (Vec<JointState>, Vec<JointControl>) {
        (self.states, self.controls)
    }
}

/// Rolls `controls` forward from `x0` through `dynamics`.
pub fn make_trajectory(
    dims: &GameDims,
    x0: &JointState,
    controls: &[JointControl],
    dynamics: &dyn Dynamics,
) -> Result<Trajectory> {
    if controls.len() != dims.horizon {
        return dim_err(format!(
            "expected {} controls, got {}",
            dims.horizon,
            controls.len()
        ));
    }
    if x0.dim() != dims.state_dim || dynamics.state_dim() != dims.state_dim {
        return dim_err(format!(
            "state dimension mismatch: x0 {}, dims {}, dynamics {}",
            x0.dim(),
            dims.state_dim,
            dynamics.state_dim()
        ));
    }
    if dynamics.control_dims() != dims.control_dims.as_slice() {
        return dim_err("dynamics control dimensions differ from game dims");
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        u.check_dims(&dims.control_dims)?;
        let next = dynamics
            .step(&states[t], u)
            .map_err(|e| e.with_context(format!("rollout step {t}")))?;
        states.push(next);
    }
    Trajectory::new(states, controls.to_vec())
}
