//! File writers. Floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use klgame::bench::ScalingPoint;
use klgame::klqg::{AffineGaussianPolicy, PolicyStage};
use klgame::scenario::GMMPolicy;
use klgame::sim::{BatchResult, MeanStd};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::CliError;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    write(path, &text)
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

/// Trajectory CSV: `t`, per-agent `x, y, theta, v`, then per-agent
/// `accel, yaw_rate`. The last row has no controls.
pub fn trajectory_csv(states: &[Vec<f64>], controls: &[Vec<f64>]) -> String {
    let agents = states.first().map_or(0, |s| s.len() / 4);
    let mut out = String::from("t");
    for a in 0..agents {
        let _ = write!(out, ",x{a},y{a},theta{a},v{a}");
    }
    for a in 0..agents {
        let _ = write!(out, ",accel{a},yaw_rate{a}");
    }
    out.push('\n');
    for (t, s) in states.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in s {
            let _ = write!(out, ",{}", num(*v));
        }
        match controls.get(t) {
            Some(u) => {
                for v in u {
                    let _ = write!(out, ",{}", num(*v));
                }
            }
            None => out.push_str(&",".repeat(2 * agents)),
        }
        out.push('\n');
    }
    out
}

fn mat(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// One affine Gaussian policy stage, `u ~ N(-K x - κ, Σ)`.
#[derive(Serialize)]
pub struct StageRecord {
    pub gain: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl From<&PolicyStage> for StageRecord {
    fn from(s: &PolicyStage) -> Self {
        StageRecord {
            gain: mat(&s.gain),
            offset: vec(&s.offset),
            cov: mat(&s.cov),
        }
    }
}

#[derive(Serialize)]
pub struct MixtureRecord {
    pub weights: Vec<f64>,
    pub modes: Vec<usize>,
    pub components: Vec<StageRecord>,
}

impl From<&GMMPolicy> for MixtureRecord {
    fn from(p: &GMMPolicy) -> Self {
        MixtureRecord {
            weights: p.weights.clone(),
            modes: p.modes.clone(),
            components: p.components.iter().map(StageRecord::from).collect(),
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyRecord {
    /// Per player, per timestep.
    Chain { players: Vec<Vec<StageRecord>> },
    /// Per player root mixture.
    Tree { players: Vec<MixtureRecord> },
}

impl PolicyRecord {
    pub fn chain(policies: &[AffineGaussianPolicy]) -> Self {
        PolicyRecord::Chain {
            players: policies.iter().map(|p| p.stages.iter().map(StageRecord::from).collect()).collect(),
        }
    }

    pub fn tree(policies: &[GMMPolicy]) -> Self {
        PolicyRecord::Tree {
            players: policies.iter().map(MixtureRecord::from).collect(),
        }
    }
}

fn cell(m: &MeanStd, digits: usize) -> String {
    format!("{:.*} ± {:.*}", digits, m.mean, digits, m.std)
}

/// Markdown comparison table, one row per method.
pub fn batch_markdown(results: &[BatchResult]) -> String {
    let mut out = String::from("| Method | CR | SR | Prog (m) | Cost |\n|---|---|---|---|---|\n");
    for r in results {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.method,
            cell(&s.coordination_rate, 2),
            cell(&s.safety_rate, 2),
            cell(&s.progress, 2),
            cell(&s.cost, 3)
        );
    }
    if let Some(r) = results.first() {
        let _ = writeln!(out, "\n{} trials per method, seed {}.", r.n_trials, r.seed);
    }
    out
}

pub fn scaling_csv(rows: &[(&str, ScalingPoint)]) -> String {
    let mut out = String::from("sweep,players,state_dim,horizon,repeats,iterations,mean,std,median,worst\n");
    for (sweep, p) in rows {
        let _ = writeln!(
            out,
            "{sweep},{},{},{},{},{},{},{},{},{}",
            p.players,
            p.state_dim,
            p.horizon,
            p.repeats,
            p.iterations,
            num(p.mean),
            num(p.std),
            num(p.median),
            num(p.worst)
        );
    }
    out
}
