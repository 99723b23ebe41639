//! Energy-based kinematic pose optimization.
//!
//! Joint positions `p` are refined from the predicted positions `p̃` by
//! minimizing `E_A + E_S`:
//!
//! ```text
//! E_A = Σ_{k∈O} λa‖p_k − q_k‖² + Σ_{k∉O} λs‖p_k − p̃_k‖²
//! E_S = Σ_i Σ_{j∈M(i)} λl(‖J_ij‖ − ‖J̃_ij‖)² + λd‖J_ij − J̃_ij‖²,   J_ij = p_i − p_j
//! ```
//!
//! `O` is the set of tracked joints (head and hands) with device positions
//! `q_k`, and `M(i)` the skeleton neighbors of joint `i`. The double sum
//! visits every bone once from each end, so each bone contributes twice.
//!
//! The solver is plain gradient descent with a backtracking line search; it
//! moves positions only and never touches rotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::MIN_BONE_LENGTH;
use crate::rotation::Vec3;
use crate::skeleton::{KinematicTree, HEAD, LEFT_WRIST, RIGHT_WRIST};

/// Smallest step the line search will try before giving up.
pub const STEP_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KpoError {
    #[error("bone {child}->{parent} has zero length")]
    ZeroLengthBone { child: usize, parent: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpoConfig {
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_d: f64,
    #[serde(rename = "max_iters")]
    pub max_iterations: usize,
    pub step_size: f64,
    /// Stop once the relative energy decrease of a step falls below this.
    #[serde(rename = "tol")]
    pub energy_tolerance: f64,
    /// Tracked joints, in the same order as the problem's anchors.
    pub observed: Vec<usize>,
}

impl Default for KpoConfig {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_s: 0.1,
            lambda_l: 1.0,
            lambda_d: 0.5,
            max_iterations: 30,
            step_size: 0.1,
            energy_tolerance: 1e-6,
            observed: vec![HEAD, LEFT_WRIST, RIGHT_WRIST],
        }
    }
}

impl KpoConfig {
    pub fn validate(&self) -> Result<(), KpoError> {
        let weights = [self.lambda_a, self.lambda_s, self.lambda_l, self.lambda_d];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KpoError::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        if self.max_iterations < 1 {
            return Err(KpoError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.energy_tolerance > 0.0) {
            return Err(KpoError::InvalidConfig("tolerance must be positive".into()));
        }
        if !(self.step_size > STEP_FLOOR && self.step_size.is_finite()) {
            return Err(KpoError::InvalidConfig("step_size must exceed the step floor".into()));
        }
        Ok(())
    }
}

/// One optimization instance: predicted positions, tracked anchors, skeleton.
#[derive(Debug, Clone)]
pub struct KpoProblem<'a> {
    pub initial: Vec<Vec3>,
    /// `anchors[n]` is the tracked position of joint `cfg.observed[n]`.
    pub anchors: Vec<Vec3>,
    pub tree: &'a KinematicTree,
}

impl<'a> KpoProblem<'a> {
    pub fn new(initial: Vec<Vec3>, anchors: Vec<Vec3>, tree: &'a KinematicTree) -> Self {
        Self { initial, anchors, tree }
    }

    fn check(&self, cfg: &KpoConfig) -> Result<(), KpoError> {
        if self.initial.len() != self.tree.len() {
            return Err(KpoError::Shape(format!(
                "{} initial positions for a {}-joint tree",
                self.initial.len(),
                self.tree.len()
            )));
        }
        if self.anchors.len() != cfg.observed.len() {
            return Err(KpoError::Shape(format!(
                "{} anchors for {} observed joints",
                self.anchors.len(),
                cfg.observed.len()
            )));
        }
        if let Some(&k) = cfg.observed.iter().find(|&&k| k >= self.tree.len()) {
            return Err(KpoError::Shape(format!("observed joint {k} outside the tree")));
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !self.initial.iter().all(finite) || !self.anchors.iter().all(finite) {
            return Err(KpoError::Shape("non-finite positions".into()));
        }
        Ok(())
    }
}

fn observed_mask(n: usize, cfg: &KpoConfig) -> Vec<Option<usize>> {
    let mut mask = vec![None; n];
    for (slot, &k) in cfg.observed.iter().enumerate() {
        mask[k] = Some(slot);
    }
    mask
}

pub fn energy_alignment(p: &[Vec3], problem: &KpoProblem<'_>, cfg: &KpoConfig) -> f64 {
    let mask = observed_mask(p.len(), cfg);
    p.iter()
        .zip(&problem.initial)
        .zip(&mask)
        .map(|((pk, init), slot)| match slot {
            Some(s) => cfg.lambda_a * (pk - problem.anchors[*s]).norm_squared(),
            None => cfg.lambda_s * (pk - init).norm_squared(),
        })
        .sum()
}

fn bone(p: &[Vec3], child: usize, parent: usize) -> Result<(Vec3, f64), KpoError> {
    let d = p[child] - p[parent];
    let len = d.norm();
    if !(len >= MIN_BONE_LENGTH) {
        return Err(KpoError::ZeroLengthBone { child, parent });
    }
    Ok((d, len))
}

pub fn energy_structure(p: &[Vec3], problem: &KpoProblem<'_>, cfg: &KpoConfig) -> Result<f64, KpoError> {
    let mut total = 0.0;
    for (c, par) in problem.tree.edges() {
        let (d, len) = bone(p, c, par)?;
        let (d0, len0) = bone(&problem.initial, c, par)?;
        let term = cfg.lambda_l * (len - len0).powi(2) + cfg.lambda_d * (d - d0).norm_squared();
        total += 2.0 * term;
    }
    Ok(total)
}

pub fn total_energy(p: &[Vec3], problem: &KpoProblem<'_>, cfg: &KpoConfig) -> Result<f64, KpoError> {
    Ok(energy_alignment(p, problem, cfg) + energy_structure(p, problem, cfg)?)
}

/// Analytic gradient of `E_A + E_S` with respect to every joint position.
pub fn energy_gradient(p: &[Vec3], problem: &KpoProblem<'_>, cfg: &KpoConfig) -> Result<Vec<Vec3>, KpoError> {
    let mask = observed_mask(p.len(), cfg);
    let mut grad: Vec<Vec3> = p
        .iter()
        .zip(&problem.initial)
        .zip(&mask)
        .map(|((pk, init), slot)| match slot {
            Some(s) => 2.0 * cfg.lambda_a * (pk - problem.anchors[*s]),
            None => 2.0 * cfg.lambda_s * (pk - init),
        })
        .collect();
    for (c, par) in problem.tree.edges() {
        let (d, len) = bone(p, c, par)?;
        let (d0, len0) = bone(&problem.initial, c, par)?;
        // Both directed copies of the bone contribute the same derivative.
        let g = 2.0 * (2.0 * cfg.lambda_l * (len - len0) / len * d + 2.0 * cfg.lambda_d * (d - d0));
        grad[c] += g;
        grad[par] -= g;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpoStatus {
    /// Relative energy decrease fell below tolerance, or a stationary point was hit.
    Converged,
    MaxIterations,
    /// No decreasing step above the step floor; positions are the best found.
    DivergedStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpoReport {
    pub iterations: usize,
    pub final_energy: f64,
    /// Energy before the first step followed by the energy after each accepted step.
    pub energy_trace: Vec<f64>,
    pub status: KpoStatus,
}

pub fn optimize(problem: &KpoProblem<'_>, cfg: &KpoConfig) -> Result<(Vec<Vec3>, KpoReport), KpoError> {
    cfg.validate()?;
    problem.check(cfg)?;
    let mut p = problem.initial.clone();
    let mut energy = total_energy(&p, problem, cfg)?;
    let mut trace = vec![energy];
    let mut step = cfg.step_size;
    let mut status = KpoStatus::MaxIterations;
    let mut iterations = 0;
    let mut candidate = p.clone();

    while iterations < cfg.max_iterations {
        if energy == 0.0 {
            status = KpoStatus::Converged;
            break;
        }
        let grad = energy_gradient(&p, problem, cfg)?;
        if grad.iter().all(|g| *g == Vec3::zeros()) {
            status = KpoStatus::Converged;
            break;
        }
        let mut accepted = None;
        while step >= STEP_FLOOR {
            for ((c, x), g) in candidate.iter_mut().zip(&p).zip(&grad) {
                *c = x - step * g;
            }
            // A trial step may collapse a bone; treat that as a failed step.
            match total_energy(&candidate, problem, cfg) {
                Ok(e) if e < energy => {
                    accepted = Some(e);
                    break;
                }
                Ok(_) | Err(KpoError::ZeroLengthBone { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(new_energy) = accepted else {
            status = KpoStatus::DivergedStep;
            break;
        };
        std::mem::swap(&mut p, &mut candidate);
        let decrease = (energy - new_energy) / energy;
        energy = new_energy;
        trace.push(energy);
        iterations += 1;
        step = (2.0 * step).min(cfg.step_size);
        if decrease < cfg.energy_tolerance {
            status = KpoStatus::Converged;
            break;
        }
    }
    Ok((p, KpoReport { iterations, final_energy: energy, energy_trace: trace, status }))
}
