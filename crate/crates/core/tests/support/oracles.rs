//! Brute-force reference solutions shared by the integration tests and the
//! acceptance harness. Nothing here calls into the code under test beyond
//! plain data types.
#![allow(dead_code)]

use nalgebra::{Rotation3, Vector3};

pub type V3 = Vector3<f64>;

/// Small-problem energy written directly from the definition: anchored
/// joints pull toward their targets, every ordered neighbor pair keeps its
/// length and direction.
pub struct ChainEnergy {
    pub parents: Vec<Option<usize>>,
    pub initial: Vec<V3>,
    pub observed: Vec<usize>,
    pub anchors: Vec<V3>,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_d: f64,
}

impl ChainEnergy {
    fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (child, parent) in self.parents.iter().enumerate() {
            if let Some(p) = *parent {
                pairs.push((child, p));
                pairs.push((p, child));
            }
        }
        pairs
    }

    pub fn eval(&self, p: &[V3]) -> f64 {
        let mut e = 0.0;
        for k in 0..p.len() {
            match self.observed.iter().position(|&o| o == k) {
                Some(n) => e += self.lambda_a * (p[k] - self.anchors[n]).norm_squared(),
                None => e += self.lambda_s * (p[k] - self.initial[k]).norm_squared(),
            }
        }
        for (i, j) in self.neighbor_pairs() {
            let now = p[i] - p[j];
            let was = self.initial[i] - self.initial[j];
            e += self.lambda_l * (now.norm() - was.norm()).powi(2);
            e += self.lambda_d * (now - was).norm_squared();
        }
        e
    }

    /// Coarse-to-fine grid search over all coordinates. Each round scores the
    /// full `3^(3n)` lattice around the incumbent; the spacing halves when the
    /// incumbent wins.
    pub fn grid_minimum(&self, start: &[V3], spacing: f64, finest: f64) -> Vec<V3> {
        let n = start.len() * 3;
        let mut best: Vec<f64> = start.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let to_points = |x: &[f64]| x.chunks_exact(3).map(|c| V3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let mut best_e = self.eval(&to_points(&best));
        let mut h = spacing;
        let mut trial = vec![0.0; n];
        let combos = 3usize.pow(n as u32);
        while h >= finest {
            let center = best.clone();
            let mut moved = false;
            for code in 0..combos {
                let mut c = code;
                for d in 0..n {
                    trial[d] = center[d] + h * ((c % 3) as f64 - 1.0);
                    c /= 3;
                }
                let e = self.eval(&to_points(&trial));
                if e < best_e {
                    best_e = e;
                    best.copy_from_slice(&trial);
                    moved = true;
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        to_points(&best)
    }
}

/// Least-squares residual of `target ≈ s·R·source + t` for a fixed `R`, with
/// `s ≥ 0` and `t` solved in closed form.
fn similarity_sse(r: &Rotation3<f64>, xs: &[V3], ys: &[V3]) -> (f64, f64) {
    let dot: f64 = xs.iter().zip(ys).map(|(x, y)| (r * x).dot(y)).sum();
    let xx: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let yy: f64 = ys.iter().map(|y| y.norm_squared()).sum();
    let s = (dot / xx).max(0.0);
    (yy - s * dot, s)
}

fn centered(points: &[V3]) -> (Vec<V3>, V3) {
    let mean = points.iter().sum::<V3>() / points.len() as f64;
    (points.iter().map(|p| p - mean).collect(), mean)
}

/// Procrustes-aligned mean per-joint error in centimeters, found by searching
/// rotation space instead of solving the SVD.
pub fn grid_pa_mpjpe(pred: &[V3], gt: &[V3]) -> f64 {
    let (xs, mx) = centered(pred);
    let (ys, my) = centered(gt);
    let score = |r: &Rotation3<f64>| similarity_sse(r, &xs, &ys).0;

    let steps = 24;
    let mut best = Rotation3::identity();
    let mut best_e = f64::INFINITY;
    for a in 0..steps {
        for b in 0..steps / 2 {
            for c in 0..steps {
                let tau = std::f64::consts::TAU;
                let r = Rotation3::from_euler_angles(
                    tau * a as f64 / steps as f64,
                    tau * (b as f64 / steps as f64 - 0.25),
                    tau * c as f64 / steps as f64,
                );
                let e = score(&r);
                if e < best_e {
                    best_e = e;
                    best = r;
                }
            }
        }
    }
    let mut h = tau_step(steps);
    while h > 1e-10 {
        let mut moved = false;
        let center = best;
        for code in 0..27 {
            if code == 13 {
                continue;
            }
            let w = V3::new((code % 3) as f64 - 1.0, ((code / 3) % 3) as f64 - 1.0, (code / 9) as f64 - 1.0) * h;
            let r = Rotation3::new(w) * center;
            let e = score(&r);
            if e < best_e {
                best_e = e;
                best = r;
                moved = true;
            }
        }
        if !moved {
            h *= 0.5;
        }
    }
    let (_, s) = similarity_sse(&best, &xs, &ys);
    let t = my - s * (best * mx);
    let errs: f64 = pred.iter().zip(gt).map(|(x, y)| (s * (best * x) + t - y).norm()).sum();
    100.0 * errs / pred.len() as f64
}

fn tau_step(steps: usize) -> f64 {
    std::f64::consts::TAU / steps as f64
}
