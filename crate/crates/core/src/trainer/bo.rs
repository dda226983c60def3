//! Box-constrained Bayesian optimization: Gaussian-process surrogate with a
//! Matérn-5/2 kernel and expected improvement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{CcdError, Result};
use crate::nn::{normal, uniform};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Total objective evaluations, seeds included.
    pub budget: usize,
    /// Evaluations before the surrogate takes over (seed points count).
    pub n_init: usize,
    /// Random acquisition candidates per iteration.
    pub candidates: usize,
    /// Extra candidates perturbed around the incumbent.
    pub local_candidates: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self { budget: 120, n_init: 10, candidates: 2000, local_candidates: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub history: Vec<Evaluation>,
}

const LENGTHSCALES: [f64; 7] = [0.03, 0.06, 0.1, 0.2, 0.35, 0.6, 1.0];
const NOISE: f64 = 1e-6;

fn matern52(a: &[f64], b: &[f64], ell: f64) -> f64 {
    let r = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / ell;
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

struct Gp {
    xs: Vec<Vec<f64>>,
    ell: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

impl Gp {
    fn fit(xs: &[Vec<f64>], ys: &[f64], ell: f64) -> Option<(Self, f64)> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| matern52(&xs[i], &xs[j], ell) + if i == j { NOISE } else { 0.0 });
        let chol = k.cholesky()?;
        let y = DVector::from_column_slice(ys);
        let alpha = chol.solve(&y);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
        Some((Self { xs: xs.to_vec(), ell, chol, alpha }, lml))
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| matern52(xi, x, self.ell)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("triangular solve");
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

fn expected_improvement(mean: f64, sd: f64, best: f64, std_normal: &Normal) -> f64 {
    let z = (best - mean) / sd;
    (best - mean) * std_normal.cdf(z) + sd * std_normal.pdf(z)
}

/// Minimize `f` over the box `bounds`. `seeds` are evaluated first (in
/// order), then random points up to `n_init`, then EI-guided points until
/// `budget` evaluations have been made.
pub fn minimize(bounds: &[[f64; 2]], cfg: &BoConfig, seeds: &[Vec<f64>], rng: &mut Rng, mut f: impl FnMut(&[f64]) -> f64) -> Result<BoResult> {
    let d = bounds.len();
    if d == 0 || bounds.iter().any(|b| !(b[0] < b[1] && b[0].is_finite() && b[1].is_finite())) {
        return Err(CcdError::invalid("optimization bounds must be finite with lo < hi"));
    }
    if cfg.budget == 0 || seeds.len() > cfg.budget {
        return Err(CcdError::invalid("budget must be positive and cover the seed points"));
    }
    if seeds.iter().any(|s| s.len() != d) {
        return Err(CcdError::Shape("seed point dimension does not match bounds".into()));
    }
    let to_unit = |x: &[f64]| -> Vec<f64> { x.iter().zip(bounds).map(|(v, b)| ((v - b[0]) / (b[1] - b[0])).clamp(0.0, 1.0)).collect() };
    let from_unit = |u: &[f64]| -> Vec<f64> { u.iter().zip(bounds).map(|(v, b)| b[0] + v * (b[1] - b[0])).collect() };

    let mut units: Vec<Vec<f64>> = Vec::new();
    let mut history = Vec::new();
    let mut eval = |u: Vec<f64>, units: &mut Vec<Vec<f64>>, history: &mut Vec<Evaluation>| {
        let x = from_unit(&u);
        let y = f(&x);
        let y = if y.is_finite() { y } else { f64::MAX };
        units.push(u);
        history.push(Evaluation { x, y });
    };
    for s in seeds {
        eval(to_unit(s), &mut units, &mut history);
    }
    while history.len() < cfg.n_init.min(cfg.budget) {
        let u: Vec<f64> = (0..d).map(|_| uniform(rng, 0.0, 1.0)).collect();
        eval(u, &mut units, &mut history);
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    while history.len() < cfg.budget {
        let ys: Vec<f64> = history.iter().map(|e| e.y).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt().max(1e-12);
        let zs: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();
        let gp = LENGTHSCALES
            .iter()
            .filter_map(|&ell| Gp::fit(&units, &zs, ell))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(gp, _)| gp);
        let best_i = argmin(&ys);
        let next = match gp {
            Some(gp) => {
                let best = zs[best_i];
                let incumbent = units[best_i].clone();
                let mut top = (f64::NEG_INFINITY, incumbent.clone());
                let total = cfg.candidates + cfg.local_candidates;
                for c in 0..total {
                    let u: Vec<f64> = if c < cfg.candidates {
                        (0..d).map(|_| uniform(rng, 0.0, 1.0)).collect()
                    } else {
                        // Local search at a few radii around the incumbent.
                        let radius = [0.1, 0.02, 0.004][c % 3];
                        incumbent.iter().map(|v| (v + radius * normal(rng)).clamp(0.0, 1.0)).collect()
                    };
                    let (m, s) = gp.predict(&u);
                    let ei = expected_improvement(m, s, best, &std_normal);
                    if ei > top.0 {
                        top = (ei, u);
                    }
                }
                top.1
            }
            None => (0..d).map(|_| uniform(rng, 0.0, 1.0)).collect(),
        };
        eval(next, &mut units, &mut history);
    }
    let best_i = argmin(&history.iter().map(|e| e.y).collect::<Vec<_>>());
    Ok(BoResult { best_x: history[best_i].x.clone(), best_y: history[best_i].y, history })
}

fn argmin(v: &[f64]) -> usize {
    v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0)
}
