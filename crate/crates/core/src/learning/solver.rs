//! Linear max-margin solver for the hinge-loss SVM
//!
//! ```text
//! min_beta  1/2 |beta|^2 + C sum_i max(0, 1 - y_i beta . x_i)
//! ```
//!
//! with no separate offset (pattern biases live inside `beta`). An interior
//! point phase gets close to the optimum and dual coordinate descent
//! finishes until the duality gap drops to the requested tolerance, which
//! bounds the distance of the returned objective from the optimum.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Configuration, SparseVector};

/// Class of a training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// Where a training example came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExampleSource {
    pub image_id: String,
    pub configuration: Configuration,
}

/// One constraint of the max-margin problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub phi: SparseVector,
    pub sign: Sign,
    pub source: Option<ExampleSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution {
    pub beta: Vec<f64>,
    /// Primal objective at `beta`.
    pub objective: f64,
    /// Dual objective at the final multipliers; `objective - dual` is the gap.
    pub dual: f64,
    /// Coordinate descent epochs after the interior point phase.
    pub epochs: usize,
    pub newton_steps: usize,
    pub converged: bool,
}

impl SvmSolution {
    pub fn gap(&self) -> f64 {
        self.objective - self.dual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxMarginSolver {
    pub c: f64,
    /// Absolute duality-gap tolerance.
    pub tol: f64,
    pub max_epochs: usize,
    /// Interior point steps before coordinate descent; 0 skips that phase.
    pub newton_steps: usize,
    /// Seed of the coordinate visiting order.
    pub seed: u64,
}

impl MaxMarginSolver {
    pub fn new(c: f64, tol: f64) -> Self {
        MaxMarginSolver {
            c,
            tol,
            max_epochs: 200_000,
            newton_steps: 100,
            seed: 0,
        }
    }

    pub fn solve(&self, examples: &[LabeledExample]) -> Result<SvmSolution> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig("C must be positive".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidConfig("solver tolerance must be positive".into()));
        }
        if !examples.iter().any(|e| e.sign == Sign::Positive) {
            return Err(Error::EmptyClass("positive"));
        }
        if !examples.iter().any(|e| e.sign == Sign::Negative) {
            return Err(Error::EmptyClass("negative"));
        }
        let dim = examples[0].phi.dim();
        for (i, e) in examples.iter().enumerate() {
            if e.phi.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.phi.dim(),
                });
            }
            if !e.phi.is_finite() {
                return Err(Error::NonFiniteFeature(i));
            }
        }

        let c = self.c;
        let n = examples.len();
        let q_diag: Vec<f64> = examples.iter().map(|e| e.phi.norm_sq()).collect();

        let (mut alpha, newton_steps) = if self.newton_steps > 0 {
            interior_point(examples, dim, c, self.tol, self.newton_steps)
        } else {
            (vec![0.0; n], 0)
        };
        // Zero feature vectors cannot be satisfied; their multipliers sit at C.
        for i in 0..n {
            if q_diag[i] == 0.0 {
                alpha[i] = c;
            }
        }

        let mut w = weights_from_alpha(examples, &alpha, dim);
        let (mut primal, mut dual) = objectives(examples, &alpha, &w, c);
        let mut best = (primal, w.clone());
        let mut converged = primal - dual <= self.tol;
        let mut order: Vec<usize> = (0..n).filter(|&i| q_diag[i] > 0.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut epochs = 0;

        while !converged && epochs < self.max_epochs {
            epochs += 1;
            order.shuffle(&mut rng);
            for &i in &order {
                let ex = &examples[i];
                let y = ex.sign.value();
                let g = y * ex.phi.dot(&w) - 1.0;
                let pg = if alpha[i] <= 0.0 {
                    g.min(0.0)
                } else if alpha[i] >= c {
                    g.max(0.0)
                } else {
                    g
                };
                if pg == 0.0 {
                    continue;
                }
                let old = alpha[i];
                alpha[i] = (old - g / q_diag[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y;
                if delta != 0.0 {
                    for &(j, v) in ex.phi.entries() {
                        w[j] += delta * v;
                    }
                }
            }
            // Rebuild w from the multipliers so accumulated drift does not
            // pollute the gap estimate.
            w = weights_from_alpha(examples, &alpha, dim);
            (primal, dual) = objectives(examples, &alpha, &w, c);
            if primal < best.0 {
                best = (primal, w.clone());
            }
            // any w bounds the optimum from above, any feasible alpha from below
            converged = best.0 - dual <= self.tol;
        }

        Ok(SvmSolution {
            beta: best.1,
            objective: best.0,
            dual,
            epochs,
            newton_steps,
            converged,
        })
    }
}

/// Primal-dual interior point (Mehrotra predictor-corrector) on
///
/// ```text
/// min 1/2 |w|^2 + C 1'xi   s.t.  Z w + xi - s = 1,  xi, s >= 0
/// ```
///
/// with `Z` the signed feature rows. Each step solves a `dim x dim` system,
/// so the cost is linear in the number of examples. Returns the multipliers
/// (clipped to `[0, C]`) with the smallest duality gap seen, and the number
/// of steps taken.
fn interior_point(examples: &[LabeledExample], dim: usize, c: f64, tol: f64, max_steps: usize) -> (Vec<f64>, usize) {
    let n = examples.len();
    let z: Vec<Vec<(usize, f64)>> = examples
        .iter()
        .map(|e| {
            let y = e.sign.value();
            e.phi.entries().iter().map(|&(j, v)| (j, y * v)).collect()
        })
        .collect();
    let zdot = |i: usize, v: &[f64]| z[i].iter().map(|&(j, x)| x * v[j]).sum::<f64>();
    let zt = |u: &[f64]| {
        let mut out = vec![0.0; dim];
        for (i, row) in z.iter().enumerate() {
            if u[i] != 0.0 {
                for &(j, x) in row {
                    out[j] += x * u[i];
                }
            }
        }
        out
    };

    let mut w = vec![0.0; dim];
    let mut xi = vec![1.0; n];
    let mut s = vec![1.0; n];
    let mut alpha = vec![0.5 * c; n];
    let mut nu = vec![0.5 * c; n];
    let clipped = |a: &[f64]| a.iter().map(|v| v.clamp(0.0, c)).collect::<Vec<f64>>();

    let mut steps = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    while steps < max_steps {
        let ac = clipped(&alpha);
        let wc = weights_from_alpha(examples, &ac, dim);
        let (p, d) = objectives(examples, &ac, &wc, c);
        let gap = p - d;
        if best.as_ref().is_none_or(|b| gap < b.0) {
            best = Some((gap, ac));
        }
        if gap <= tol {
            break;
        }
        steps += 1;

        let ztalpha = zt(&alpha);
        let r_w: Vec<f64> = (0..dim).map(|j| w[j] - ztalpha[j]).collect();
        let r_xi: Vec<f64> = (0..n).map(|i| c - alpha[i] - nu[i]).collect();
        let r_s: Vec<f64> = (0..n).map(|i| zdot(i, &w) + xi[i] - 1.0 - s[i]).collect();
        let mu = (0..n).map(|i| alpha[i] * s[i] + nu[i] * xi[i]).sum::<f64>() / (2 * n) as f64;

        let dinv: Vec<f64> = (0..n).map(|i| 1.0 / (xi[i] / nu[i] + s[i] / alpha[i])).collect();
        let mut m = DMatrix::<f64>::identity(dim, dim);
        {
            let buf = m.as_mut_slice();
            for (i, row) in z.iter().enumerate() {
                for &(a, xa) in row {
                    let f = dinv[i] * xa;
                    for &(b, xb) in row {
                        buf[a * dim + b] += f * xb;
                    }
                }
            }
        }
        let chol = match m.cholesky() {
            Some(ch) => ch,
            None => break,
        };

        // Newton direction for complementarity targets c1 (alpha s) and c2 (nu xi)
        let direction = |c1: &[f64], c2: &[f64]| {
            let h: Vec<f64> = (0..n)
                .map(|i| -r_s[i] - (c2[i] - xi[i] * r_xi[i]) / nu[i] + c1[i] / alpha[i])
                .collect();
            let dh: Vec<f64> = (0..n).map(|i| dinv[i] * h[i]).collect();
            let zdh = zt(&dh);
            let rhs = DVector::from_iterator(dim, (0..dim).map(|j| -r_w[j] + zdh[j]));
            let dw: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
            let da: Vec<f64> = (0..n).map(|i| dinv[i] * (h[i] - zdot(i, &dw))).collect();
            let ds: Vec<f64> = (0..n).map(|i| (c1[i] - s[i] * da[i]) / alpha[i]).collect();
            let dxi: Vec<f64> = (0..n)
                .map(|i| (c2[i] - xi[i] * r_xi[i] + xi[i] * da[i]) / nu[i])
                .collect();
            let dnu: Vec<f64> = (0..n).map(|i| r_xi[i] - da[i]).collect();
            (dw, da, ds, dxi, dnu)
        };
        let max_step = |x: &[f64], dx: &[f64]| {
            x.iter()
                .zip(dx)
                .filter(|(_, d)| **d < 0.0)
                .map(|(v, d)| -v / d)
                .fold(1.0f64, f64::min)
        };
        let step_len = |ds: &[f64], dxi: &[f64], da: &[f64], dnu: &[f64]| {
            max_step(&s, ds)
                .min(max_step(&xi, dxi))
                .min(max_step(&alpha, da))
                .min(max_step(&nu, dnu))
        };

        let c1: Vec<f64> = (0..n).map(|i| -alpha[i] * s[i]).collect();
        let c2: Vec<f64> = (0..n).map(|i| -nu[i] * xi[i]).collect();
        let (_, da, ds, dxi, dnu) = direction(&c1, &c2);
        let t = step_len(&ds, &dxi, &da, &dnu);
        let mu_aff = (0..n)
            .map(|i| (alpha[i] + t * da[i]) * (s[i] + t * ds[i]) + (nu[i] + t * dnu[i]) * (xi[i] + t * dxi[i]))
            .sum::<f64>()
            / (2 * n) as f64;
        let sigma = (mu_aff / mu).powi(3);
        let c1: Vec<f64> = (0..n).map(|i| sigma * mu - alpha[i] * s[i] - da[i] * ds[i]).collect();
        let c2: Vec<f64> = (0..n).map(|i| sigma * mu - nu[i] * xi[i] - dnu[i] * dxi[i]).collect();
        let (dw, da, ds, dxi, dnu) = direction(&c1, &c2);
        let t = 0.99 * step_len(&ds, &dxi, &da, &dnu);

        for j in 0..dim {
            w[j] += t * dw[j];
        }
        for i in 0..n {
            alpha[i] += t * da[i];
            s[i] += t * ds[i];
            xi[i] += t * dxi[i];
            nu[i] += t * dnu[i];
        }
    }
    (best.map_or_else(|| vec![0.0; n], |b| b.1), steps)
}

/// Solves with default iteration limits and visiting order.
pub fn solve_max_margin(examples: &[LabeledExample], c: f64, tol: f64) -> Result<SvmSolution> {
    MaxMarginSolver::new(c, tol).solve(examples)
}

fn weights_from_alpha(examples: &[LabeledExample], alpha: &[f64], dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim];
    for (ex, &a) in examples.iter().zip(alpha) {
        if a == 0.0 {
            continue;
        }
        let s = a * ex.sign.value();
        for &(j, v) in ex.phi.entries() {
            w[j] += s * v;
        }
    }
    w
}

fn objectives(examples: &[LabeledExample], alpha: &[f64], w: &[f64], c: f64) -> (f64, f64) {
    let half_norm = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    (
        primal_objective(examples, w, c, half_norm),
        alpha.iter().sum::<f64>() - half_norm,
    )
}

fn primal_objective(examples: &[LabeledExample], w: &[f64], c: f64, half_norm: f64) -> f64 {
    half_norm + c * examples.iter().map(|e| hinge(e, w)).sum::<f64>()
}

/// Slack `max(0, 1 - y beta.phi)` of one example.
pub fn hinge(example: &LabeledExample, beta: &[f64]) -> f64 {
    (1.0 - example.sign.value() * example.phi.dot(beta)).max(0.0)
}

/// Primal objective of `beta` on `examples`.
pub fn objective(examples: &[LabeledExample], beta: &[f64], c: f64) -> f64 {
    let half_norm = 0.5 * beta.iter().map(|v| v * v).sum::<f64>();
    primal_objective(examples, beta, c, half_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: &[f64], sign: Sign) -> LabeledExample {
        LabeledExample {
            phi: SparseVector::from_dense(x),
            sign,
            source: None,
        }
    }

    #[test]
    fn separable_one_dimensional() {
        let data = vec![ex(&[2.0], Sign::Positive), ex(&[-2.0], Sign::Negative)];
        let sol = solve_max_margin(&data, 1.0, 1e-12).unwrap();
        assert!((sol.beta[0] - 0.5).abs() < 1e-9);
        assert!((sol.objective - 0.125).abs() < 1e-9);
    }

    #[test]
    fn contradictory_labels() {
        let data = vec![ex(&[1.0], Sign::Positive), ex(&[1.0], Sign::Negative)];
        let sol = solve_max_margin(&data, 1.0, 1e-12).unwrap();
        assert!(sol.beta[0].abs() < 1e-9);
        let slack: f64 = data.iter().map(|e| hinge(e, &sol.beta)).sum();
        assert!((slack - 2.0).abs() < 1e-9);
        assert!((sol.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn precondition_errors() {
        assert_eq!(solve_max_margin(&[], 1.0, 1e-6), Err(Error::EmptyClass("positive")));
        let only_pos = vec![ex(&[1.0], Sign::Positive)];
        assert_eq!(
            solve_max_margin(&only_pos, 1.0, 1e-6),
            Err(Error::EmptyClass("negative"))
        );
        let bad = vec![ex(&[f64::NAN], Sign::Positive), ex(&[1.0], Sign::Negative)];
        assert_eq!(solve_max_margin(&bad, 1.0, 1e-6), Err(Error::NonFiniteFeature(0)));
    }

    #[test]
    fn zero_vectors_are_tolerated() {
        let data = vec![
            ex(&[0.0, 0.0], Sign::Positive),
            ex(&[1.0, 1.0], Sign::Positive),
            ex(&[-1.0, 0.0], Sign::Negative),
        ];
        let sol = solve_max_margin(&data, 1.0, 1e-10).unwrap();
        assert!(sol.converged);
        assert!(sol.gap() <= 1e-10);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let data: Vec<LabeledExample> = (0..40)
            .map(|i| {
                let x = (i as f64 * 0.731).sin();
                let y = (i as f64 * 1.37).cos();
                ex(
                    &[x, y, 1.0],
                    if x + 0.3 * y > 0.1 {
                        Sign::Positive
                    } else {
                        Sign::Negative
                    },
                )
            })
            .collect();
        let a = solve_max_margin(&data, 10.0, 1e-8).unwrap();
        let b = solve_max_margin(&data, 10.0, 1e-8).unwrap();
        assert_eq!(a, b);
    }
}
