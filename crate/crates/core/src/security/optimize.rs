//! Multi-start minimization of the usable entropy over device models.
//!
//! Each start runs an augmented-Lagrangian loop whose inner problems are
//! solved by L-BFGS with analytic gradients. Minimizing `(λ₁ - λ₂)²` is
//! equivalent to minimizing the usable entropy, which depends on `|λ₁ - λ₂|`
//! only and decreases with it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ConstraintSet, DeviceModel, Forward, Params, CONSTRAINT_COUNT, PARAMETER_COUNT};
use super::usable_entropy;
use crate::error::{Error, Result};
use crate::link::stream_rng;
use crate::polarization::PoincareVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub starts: usize,
    pub seed: u64,
    /// Largest accepted constraint violation.
    pub tolerance: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            starts: 32,
            seed: 0x0b5e_55ed,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsableEntropyMinimum {
    pub s_min: f64,
    /// Achieving model, efficiencies normalized to mean 1.
    pub model: DeviceModel,
    pub max_violation: f64,
    /// Number of starts that ended on a feasible point.
    pub feasible_starts: usize,
}

pub fn minimize_usable_entropy(
    cs: &ConstraintSet,
    options: &OptimizerOptions,
) -> Result<UsableEntropyMinimum> {
    if options.starts < 2 {
        return Err(Error::Config("optimizer needs at least 2 starts".into()));
    }
    if !(options.tolerance > 0.0) {
        return Err(Error::Config("optimizer tolerance must be > 0".into()));
    }
    let problem = Problem::new(cs, options.tolerance);
    let aligned = data_aligned_start(cs);
    let canonical = canonical_start(cs);

    let mut feasible = None;
    let mut worst = f64::INFINITY;
    for x0 in [aligned, canonical] {
        let (x, viol) = problem.solve(x0, 0.0);
        worst = worst.min(viol);
        if viol <= options.tolerance {
            feasible = Some(x);
            break;
        }
    }
    let Some(feasible) = feasible else {
        return Err(Error::Infeasible { violation: worst });
    };

    let starts: Vec<Params> = (0..options.starts)
        .map(|i| match i {
            0 => aligned,
            1 => canonical,
            _ => perturbed(&aligned, options.seed, i as u64),
        })
        .collect();
    let mut results: Vec<(Params, f64)> = starts
        .into_par_iter()
        .map(|x0| problem.solve(x0, 1.0))
        .collect();
    results.insert(0, (feasible, problem.violation(&feasible)));

    let mut best: Option<(f64, Params, f64)> = None;
    let mut feasible_starts = 0;
    for (x, viol) in results {
        if !(viol <= options.tolerance) {
            continue;
        }
        feasible_starts += 1;
        let dm = DeviceModel::from_params(&x);
        let s = usable_entropy(dm.lambda1, dm.lambda2)?;
        if !s.is_finite() {
            return Err(Error::Numerical("non-finite usable entropy".into()));
        }
        if best.as_ref().is_none_or(|(b, _, _)| s < *b) {
            best = Some((s, x, viol));
        }
    }
    let (s_min, x, max_violation) = best.expect("feasibility pass point is feasible");
    Ok(UsableEntropyMinimum {
        s_min,
        model: DeviceModel::from_params(&x).normalized(),
        max_violation,
        feasible_starts,
    })
}

struct Problem {
    lo: [f64; CONSTRAINT_COUNT],
    hi: [f64; CONSTRAINT_COUNT],
    scale: [f64; CONSTRAINT_COUNT],
    tolerance: f64,
}

const MAX_OUTER: usize = 40;
const MAX_INNER: usize = 400;
const RHO_START: f64 = 10.0;
const RHO_MAX: f64 = 1e9;

impl Problem {
    fn new(cs: &ConstraintSet, tolerance: f64) -> Self {
        let mut lo = [0.0; CONSTRAINT_COUNT];
        let mut hi = [0.0; CONSTRAINT_COUNT];
        let mut scale = [0.0; CONSTRAINT_COUNT];
        for i in 0..CONSTRAINT_COUNT {
            let (l, h) = cs.bounds(i);
            lo[i] = l;
            hi[i] = h;
            scale[i] = (h - l).max(1e-3);
        }
        Self {
            lo,
            hi,
            scale,
            tolerance,
        }
    }

    fn violation(&self, x: &Params) -> f64 {
        if !admissible(x) {
            return f64::INFINITY;
        }
        let f = Forward::new(x).f;
        if f.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        (0..CONSTRAINT_COUNT).fold(0.0, |w: f64, i| w.max(self.lo[i] - f[i]).max(f[i] - self.hi[i]))
    }

    /// Augmented Lagrangian value and gradient.
    fn merit(&self, x: &Params, y: &Multipliers, rho: f64, weight: f64) -> (f64, Params) {
        if !admissible(x) {
            return (f64::INFINITY, [0.0; PARAMETER_COUNT]);
        }
        let fw = Forward::new(x);
        let mut value = weight * fw.t * fw.t;
        let mut gf = [0.0; CONSTRAINT_COUNT];
        for i in 0..CONSTRAINT_COUNT {
            let s = self.scale[i];
            let g_lo = (self.lo[i] - fw.f[i]) / s;
            let g_hi = (fw.f[i] - self.hi[i]) / s;
            let a = (y.lo[i] + rho * g_lo).max(0.0);
            let b = (y.hi[i] + rho * g_hi).max(0.0);
            value += (a * a - y.lo[i] * y.lo[i] + b * b - y.hi[i] * y.hi[i]) / (2.0 * rho);
            gf[i] = (b - a) / s;
        }
        let grad = fw.backward(x, &gf, 2.0 * weight * fw.t);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return (f64::INFINITY, [0.0; PARAMETER_COUNT]);
        }
        (value, grad)
    }

    /// Returns the final point and its absolute constraint violation.
    fn solve(&self, x0: Params, weight: f64) -> (Params, f64) {
        let mut x = x0;
        let mut y = Multipliers::default();
        let mut rho = RHO_START;
        let mut prev_scaled = f64::INFINITY;
        let mut prev_obj = f64::INFINITY;
        for outer in 0..MAX_OUTER {
            let gtol = 1e-9 * (1.0 + rho);
            x = lbfgs(|x| self.merit(x, &y, rho, weight), x, MAX_INNER, gtol);
            recenter(&mut x);
            let fw = Forward::new(&x);
            let mut scaled: f64 = 0.0;
            for i in 0..CONSTRAINT_COUNT {
                let s = self.scale[i];
                let g_lo = (self.lo[i] - fw.f[i]) / s;
                let g_hi = (fw.f[i] - self.hi[i]) / s;
                scaled = scaled.max(g_lo).max(g_hi);
                y.lo[i] = (y.lo[i] + rho * g_lo).max(0.0);
                y.hi[i] = (y.hi[i] + rho * g_hi).max(0.0);
            }
            let obj = weight * fw.t * fw.t;
            let viol = self.violation(&x);
            if viol <= self.tolerance && outer >= 2 && (obj - prev_obj).abs() <= 1e-10 {
                break;
            }
            if weight == 0.0 && viol <= 0.1 * self.tolerance {
                break;
            }
            if scaled > 0.25 * prev_scaled {
                rho = (rho * 10.0).min(RHO_MAX);
            }
            prev_scaled = scaled;
            prev_obj = obj;
        }
        let viol = self.violation(&x);
        (x, viol)
    }
}

#[derive(Default)]
struct Multipliers {
    lo: [f64; CONSTRAINT_COUNT],
    hi: [f64; CONSTRAINT_COUNT],
}

const PREP_EFF: usize = 20;
const DET_EFF: usize = 26;
/// Efficiencies stay within `e^±MAX_LOG_EFFICIENCY` of their mean.
const MAX_LOG_EFFICIENCY: f64 = 20.0;

fn admissible(x: &Params) -> bool {
    x.iter().all(|v| v.is_finite())
        && x[PREP_EFF..CHANNEL].iter().all(|v| v.abs() <= MAX_LOG_EFFICIENCY)
}

/// Remove the overall efficiency scale, which the constraints cannot see.
fn recenter(x: &mut Params) {
    for start in [PREP_EFF, DET_EFF] {
        let mean = x[start..start + 6].iter().sum::<f64>() / 6.0;
        x[start..start + 6].iter_mut().for_each(|v| *v -= mean);
    }
}

fn dot(a: &Params, b: &Params) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lbfgs<F>(mut f: F, x0: Params, max_iter: usize, gtol: f64) -> Params
where
    F: FnMut(&Params) -> (f64, Params),
{
    const MEMORY: usize = 8;
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut s_hist: Vec<Params> = Vec::with_capacity(MEMORY);
    let mut y_hist: Vec<Params> = Vec::with_capacity(MEMORY);
    let mut stalled = 0;
    for _ in 0..max_iter {
        if g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) <= gtol {
            break;
        }
        // Two-loop recursion.
        let mut q = g;
        let k = s_hist.len();
        let mut alpha = [0.0; MEMORY];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for j in 0..PARAMETER_COUNT {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / g.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for j in 0..PARAMETER_COUNT {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut d = q.map(|v| -v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            let scale = 1.0 / g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            d = g.map(|v| -v * scale);
            slope = dot(&g, &d);
        }

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = x;
            for j in 0..PARAMETER_COUNT {
                xn[j] += step * d[j];
            }
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Params = std::array::from_fn(|j| xn[j] - x[j]);
        let yv: Params = std::array::from_fn(|j| gn[j] - g[j]);
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        let decrease = fx - fn_;
        x = xn;
        g = gn;
        if decrease <= 1e-16 * (1.0 + fx.abs()) {
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        } else {
            stalled = 0;
        }
        fx = fn_;
    }
    x
}

const CHANNEL: usize = 32;

fn channel_params(t: f64, lz: f64) -> (f64, f64) {
    let tau = ((1.0 + lz) / 2.0).clamp(0.02, 0.98);
    let l1 = ((tau + t) / 2.0).clamp(0.0, tau);
    let kappa = (l1 / tau).clamp(0.02, 0.98);
    (tau.sqrt().asin(), kappa.sqrt().asin())
}

/// Canonical directions, efficiencies from the marginals and the channel
/// read off the diagonal correlators.
fn canonical_start(cs: &ConstraintSet) -> Params {
    let k = |i: usize| cs.entries[i].observed;
    let t = ((k(0).abs() + k(4).abs()) / 2.0).min(1.0);
    let mut x = DeviceModel::with_channel(1.0, 0.0).to_params();
    let (u, v) = channel_params(t, k(8).abs());
    x[CHANNEL] = u;
    x[CHANNEL + 1] = v;
    set_efficiencies(&mut x, cs);
    x
}

/// Detector directions matched to the observed correlator columns.
fn data_aligned_start(cs: &ConstraintSet) -> Params {
    let k = |a: usize, b: usize| cs.entries[3 * a + b].observed;
    let det_xy = k(0, 0) * k(1, 1) - k(0, 1) * k(1, 0);
    let lxy = det_xy.abs().sqrt().min(1.0);
    let lz = k(2, 2).abs().min(1.0);
    let mut dm = DeviceModel::with_channel(1.0, 0.0);
    if lxy > 0.05 && lz > 0.05 {
        for b in 0..3 {
            let col = [k(0, b) / lxy, k(1, b) / lxy, k(2, b) / lz];
            let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            if n < 1e-9 {
                continue;
            }
            let v = PoincareVector::new(col[0] / n, col[1] / n, col[2] / n);
            for (d, s) in [(2 * b, 1.0), (2 * b + 1, -1.0)] {
                let (az, pol) = v.scaled(s).to_angles();
                dm.det_angles[d] = [az, pol];
            }
        }
    }
    let mut x = dm.to_params();
    let (u, v) = channel_params(lxy, lz);
    x[CHANNEL] = u;
    x[CHANNEL + 1] = v;
    set_efficiencies(&mut x, cs);
    x
}

fn set_efficiencies(x: &mut Params, cs: &ConstraintSet) {
    for i in 0..6 {
        x[PREP_EFF + i] = (6.0 * cs.entries[9 + i].observed).max(1e-3).ln();
        x[DET_EFF + i] = (6.0 * cs.entries[15 + i].observed).max(1e-3).ln();
    }
    recenter(x);
}

fn perturbed(base: &Params, seed: u64, index: u64) -> Params {
    let mut rng = stream_rng(seed, index);
    let angle = Normal::new(0.0, 0.3).expect("valid normal");
    let eff = Normal::new(0.0, 0.1).expect("valid normal");
    let mut x = *base;
    for v in x[..PREP_EFF].iter_mut() {
        *v += angle.sample(&mut rng);
    }
    for v in x[PREP_EFF..CHANNEL].iter_mut() {
        *v += eff.sample(&mut rng);
    }
    x[CHANNEL] += rng.random_range(-0.15..0.15);
    x[CHANNEL + 1] += rng.random_range(-0.15..0.15);
    x
}
