//! Device model: free preparation/detection directions, per-channel
//! efficiencies and a two-parameter channel, with the 21 observable
//! constraint functions and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CorrelatorSet, MarginalSet};
use crate::polarization::{Basis, PoincareVector, ProtocolState};

pub const PARAMETER_COUNT: usize = 34;
pub const CONSTRAINT_COUNT: usize = 21;

// Layout of the flat parameter vector.
const PREP_ANGLES: usize = 0; // 4 directions × (azimuth, polar)
const DET_ANGLES: usize = 8; // 6 directions × (azimuth, polar)
const PREP_EFF: usize = 20; // 6 log-efficiencies
const DET_EFF: usize = 26; // 6 log-efficiencies
const CHANNEL: usize = 32; // (u, v): λ₁+λ₂ = sin²u, λ₁/(λ₁+λ₂) = sin²v

pub type Params = [f64; PARAMETER_COUNT];

/// The 34 parameters the security minimization searches over.
///
/// The Z± preparations are pinned to ±ŝ₃; the other four preparations and all
/// six detectors are free unit vectors given by `(azimuth, polar)` in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    /// `X+, X-, Y+, Y-` preparation directions.
    pub prep_angles: [[f64; 2]; 4],
    /// `X+, X-, Y+, Y-, Z+, Z-` detector directions.
    pub det_angles: [[f64; 2]; 6],
    pub prep_efficiencies: [f64; 6],
    pub det_efficiencies: [f64; 6],
    pub lambda1: f64,
    pub lambda2: f64,
}

impl DeviceModel {
    /// Canonical orthogonal directions, unit efficiencies, noiseless channel.
    pub fn ideal() -> Self {
        Self::with_channel(1.0, 0.0)
    }

    /// Canonical directions and unit efficiencies with the given channel.
    pub fn with_channel(lambda1: f64, lambda2: f64) -> Self {
        let angles = |s: ProtocolState| {
            let (a, p) = s.detector_vector().to_angles();
            [a, p]
        };
        Self {
            prep_angles: std::array::from_fn(|i| angles(ProtocolState::from_index(i))),
            det_angles: std::array::from_fn(|i| angles(ProtocolState::from_index(i))),
            prep_efficiencies: [1.0; 6],
            det_efficiencies: [1.0; 6],
            lambda1,
            lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l1, l2) = (self.lambda1, self.lambda2);
        if !(l1 >= 0.0 && l2 >= 0.0 && l1 + l2 <= 1.0 + 1e-12) {
            return Err(Error::Config(format!("(λ₁, λ₂) = ({l1}, {l2}) outside the simplex")));
        }
        if self
            .prep_efficiencies
            .iter()
            .chain(self.det_efficiencies.iter())
            .any(|e| !(*e > 0.0))
        {
            return Err(Error::Config("efficiencies must be > 0".into()));
        }
        Ok(())
    }

    pub fn prep_vectors(&self) -> [PoincareVector; 6] {
        std::array::from_fn(|i| match i {
            4 => PoincareVector::S3,
            5 => -PoincareVector::S3,
            _ => PoincareVector::from_angles(self.prep_angles[i][0], self.prep_angles[i][1]),
        })
    }

    pub fn det_vectors(&self) -> [PoincareVector; 6] {
        std::array::from_fn(|i| PoincareVector::from_angles(self.det_angles[i][0], self.det_angles[i][1]))
    }

    /// Equatorial and polar contraction of the channel,
    /// `(λ₁ - λ₂, 2(λ₁ + λ₂) - 1)`.
    pub fn contraction(&self) -> (f64, f64) {
        (
            self.lambda1 - self.lambda2,
            2.0 * (self.lambda1 + self.lambda2) - 1.0,
        )
    }

    /// Efficiencies rescaled to mean 1 (the overall scale is a gauge freedom).
    pub fn normalized(&self) -> Self {
        let norm = |e: [f64; 6]| {
            let mean = e.iter().sum::<f64>() / 6.0;
            e.map(|v| v / mean)
        };
        Self {
            prep_efficiencies: norm(self.prep_efficiencies),
            det_efficiencies: norm(self.det_efficiencies),
            ..self.clone()
        }
    }

    pub fn to_params(&self) -> Params {
        let mut x = [0.0; PARAMETER_COUNT];
        for (k, a) in self.prep_angles.iter().enumerate() {
            x[PREP_ANGLES + 2 * k] = a[0];
            x[PREP_ANGLES + 2 * k + 1] = a[1];
        }
        for (k, a) in self.det_angles.iter().enumerate() {
            x[DET_ANGLES + 2 * k] = a[0];
            x[DET_ANGLES + 2 * k + 1] = a[1];
        }
        for k in 0..6 {
            x[PREP_EFF + k] = self.prep_efficiencies[k].ln();
            x[DET_EFF + k] = self.det_efficiencies[k].ln();
        }
        let tau = (self.lambda1 + self.lambda2).clamp(0.0, 1.0);
        let kappa = if tau > 0.0 {
            (self.lambda1 / tau).clamp(0.0, 1.0)
        } else {
            0.5
        };
        x[CHANNEL] = tau.sqrt().asin();
        x[CHANNEL + 1] = kappa.sqrt().asin();
        x
    }

    pub fn from_params(x: &Params) -> Self {
        let tau = x[CHANNEL].sin().powi(2);
        let kappa = x[CHANNEL + 1].sin().powi(2);
        Self {
            prep_angles: std::array::from_fn(|k| [x[PREP_ANGLES + 2 * k], x[PREP_ANGLES + 2 * k + 1]]),
            det_angles: std::array::from_fn(|k| [x[DET_ANGLES + 2 * k], x[DET_ANGLES + 2 * k + 1]]),
            prep_efficiencies: std::array::from_fn(|k| x[PREP_EFF + k].exp()),
            det_efficiencies: std::array::from_fn(|k| x[DET_EFF + k].exp()),
            lambda1: tau * kappa,
            lambda2: tau * (1.0 - kappa),
        }
    }
}

/// Predicted click distribution `q[prep][detector]`, normalized to sum to 1.
pub fn model_probabilities(dm: &DeviceModel) -> Result<[[f64; 6]; 6]> {
    dm.validate()?;
    let fw = Forward::new(&dm.to_params());
    Ok(fw.q.map(|row| row.map(|v| v / fw.total)))
}

/// The 21 constraint functions: nine correlators (`XX, XY, …, ZZ`), six
/// preparation frequencies, six detection frequencies.
pub fn constraint_functions(q: &[[f64; 6]; 6]) -> [f64; CONSTRAINT_COUNT] {
    let mut f = [0.0; CONSTRAINT_COUNT];
    for a in 0..3 {
        for b in 0..3 {
            let (pp, pm) = (q[2 * a][2 * b], q[2 * a][2 * b + 1]);
            let (mp, mm) = (q[2 * a + 1][2 * b], q[2 * a + 1][2 * b + 1]);
            let n = pp + pm + mp + mm;
            f[3 * a + b] = if n > 0.0 { (pp + mm - pm - mp) / n } else { 0.0 };
        }
    }
    let total: f64 = q.iter().flatten().sum();
    for a in 0..6 {
        f[9 + a] = q[a].iter().sum::<f64>() / total;
    }
    for b in 0..6 {
        f[15 + b] = q.iter().map(|r| r[b]).sum::<f64>() / total;
    }
    f
}

pub fn constraint_name(i: usize) -> String {
    match i {
        0..=8 => CorrelatorSet::name(Basis::ALL[i / 3], Basis::ALL[i % 3]).to_string(),
        9..=14 => format!("P_{}", ProtocolState::from_index(i - 9).label()),
        15..=20 => format!("D_{}", ProtocolState::from_index(i - 15).label()),
        _ => panic!("constraint index {i} out of range"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub observed: f64,
    pub deviation: f64,
}

/// Observed values and standard deviations of the 21 constraint functions,
/// with the confidence multiplier σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub entries: [Constraint; CONSTRAINT_COUNT],
    pub sigma: f64,
}

impl ConstraintSet {
    pub fn new(entries: [Constraint; CONSTRAINT_COUNT], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("σ = {sigma} must be > 0")));
        }
        if entries
            .iter()
            .any(|c| !c.observed.is_finite() || !(c.deviation >= 0.0))
        {
            return Err(Error::Config("constraint values must be finite with δ >= 0".into()));
        }
        Ok(Self { entries, sigma })
    }

    pub fn from_observations(c: &CorrelatorSet, m: &MarginalSet, sigma: f64) -> Result<Self> {
        let mut entries = [Constraint {
            observed: 0.0,
            deviation: 0.0,
        }; CONSTRAINT_COUNT];
        for a in Basis::ALL {
            for b in Basis::ALL {
                let corr = c.get(a, b);
                entries[3 * a.index() + b.index()] = Constraint {
                    observed: c.value(a, b)?,
                    deviation: corr.delta,
                };
            }
        }
        for k in 0..6 {
            entries[9 + k] = Constraint {
                observed: m.prep[k].value,
                deviation: m.prep[k].std,
            };
            entries[15 + k] = Constraint {
                observed: m.det[k].value,
                deviation: m.det[k].std,
            };
        }
        Self::new(entries, sigma)
    }

    /// Exact constraint values of a device model with deviations computed as
    /// for `detected` clicks split evenly over the nine basis pairs.
    pub fn from_model(dm: &DeviceModel, detected: f64, sigma: f64) -> Result<Self> {
        let q = model_probabilities(dm)?;
        let f = constraint_functions(&q);
        let per_pair = detected / 9.0;
        let entries = std::array::from_fn(|i| {
            let v = f[i];
            let deviation = if i < 9 {
                ((1.0 - v * v).max(0.0) / per_pair).sqrt()
            } else {
                (v * (1.0 - v) / detected).sqrt()
            };
            Constraint {
                observed: v,
                deviation,
            }
        });
        Self::new(entries, sigma)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.entries, sigma)
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let c = self.entries[i];
        let w = self.sigma * c.deviation;
        (c.observed - w, c.observed + w)
    }

    /// Largest amount by which `f` leaves its interval.
    pub fn violation(&self, f: &[f64; CONSTRAINT_COUNT]) -> f64 {
        (0..CONSTRAINT_COUNT).fold(0.0, |worst: f64, i| {
            let (lo, hi) = self.bounds(i);
            worst.max(lo - f[i]).max(f[i] - hi)
        })
    }

    pub fn model_violation(&self, dm: &DeviceModel) -> f64 {
        let fw = Forward::new(&dm.to_params());
        self.violation(&fw.f)
    }
}

/// Forward pass of the model, keeping intermediates for the gradient.
pub(crate) struct Forward {
    prep: [[f64; 3]; 6],
    det: [[f64; 3]; 6],
    w: [f64; 6],
    e: [f64; 6],
    q: [[f64; 6]; 6],
    pair_total: [f64; 9],
    total: f64,
    tau: f64,
    kappa: f64,
    pub t: f64,
    lz: f64,
    pub f: [f64; CONSTRAINT_COUNT],
}

fn unit(az: f64, pol: f64) -> [f64; 3] {
    let (sp, cp) = pol.sin_cos();
    let (sa, ca) = az.sin_cos();
    [sp * ca, sp * sa, cp]
}

impl Forward {
    pub fn new(x: &Params) -> Self {
        let mut prep = [[0.0; 3]; 6];
        for (k, p) in prep.iter_mut().take(4).enumerate() {
            *p = unit(x[PREP_ANGLES + 2 * k], x[PREP_ANGLES + 2 * k + 1]);
        }
        prep[4] = [0.0, 0.0, 1.0];
        prep[5] = [0.0, 0.0, -1.0];
        let det: [[f64; 3]; 6] =
            std::array::from_fn(|k| unit(x[DET_ANGLES + 2 * k], x[DET_ANGLES + 2 * k + 1]));
        let w: [f64; 6] = std::array::from_fn(|k| x[PREP_EFF + k].exp());
        let e: [f64; 6] = std::array::from_fn(|k| x[DET_EFF + k].exp());
        let tau = x[CHANNEL].sin().powi(2);
        let kappa = x[CHANNEL + 1].sin().powi(2);
        let t = tau * (2.0 * kappa - 1.0);
        let lz = 2.0 * tau - 1.0;

        let mut q = [[0.0; 6]; 6];
        for a in 0..6 {
            let p = prep[a];
            for d in 0..6 {
                let m = det[d];
                let v = 0.5 * (1.0 + t * (p[0] * m[0] + p[1] * m[1]) + lz * p[2] * m[2]);
                q[a][d] = w[a] * e[d] * v;
            }
        }

        let mut f = [0.0; CONSTRAINT_COUNT];
        let mut pair_total = [0.0; 9];
        for ab in 0..3 {
            for db in 0..3 {
                let (pp, pm) = (q[2 * ab][2 * db], q[2 * ab][2 * db + 1]);
                let (mp, mm) = (q[2 * ab + 1][2 * db], q[2 * ab + 1][2 * db + 1]);
                let n = (pp + pm + mp + mm).max(1e-300);
                pair_total[3 * ab + db] = n;
                f[3 * ab + db] = (pp + mm - pm - mp) / n;
            }
        }
        let total: f64 = q.iter().flatten().sum::<f64>().max(1e-300);
        for a in 0..6 {
            f[9 + a] = q[a].iter().sum::<f64>() / total;
            f[15 + a] = q.iter().map(|r| r[a]).sum::<f64>() / total;
        }

        Self {
            prep,
            det,
            w,
            e,
            q,
            pair_total,
            total,
            tau,
            kappa,
            t,
            lz,
            f,
        }
    }

    /// Gradient of `Σ gf_i f_i + gt·t` with respect to the parameters.
    pub fn backward(&self, x: &Params, gf: &[f64; CONSTRAINT_COUNT], gt: f64) -> Params {
        let mut gq = [[0.0; 6]; 6];

        for ab in 0..3 {
            for db in 0..3 {
                let k = 3 * ab + db;
                let g = gf[k];
                if g == 0.0 {
                    continue;
                }
                let c = self.f[k];
                let n = self.pair_total[k];
                for (sa, sign_a) in [(0, 1.0), (1, -1.0)] {
                    for (sd, sign_d) in [(0, 1.0), (1, -1.0)] {
                        gq[2 * ab + sa][2 * db + sd] += g * (sign_a * sign_d - c) / n;
                    }
                }
            }
        }
        let prep_dot: f64 = (0..6).map(|a| gf[9 + a] * self.f[9 + a]).sum();
        let det_dot: f64 = (0..6).map(|d| gf[15 + d] * self.f[15 + d]).sum();
        for a in 0..6 {
            for d in 0..6 {
                gq[a][d] += (gf[9 + a] - prep_dot + gf[15 + d] - det_dot) / self.total;
            }
        }

        let mut grad = [0.0; PARAMETER_COUNT];
        let mut g_t = gt;
        let mut g_lz = 0.0;
        let mut g_prep = [[0.0; 3]; 6];
        let mut g_det = [[0.0; 3]; 6];
        for a in 0..6 {
            for d in 0..6 {
                let g = gq[a][d];
                if g == 0.0 {
                    continue;
                }
                grad[PREP_EFF + a] += g * self.q[a][d];
                grad[DET_EFF + d] += g * self.q[a][d];
                let gb = g * self.w[a] * self.e[d];
                let p = self.prep[a];
                let m = self.det[d];
                g_t += gb * 0.5 * (p[0] * m[0] + p[1] * m[1]);
                g_lz += gb * 0.5 * p[2] * m[2];
                let half_t = 0.5 * gb * self.t;
                let half_z = 0.5 * gb * self.lz;
                g_prep[a][0] += half_t * m[0];
                g_prep[a][1] += half_t * m[1];
                g_prep[a][2] += half_z * m[2];
                g_det[d][0] += half_t * p[0];
                g_det[d][1] += half_t * p[1];
                g_det[d][2] += half_z * p[2];
            }
        }

        let angle_grad = |az: f64, pol: f64, g: [f64; 3]| {
            let (sp, cp) = pol.sin_cos();
            let (sa, ca) = az.sin_cos();
            let d_az = g[0] * (-sp * sa) + g[1] * (sp * ca);
            let d_pol = g[0] * (cp * ca) + g[1] * (cp * sa) - g[2] * sp;
            (d_az, d_pol)
        };
        for k in 0..4 {
            let (ga, gp) = angle_grad(x[PREP_ANGLES + 2 * k], x[PREP_ANGLES + 2 * k + 1], g_prep[k]);
            grad[PREP_ANGLES + 2 * k] = ga;
            grad[PREP_ANGLES + 2 * k + 1] = gp;
        }
        for k in 0..6 {
            let (ga, gp) = angle_grad(x[DET_ANGLES + 2 * k], x[DET_ANGLES + 2 * k + 1], g_det[k]);
            grad[DET_ANGLES + 2 * k] = ga;
            grad[DET_ANGLES + 2 * k + 1] = gp;
        }

        let s2u = (2.0 * x[CHANNEL]).sin();
        let s2v = (2.0 * x[CHANNEL + 1]).sin();
        grad[CHANNEL] = g_t * (2.0 * self.kappa - 1.0) * s2u + g_lz * 2.0 * s2u;
        grad[CHANNEL + 1] = g_t * 2.0 * self.tau * s2v;
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f_of(dm: &DeviceModel) -> [f64; CONSTRAINT_COUNT] {
        constraint_functions(&model_probabilities(dm).unwrap())
    }

    #[test]
    fn ideal_model_is_noiseless_fixed_point() {
        let f = f_of(&DeviceModel::ideal());
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((f[3 * a + b] - expect).abs() < 1e-12, "{}", constraint_name(3 * a + b));
            }
        }
        for v in &f[9..] {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_parameter_channel_correlators() {
        // λ₁ = 0.88, λ₂ = 0: equatorial contraction 0.88, polar 2·0.88 − 1.
        let f = f_of(&DeviceModel::with_channel(0.88, 0.0));
        assert!((f[0] - 0.88).abs() < 1e-12);
        assert!((f[4] - 0.88).abs() < 1e-12);
        assert!((f[8] - 0.76).abs() < 1e-12);
        // Isotropic 6% noise.
        let f = f_of(&DeviceModel::with_channel(0.91, 0.03));
        for k in [0, 4, 8] {
            assert!((f[k] - 0.88).abs() < 1e-12);
        }
    }

    #[test]
    fn detector_efficiency_shifts_only_its_marginal() {
        let base = DeviceModel::with_channel(0.9, 0.02);
        let mut boosted = base.clone();
        boosted.det_efficiencies[4] = 2.0;
        let f0 = f_of(&base);
        let f1 = f_of(&boosted);
        // Relative weight of D_Z+ doubles against every other detector.
        let ratio0 = f0[15 + 4] / f0[15];
        let ratio1 = f1[15 + 4] / f1[15];
        assert!((ratio1 / ratio0 - 2.0).abs() < 1e-12);
        for k in [0, 1, 3, 4] {
            assert!((f0[k] - f1[k]).abs() < 1e-12, "{}", constraint_name(k));
        }
        // Finite-difference check of the same perturbation direction.
        let h = 1e-6;
        let mut nudged = base.clone();
        nudged.det_efficiencies[4] = 1.0 + h;
        let fd = (f_of(&nudged)[15 + 4] - f0[15 + 4]) / h;
        let p = f0[15 + 4];
        assert!((fd - p * (1.0 - p)).abs() < 1e-5);
    }

    #[test]
    fn params_round_trip() {
        let dm = DeviceModel::with_channel(0.7, 0.1);
        let back = DeviceModel::from_params(&dm.to_params());
        assert!((back.lambda1 - 0.7).abs() < 1e-12);
        assert!((back.lambda2 - 0.1).abs() < 1e-12);
        assert_eq!(PARAMETER_COUNT, 4 * 2 + 6 * 2 + 6 + 6 + 2);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let mut x = DeviceModel::with_channel(0.8, 0.05).to_params();
            for v in x.iter_mut() {
                *v += rng.random_range(-0.4..0.4);
            }
            let gf: [f64; CONSTRAINT_COUNT] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let gt = rng.random_range(-1.0..1.0);
            let scalar = |x: &Params| {
                let fw = Forward::new(x);
                fw.f.iter().zip(gf.iter()).map(|(a, b)| a * b).sum::<f64>() + gt * fw.t
            };
            let analytic = Forward::new(&x).backward(&x, &gf, gt);
            for i in 0..PARAMETER_COUNT {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (scalar(&xp) - scalar(&xm)) / (2.0 * h);
                assert!(
                    (fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {i}: fd {fd} analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn rejects_invalid_models() {
        let mut dm = DeviceModel::ideal();
        dm.lambda1 = 0.8;
        dm.lambda2 = 0.3;
        assert!(model_probabilities(&dm).is_err());
        let mut dm = DeviceModel::ideal();
        dm.det_efficiencies[0] = 0.0;
        assert!(model_probabilities(&dm).is_err());
    }
}
