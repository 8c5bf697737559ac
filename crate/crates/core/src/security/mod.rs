//! Secret key fractions and rates.
//!
//! Three estimators are available: a closed-form reference-frame-independent
//! bound, the device-model minimization over 34 parameters with 21 interval
//! constraints, and a BB84 comparator that keeps only the X and Z bases.

pub mod model;
mod optimize;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{correlators, marginals, CorrelatorSet};
use crate::link::{multiphoton_fraction, CountMatrix};
use crate::polarization::{binary_entropy, binary_entropy_unchecked, Basis};

pub use model::{
    constraint_functions, constraint_name, model_probabilities, Constraint, ConstraintSet,
    DeviceModel, Params, CONSTRAINT_COUNT, PARAMETER_COUNT,
};
pub use optimize::{minimize_usable_entropy, OptimizerOptions, UsableEntropyMinimum};

/// Default confidence multiplier on the constraint intervals.
pub const DEFAULT_SIGMA: f64 = 5.0;

/// Worst-case entropy per key bit for the two-parameter channel:
/// `1 - h(λ₂ + (1 - λ₁ - λ₂)/2)`.
pub fn usable_entropy(lambda1: f64, lambda2: f64) -> Result<f64> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1 + lambda2 <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "(λ₁, λ₂) = ({lambda1}, {lambda2}) outside the simplex"
        )));
    }
    let p = (lambda2 + (1.0 - lambda1 - lambda2) / 2.0).clamp(0.0, 1.0);
    Ok(1.0 - binary_entropy(p)?)
}

/// `r = S_min - h((1 - C_ZZ + σ·δC_ZZ)/2)`, clamped to `[0, 1]`.
pub fn secret_key_fraction(s_min: f64, c_zz: f64, delta_zz: f64, sigma: f64) -> f64 {
    let e = ((1.0 - c_zz + sigma * delta_zz) / 2.0).clamp(0.0, 0.5);
    (s_min - binary_entropy_unchecked(e)).clamp(0.0, 1.0)
}

/// Asymptotic reference-frame-independent bound from the rotation-invariant
/// combination `C = C_XX² + C_XY² + C_YX² + C_YY²` and the key-basis error.
pub fn rfi_closed_form_rate(c: &CorrelatorSet) -> Result<f64> {
    let mut big_c = 0.0;
    for a in [Basis::X, Basis::Y] {
        for b in [Basis::X, Basis::Y] {
            big_c += c.value(a, b)?.powi(2);
        }
    }
    let e = ((1.0 - c.value(Basis::Z, Basis::Z)?) / 2.0).clamp(0.0, 1.0);
    Ok(rfi_from_invariants(big_c, e))
}

fn rfi_from_invariants(big_c: f64, e: f64) -> f64 {
    let h = binary_entropy_unchecked;
    let half = (big_c / 2.0).max(0.0);
    if e >= 1.0 {
        return 0.0;
    }
    let u = (half.sqrt() / (1.0 - e)).min(1.0);
    let v = if e > 0.0 {
        ((half - (1.0 - e).powi(2) * u * u).max(0.0).sqrt() / e).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = 1.0 - h(e) - (1.0 - e) * h((1.0 + u) / 2.0) - e * h((1.0 + v) / 2.0);
    r.clamp(0.0, 1.0)
}

/// BB84 on the same counts: `1 - h(E_ZZ) - h(E_XX)`, clamped at 0.
pub fn bb84_fraction(c: &CorrelatorSet) -> Result<f64> {
    bb84_fraction_finite(c, 0.0)
}

/// BB84 with each error rate widened by `σ·δ/2`.
pub fn bb84_fraction_finite(c: &CorrelatorSet, sigma: f64) -> Result<f64> {
    let err = |b: Basis| -> Result<f64> {
        let corr = c.get(b, b);
        let v = c.value(b, b)?;
        Ok(((1.0 - v + sigma * corr.delta) / 2.0).clamp(0.0, 0.5))
    };
    let h = binary_entropy_unchecked;
    Ok((1.0 - h(err(Basis::Z)?) - h(err(Basis::X)?)).clamp(0.0, 1.0))
}

/// Key-basis clicks per second.
pub fn sifted_rate(m: &CountMatrix) -> Result<f64> {
    if !(m.duration_s > 0.0) {
        return Err(Error::Config("count matrix duration must be > 0".into()));
    }
    Ok(m.sifted() as f64 / m.duration_s)
}

/// `max(0, (r - p_multi(μ)) × sifted rate)`, bits per second.
pub fn secure_key_rate(r: f64, m: &CountMatrix, mu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidProbability(r));
    }
    let sifted = sifted_rate(m)?;
    Ok(((r - multiphoton_fraction(mu)?) * sifted).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    DeviceModel,
    Bb84,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::ClosedForm => "closed-form",
            Method::DeviceModel => "device-model",
            Method::Bb84 => "bb84",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    /// Minimum usable entropy; `None` for estimators that do not compute it.
    pub s_min: Option<f64>,
    pub r: f64,
    pub sifted_rate: f64,
    pub secure_rate: f64,
    pub multiphoton_penalty: f64,
    pub method: Method,
    /// Confidence multiplier; 0 for asymptotic estimators.
    pub sigma: f64,
}

impl KeyRateReport {
    pub fn new(
        method: Method,
        s_min: Option<f64>,
        r: f64,
        m: &CountMatrix,
        mu: f64,
        sigma: f64,
    ) -> Result<Self> {
        let r = r.clamp(0.0, 1.0);
        Ok(Self {
            s_min,
            r,
            sifted_rate: sifted_rate(m)?,
            secure_rate: secure_key_rate(r, m, mu)?,
            multiphoton_penalty: multiphoton_fraction(mu)?,
            method,
            sigma,
        })
    }

    pub fn closed_form(m: &CountMatrix, mu: f64) -> Result<Self> {
        let r = rfi_closed_form_rate(&correlators(m))?;
        Self::new(Method::ClosedForm, None, r, m, mu, 0.0)
    }

    pub fn bb84(m: &CountMatrix, mu: f64, sigma: f64) -> Result<Self> {
        let r = bb84_fraction_finite(&correlators(m), sigma)?;
        Self::new(Method::Bb84, None, r, m, mu, sigma)
    }

    /// Full finite-key analysis: interval constraints from the counts,
    /// usable-entropy minimization, then the key fraction.
    pub fn device_model(
        m: &CountMatrix,
        mu: f64,
        sigma: f64,
        options: &OptimizerOptions,
    ) -> Result<(Self, UsableEntropyMinimum)> {
        let c = correlators(m);
        let cs = ConstraintSet::from_observations(&c, &marginals(m)?, sigma)?;
        let min = minimize_usable_entropy(&cs, options)?;
        let zz = c.get(Basis::Z, Basis::Z);
        let r = secret_key_fraction(min.s_min, c.value(Basis::Z, Basis::Z)?, zz.delta, sigma);
        Ok((Self::new(Method::DeviceModel, Some(min.s_min), r, m, mu, sigma)?, min))
    }

    pub const CSV_HEADER: &'static str =
        "method,sigma,s_min_bits,r,sifted_rate_bps,multiphoton_penalty,secure_rate_bps";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        let s_min = self
            .s_min
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "nan".into());
        writeln!(
            w,
            "{},{:.3},{},{:.6},{:.3},{:.6},{:.3}",
            self.method.tag(),
            self.sigma,
            s_min,
            self.r,
            self.sifted_rate,
            self.multiphoton_penalty,
            self.secure_rate
        )?;
        Ok(())
    }
}
