//! Correlators, marginals, error rate and axial angle from a [`CountMatrix`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::CountMatrix;
use crate::polarization::{wrap_degrees, Basis};

/// Default minimum number of counts per correlator for an angle estimate.
pub const DEFAULT_MIN_COUNTS: u64 = 500;

/// Reference value of the axial estimate for an unrotated channel: the
/// receiver module is mounted at 45°.
pub const RECEIVER_OFFSET_DEG: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlator {
    /// `None` when the basis pair has no counts.
    pub value: Option<f64>,
    pub count: u64,
    pub delta: f64,
}

/// The nine `C_AB`, indexed `[prep basis][detector basis]` in `X, Y, Z` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorSet {
    pub entries: [[Correlator; 3]; 3],
}

const PAIR_NAMES: [[&str; 3]; 3] = [
    ["C_XX", "C_XY", "C_XZ"],
    ["C_YX", "C_YY", "C_YZ"],
    ["C_ZX", "C_ZY", "C_ZZ"],
];

impl CorrelatorSet {
    pub fn get(&self, a: Basis, b: Basis) -> Correlator {
        self.entries[a.index()][b.index()]
    }

    /// Value of `C_AB`, or an error naming the undefined entry.
    pub fn value(&self, a: Basis, b: Basis) -> Result<f64> {
        self.get(a, b)
            .value
            .ok_or(Error::UndefinedCorrelator(PAIR_NAMES[a.index()][b.index()]))
    }

    pub fn name(a: Basis, b: Basis) -> &'static str {
        PAIR_NAMES[a.index()][b.index()]
    }

    /// Build from exact correlator values with a nominal count per entry.
    pub fn from_values(values: [[f64; 3]; 3], count: u64) -> Self {
        let entries = values.map(|row| {
            row.map(|c| Correlator {
                value: Some(c),
                count,
                delta: correlator_delta(c, count),
            })
        });
        Self { entries }
    }
}

/// Binomial standard deviation `sqrt((1 - C²)/N)`.
pub fn correlator_delta(c: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    ((1.0 - c * c).max(0.0) / n as f64).sqrt()
}

pub fn correlators(m: &CountMatrix) -> CorrelatorSet {
    correlators_from_cells(&m.counts.map(|r| r.map(|c| c as f64)))
}

/// Correlators from real-valued cells (e.g. expected counts); `count` is the
/// rounded 4-cell sum.
pub fn correlators_from_cells(cells: &[[f64; 6]; 6]) -> CorrelatorSet {
    let mut entries = [[Correlator {
        value: None,
        count: 0,
        delta: 0.0,
    }; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let pp = cells[2 * a][2 * b];
            let pm = cells[2 * a][2 * b + 1];
            let mp = cells[2 * a + 1][2 * b];
            let mm = cells[2 * a + 1][2 * b + 1];
            let n = pp + pm + mp + mm;
            let count = n.round() as u64;
            entries[a][b] = if n > 0.0 {
                let c = (pp + mm - pm - mp) / n;
                Correlator {
                    value: Some(c),
                    count,
                    delta: ((1.0 - c * c).max(0.0) / n).sqrt(),
                }
            } else {
                Correlator {
                    value: None,
                    count: 0,
                    delta: 0.0,
                }
            };
        }
    }
    CorrelatorSet { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std: f64,
}

/// Preparation and detection frequencies among detected events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    pub prep: [Estimate; 6],
    pub det: [Estimate; 6],
    pub total: u64,
}

pub fn marginals(m: &CountMatrix) -> Result<MarginalSet> {
    marginals_from_cells(&m.counts.map(|r| r.map(|c| c as f64)))
}

pub fn marginals_from_cells(cells: &[[f64; 6]; 6]) -> Result<MarginalSet> {
    let total: f64 = cells.iter().flatten().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientData("no detected events for marginals".into()));
    }
    let est = |x: f64| {
        let p = x / total;
        Estimate {
            value: p,
            std: (p * (1.0 - p) / total).sqrt(),
        }
    };
    let prep = std::array::from_fn(|a| est(cells[a].iter().sum()));
    let det = std::array::from_fn(|b| est(cells.iter().map(|row| row[b]).sum()));
    Ok(MarginalSet {
        prep,
        det,
        total: total.round() as u64,
    })
}

/// Key-basis error rate `E_ZZ = (1 - C_ZZ)/2`.
pub fn zz_error_rate(m: &CountMatrix) -> Result<Estimate> {
    zz_error_from(&correlators(m))
}

pub fn zz_error_from(c: &CorrelatorSet) -> Result<Estimate> {
    let zz = c.get(Basis::Z, Basis::Z);
    let value = c.value(Basis::Z, Basis::Z)?;
    Ok(Estimate {
        value: (1.0 - value) / 2.0,
        std: zz.delta / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxialEstimate {
    /// Estimated axial angle in Poincaré degrees, in (-180, 180].
    Angle(f64),
    InsufficientData,
}

impl AxialEstimate {
    pub fn angle(self) -> Option<f64> {
        match self {
            AxialEstimate::Angle(a) => Some(a),
            AxialEstimate::InsufficientData => None,
        }
    }
}

/// The four branch estimates combined by [`axial_angle`], in degrees.
pub fn axial_branches(c: &CorrelatorSet) -> Result<[f64; 4]> {
    let xx = c.value(Basis::X, Basis::X)?;
    let xy = c.value(Basis::X, Basis::Y)?;
    let yx = c.value(Basis::Y, Basis::X)?;
    let yy = c.value(Basis::Y, Basis::Y)?;
    let deg = |y: f64, x: f64| y.atan2(x).to_degrees();
    Ok([
        wrap_degrees(deg(xy, xx) + 45.0),
        wrap_degrees(deg(yx, xx) + 45.0),
        wrap_degrees(-deg(yx, yy) - 135.0),
        wrap_degrees(-deg(xy, yy) - 135.0),
    ])
}

/// Median of angles on the circle: deviations from the circular mean are
/// medianed on the line, then mapped back.
pub fn circular_median(angles_deg: &[f64]) -> f64 {
    let (s, c) = angles_deg.iter().fold((0.0, 0.0), |(s, c), a| {
        let r = a.to_radians();
        (s + r.sin(), c + r.cos())
    });
    let center = if s == 0.0 && c == 0.0 {
        angles_deg[0]
    } else {
        s.atan2(c).to_degrees()
    };
    let mut dev: Vec<f64> = angles_deg.iter().map(|a| wrap_degrees(a - center)).collect();
    dev.sort_by(|a, b| a.total_cmp(b));
    let n = dev.len();
    let med = if n % 2 == 1 {
        dev[n / 2]
    } else {
        0.5 * (dev[n / 2 - 1] + dev[n / 2])
    };
    wrap_degrees(center + med)
}

/// Relative axial angle Ω from the X/Y correlators.
///
/// Ω equals 45° for an unrotated link and moves by twice the physical rotation
/// of the transmitter.
pub fn axial_angle(c: &CorrelatorSet, min_counts: u64) -> AxialEstimate {
    let pairs = [
        (Basis::X, Basis::X),
        (Basis::X, Basis::Y),
        (Basis::Y, Basis::X),
        (Basis::Y, Basis::Y),
    ];
    if pairs.iter().any(|&(a, b)| c.get(a, b).count < min_counts.max(1)) {
        return AxialEstimate::InsufficientData;
    }
    match axial_branches(c) {
        Ok(b) => AxialEstimate::Angle(circular_median(&b)),
        Err(_) => AxialEstimate::InsufficientData,
    }
}

/// Expected Ω for a physical axial rotation of the transmitter.
pub fn expected_axial_estimate(theta_physical_deg: f64) -> f64 {
    wrap_degrees(RECEIVER_OFFSET_DEG + 2.0 * theta_physical_deg)
}

/// Physical axial rotation (mod 180°) corresponding to an estimate Ω.
pub fn physical_axial_from_estimate(omega_deg: f64) -> f64 {
    (omega_deg - RECEIVER_OFFSET_DEG).rem_euclid(360.0) / 2.0
}

/// One row of the per-block estimator CSV.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub timestamp_s: f64,
    pub correlators: CorrelatorSet,
    pub e_zz: Option<f64>,
    pub axial: AxialEstimate,
}

impl EstimateRow {
    pub fn from_counts(timestamp_s: f64, m: &CountMatrix, min_counts: u64) -> Self {
        let correlators = correlators(m);
        let e_zz = zz_error_from(&correlators).ok().map(|e| e.value);
        let axial = axial_angle(&correlators, min_counts);
        Self {
            timestamp_s,
            correlators,
            e_zz,
            axial,
        }
    }

    pub fn flags(&self) -> String {
        let mut flags = Vec::new();
        if self.correlators.entries.iter().flatten().any(|c| c.value.is_none()) {
            flags.push("undefined_correlator");
        }
        if self.axial == AxialEstimate::InsufficientData {
            flags.push("insufficient_data");
        }
        if flags.is_empty() {
            "ok".to_string()
        } else {
            flags.join("|")
        }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["timestamp_s".to_string()];
        for a in Basis::ALL {
            for b in Basis::ALL {
                cols.push(CorrelatorSet::name(a, b).to_string());
            }
        }
        for a in Basis::ALL {
            for b in Basis::ALL {
                cols.push(format!("d{}", CorrelatorSet::name(a, b)));
            }
        }
        cols.extend(["e_zz".into(), "omega_deg".into(), "flags".into()]);
        cols.join(",")
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut fields = vec![format!("{:.6}", self.timestamp_s)];
        for row in &self.correlators.entries {
            for c in row {
                fields.push(opt(c.value));
            }
        }
        for row in &self.correlators.entries {
            for c in row {
                fields.push(format!("{:.6}", c.delta));
            }
        }
        fields.push(opt(self.e_zz));
        fields.push(opt(self.axial.angle()));
        fields.push(self.flags());
        writeln!(w, "{}", fields.join(","))?;
        Ok(())
    }
}
