//! Hand motion, the dual-beacon tracking loops and the pointing-to-coupling map.
//!
//! Each terminal observes the other's beacon on a position-sensing detector
//! and steers its own mirror to null the observed angle. Both loops run at a
//! fixed period with a pure delay, an integrating controller and first-order
//! mirror dynamics; commands saturate at the mirror range.

use std::collections::VecDeque;
use std::io::Write;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{stream_rng, Birefringence};
use crate::polarization::PoincareVector;

/// Receiver field of view (coupling FWHM), degrees.
pub const FIELD_OF_VIEW_DEG: f64 = 0.1;
/// Mirror deflection limit, degrees.
pub const MIRROR_RANGE_DEG: f64 = 4.0;
/// Latency budget for corrections, seconds.
pub const LATENCY_BUDGET_S: f64 = 0.042;
/// Added key-basis error at the corners of the steering range.
pub const MAX_STEERING_QBER: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiltAxis {
    Horizontal,
    Vertical,
}

/// Out-and-back excursion: `amplitude · sin(π (t - start)/duration)` on one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSegment {
    pub start_s: f64,
    pub duration_s: f64,
    pub axis: TiltAxis,
    pub amplitude_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AxialProfile {
    Constant { angle_deg: f64 },
    /// Linear interpolation between `(time_s, angle_deg)` knots.
    Piecewise { knots: Vec<(f64, f64)> },
    /// Mean-reverting process around `mean_deg`.
    Stochastic {
        mean_deg: f64,
        mean_reversion: f64,
        volatility: f64,
    },
}

impl Default for AxialProfile {
    fn default() -> Self {
        AxialProfile::Constant { angle_deg: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandMotionParams {
    /// Per-axis mean-reversion rate, 1/s.
    pub mean_reversion: [f64; 2],
    /// Per-axis volatility, deg/√s.
    pub volatility: [f64; 2],
    /// Constant aiming offset, degrees.
    pub static_offset_deg: [f64; 2],
    /// Scales every drift segment's amplitude.
    pub drift_amplitude_deg: f64,
    pub drift: Vec<DriftSegment>,
    pub axial: AxialProfile,
    pub step_s: f64,
    pub seed: u64,
}

impl Default for HandMotionParams {
    fn default() -> Self {
        Self {
            mean_reversion: [0.1; 2],
            volatility: [0.15; 2],
            static_offset_deg: [0.0; 2],
            drift_amplitude_deg: 1.0,
            drift: Vec::new(),
            axial: AxialProfile::default(),
            step_s: 1e-3,
            seed: 0,
        }
    }
}

impl HandMotionParams {
    pub fn validate(&self) -> Result<()> {
        if self.mean_reversion.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::Config("mean-reversion rates must be >= 0".into()));
        }
        if self.volatility.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("volatility must be >= 0".into()));
        }
        if !(self.step_s > 0.0) {
            return Err(Error::Config("hand-motion step must be > 0".into()));
        }
        if self.drift.iter().any(|d| !(d.duration_s > 0.0)) {
            return Err(Error::Config("drift segment duration must be > 0".into()));
        }
        if let AxialProfile::Stochastic {
            mean_reversion,
            volatility,
            ..
        } = self.axial
        {
            if !(mean_reversion >= 0.0 && volatility >= 0.0) {
                return Err(Error::Config("axial process rates must be >= 0".into()));
            }
        }
        if let AxialProfile::Piecewise { knots } = &self.axial {
            if knots.is_empty() || knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return Err(Error::Config("axial knots must be non-empty with increasing times".into()));
            }
        }
        Ok(())
    }

    /// Voluntary-movement script: up, down, left, right, then an axial turn.
    pub fn movement_script(start_s: f64) -> Self {
        let seg = |k: f64, axis, amplitude_deg| DriftSegment {
            start_s: start_s + 2.0 * k,
            duration_s: 1.5,
            axis,
            amplitude_deg,
        };
        let turn = start_s + 8.0;
        Self {
            drift: vec![
                seg(0.0, TiltAxis::Vertical, 1.5),
                seg(1.0, TiltAxis::Vertical, -1.5),
                seg(2.0, TiltAxis::Horizontal, -1.5),
                seg(3.0, TiltAxis::Horizontal, 1.5),
            ],
            axial: AxialProfile::Piecewise {
                knots: vec![(0.0, 0.0), (turn, 0.0), (turn + 2.0, 40.0), (turn + 4.0, 0.0)],
            },
            ..Self::default()
        }
    }
}

/// Sampled hand motion: transmitter tilt (2 axes) and axial angle, degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrace {
    pub step_s: f64,
    pub tilt: Vec<[f64; 2]>,
    pub axial: Vec<f64>,
}

impl HandTrace {
    /// A motionless trace at a fixed tilt.
    pub fn constant(duration_s: f64, step_s: f64, tilt: [f64; 2], axial_deg: f64) -> Self {
        let n = (duration_s / step_s).round().max(1.0) as usize;
        Self {
            step_s,
            tilt: vec![tilt; n],
            axial: vec![axial_deg; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tilt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tilt.is_empty()
    }
}

/// Exact one-step coefficients `(decay, noise std)` of a mean-reverting process.
fn ou_coefficients(rate: f64, volatility: f64, dt: f64) -> (f64, f64) {
    if rate == 0.0 {
        return (1.0, volatility * dt.sqrt());
    }
    let decay = (-rate * dt).exp();
    let var = volatility * volatility * (-(-2.0 * rate * dt).exp_m1()) / (2.0 * rate);
    (decay, var.sqrt())
}

fn piecewise(knots: &[(f64, f64)], t: f64) -> f64 {
    if t <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let ((t0, a0), (t1, a1)) = (w[0], w[1]);
        if t <= t1 {
            return a0 + (a1 - a0) * (t - t0) / (t1 - t0);
        }
    }
    knots[knots.len() - 1].1
}

pub fn simulate_hand_trace(duration_s: f64, p: &HandMotionParams) -> Result<HandTrace> {
    p.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::Config("trace duration must be > 0".into()));
    }
    let n = (duration_s / p.step_s).round().max(1.0) as usize;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream_rng(p.seed, 0);
    let coef = [0, 1].map(|a| ou_coefficients(p.mean_reversion[a], p.volatility[a], p.step_s));
    let axial_coef = match p.axial {
        AxialProfile::Stochastic {
            mean_reversion,
            volatility,
            ..
        } => ou_coefficients(mean_reversion, volatility, p.step_s),
        _ => (1.0, 0.0),
    };

    let mut ou = [0.0; 2];
    let mut axial_ou = 0.0;
    let mut tilt = Vec::with_capacity(n);
    let mut axial = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * p.step_s;
        let mut v = [0.0; 2];
        for a in 0..2 {
            v[a] = p.static_offset_deg[a] + ou[a];
        }
        for seg in &p.drift {
            let u = (t - seg.start_s) / seg.duration_s;
            if (0.0..=1.0).contains(&u) {
                let a = match seg.axis {
                    TiltAxis::Horizontal => 0,
                    TiltAxis::Vertical => 1,
                };
                v[a] += p.drift_amplitude_deg * seg.amplitude_deg * (std::f64::consts::PI * u).sin();
            }
        }
        tilt.push(v);
        axial.push(match &p.axial {
            AxialProfile::Constant { angle_deg } => *angle_deg,
            AxialProfile::Piecewise { knots } => piecewise(knots, t),
            AxialProfile::Stochastic { mean_deg, .. } => mean_deg + axial_ou,
        });
        for a in 0..2 {
            ou[a] = coef[a].0 * ou[a] + coef[a].1 * normal.sample(&mut rng);
        }
        if axial_coef.1 > 0.0 {
            axial_ou = axial_coef.0 * axial_ou + axial_coef.1 * normal.sample(&mut rng);
        }
    }
    Ok(HandTrace {
        step_s: p.step_s,
        tilt,
        axial,
    })
}

/// Survival function of the maximum tilt deviation within a window,
/// measured from the tilt at the window start.
#[derive(Debug, Clone, PartialEq)]
pub struct Ccdf {
    pub window_s: f64,
    sorted: Vec<f64>,
}

impl Ccdf {
    /// `P(max deviation ≥ angle)`.
    pub fn survival(&self, angle_deg: f64) -> f64 {
        let below = self.sorted.partition_point(|&m| m < angle_deg);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    pub fn samples(&self) -> usize {
        self.sorted.len()
    }

    pub fn curve(&self, angles_deg: &[f64]) -> Vec<(f64, f64)> {
        angles_deg.iter().map(|&a| (a, self.survival(a))).collect()
    }
}

pub fn ccdf_max_deviation(trace: &HandTrace, window_s: f64) -> Result<Ccdf> {
    Ok(ccdf_max_deviation_windows(trace, &[window_s])?.remove(0))
}

/// CCDFs for several windows over a common set of window starts, so that
/// longer windows dominate shorter ones pointwise.
pub fn ccdf_max_deviation_windows(trace: &HandTrace, windows_s: &[f64]) -> Result<Vec<Ccdf>> {
    if trace.is_empty() {
        return Err(Error::InsufficientData("empty hand trace".into()));
    }
    let lens: Vec<usize> = windows_s
        .iter()
        .map(|w| (w / trace.step_s).round() as usize)
        .collect();
    let longest = lens.iter().copied().max().unwrap_or(0);
    if windows_s.iter().any(|w| !(*w > 0.0)) || longest == 0 || longest >= trace.len() {
        return Err(Error::Config("window must be positive and shorter than the trace".into()));
    }
    let starts = trace.len() - longest;
    let mut out = Vec::with_capacity(lens.len());
    for (&len, &window_s) in lens.iter().zip(windows_s) {
        let mut sorted: Vec<f64> = (0..starts)
            .map(|s| {
                let r = trace.tilt[s];
                trace.tilt[s..=s + len]
                    .iter()
                    .map(|v| (v[0] - r[0]).hypot(v[1] - r[1]))
                    .fold(0.0, f64::max)
            })
            .collect();
        sorted.sort_by(f64::total_cmp);
        out.push(Ccdf { window_s, sorted });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingLoopConfig {
    pub period_s: f64,
    /// Sensor-to-command delay of each loop.
    pub latency_s: f64,
    pub mirror_time_constant_s: f64,
    /// Position-sensing detector noise, degrees RMS per axis.
    pub psd_noise_deg: f64,
    pub range_deg: f64,
    /// Integrator gain per update. With the default latency and mirror lag
    /// the loop is stable up to about 0.3.
    pub gain: f64,
    /// Receiver angle-of-arrival change per degree of transmitter tilt.
    pub rx_lever_ratio: f64,
    /// Loops hold their mirrors at zero before this time.
    pub lock_time_s: f64,
    pub noise_seed: u64,
}

impl Default for TrackingLoopConfig {
    fn default() -> Self {
        Self {
            period_s: 1e-3,
            latency_s: 2e-3,
            mirror_time_constant_s: 5e-3,
            psd_noise_deg: 0.01,
            range_deg: MIRROR_RANGE_DEG,
            gain: 0.1,
            rx_lever_ratio: 0.3,
            lock_time_s: 0.0,
            noise_seed: 0,
        }
    }
}

impl TrackingLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period_s > 0.0) || !(self.range_deg > 0.0) {
            return Err(Error::Config("loop period and range must be > 0".into()));
        }
        if !(self.latency_s >= 0.0) || !(self.mirror_time_constant_s >= 0.0) {
            return Err(Error::Config("latency and mirror time constant must be >= 0".into()));
        }
        if !(self.psd_noise_deg >= 0.0) || !(self.gain > 0.0 && self.gain < 2.0) {
            return Err(Error::Config("PSD noise must be >= 0 and gain in (0, 2)".into()));
        }
        Ok(())
    }

    /// Total time from a hand movement to the corrected mirror position.
    pub fn total_latency_s(&self) -> f64 {
        self.latency_s + self.mirror_time_constant_s + self.period_s / self.gain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringState {
    pub time_s: f64,
    pub tx_mirror_deg: [f64; 2],
    pub rx_mirror_deg: [f64; 2],
    /// Per-axis residual misalignment (RSS of both terminals), degrees.
    pub pointing_error_deg: [f64; 2],
    pub axial_angle_deg: f64,
    pub efficiency: f64,
}

impl SteeringState {
    pub fn pointing_error(&self) -> f64 {
        self.pointing_error_deg[0].hypot(self.pointing_error_deg[1])
    }

    pub const CSV_HEADER: &'static str = "time_s,tx_mirror_h_deg,tx_mirror_v_deg,rx_mirror_h_deg,rx_mirror_v_deg,pointing_error_deg,axial_angle_deg,efficiency";

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{:.4},{:.5},{:.5},{:.5},{:.5},{:.5},{:.4},{:.6}",
            self.time_s,
            self.tx_mirror_deg[0],
            self.tx_mirror_deg[1],
            self.rx_mirror_deg[0],
            self.rx_mirror_deg[1],
            self.pointing_error(),
            self.axial_angle_deg,
            self.efficiency
        )?;
        Ok(())
    }
}

/// Gaussian acceptance with FWHM equal to the field of view.
pub fn coupling_efficiency(pointing_error_deg: f64) -> f64 {
    let x = pointing_error_deg / FIELD_OF_VIEW_DEG;
    (-4.0 * std::f64::consts::LN_2 * x * x).exp()
}

struct Loop {
    command: [f64; 2],
    mirror: [f64; 2],
    pending: VecDeque<[f64; 2]>,
}

impl Loop {
    fn new() -> Self {
        Self {
            command: [0.0; 2],
            mirror: [0.0; 2],
            pending: VecDeque::new(),
        }
    }

    fn step(&mut self, observed: [f64; 2], delay: usize, active: bool, cfg: &TrackingLoopConfig, alpha: f64) {
        self.pending.push_back(observed);
        if self.pending.len() > delay {
            let y = self.pending.pop_front().expect("non-empty queue");
            if active {
                for a in 0..2 {
                    self.command[a] = (self.command[a] - cfg.gain * y[a]).clamp(-cfg.range_deg, cfg.range_deg);
                }
            }
        }
        for a in 0..2 {
            self.mirror[a] += alpha * (self.command[a] - self.mirror[a]);
        }
    }
}

pub fn run_tracking(trace: &HandTrace, cfg: &TrackingLoopConfig) -> Result<Vec<SteeringState>> {
    cfg.validate()?;
    if (trace.step_s - cfg.period_s).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "trace step {} s differs from loop period {} s",
            trace.step_s, cfg.period_s
        )));
    }
    let delay = (cfg.latency_s / cfg.period_s).round() as usize;
    let alpha = if cfg.mirror_time_constant_s > 0.0 {
        -(-cfg.period_s / cfg.mirror_time_constant_s).exp_m1()
    } else {
        1.0
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream_rng(cfg.noise_seed, 1);
    let mut tx = Loop::new();
    let mut rx = Loop::new();
    let mut out = Vec::with_capacity(trace.len());
    for (k, (tilt, &axial)) in trace.tilt.iter().zip(&trace.axial).enumerate() {
        let t = k as f64 * cfg.period_s;
        let e_tx = [tilt[0] + tx.mirror[0], tilt[1] + tx.mirror[1]];
        let e_rx = [
            cfg.rx_lever_ratio * tilt[0] + rx.mirror[0],
            cfg.rx_lever_ratio * tilt[1] + rx.mirror[1],
        ];
        let err = [e_tx[0].hypot(e_rx[0]), e_tx[1].hypot(e_rx[1])];
        out.push(SteeringState {
            time_s: t,
            tx_mirror_deg: tx.mirror,
            rx_mirror_deg: rx.mirror,
            pointing_error_deg: err,
            axial_angle_deg: axial,
            efficiency: coupling_efficiency(err[0].hypot(err[1])),
        });
        let mut noisy = |e: [f64; 2]| e.map(|v| v + cfg.psd_noise_deg * normal.sample(&mut rng));
        let obs_tx = noisy(e_tx);
        let obs_rx = noisy(e_rx);
        let active = t >= cfg.lock_time_s;
        tx.step(obs_tx, delay, active, cfg, alpha);
        rx.step(obs_rx, delay, active, cfg, alpha);
    }
    Ok(out)
}

/// Residual retardance of the steering optics for the given mirror angles
/// (transmitter h/v, receiver h/v). Zero at the centre; at the corners of the
/// range it adds `MAX_STEERING_QBER` to the key-basis error.
pub fn steering_birefringence(mirror_deg: [f64; 4]) -> Birefringence {
    let max_retardance = (1.0 - 2.0 * MAX_STEERING_QBER).acos().to_degrees();
    let load = mirror_deg.iter().map(|m| m * m).sum::<f64>() / (4.0 * MIRROR_RANGE_DEG * MIRROR_RANGE_DEG);
    Birefringence {
        retardance_deg: max_retardance * load.min(1.0),
        axis: PoincareVector::S1,
    }
}

/// Mean coupling at a fixed transmitter offset once the loops have settled.
pub fn static_offset_coupling(offset_deg: f64, cfg: &TrackingLoopConfig, duration_s: f64) -> Result<f64> {
    let trace = HandTrace::constant(duration_s, cfg.period_s, [offset_deg, 0.0], 0.0);
    let states = run_tracking(&trace, cfg)?;
    let tail = &states[states.len() / 2..];
    Ok(tail.iter().map(|s| s.efficiency).sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> TrackingLoopConfig {
        TrackingLoopConfig {
            psd_noise_deg: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn coupling_profile() {
        assert_eq!(coupling_efficiency(0.0), 1.0);
        assert!((coupling_efficiency(0.05) - 0.5).abs() < 1e-12);
        assert!(coupling_efficiency(0.3) < 1e-4);
    }

    #[test]
    fn still_hand_gives_constant_trace() {
        let p = HandMotionParams {
            volatility: [0.0; 2],
            static_offset_deg: [0.3, -0.2],
            ..Default::default()
        };
        let tr = simulate_hand_trace(1.0, &p).unwrap();
        assert_eq!(tr.len(), 1000);
        assert!(tr.tilt.iter().all(|v| *v == [0.3, -0.2]));
        let c = ccdf_max_deviation(&tr, 0.042).unwrap();
        assert_eq!(c.survival(0.0), 1.0);
        assert_eq!(c.survival(1e-9), 0.0);
    }

    #[test]
    fn trace_is_deterministic_per_seed() {
        let p = HandMotionParams {
            seed: 9,
            ..Default::default()
        };
        let a = simulate_hand_trace(2.0, &p).unwrap();
        let b = simulate_hand_trace(2.0, &p).unwrap();
        assert_eq!(a, b);
        let c = simulate_hand_trace(2.0, &HandMotionParams { seed: 10, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ou_coefficients_match_stationary_variance() {
        let (decay, sd) = ou_coefficients(2.0, 0.5, 0.01);
        let stationary = 0.25 / 4.0;
        // Stationary variance is preserved by one exact step.
        assert!((decay * decay * stationary + sd * sd - stationary).abs() < 1e-15);
        assert_eq!(ou_coefficients(0.0, 0.5, 0.04), (1.0, 0.1));
    }

    #[test]
    fn ccdf_windows_are_ordered() {
        let p = HandMotionParams {
            seed: 4,
            ..Default::default()
        };
        let tr = simulate_hand_trace(20.0, &p).unwrap();
        let c = ccdf_max_deviation_windows(&tr, &[0.042, 0.1, 0.3]).unwrap();
        for a in (0..60).map(|k| k as f64 * 0.01) {
            assert!(c[1].survival(a) >= c[0].survival(a));
            assert!(c[2].survival(a) >= c[1].survival(a));
        }
        let p42 = c[0].survival(FIELD_OF_VIEW_DEG);
        assert!(p42 > 0.0 && p42 < 1.0, "{p42}");
        assert!(ccdf_max_deviation(&tr, 30.0).is_err());
    }

    #[test]
    fn static_error_decays_to_zero() {
        let trace = HandTrace::constant(0.5, 1e-3, [0.5, -0.3], 0.0);
        let states = run_tracking(&trace, &quiet()).unwrap();
        assert!(states[0].pointing_error() > 0.5);
        let last = states.last().unwrap();
        assert!(last.pointing_error() < 1e-9, "{}", last.pointing_error());
        assert!((last.tx_mirror_deg[0] + 0.5).abs() < 1e-9);
        assert!((last.rx_mirror_deg[0] + 0.15).abs() < 1e-9);
    }

    #[test]
    fn saturation_drops_the_link() {
        let trace = HandTrace::constant(0.5, 1e-3, [5.0, 0.0], 0.0);
        let states = run_tracking(&trace, &quiet()).unwrap();
        for s in &states {
            assert!(s.tx_mirror_deg[0].abs() <= MIRROR_RANGE_DEG + 1e-12);
        }
        assert!(states.last().unwrap().efficiency < 1e-6);
        let cfg = TrackingLoopConfig::default();
        for off in [-3.5, 0.0, 2.0, 3.9] {
            assert!(static_offset_coupling(off, &cfg, 0.5).unwrap() >= 0.9, "{off}");
        }
        assert!(static_offset_coupling(5.0, &cfg, 0.5).unwrap() < 1e-3);
    }

    #[test]
    fn lock_time_holds_mirrors() {
        let trace = HandTrace::constant(0.2, 1e-3, [1.0, 0.0], 0.0);
        let cfg = TrackingLoopConfig {
            lock_time_s: 0.1,
            ..quiet()
        };
        let states = run_tracking(&trace, &cfg).unwrap();
        assert!(states[..100].iter().all(|s| s.tx_mirror_deg == [0.0, 0.0]));
        assert!(states[99].efficiency < 1e-6);
        assert!(states.last().unwrap().efficiency > 0.99);
    }

    #[test]
    fn birefringence_map() {
        assert_eq!(steering_birefringence([0.0; 4]).retardance_deg, 0.0);
        let corner = steering_birefringence([4.0, -4.0, 4.0, 4.0]);
        let added = (1.0 - corner.retardance_deg.to_radians().cos()) / 2.0;
        assert!((added - MAX_STEERING_QBER).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_period() {
        let trace = HandTrace::constant(0.1, 2e-3, [0.0, 0.0], 0.0);
        assert!(run_tracking(&trace, &TrackingLoopConfig::default()).is_err());
    }
}
