//! Faint-pulse source, channel, background light and the six-detector receiver.
//!
//! Each pulse carries a Poisson photon number of mean μ and is prepared in one
//! of six states by a seeded pseudo-random pattern. A pulse produces a click
//! with probability `μ·η·imbalance`; the click lands in one of the three
//! receiver bases with probability ⅓ each and on the `±` detector of that basis
//! by the Born rule. Background (dark, ambient, beacon) clicks arrive per
//! detector as a Poisson process and are attributed to whichever state was
//! prepared in their time slot.
//!
//! Blocks are simulated in fixed slices of pulses. Slice `k` draws from RNG
//! stream `k` of the block seed, so the result does not depend on how slices
//! are distributed over worker threads.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polarization::{
    axial_rotation, birefringence_rotation, PoincareVector, ProtocolState, Rotation3,
};

/// Mean photon number per pulse used in the demonstration.
pub const DEFAULT_MEAN_PHOTON_NUMBER: f64 = 0.07;
/// Pulse repetition rate, pulses per second.
pub const DEFAULT_REPETITION_RATE: f64 = 2.5e8;
/// End-to-end transmission during handheld operation.
pub const HANDHELD_TRANSMISSION: f64 = 0.03;
/// End-to-end transmission for a static hold: about 1e6 detected photons/s.
pub const STATIC_TRANSMISSION: f64 = 1.0e6 / (DEFAULT_MEAN_PHOTON_NUMBER * DEFAULT_REPETITION_RATE);
/// Intrinsic key-basis error rate that reproduces the observed ~6% QBER.
pub const DEFAULT_INTRINSIC_ERROR: f64 = 0.055;

/// Duration of one simulation slice.
pub const SLICE_SECONDS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub mean_photon_number: f64,
    pub repetition_rate: f64,
    pub pattern_seed: u64,
    /// Relative output power per prepared state (`X+, X-, Y+, Y-, Z+, Z-`).
    pub power_imbalance: [f64; 6],
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            mean_photon_number: DEFAULT_MEAN_PHOTON_NUMBER,
            repetition_rate: DEFAULT_REPETITION_RATE,
            pattern_seed: 0x005e_ed0f_5eed,
            power_imbalance: [1.0; 6],
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_photon_number > 0.0) {
            return Err(Error::Config("mean photon number must be > 0".into()));
        }
        if !(self.repetition_rate > 0.0) {
            return Err(Error::Config("repetition rate must be > 0".into()));
        }
        if self.power_imbalance.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("power imbalance multipliers must be > 0".into()));
        }
        Ok(())
    }
}

/// Residual retardance from the steering optics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Birefringence {
    pub retardance_deg: f64,
    pub axis: PoincareVector,
}

impl Default for Birefringence {
    fn default() -> Self {
        Self {
            retardance_deg: 0.0,
            axis: PoincareVector::S1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelState {
    /// Physical axial rotation of the transmitter, degrees.
    pub axial_angle_deg: f64,
    pub birefringence: Birefringence,
    /// End-to-end transmission including detector efficiency.
    pub transmission: f64,
    /// Key-basis error probability from helicity flips.
    pub intrinsic_error_rate: f64,
    pub duration_s: f64,
}

impl Default for ChannelState {
    fn default() -> Self {
        Self {
            axial_angle_deg: 0.0,
            birefringence: Birefringence::default(),
            transmission: HANDHELD_TRANSMISSION,
            intrinsic_error_rate: DEFAULT_INTRINSIC_ERROR,
            duration_s: 0.5,
        }
    }
}

impl ChannelState {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmission) {
            return Err(Error::Config(format!(
                "transmission {} outside [0, 1]",
                self.transmission
            )));
        }
        if !(0.0..=0.5).contains(&self.intrinsic_error_rate) {
            return Err(Error::Config(format!(
                "intrinsic error rate {} outside [0, 0.5]",
                self.intrinsic_error_rate
            )));
        }
        if !self.axial_angle_deg.is_finite() {
            return Err(Error::Config("axial angle must be finite".into()));
        }
        Ok(())
    }

    /// Rotation applied to prepared states: axial rotation, then steering birefringence.
    pub fn rotation(&self) -> Result<Rotation3> {
        let biref =
            birefringence_rotation(self.birefringence.retardance_deg, self.birefringence.axis)?;
        Ok(biref.compose(&axial_rotation(self.axial_angle_deg)))
    }

    /// Born-rule click probabilities `p[prep][detector]` within each detector's
    /// basis (each basis pair of a row sums to 1).
    pub fn born_matrix(&self) -> Result<[[f64; 6]; 6]> {
        let rot = self.rotation()?;
        let e = self.intrinsic_error_rate;
        let shrink = [1.0 - e, 1.0 - e, 1.0 - 2.0 * e];
        let mut p = [[0.0; 6]; 6];
        for a in ProtocolState::ALL {
            let v = rot.apply(a.prepared_vector()).as_array();
            let v = PoincareVector::new(v[0] * shrink[0], v[1] * shrink[1], v[2] * shrink[2]);
            for b in ProtocolState::ALL {
                p[a.index()][b.index()] = (0.5 * (1.0 + v.dot(&b.detector_vector()))).clamp(0.0, 1.0);
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub dark_rate: f64,
    pub ambient_rate: f64,
    pub beacon_rate: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            dark_rate: 370.0,
            ambient_rate: 600.0,
            beacon_rate: 570.0,
        }
    }
}

impl BackgroundConfig {
    pub fn none() -> Self {
        Self {
            dark_rate: 0.0,
            ambient_rate: 0.0,
            beacon_rate: 0.0,
        }
    }

    /// Total background clicks per second on one detector.
    pub fn per_detector(&self) -> f64 {
        self.dark_rate + self.ambient_rate + self.beacon_rate
    }

    pub fn validate(&self) -> Result<()> {
        if [self.dark_rate, self.ambient_rate, self.beacon_rate]
            .iter()
            .any(|r| !(*r >= 0.0))
        {
            return Err(Error::Config("background rates must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Pulse-by-pulse sampling.
    PerPulse,
    /// Multinomial/Poisson sampling per (state, detector) cell.
    #[default]
    Aggregated,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-pulse" => Ok(Backend::PerPulse),
            "aggregated" => Ok(Backend::Aggregated),
            other => Err(Error::Config(format!("unknown backend '{other}'"))),
        }
    }
}

/// Detector clicks of one block.
///
/// `counts[a][b]` holds every click in detector `b` during a slot where state
/// `a` was prepared, background included. `background[b]` is how many of
/// detector `b`'s clicks were background (simulator ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub counts: [[u64; 6]; 6],
    pub emitted: [u64; 6],
    pub background: [u64; 6],
    pub duration_s: f64,
}

impl CountMatrix {
    pub fn zeros(duration_s: f64) -> Self {
        Self {
            counts: [[0; 6]; 6],
            emitted: [0; 6],
            background: [0; 6],
            duration_s,
        }
    }

    pub fn total_detected(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn total_emitted(&self) -> u64 {
        self.emitted.iter().sum()
    }

    /// Clicks from slots prepared and detected in the key basis.
    pub fn sifted(&self) -> u64 {
        (4..6).flat_map(|a| (4..6).map(move |b| (a, b))).map(|(a, b)| self.counts[a][b]).sum()
    }

    /// Detected photons per emitted photon (μ × pulses).
    pub fn transmission(&self, mean_photon_number: f64) -> f64 {
        let emitted = self.total_emitted() as f64 * mean_photon_number;
        if emitted == 0.0 {
            0.0
        } else {
            self.total_detected() as f64 / emitted
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("count matrix duration must be > 0".into()));
        }
        for a in 0..6 {
            let row: u64 = self.counts[a].iter().sum();
            if row > self.emitted[a] {
                return Err(Error::Config(format!(
                    "row {} has {} clicks but only {} emitted pulses",
                    ProtocolState::from_index(a).label(),
                    row,
                    self.emitted[a]
                )));
            }
        }
        Ok(())
    }

    fn add(&mut self, other: &CountMatrix) {
        for a in 0..6 {
            for b in 0..6 {
                self.counts[a][b] += other.counts[a][b];
            }
            self.emitted[a] += other.emitted[a];
            self.background[a] += other.background[a];
        }
    }

    pub const CSV_HEADER: &'static str = "kind,prep,det,count";

    /// Write the documented CSV layout: a `duration_s` line, the column header,
    /// 36 `signal` rows, 6 `emitted` rows and 6 `background` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "duration_s,{}", self.duration_s)?;
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for a in ProtocolState::ALL {
            for b in ProtocolState::ALL {
                writeln!(w, "signal,{},{},{}", a.label(), b.label(), self.counts[a.index()][b.index()])?;
            }
        }
        for a in ProtocolState::ALL {
            writeln!(w, "emitted,{},,{}", a.label(), self.emitted[a.index()])?;
        }
        for b in ProtocolState::ALL {
            writeln!(w, "background,,{},{}", b.label(), self.background[b.index()])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() || s.starts_with('#') => None,
            other => Some((i + 1, other)),
        });
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };

        let (ln, first) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
        let first = first?;
        let duration_s = first
            .strip_prefix("duration_s,")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| parse_err(ln, "expected 'duration_s,<seconds>'"))?;
        let (ln, header) = lines.next().ok_or_else(|| parse_err(ln + 1, "missing header"))?;
        if header?.trim() != Self::CSV_HEADER {
            return Err(parse_err(ln, "unexpected column header"));
        }

        let mut m = CountMatrix::zeros(duration_s);
        let mut seen_signal = [[false; 6]; 6];
        let mut seen_emitted = [false; 6];
        let mut seen_background = [false; 6];
        for (ln, line) in lines {
            let line = line?;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(parse_err(ln, "expected 4 fields"));
            }
            let count: u64 = fields[3]
                .parse()
                .map_err(|_| parse_err(ln, "count is not a non-negative integer"))?;
            let state = |s: &str| {
                ProtocolState::parse(s)
                    .map(ProtocolState::index)
                    .ok_or_else(|| parse_err(ln, &format!("unknown state '{s}'")))
            };
            match fields[0] {
                "signal" => {
                    let (a, b) = (state(fields[1])?, state(fields[2])?);
                    if std::mem::replace(&mut seen_signal[a][b], true) {
                        return Err(parse_err(ln, "duplicate signal cell"));
                    }
                    m.counts[a][b] = count;
                }
                "emitted" => {
                    let a = state(fields[1])?;
                    if std::mem::replace(&mut seen_emitted[a], true) {
                        return Err(parse_err(ln, "duplicate emitted row"));
                    }
                    m.emitted[a] = count;
                }
                "background" => {
                    let b = state(fields[2])?;
                    if std::mem::replace(&mut seen_background[b], true) {
                        return Err(parse_err(ln, "duplicate background row"));
                    }
                    m.background[b] = count;
                }
                other => return Err(parse_err(ln, &format!("unknown row kind '{other}'"))),
            }
        }
        let complete = seen_signal.iter().flatten().all(|s| *s)
            && seen_emitted.iter().all(|s| *s)
            && seen_background.iter().all(|s| *s);
        if !complete {
            return Err(parse_err(0, "missing rows (need 36 signal, 6 emitted, 6 background)"));
        }
        Ok(m)
    }
}

/// Closed-form expected rates, per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    /// Signal clicks per (prepared state, detector).
    pub signal: [[f64; 6]; 6],
    pub emitted: [f64; 6],
    /// Background clicks per detector.
    pub background: [f64; 6],
}

impl ExpectedCounts {
    /// Expected cell rate including the background attributed to state `a`.
    pub fn cell(&self, a: usize, b: usize) -> f64 {
        let total: f64 = self.emitted.iter().sum();
        let share = if total > 0.0 { self.emitted[a] / total } else { 0.0 };
        self.signal[a][b] + self.background[b] * share
    }

    /// Scale to a block of `duration_s` seconds.
    pub fn over(&self, duration_s: f64) -> ExpectedCounts {
        let mut out = self.clone();
        out.signal.iter_mut().flatten().for_each(|v| *v *= duration_s);
        out.emitted.iter_mut().for_each(|v| *v *= duration_s);
        out.background.iter_mut().for_each(|v| *v *= duration_s);
        out
    }

    /// Real-valued cell matrix (signal + attributed background).
    pub fn cells(&self) -> [[f64; 6]; 6] {
        let mut c = [[0.0; 6]; 6];
        for (a, row) in c.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = self.cell(a, b);
            }
        }
        c
    }
}

/// Per-state click probabilities per pulse: `[prep][detector]`.
fn click_probabilities(src: &SourceConfig, ch: &ChannelState) -> Result<[[f64; 6]; 6]> {
    let born = ch.born_matrix()?;
    let mut p = [[0.0; 6]; 6];
    for a in 0..6 {
        let detect = src.mean_photon_number * ch.transmission * src.power_imbalance[a];
        for b in 0..6 {
            p[a][b] = detect * born[a][b] / 3.0;
        }
    }
    Ok(p)
}

pub fn expected_count_rates(
    src: &SourceConfig,
    ch: &ChannelState,
    bg: &BackgroundConfig,
) -> Result<ExpectedCounts> {
    src.validate()?;
    ch.validate()?;
    bg.validate()?;
    let p = click_probabilities(src, ch)?;
    let per_state = src.repetition_rate / 6.0;
    let mut signal = [[0.0; 6]; 6];
    for a in 0..6 {
        for b in 0..6 {
            signal[a][b] = per_state * p[a][b];
        }
    }
    Ok(ExpectedCounts {
        signal,
        emitted: [per_state; 6],
        background: [bg.per_detector(); 6],
    })
}

/// Conditional probability that a non-empty Poisson(μ) pulse holds more than
/// one photon. For small μ this is ≈ μ/2.
pub fn multiphoton_fraction(mu: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Config(format!("mean photon number {mu} must be > 0")));
    }
    if mu < 1e-4 {
        // Series of (1 - e^-μ(1+μ)) / (1 - e^-μ) to avoid cancellation.
        return Ok(mu / 2.0 - mu * mu / 12.0);
    }
    let e = (-mu).exp();
    Ok((1.0 - e * (1.0 + mu)) / (-mu).exp_m1().abs())
}

/// Independent, reproducible RNG for `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Multinomial draw by sequential conditional binomials. `probs` may sum to
/// less than one; the remainder is an implicit "no event" category.
fn multinomial<R: Rng, const K: usize>(rng: &mut R, n: u64, probs: &[f64; K]) -> [u64; K] {
    let mut out = [0u64; K];
    let mut remaining = n;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if remaining == 0 || mass <= 0.0 {
            break;
        }
        let cond = (p / mass).clamp(0.0, 1.0);
        let x = binomial(rng, remaining, cond);
        out[k] = x;
        remaining -= x;
        mass -= p;
    }
    out
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("valid poisson").sample(rng) as u64
}

const PATTERN_DOMAIN: u64 = 0x9a77_e4a5_0000_0000;

struct SliceContext<'a> {
    src: &'a SourceConfig,
    bg_per_detector: f64,
    probs: [[f64; 6]; 6],
    pattern_seed: u64,
    seed: u64,
}

impl SliceContext<'_> {
    fn aggregated(&self, index: u64, pulses: u64, eta_scale: f64) -> CountMatrix {
        let slice_s = pulses as f64 / self.src.repetition_rate;
        let mut pattern = stream_rng(self.pattern_seed ^ PATTERN_DOMAIN, index);
        let mut rng = stream_rng(self.seed, index);
        let mut m = CountMatrix::zeros(slice_s);
        m.emitted = multinomial(&mut pattern, pulses, &[1.0 / 6.0; 6]);
        for a in 0..6 {
            let mut row = self.probs[a];
            row.iter_mut().for_each(|p| *p *= eta_scale);
            m.counts[a] = multinomial(&mut rng, m.emitted[a], &row);
        }
        let shares = m.emitted.map(|e| e as f64 / pulses.max(1) as f64);
        for b in 0..6 {
            let k = poisson(&mut rng, self.bg_per_detector * slice_s);
            m.background[b] = k;
            let split = multinomial(&mut rng, k, &shares);
            for a in 0..6 {
                m.counts[a][b] += split[a];
            }
        }
        m
    }

    fn per_pulse(&self, index: u64, pulses: u64, eta_scale: f64) -> CountMatrix {
        let slice_s = pulses as f64 / self.src.repetition_rate;
        let mut pattern = stream_rng(self.pattern_seed ^ PATTERN_DOMAIN, index);
        let mut rng = stream_rng(self.seed, index);
        let mut m = CountMatrix::zeros(slice_s);
        let p_bg = 6.0 * self.bg_per_detector / self.src.repetition_rate;
        // Per state: cumulative click thresholds over the six detectors.
        let mut cumulative = [[0.0; 6]; 6];
        for a in 0..6 {
            let mut acc = 0.0;
            for b in 0..6 {
                acc += self.probs[a][b] * eta_scale;
                cumulative[a][b] = acc;
            }
        }
        for _ in 0..pulses {
            let a = pattern.random_range(0..6usize);
            m.emitted[a] += 1;
            let u: f64 = rng.random();
            let signal_total = cumulative[a][5];
            if u < signal_total {
                let b = cumulative[a].iter().position(|&c| u < c).unwrap_or(5);
                m.counts[a][b] += 1;
            } else if u < signal_total + p_bg {
                let b = rng.random_range(0..6usize);
                m.counts[a][b] += 1;
                m.background[b] += 1;
            }
        }
        m
    }
}

fn check_block(src: &SourceConfig, ch: &ChannelState, bg: &BackgroundConfig) -> Result<()> {
    src.validate()?;
    ch.validate()?;
    bg.validate()?;
    if !(ch.duration_s > 0.0) {
        return Err(Error::Config(format!("block duration {} must be > 0", ch.duration_s)));
    }
    let worst = src
        .power_imbalance
        .iter()
        .fold(0.0f64, |m, &x| m.max(x))
        * src.mean_photon_number
        * ch.transmission;
    if worst > 1.0 {
        return Err(Error::Config(format!(
            "click probability per pulse μ·η·imbalance = {worst} exceeds 1"
        )));
    }
    let p_bg = 6.0 * bg.per_detector() / src.repetition_rate;
    if worst + p_bg > 1.0 {
        return Err(Error::Config("background rate too high for the pulse rate".into()));
    }
    Ok(())
}

/// Simulate one block with constant transmission.
pub fn simulate_block(
    src: &SourceConfig,
    ch: &ChannelState,
    bg: &BackgroundConfig,
    seed: u64,
    backend: Backend,
) -> Result<CountMatrix> {
    simulate_block_with_profile(src, ch, bg, seed, backend, |_| 1.0)
}

/// Simulate one block whose transmission is `ch.transmission × profile(t)`,
/// with `t` the start time of each 1 ms slice relative to the block start.
pub fn simulate_block_with_profile<F>(
    src: &SourceConfig,
    ch: &ChannelState,
    bg: &BackgroundConfig,
    seed: u64,
    backend: Backend,
    profile: F,
) -> Result<CountMatrix>
where
    F: Fn(f64) -> f64 + Sync,
{
    check_block(src, ch, bg)?;
    let ctx = SliceContext {
        src,
        bg_per_detector: bg.per_detector(),
        probs: click_probabilities(src, ch)?,
        pattern_seed: src.pattern_seed,
        seed,
    };
    let total = (src.repetition_rate * ch.duration_s).round() as u64;
    let per_slice = ((src.repetition_rate * SLICE_SECONDS).round() as u64).max(1);
    let n_slices = total.div_ceil(per_slice);

    let slices: Vec<CountMatrix> = (0..n_slices)
        .into_par_iter()
        .map(|k| {
            let pulses = per_slice.min(total - k * per_slice);
            let t = (k * per_slice) as f64 / src.repetition_rate;
            let scale = profile(t).clamp(0.0, 1.0);
            match backend {
                Backend::Aggregated => ctx.aggregated(k, pulses, scale),
                Backend::PerPulse => ctx.per_pulse(k, pulses, scale),
            }
        })
        .collect();

    let mut out = CountMatrix::zeros(ch.duration_s);
    for s in &slices {
        out.add(s);
    }
    Ok(out)
}
