//! Scenario configuration and the seeded experiment runners behind the CLI.
//!
//! Every runner returns its CSV artifacts as in-memory files. Each file starts
//! with a `# config_sha256=…, seed=…` comment line followed by a header row.
//! Parallel work is collected in sweep order, so the bytes do not depend on
//! the number of workers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{correlators, physical_axial_from_estimate, EstimateRow};
use crate::link::{
    multiphoton_fraction, simulate_block, simulate_block_with_profile, Backend, BackgroundConfig,
    Birefringence, ChannelState, CountMatrix, SourceConfig, DEFAULT_INTRINSIC_ERROR,
    HANDHELD_TRANSMISSION, STATIC_TRANSMISSION,
};
use crate::polarization::Basis;
use crate::security::{
    bb84_fraction_finite, rfi_closed_form_rate, KeyRateReport, OptimizerOptions, DEFAULT_SIGMA,
};
use crate::steering::{
    ccdf_max_deviation_windows, run_tracking, simulate_hand_trace, static_offset_coupling,
    steering_birefringence, HandMotionParams, SteeringState, TrackingLoopConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Fig4,
    Fig5,
    FiniteKey,
    Steering,
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig4 => "fig4",
            Scenario::Fig5 => "fig5",
            Scenario::FiniteKey => "finite-key",
            Scenario::Steering => "steering",
            Scenario::Custom => "custom",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Scenario::Fig4 => 1,
            Scenario::Fig5 => 2,
            Scenario::FiniteKey => 3,
            Scenario::Steering => 4,
            Scenario::Custom => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelDefaults {
    /// End-to-end transmission; the scenario default applies when absent.
    pub transmission: Option<f64>,
    pub intrinsic_error_rate: f64,
    /// Fixed retardance added to the steering-dependent one.
    pub birefringence: Birefringence,
}

impl Default for ChannelDefaults {
    fn default() -> Self {
        Self {
            transmission: None,
            intrinsic_error_rate: DEFAULT_INTRINSIC_ERROR,
            birefringence: Birefringence::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecurityConfig {
    pub sigma: f64,
    pub optimizer: OptimizerOptions,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            optimizer: OptimizerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig4Config {
    /// Physical axial rotations of the transmitter, degrees in [0, 360).
    pub angles_deg: Vec<f64>,
    pub block_s: f64,
    pub axial_min_counts: u64,
}

impl Default for Fig4Config {
    fn default() -> Self {
        Self {
            angles_deg: (0..36).map(|k| 10.0 * k as f64).collect(),
            block_s: 0.5,
            axial_min_counts: crate::estimators::DEFAULT_MIN_COUNTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig5Config {
    pub duration_s: f64,
    pub sample_s: f64,
    pub interval_s: f64,
    pub axial_min_counts: u64,
    /// Samples with fewer key-basis clicks report a zero rate.
    pub min_sifted: u64,
    /// Spacing of the rows in the steering trace file.
    pub trace_step_s: f64,
    pub motion: HandMotionParams,
    pub tracking: TrackingLoopConfig,
}

impl Default for Fig5Config {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            sample_s: 0.004,
            interval_s: 0.1,
            axial_min_counts: 100,
            min_sifted: 50,
            trace_step_s: 0.01,
            motion: HandMotionParams {
                static_offset_deg: [0.8, 0.6],
                ..HandMotionParams::movement_script(6.0)
            },
            tracking: TrackingLoopConfig {
                lock_time_s: 4.0,
                ..TrackingLoopConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteKeyConfig {
    pub runs: usize,
    pub block_s: f64,
    /// Tracking runs this long before each block starts.
    pub settle_s: f64,
    /// Multiply the transmission by the tracked coupling efficiency.
    pub steering: bool,
    pub min_sifted: u64,
    pub motion: HandMotionParams,
    pub tracking: TrackingLoopConfig,
}

impl Default for FiniteKeyConfig {
    fn default() -> Self {
        Self {
            runs: 14,
            block_s: 0.5,
            settle_s: 1.0,
            steering: true,
            min_sifted: 50,
            motion: HandMotionParams::default(),
            tracking: TrackingLoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub traces: usize,
    pub duration_s: f64,
    pub windows_s: Vec<f64>,
    pub ccdf_max_deg: f64,
    pub ccdf_step_deg: f64,
    pub offsets_deg: Vec<f64>,
    pub offset_hold_s: f64,
    /// Length of the per-step trace written for the first ensemble member.
    pub trace_s: f64,
    pub trace_step_s: f64,
    pub motion: HandMotionParams,
    pub tracking: TrackingLoopConfig,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            traces: 4,
            duration_s: 60.0,
            windows_s: vec![0.042, 0.1, 0.3],
            ccdf_max_deg: 0.5,
            ccdf_step_deg: 0.005,
            offsets_deg: (0..=48).map(|k| -6.0 + 0.25 * k as f64).collect(),
            offset_hold_s: 0.5,
            trace_s: 5.0,
            trace_step_s: 0.001,
            motion: HandMotionParams::default(),
            tracking: TrackingLoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CustomConfig {
    pub axial_angle_deg: f64,
    pub duration_s: f64,
    pub axial_min_counts: u64,
}

impl Default for CustomConfig {
    fn default() -> Self {
        Self {
            axial_angle_deg: 0.0,
            duration_s: 0.5,
            axial_min_counts: crate::estimators::DEFAULT_MIN_COUNTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub backend: Backend,
    pub source: SourceConfig,
    pub channel: ChannelDefaults,
    pub background: BackgroundConfig,
    pub security: SecurityConfig,
    pub fig4: Fig4Config,
    pub fig5: Fig5Config,
    pub finite_key: FiniteKeyConfig,
    pub steering: SteeringConfig,
    pub custom: CustomConfig,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    /// Transmission used by a scenario when none is configured.
    pub fn transmission(&self, scenario: Scenario) -> f64 {
        self.channel.transmission.unwrap_or(match scenario {
            Scenario::Fig5 => HANDHELD_TRANSMISSION,
            _ => STATIC_TRANSMISSION,
        })
    }

    /// SHA-256 of the configuration, ignoring seed, workers and output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = None;
        c.workers = None;
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self, scenario: Scenario) -> Result<()> {
        self.seed()?;
        self.source.validate()?;
        self.background.validate()?;
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(Error::Config("workers must be >= 1".into()));
            }
        }
        if !(self.security.sigma > 0.0) {
            return Err(Error::Config("security sigma must be > 0".into()));
        }
        let eta = self.transmission(scenario);
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("transmission {eta} outside [0, 1]")));
        }
        match scenario {
            Scenario::Fig4 => {
                let f = &self.fig4;
                if f.angles_deg.is_empty() || f.angles_deg.iter().any(|a| !(0.0..360.0).contains(a)) {
                    return Err(Error::Config("fig4 angles must be non-empty and within [0, 360)".into()));
                }
                positive(f.block_s, "fig4 block_s")?;
            }
            Scenario::Fig5 => {
                let f = &self.fig5;
                positive(f.duration_s, "fig5 duration_s")?;
                positive(f.sample_s, "fig5 sample_s")?;
                positive(f.trace_step_s, "fig5 trace_step_s")?;
                if !(f.interval_s >= f.sample_s) {
                    return Err(Error::Config("fig5 interval_s must be >= sample_s".into()));
                }
                f.motion.validate()?;
                f.tracking.validate()?;
            }
            Scenario::FiniteKey => {
                let f = &self.finite_key;
                if f.runs == 0 {
                    return Err(Error::Config("finite_key runs must be >= 1".into()));
                }
                positive(f.block_s, "finite_key block_s")?;
                if !(f.settle_s >= 0.0) {
                    return Err(Error::Config("finite_key settle_s must be >= 0".into()));
                }
                f.motion.validate()?;
                f.tracking.validate()?;
            }
            Scenario::Steering => {
                let s = &self.steering;
                if s.traces == 0 || s.windows_s.is_empty() || s.offsets_deg.is_empty() {
                    return Err(Error::Config("steering needs traces, windows and offsets".into()));
                }
                positive(s.duration_s, "steering duration_s")?;
                positive(s.ccdf_step_deg, "steering ccdf_step_deg")?;
                positive(s.offset_hold_s, "steering offset_hold_s")?;
                positive(s.trace_step_s, "steering trace_step_s")?;
                s.motion.validate()?;
                s.tracking.validate()?;
            }
            Scenario::Custom => positive(self.custom.duration_s, "custom duration_s")?,
        }
        Ok(())
    }

    fn channel(&self, scenario: Scenario, axial_angle_deg: f64, duration_s: f64) -> ChannelState {
        ChannelState {
            axial_angle_deg,
            birefringence: self.channel.birefringence,
            transmission: self.transmission(scenario),
            intrinsic_error_rate: self.channel.intrinsic_error_rate,
            duration_s,
        }
    }

    fn source_for(&self, scenario: Scenario, index: u64) -> SourceConfig {
        SourceConfig {
            pattern_seed: derive_seed(self.source.pattern_seed, scenario.stream(), index),
            ..self.source.clone()
        }
    }

    fn optimizer(&self, scenario: Scenario, index: u64) -> Result<OptimizerOptions> {
        Ok(OptimizerOptions {
            seed: derive_seed(self.seed()?, 100 + scenario.stream(), index),
            ..self.security.optimizer.clone()
        })
    }
}

fn positive(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be > 0")))
    }
}

/// Independent 64-bit seed for `(stream, index)` under a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

// Sub-streams for the different random sources of one scenario.
const HAND: u64 = 10;
const LOOP_NOISE: u64 = 20;
const LINK: u64 = 30;

fn sub_seed(cfg: &ScenarioConfig, scenario: Scenario, kind: u64, index: u64) -> Result<u64> {
    Ok(derive_seed(cfg.seed()?, scenario.stream() * 1000 + kind, index))
}

/// A generated CSV artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvFile {
    pub name: String,
    pub contents: String,
}

impl CsvFile {
    fn new(cfg: &ScenarioConfig, name: &str, header: &str) -> Result<Self> {
        let contents = format!(
            "# config_sha256={}, seed={}\n{header}\n",
            cfg.hash(),
            cfg.seed()?
        );
        Ok(Self {
            name: name.to_string(),
            contents,
        })
    }

    fn row(&mut self, line: &str) {
        self.contents.push_str(line);
        self.contents.push('\n');
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(&self.name);
        std::fs::write(&path, &self.contents)?;
        Ok(path)
    }
}

/// Result of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<CsvFile>,
    /// Scenario-level flags (e.g. `zero_key`), empty when none apply.
    pub flags: Vec<String>,
}

/// Run `f` on a dedicated pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.digits$}"))
}

fn flags_or_ok(flags: &[&str]) -> String {
    if flags.is_empty() {
        "ok".into()
    } else {
        flags.join("|")
    }
}

pub fn run_fig4(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let sc = Scenario::Fig4;
    cfg.validate(sc)?;
    let f = &cfg.fig4;
    let mu = cfg.source.mean_photon_number;
    let sigma = cfg.security.sigma;
    let rows: Vec<String> = f
        .angles_deg
        .par_iter()
        .enumerate()
        .map(|(i, &angle)| -> Result<String> {
            let i = i as u64;
            let src = cfg.source_for(sc, i);
            let ch = cfg.channel(sc, angle, f.block_s);
            let m = simulate_block(&src, &ch, &cfg.background, sub_seed(cfg, sc, LINK, i)?, cfg.backend)?;
            let est = EstimateRow::from_counts(0.0, &m, f.axial_min_counts);
            let c = correlators(&m);
            let (rep, _) = KeyRateReport::device_model(&m, mu, sigma, &cfg.optimizer(sc, i)?)?;
            let closed = rfi_closed_form_rate(&c)?;
            let bb84 = KeyRateReport::bb84(&m, mu, sigma)?;
            Ok(format!(
                "{:.3},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3},{}",
                angle,
                fmt_opt(est.axial.angle(), 4),
                m.sifted(),
                fmt_opt(est.e_zz, 6),
                m.transmission(mu),
                rep.s_min.unwrap_or(f64::NAN),
                rep.r,
                closed,
                bb84.r,
                rep.secure_rate,
                bb84.secure_rate,
                est.flags()
            ))
        })
        .collect::<Result<_>>()?;
    let mut file = CsvFile::new(
        cfg,
        "fig4.csv",
        "angle_deg,omega_deg,sifted_counts,e_zz,transmission,s_min_bits,rfi_r,rfi_closed_form_r,bb84_r,rfi_secure_rate_bps,bb84_secure_rate_bps,flags",
    )?;
    rows.iter().for_each(|r| file.row(r));
    Ok(RunOutput {
        files: vec![file],
        flags: Vec::new(),
    })
}

/// Per-step coupling of a steering run as a function of time.
fn coupling_at(states: &[SteeringState], step_s: f64, t: f64) -> f64 {
    let k = ((t / step_s).floor().max(0.0) as usize).min(states.len() - 1);
    states[k].efficiency
}

pub fn run_fig5(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let sc = Scenario::Fig5;
    cfg.validate(sc)?;
    let f = &cfg.fig5;
    let mu = cfg.source.mean_photon_number;
    let mp = multiphoton_fraction(mu)?;
    let motion = HandMotionParams {
        seed: sub_seed(cfg, sc, HAND, 0)?,
        ..f.motion.clone()
    };
    let tracking = TrackingLoopConfig {
        noise_seed: sub_seed(cfg, sc, LOOP_NOISE, 0)?,
        period_s: motion.step_s,
        ..f.tracking.clone()
    };
    let trace = simulate_hand_trace(f.duration_s + f.sample_s, &motion)?;
    let states = run_tracking(&trace, &tracking)?;
    let step = tracking.period_s;
    let samples = ((f.duration_s / f.interval_s).floor() as usize).max(1);

    let rows: Vec<String> = (0..samples)
        .into_par_iter()
        .map(|k| -> Result<String> {
            let t0 = k as f64 * f.interval_s;
            let s = states[((t0 / step).round() as usize).min(states.len() - 1)];
            let mirrors = [s.tx_mirror_deg[0], s.tx_mirror_deg[1], s.rx_mirror_deg[0], s.rx_mirror_deg[1]];
            let biref = steering_birefringence(mirrors);
            let mut ch = cfg.channel(sc, s.axial_angle_deg, f.sample_s);
            ch.birefringence = combine_birefringence(cfg.channel.birefringence, biref);
            let profile = |t: f64| coupling_at(&states, step, t0 + t);
            let src = cfg.source_for(sc, k as u64);
            let m = simulate_block_with_profile(
                &src,
                &ch,
                &cfg.background,
                sub_seed(cfg, sc, LINK, k as u64)?,
                cfg.backend,
                profile,
            )?;
            let est = EstimateRow::from_counts(t0, &m, f.axial_min_counts);
            let mut flags: Vec<&str> = Vec::new();
            let (r, rate) = if m.sifted() < f.min_sifted {
                flags.push("insufficient_data");
                (None, 0.0)
            } else {
                match rfi_closed_form_rate(&correlators(&m)) {
                    Ok(r) => (Some(r), ((r - mp) * m.sifted() as f64 / f.sample_s).max(0.0)),
                    Err(_) => {
                        flags.push("undefined_correlator");
                        (None, 0.0)
                    }
                }
            };
            if est.axial.angle().is_none() {
                flags.push("axial_insufficient_data");
            }
            let omega = est.axial.angle();
            Ok(format!(
                "{:.3},{:.5},{:.5},{:.5},{:.5},{:.3},{},{},{:.6},{},{},{},{:.3},{}",
                t0,
                mirrors[0],
                mirrors[1],
                mirrors[2],
                mirrors[3],
                s.axial_angle_deg,
                fmt_opt(omega, 3),
                fmt_opt(omega.map(physical_axial_from_estimate), 3),
                m.transmission(mu),
                fmt_opt(est.e_zz, 6),
                m.sifted(),
                fmt_opt(r, 6),
                rate,
                flags_or_ok(&flags)
            ))
        })
        .collect::<Result<_>>()?;

    let mut main = CsvFile::new(
        cfg,
        "fig5.csv",
        "time_s,tx_mirror_h_deg,tx_mirror_v_deg,rx_mirror_h_deg,rx_mirror_v_deg,axial_true_deg,omega_deg,axial_est_deg,transmission,e_zz,sifted_counts,r_closed_form,secure_rate_bps,flags",
    )?;
    rows.iter().for_each(|r| main.row(r));
    let steering = steering_file(cfg, "fig5_steering.csv", &states, step, f.trace_step_s, f.duration_s)?;
    Ok(RunOutput {
        files: vec![main, steering],
        flags: Vec::new(),
    })
}

/// Compose a fixed retardance with the steering-dependent one about the
/// same axis; otherwise the steering contribution is used alone.
fn combine_birefringence(fixed: Birefringence, steering: Birefringence) -> Birefringence {
    if fixed.retardance_deg == 0.0 {
        steering
    } else if fixed.axis == steering.axis {
        Birefringence {
            retardance_deg: fixed.retardance_deg + steering.retardance_deg,
            axis: fixed.axis,
        }
    } else {
        fixed
    }
}

fn steering_file(
    cfg: &ScenarioConfig,
    name: &str,
    states: &[SteeringState],
    step_s: f64,
    every_s: f64,
    until_s: f64,
) -> Result<CsvFile> {
    let mut file = CsvFile::new(cfg, name, SteeringState::CSV_HEADER)?;
    let stride = ((every_s / step_s).round() as usize).max(1);
    let mut buf = Vec::new();
    for s in states.iter().step_by(stride).take_while(|s| s.time_s <= until_s + 1e-9) {
        s.write_csv_row(&mut buf)?;
    }
    file.contents.push_str(&String::from_utf8(buf).expect("ascii csv"));
    Ok(file)
}

pub fn run_finite_key(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let sc = Scenario::FiniteKey;
    cfg.validate(sc)?;
    let f = &cfg.finite_key;
    let mu = cfg.source.mean_photon_number;
    let sigma = cfg.security.sigma;

    let rows: Vec<(f64, String)> = (0..f.runs)
        .into_par_iter()
        .map(|j| -> Result<(f64, String)> {
            let j64 = j as u64;
            let ch = cfg.channel(sc, 0.0, f.block_s);
            let src = cfg.source_for(sc, j64);
            let link_seed = sub_seed(cfg, sc, LINK, j64)?;
            let (m, coupling) = if f.steering {
                let motion = HandMotionParams {
                    seed: sub_seed(cfg, sc, HAND, j64)?,
                    ..f.motion.clone()
                };
                let tracking = TrackingLoopConfig {
                    noise_seed: sub_seed(cfg, sc, LOOP_NOISE, j64)?,
                    period_s: motion.step_s,
                    ..f.tracking.clone()
                };
                let trace = simulate_hand_trace(f.settle_s + f.block_s, &motion)?;
                let states = run_tracking(&trace, &tracking)?;
                let step = tracking.period_s;
                let profile = |t: f64| coupling_at(&states, step, f.settle_s + t);
                let first = (f.settle_s / step).round() as usize;
                let tail = &states[first.min(states.len() - 1)..];
                let mean = tail.iter().map(|s| s.efficiency).sum::<f64>() / tail.len() as f64;
                let m = simulate_block_with_profile(&src, &ch, &cfg.background, link_seed, cfg.backend, profile)?;
                (m, mean)
            } else {
                (simulate_block(&src, &ch, &cfg.background, link_seed, cfg.backend)?, 1.0)
            };

            let mut flags: Vec<&str> = Vec::new();
            let e_zz = crate::estimators::zz_error_rate(&m).ok().map(|e| e.value);
            let (s_min, r, rate) = if m.sifted() < f.min_sifted {
                flags.push("insufficient_data");
                (None, 0.0, 0.0)
            } else {
                let (rep, _) = KeyRateReport::device_model(&m, mu, sigma, &cfg.optimizer(sc, j64)?)?;
                (rep.s_min, rep.r, rep.secure_rate)
            };
            if rate == 0.0 {
                flags.push("zero_key");
            }
            let row = format!(
                "{},{:.6},{:.6},{},{},{},{:.6},{:.3},{:.3},{}",
                j,
                coupling,
                m.transmission(mu),
                m.sifted(),
                fmt_opt(e_zz, 6),
                fmt_opt(s_min, 6),
                r,
                m.sifted() as f64 / f.block_s,
                rate,
                flags_or_ok(&flags)
            );
            Ok((rate, row))
        })
        .collect::<Result<_>>()?;

    let mut per_run = CsvFile::new(
        cfg,
        "finite_key.csv",
        "run,mean_coupling,transmission,sifted_counts,e_zz,s_min_bits,r,sifted_rate_bps,secure_rate_bps,flags",
    )?;
    rows.iter().for_each(|(_, r)| per_run.row(r));

    let rates: Vec<f64> = rows.iter().map(|(r, _)| *r).collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let std = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let nonzero = rates.iter().filter(|r| **r > 0.0).count();
    let mut flags = Vec::new();
    if nonzero == 0 {
        flags.push("zero_key".to_string());
    }
    let mut summary = CsvFile::new(
        cfg,
        "finite_key_summary.csv",
        "runs,block_s,mean_secure_rate_bps,std_secure_rate_bps,nonzero_runs,flags",
    )?;
    summary.row(&format!(
        "{},{:.3},{:.3},{:.3},{},{}",
        rates.len(),
        f.block_s,
        mean,
        std,
        nonzero,
        if flags.is_empty() { "ok".to_string() } else { flags.join("|") }
    ));
    Ok(RunOutput {
        files: vec![per_run, summary],
        flags,
    })
}

pub fn run_steering(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let sc = Scenario::Steering;
    cfg.validate(sc)?;
    let s = &cfg.steering;

    struct Member {
        states: Vec<SteeringState>,
        maxima: Vec<crate::steering::Ccdf>,
    }
    let members: Vec<Member> = (0..s.traces)
        .into_par_iter()
        .map(|j| -> Result<Member> {
            let motion = HandMotionParams {
                seed: sub_seed(cfg, sc, HAND, j as u64)?,
                ..s.motion.clone()
            };
            let tracking = TrackingLoopConfig {
                noise_seed: sub_seed(cfg, sc, LOOP_NOISE, j as u64)?,
                period_s: motion.step_s,
                ..s.tracking.clone()
            };
            let trace = simulate_hand_trace(s.duration_s, &motion)?;
            let maxima = ccdf_max_deviation_windows(&trace, &s.windows_s)?;
            let states = run_tracking(&trace, &tracking)?;
            Ok(Member { states, maxima })
        })
        .collect::<Result<_>>()?;

    let mut header = String::from("angle_deg");
    for w in &s.windows_s {
        let _ = write!(header, ",ccdf_{:.0}ms", w * 1000.0);
    }
    let mut ccdf = CsvFile::new(cfg, "steering_ccdf.csv", &header)?;
    let steps = (s.ccdf_max_deg / s.ccdf_step_deg).round() as usize;
    for k in 0..=steps {
        let a = k as f64 * s.ccdf_step_deg;
        let mut line = format!("{a:.4}");
        for w in 0..s.windows_s.len() {
            let total: usize = members.iter().map(|m| m.maxima[w].samples()).sum();
            let above: f64 = members
                .iter()
                .map(|m| m.maxima[w].survival(a) * m.maxima[w].samples() as f64)
                .sum();
            let _ = write!(line, ",{:.6}", above / total as f64);
        }
        ccdf.row(&line);
    }

    let tracking = TrackingLoopConfig {
        period_s: s.motion.step_s,
        ..s.tracking.clone()
    };
    let couplings: Vec<f64> = s
        .offsets_deg
        .par_iter()
        .map(|&off| static_offset_coupling(off, &tracking, s.offset_hold_s))
        .collect::<Result<_>>()?;
    let peak = couplings.iter().copied().fold(0.0, f64::max);
    let mut coverage = CsvFile::new(
        cfg,
        "steering_coverage.csv",
        "offset_deg,mean_coupling,normalized_transmission",
    )?;
    for (off, c) in s.offsets_deg.iter().zip(&couplings) {
        let norm = if peak > 0.0 { c / peak } else { 0.0 };
        coverage.row(&format!("{off:.3},{c:.6},{norm:.6}"));
    }

    let all: Vec<&SteeringState> = members.iter().flat_map(|m| &m.states).collect();
    let n = all.len() as f64;
    let below = all.iter().filter(|st| st.pointing_error() < crate::steering::FIELD_OF_VIEW_DEG).count() as f64 / n;
    let mean_coupling = all.iter().map(|st| st.efficiency).sum::<f64>() / n;
    let max_mirror = all
        .iter()
        .flat_map(|st| st.tx_mirror_deg.iter().chain(&st.rx_mirror_deg))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut summary = CsvFile::new(
        cfg,
        "steering_summary.csv",
        "traces,duration_s,total_latency_s,fraction_below_fov,mean_coupling,max_mirror_deg",
    )?;
    summary.row(&format!(
        "{},{:.3},{:.4},{:.6},{:.6},{:.4}",
        s.traces,
        s.duration_s,
        tracking.total_latency_s(),
        below,
        mean_coupling,
        max_mirror
    ));

    let trace_file = steering_file(
        cfg,
        "steering_trace.csv",
        &members[0].states,
        tracking.period_s,
        s.trace_step_s,
        s.trace_s,
    )?;
    Ok(RunOutput {
        files: vec![ccdf, coverage, summary, trace_file],
        flags: Vec::new(),
    })
}

/// Analyse a count matrix from a file, or simulate one from the config.
pub fn run_custom(cfg: &ScenarioConfig, counts: Option<&Path>) -> Result<RunOutput> {
    let sc = Scenario::Custom;
    cfg.validate(sc)?;
    let c = &cfg.custom;
    let mu = cfg.source.mean_photon_number;
    let sigma = cfg.security.sigma;
    let m = match counts {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
            let m = CountMatrix::read_csv(std::io::BufReader::new(file))?;
            m.validate()?;
            m
        }
        None => {
            let ch = cfg.channel(sc, c.axial_angle_deg, c.duration_s);
            let src = cfg.source_for(sc, 0);
            with_workers(cfg.workers, || {
                simulate_block(&src, &ch, &cfg.background, sub_seed(cfg, sc, LINK, 0)?, cfg.backend)
            })??
        }
    };

    let mut counts_file = CsvFile::new(cfg, "counts.csv", "")?;
    counts_file.contents.truncate(counts_file.contents.len() - 1);
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    counts_file.contents.push_str(&String::from_utf8(buf).expect("ascii csv"));

    let est = EstimateRow::from_counts(0.0, &m, c.axial_min_counts);
    let mut estimates = CsvFile::new(cfg, "estimates.csv", &EstimateRow::csv_header())?;
    let mut buf = Vec::new();
    est.write_csv_row(&mut buf)?;
    estimates.contents.push_str(&String::from_utf8(buf).expect("ascii csv"));

    let mut key = CsvFile::new(cfg, "key_rate.csv", KeyRateReport::CSV_HEADER)?;
    let mut buf = Vec::new();
    let c_set = correlators(&m);
    let mut flags = Vec::new();
    if c_set.value(Basis::Z, Basis::Z).is_err() {
        return Err(Error::InsufficientData("no key-basis counts".into()));
    }
    KeyRateReport::closed_form(&m, mu)?.write_csv_row(&mut buf)?;
    let (dm, _) = KeyRateReport::device_model(&m, mu, sigma, &cfg.optimizer(sc, 0)?)?;
    dm.write_csv_row(&mut buf)?;
    KeyRateReport::new(
        crate::security::Method::Bb84,
        None,
        bb84_fraction_finite(&c_set, sigma)?,
        &m,
        mu,
        sigma,
    )?
    .write_csv_row(&mut buf)?;
    key.contents.push_str(&String::from_utf8(buf).expect("ascii csv"));
    if dm.secure_rate == 0.0 {
        flags.push("zero_key".to_string());
    }
    Ok(RunOutput {
        files: vec![counts_file, estimates, key],
        flags,
    })
}

/// Dispatch a scenario on the configured worker pool.
pub fn run(cfg: &ScenarioConfig, scenario: Scenario, counts: Option<&Path>) -> Result<RunOutput> {
    match scenario {
        Scenario::Custom => run_custom(cfg, counts),
        _ => with_workers(cfg.workers, || match scenario {
            Scenario::Fig4 => run_fig4(cfg),
            Scenario::Fig5 => run_fig5(cfg),
            Scenario::FiniteKey => run_finite_key(cfg),
            Scenario::Steering => run_steering(cfg),
            Scenario::Custom => unreachable!(),
        })?,
    }
}
