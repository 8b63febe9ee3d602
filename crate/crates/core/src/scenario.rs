//! Config-driven experiment scenarios behind the `dyensemble` binary:
//! the piecewise simulation, synthetic decoding with noisy channels, and
//! parameter sweeps.
//!
//! Every run writes `resolved_config.json` (all defaults filled in, seeds
//! included) next to its CSV outputs; feeding that file back reproduces the
//! outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{KalmanFilter, KalmanState};
use crate::candidate_gen::{
    fit_observation, fit_state_transition, generate_candidates, GenerationConfig, DEFAULT_RIDGE,
};
use crate::data_gen::{
    candidate_set_for_simulation, inject_noise, simulate_series, simulation_transition,
    synth_cortex, SimulationSpec, SynthCortexSpec,
};
use crate::ensemble_engine::{EnsembleConfig, EnsembleFilter, StepOutput};
use crate::error::{Error, Result};
use crate::evaluation::{
    correlation_coefficient, mean_std, rank_channels, segment_dominance, Segment, WeightTrace,
};
use crate::numeric::{fmt_f64, rng_from_seed, SimRng};
use crate::particle_core::{ParticleSet, ResamplePolicy};
use crate::state_space::{Dataset, StateTransition};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Simulation,
    SynthDecode,
    Sweep,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Simulation => "simulation",
            Scenario::SynthDecode => "synth-decode",
            Scenario::Sweep => "sweep",
        }
    }
}

/// Ensemble decoder settings for the decode and sweep scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    pub alpha: f64,
    pub n_particles: usize,
    pub model_count: usize,
    pub model_size: usize,
    pub perturbation: f64,
    pub ess_threshold: f64,
    pub ridge: f64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            n_particles: 1000,
            model_count: 20,
            model_size: 15,
            perturbation: 0.1,
            ess_threshold: 0.5,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// Test-set corruption: for each entry of `noisy_counts`, that many
/// channels are replaced by uniform integers in `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSettings {
    pub noisy_counts: Vec<usize>,
    pub low: i64,
    pub high: i64,
}

impl Default for CorruptionSettings {
    fn default() -> Self {
        Self {
            noisy_counts: vec![2, 4],
            low: 0,
            high: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub spec: SimulationSpec,
    pub alphas: Vec<f64>,
    pub n_particles: usize,
    /// Steps skipped at the start of each segment when scoring dominance.
    pub settle_steps: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            spec: SimulationSpec::default(),
            alphas: vec![0.5],
            n_particles: 200,
            settle_steps: 9,
        }
    }
}

/// One ensemble variant in the decode report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Channels dropped per candidate (`s = d_y - dropped`).
    pub dropped: usize,
    pub perturbation: f64,
}

fn default_variants() -> Vec<Variant> {
    let v = |name: &str, dropped, perturbation| Variant {
        name: name.into(),
        dropped,
        perturbation,
    };
    vec![
        v("DyEnsemble (w/o P, w/o D)", 0, 0.0),
        v("DyEnsemble (P(0.1), w/o D)", 0, 0.1),
        v("DyEnsemble-2", 2, 0.1),
        v("DyEnsemble-5", 5, 0.1),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    ModelSize,
    ModelCount,
    Alpha,
    Perturbation,
}

impl SweepParameter {
    pub fn file_stem(self) -> &'static str {
        match self {
            SweepParameter::ModelSize => "s",
            SweepParameter::ModelCount => "m",
            SweepParameter::Alpha => "alpha",
            SweepParameter::Perturbation => "p",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

fn default_sweeps() -> Vec<SweepSpec> {
    vec![
        SweepSpec {
            parameter: SweepParameter::ModelSize,
            values: vec![10.0, 12.0, 15.0, 18.0, 20.0],
        },
        SweepSpec {
            parameter: SweepParameter::ModelCount,
            values: vec![5.0, 10.0, 20.0, 40.0],
        },
        SweepSpec {
            parameter: SweepParameter::Alpha,
            values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        },
        SweepSpec {
            parameter: SweepParameter::Perturbation,
            values: vec![0.01, 0.05, 0.1, 0.2, 0.5],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub decoder: DecoderSettings,
    #[serde(default)]
    pub corruption: CorruptionSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub cortex: SynthCortexSpec,
    /// Channels kept after MI ranking on the training split.
    #[serde(default = "default_top_channels")]
    pub top_channels: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_sweeps")]
    pub sweeps: Vec<SweepSpec>,
    /// Used when no output directory is given on the command line. Not
    /// written to the resolved config, so reruns elsewhere stay identical.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_top_channels() -> usize {
    20
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            seeds: default_seeds(),
            decoder: DecoderSettings::default(),
            corruption: CorruptionSettings::default(),
            simulation: SimulationSettings::default(),
            cortex: SynthCortexSpec::default(),
            top_channels: default_top_channels(),
            variants: default_variants(),
            sweeps: default_sweeps(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let d = &self.decoder;
        check_alpha(d.alpha)?;
        ResamplePolicy::new(d.ess_threshold)?;
        if d.n_particles == 0 || d.model_count == 0 {
            return Err(Error::Config(
                "particle and model counts must be positive".into(),
            ));
        }
        match self.scenario {
            Scenario::Simulation => {
                self.simulation.spec.validate()?;
                if self.simulation.alphas.is_empty() {
                    return Err(Error::Config("simulation alpha list is empty".into()));
                }
                for a in &self.simulation.alphas {
                    check_alpha(*a)?;
                }
                if self.simulation.n_particles == 0 {
                    return Err(Error::Config("particle count must be positive".into()));
                }
            }
            Scenario::SynthDecode | Scenario::Sweep => {
                self.cortex.validate()?;
                if self.top_channels == 0 || self.top_channels > self.cortex.channel_count {
                    return Err(Error::Config(format!(
                        "top_channels {} must be in 1..={}",
                        self.top_channels, self.cortex.channel_count
                    )));
                }
                if self.cortex.duration_bins < 8 {
                    return Err(Error::Config("cortex recording too short to split".into()));
                }
                let c = &self.corruption;
                if c.low > c.high {
                    return Err(Error::Config("corruption range is empty".into()));
                }
                if let Some(n) = c.noisy_counts.iter().find(|n| **n > self.top_channels) {
                    return Err(Error::Config(format!(
                        "cannot corrupt {n} of {} channels",
                        self.top_channels
                    )));
                }
                GenerationConfig {
                    model_count: d.model_count,
                    model_size: d.model_size,
                    perturbation_factor: d.perturbation,
                    seed: 0,
                    ridge: d.ridge,
                }
                .validate(self.top_channels)?;
            }
        }
        if self.scenario == Scenario::SynthDecode {
            for v in &self.variants {
                if v.dropped >= self.top_channels {
                    return Err(Error::Config(format!(
                        "variant {} drops every channel",
                        v.name
                    )));
                }
                if !(v.perturbation.is_finite() && v.perturbation >= 0.0) {
                    return Err(Error::Config(format!("variant {} perturbation", v.name)));
                }
            }
        }
        if self.scenario == Scenario::Sweep {
            if self.sweeps.is_empty() {
                return Err(Error::Config("sweep list is empty".into()));
            }
            for s in &self.sweeps {
                if s.values.is_empty() {
                    return Err(Error::Config(format!(
                        "sweep over {:?} has no values",
                        s.parameter
                    )));
                }
                for v in &s.values {
                    self.swept_settings(s.parameter, *v)?;
                }
            }
        }
        Ok(())
    }

    /// Decoder settings with one parameter replaced.
    fn swept_settings(&self, parameter: SweepParameter, value: f64) -> Result<DecoderSettings> {
        let mut d = self.decoder.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("sweep value {v} must be a positive integer")))
            }
        };
        match parameter {
            SweepParameter::ModelSize => {
                d.model_size = as_count(value)?;
                if d.model_size > self.top_channels {
                    return Err(Error::Config(format!(
                        "model size {value} exceeds {} channels",
                        self.top_channels
                    )));
                }
            }
            SweepParameter::ModelCount => d.model_count = as_count(value)?,
            SweepParameter::Alpha => {
                check_alpha(value)?;
                d.alpha = value;
            }
            SweepParameter::Perturbation => {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(Error::Config(format!("perturbation {value} is negative")));
                }
                d.perturbation = value;
            }
        }
        Ok(d)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must be in (0, 1)")))
    }
}

/// Independent stream for one `(seed, purpose)` cell.
fn cell_rng(seed: u64, tag: u64) -> SimRng {
    rng_from_seed(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag))
}

fn cell_seed(seed: u64, tag: u64) -> u64 {
    cell_rng(seed, tag).next_u64()
}

const TAG_DATA: u64 = 1;
const TAG_FILTER: u64 = 2;
const TAG_CORRUPTION: u64 = 1_000;
const TAG_CANDIDATES: u64 = 2_000;
const TAG_PARTICLES: u64 = 3_000;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_json())
}

/// Results of one simulation run (one seed, one α).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub seed: u64,
    pub alpha: f64,
    pub trace: WeightTrace,
    pub estimates: Vec<f64>,
    pub truth: Vec<f64>,
    /// Dominance fraction per segment interior.
    pub dominance: Vec<f64>,
    pub mean_l1_change: f64,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub runs: Vec<SimulationRun>,
}

/// Segment interiors with the model that generated them.
pub fn simulation_segments(settings: &SimulationSettings) -> Vec<Segment> {
    settings
        .spec
        .segments()
        .into_iter()
        .enumerate()
        .map(|(m, (start, end))| Segment {
            start: (start + settings.settle_steps).min(end),
            end,
            expected_model: m,
        })
        .collect()
}

/// Filter one simulated series with the exact candidates.
pub fn run_simulation_once(
    settings: &SimulationSettings,
    ess_threshold: f64,
    seed: u64,
    alpha: f64,
) -> Result<SimulationRun> {
    let data = simulate_series(&settings.spec, &mut cell_rng(seed, TAG_DATA))?;
    let transition: Arc<dyn StateTransition> = Arc::new(simulation_transition(&settings.spec)?);
    let cfg = EnsembleConfig::new(
        alpha,
        settings.n_particles,
        ResamplePolicy::new(ess_threshold)?,
        candidate_set_for_simulation(),
        transition,
    )?;
    let initial = ParticleSet::from_point(&[settings.spec.x0], settings.n_particles)?;
    let mut filter = EnsembleFilter::new(cfg, initial)?;
    let mut rng = cell_rng(seed, TAG_FILTER);
    let mut outputs: Vec<StepOutput> = Vec::with_capacity(data.len());
    for r in 0..data.len() {
        outputs.push(filter.step(&data.measurement(r), &mut rng)?);
    }
    let steps: Vec<usize> = outputs.iter().map(|o| o.k).collect();
    let rows: Vec<Vec<f64>> = outputs.iter().map(|o| o.posterior.probs()).collect();
    let trace = WeightTrace::from_rows(steps, &rows)?;
    let dominance = segment_dominance(&trace, &simulation_segments(settings))?;
    Ok(SimulationRun {
        seed,
        alpha,
        mean_l1_change: trace.mean_l1_change(),
        estimates: outputs.iter().map(|o| o.estimate[0]).collect(),
        truth: data.state_component(0),
        warnings: outputs.iter().filter(|o| o.warning.is_some()).count(),
        dominance,
        trace,
    })
}

pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationReport> {
    let cells: Vec<(u64, f64)> = cfg
        .seeds
        .iter()
        .flat_map(|s| cfg.simulation.alphas.iter().map(move |a| (*s, *a)))
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(seed, alpha)| {
            run_simulation_once(&cfg.simulation, cfg.decoder.ess_threshold, seed, alpha)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationReport { runs })
}

fn simulation_trace_name(seed: u64, alpha: f64) -> String {
    format!("trace_seed{seed}_alpha{alpha}.csv")
}

/// Run the simulation scenario and write traces plus dominance and
/// smoothness summaries into `out`.
pub fn run_simulation_scenario(cfg: &ExperimentConfig, out: &Path) -> Result<SimulationReport> {
    expect_scenario(cfg, Scenario::Simulation)?;
    cfg.validate()?;
    let report = run_simulation(cfg)?;
    prepare_out(cfg, out)?;
    let segments = simulation_segments(&cfg.simulation);
    let mut dominance_rows = Vec::new();
    let mut smooth_rows = Vec::new();
    for run in &report.runs {
        let m = run.trace.model_count();
        let mut header = vec!["k".to_string(), "x".into(), "estimate".into()];
        header.extend((1..=m).map(|i| format!("posterior_{i}")));
        let rows: Vec<Vec<String>> = (0..run.trace.len())
            .map(|r| {
                let mut row = vec![
                    run.trace.steps()[r].to_string(),
                    fmt_f64(run.truth[r]),
                    fmt_f64(run.estimates[r]),
                ];
                row.extend(run.trace.probs().row(r).iter().map(|p| fmt_f64(*p)));
                row
            })
            .collect();
        write_rows(&out.join(simulation_trace_name(run.seed, run.alpha)), &header, &rows)?;
        for (seg, frac) in segments.iter().zip(&run.dominance) {
            dominance_rows.push(vec![
                run.seed.to_string(),
                fmt_f64(run.alpha),
                seg.start.to_string(),
                seg.end.to_string(),
                (seg.expected_model + 1).to_string(),
                fmt_f64(*frac),
            ]);
        }
        smooth_rows.push(vec![
            run.seed.to_string(),
            fmt_f64(run.alpha),
            fmt_f64(run.mean_l1_change),
        ]);
    }
    let h = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    write_rows(
        &out.join("dominance.csv"),
        &h(&["seed", "alpha", "start", "end", "expected_model", "fraction"]),
        &dominance_rows,
    )?;
    write_rows(
        &out.join("smoothness.csv"),
        &h(&["seed", "alpha", "mean_l1_change"]),
        &smooth_rows,
    )?;
    Ok(report)
}

/// Training, validation and test portions of one synthetic recording,
/// restricted to the top-ranked channels.
#[derive(Debug, Clone)]
pub struct DecodeSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Original channel indices, best first.
    pub channels: Vec<usize>,
}

/// First half trains, the next quarter validates, the last quarter tests.
pub fn split_recording(data: &Dataset, top_channels: usize) -> Result<DecodeSplit> {
    let n = data.len();
    let (a, b) = (n / 2, 3 * n / 4);
    let train_all = data.slice_rows(0..a)?;
    let channels = rank_channels(&train_all, 0, top_channels)?;
    Ok(DecodeSplit {
        train: train_all.select_channels(&channels)?,
        validation: data.slice_rows(a..b)?.select_channels(&channels)?,
        test: data.slice_rows(b..n)?.select_channels(&channels)?,
        channels,
    })
}

/// Test sets keyed by corruption count (0 = clean).
fn corrupted_tests(
    cfg: &ExperimentConfig,
    seed: u64,
    test: &Dataset,
) -> Result<Vec<(usize, Dataset)>> {
    let mut out = vec![(0, test.clone())];
    for &count in &cfg.corruption.noisy_counts {
        let rng_seed = cell_seed(seed, TAG_CORRUPTION + count as u64);
        let mut rng = rng_from_seed(rng_seed);
        let chosen = sample(&mut rng, test.channel_count(), count).into_vec();
        let mut noisy = inject_noise(test, &chosen, cfg.corruption.low, cfg.corruption.high, &mut rng)?;
        if let Some(rec) = noisy.meta_mut().corruption.last_mut() {
            rec.seed = Some(rng_seed);
        }
        out.push((count, noisy));
    }
    Ok(out)
}

/// Everything fitted on the training split that decoders share.
struct Fitted {
    transition: Arc<dyn StateTransition>,
    linear: crate::state_space::LinearStateTransition,
    prior: KalmanState,
}

fn fit_shared(train: &Dataset, ridge: f64) -> Result<Fitted> {
    let linear = fit_state_transition(train, ridge)?;
    Ok(Fitted {
        transition: Arc::new(linear.clone()),
        linear,
        prior: KalmanState::from_training(train)?,
    })
}

fn kalman_cc(fitted: &Fitted, train: &Dataset, test: &Dataset, ridge: f64) -> Result<f64> {
    let all: Vec<usize> = (0..train.channel_count()).collect();
    let obs = fit_observation(train, &all, ridge)?;
    let mut kf = KalmanFilter::new(fitted.prior.clone(), fitted.linear.clone(), obs)?;
    let est: Vec<f64> = kf.run(test)?.iter().map(|x| x[0]).collect();
    correlation_coefficient(&est, &test.state_component(0))
}

fn ensemble_cc(
    fitted: &Fitted,
    settings: &DecoderSettings,
    models: Vec<crate::state_space::LinearObservationModel>,
    test: &Dataset,
    rng_seed: u64,
) -> Result<f64> {
    let cfg = EnsembleConfig::new(
        settings.alpha,
        settings.n_particles,
        ResamplePolicy::new(settings.ess_threshold)?,
        models,
        fitted.transition.clone(),
    )?;
    let mut rng = rng_from_seed(rng_seed);
    let (mean, cov) = (&fitted.prior.mean, &fitted.prior.cov);
    let initial = ParticleSet::from_gaussian(mean, cov, settings.n_particles, &mut rng)?;
    let mut filter = EnsembleFilter::new(cfg, initial)?;
    let mut est = Vec::with_capacity(test.len());
    for r in 0..test.len() {
        est.push(filter.step(&test.measurement(r), &mut rng)?.estimate[0]);
    }
    correlation_coefficient(&est, &test.state_component(0))
}

fn recording(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let spec = SynthCortexSpec {
        seed: cell_seed(seed, TAG_DATA),
        ..cfg.cortex.clone()
    };
    synth_cortex(&spec)
}

/// CC of one method on every condition for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub method: String,
    /// `(noisy count, per-seed CCs in seed order)`; count 0 is clean.
    pub conditions: Vec<(usize, Vec<f64>)>,
}

impl MethodScores {
    pub fn cc(&self, noisy: usize) -> Option<&[f64]> {
        self.conditions
            .iter()
            .find(|(n, _)| *n == noisy)
            .map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodScores>,
}

impl DecodeReport {
    pub fn method(&self, name: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub const KALMAN: &str = "Kalman";

pub fn run_decode(cfg: &ExperimentConfig) -> Result<DecodeReport> {
    // (method index, seed index, condition index) -> cc
    struct Cell {
        method: usize,
        seed: usize,
        condition: usize,
        cc: f64,
    }
    let per_seed = cfg
        .seeds
        .par_iter()
        .enumerate()
        .map(|(si, &seed)| -> Result<Vec<Cell>> {
            let split = split_recording(&recording(cfg, seed)?, cfg.top_channels)?;
            let fitted = fit_shared(&split.train, cfg.decoder.ridge)?;
            let tests = corrupted_tests(cfg, seed, &split.test)?;
            let d_y = split.train.channel_count();
            let mut cells = Vec::new();
            for (ci, (_, test)) in tests.iter().enumerate() {
                cells.push(Cell {
                    method: 0,
                    seed: si,
                    condition: ci,
                    cc: kalman_cc(&fitted, &split.train, test, cfg.decoder.ridge)?,
                });
            }
            let variant_cells = cfg
                .variants
                .par_iter()
                .enumerate()
                .map(|(vi, v)| -> Result<Vec<Cell>> {
                    let gen = GenerationConfig {
                        model_count: cfg.decoder.model_count,
                        model_size: d_y - v.dropped,
                        perturbation_factor: v.perturbation,
                        seed: cell_seed(seed, TAG_CANDIDATES + vi as u64),
                        ridge: cfg.decoder.ridge,
                    };
                    let models = generate_candidates(&split.train, &gen)?;
                    tests
                        .iter()
                        .enumerate()
                        .map(|(ci, (_, test))| {
                            let rng_seed =
                                cell_seed(seed, TAG_PARTICLES + 16 * vi as u64 + ci as u64);
                            Ok(Cell {
                                method: vi + 1,
                                seed: si,
                                condition: ci,
                                cc: ensemble_cc(&fitted, &cfg.decoder, models.clone(), test, rng_seed)?,
                            })
                        })
                        .collect()
                })
                .collect::<Vec<_>>();
            for vc in variant_cells {
                cells.extend(vc?);
            }
            Ok(cells)
        })
        .collect::<Vec<_>>();

    let conditions: Vec<usize> = std::iter::once(0)
        .chain(cfg.corruption.noisy_counts.iter().copied())
        .collect();
    let names: Vec<String> = std::iter::once(KALMAN.to_string())
        .chain(cfg.variants.iter().map(|v| v.name.clone()))
        .collect();
    let mut methods: Vec<MethodScores> = names
        .into_iter()
        .map(|method| MethodScores {
            method,
            conditions: conditions
                .iter()
                .map(|c| (*c, vec![f64::NAN; cfg.seeds.len()]))
                .collect(),
        })
        .collect();
    for cells in per_seed {
        for c in cells? {
            methods[c.method].conditions[c.condition].1[c.seed] = c.cc;
        }
    }
    Ok(DecodeReport {
        seeds: cfg.seeds.clone(),
        methods,
    })
}

fn condition_label(noisy: usize) -> String {
    if noisy == 0 {
        "original".into()
    } else {
        format!("noisy{noisy}")
    }
}

pub fn run_decode_scenario(cfg: &ExperimentConfig, out: &Path) -> Result<DecodeReport> {
    expect_scenario(cfg, Scenario::SynthDecode)?;
    cfg.validate()?;
    let report = run_decode(cfg)?;
    prepare_out(cfg, out)?;

    let first = &report.methods[0];
    let mut header = vec!["method".to_string()];
    for (n, _) in &first.conditions {
        header.push(format!("{}_mean", condition_label(*n)));
        header.push(format!("{}_std", condition_label(*n)));
    }
    let rows: Vec<Vec<String>> = report
        .methods
        .iter()
        .map(|m| {
            let mut row = vec![m.method.clone()];
            for (_, ccs) in &m.conditions {
                let (mean, std) = mean_std(ccs);
                row.push(fmt_f64(mean));
                row.push(fmt_f64(std));
            }
            row
        })
        .collect();
    write_rows(&out.join("report.csv"), &header, &rows)?;

    let mut seed_rows = Vec::new();
    for m in &report.methods {
        for (n, ccs) in &m.conditions {
            for (seed, cc) in report.seeds.iter().zip(ccs) {
                seed_rows.push(vec![
                    m.method.clone(),
                    condition_label(*n),
                    seed.to_string(),
                    fmt_f64(*cc),
                ]);
            }
        }
    }
    let h: Vec<String> = ["method", "condition", "seed", "cc"].iter().map(|s| s.to_string()).collect();
    write_rows(&out.join("cc_per_seed.csv"), &h, &seed_rows)?;
    Ok(report)
}

/// Mean and std of CC over seeds for every value of one swept parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub ccs: Vec<Vec<f64>>,
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCurve>> {
    let prepared = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(DecodeSplit, Fitted)> {
            let split = split_recording(&recording(cfg, seed)?, cfg.top_channels)?;
            let fitted = fit_shared(&split.train, cfg.decoder.ridge)?;
            Ok((split, fitted))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (wi, sweep) in cfg.sweeps.iter().enumerate() {
        for (vi, value) in sweep.values.iter().enumerate() {
            for si in 0..cfg.seeds.len() {
                jobs.push((wi, vi, *value, si));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(wi, vi, value, si)| -> Result<f64> {
            let seed = cfg.seeds[si];
            let settings = cfg.swept_settings(cfg.sweeps[wi].parameter, value)?;
            let (split, fitted) = &prepared[si];
            let tag = 64 * wi as u64 + vi as u64;
            let gen = GenerationConfig {
                model_count: settings.model_count,
                model_size: settings.model_size,
                perturbation_factor: settings.perturbation,
                seed: cell_seed(seed, TAG_CANDIDATES + 100 + tag),
                ridge: settings.ridge,
            };
            let models = generate_candidates(&split.train, &gen)?;
            let rng_seed = cell_seed(seed, TAG_PARTICLES + 100 + tag);
            ensemble_cc(fitted, &settings, models, &split.test, rng_seed)
        })
        .collect::<Vec<_>>();

    let mut curves: Vec<SweepCurve> = cfg
        .sweeps
        .iter()
        .map(|s| SweepCurve {
            parameter: s.parameter,
            values: s.values.clone(),
            ccs: vec![vec![f64::NAN; cfg.seeds.len()]; s.values.len()],
        })
        .collect();
    for (&(wi, vi, _, si), cc) in jobs.iter().zip(results) {
        curves[wi].ccs[vi][si] = cc?;
    }
    Ok(curves)
}

pub fn run_sweep_scenario(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepCurve>> {
    expect_scenario(cfg, Scenario::Sweep)?;
    cfg.validate()?;
    let curves = run_sweep(cfg)?;
    prepare_out(cfg, out)?;
    let header: Vec<String> = ["value", "mean_cc", "std_cc"].iter().map(|s| s.to_string()).collect();
    for c in &curves {
        let rows: Vec<Vec<String>> = c
            .values
            .iter()
            .zip(&c.ccs)
            .map(|(v, ccs)| {
                let (m, s) = mean_std(ccs);
                vec![fmt_f64(*v), fmt_f64(m), fmt_f64(s)]
            })
            .collect();
        write_rows(
            &out.join(format!("sweep_{}.csv", c.parameter.file_stem())),
            &header,
            &rows,
        )?;
    }
    Ok(curves)
}

fn expect_scenario(cfg: &ExperimentConfig, want: Scenario) -> Result<()> {
    if cfg.scenario == want {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "config is for scenario {}, not {}",
            cfg.scenario.name(),
            want.name()
        )))
    }
}

/// Dispatch on `cfg.scenario`.
pub fn run_scenario(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    match cfg.scenario {
        Scenario::Simulation => run_simulation_scenario(cfg, out).map(|_| ()),
        Scenario::SynthDecode => run_decode_scenario(cfg, out).map(|_| ()),
        Scenario::Sweep => run_sweep_scenario(cfg, out).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::new(Scenario::Sweep);
        let back = ExperimentConfig::from_json(&cfg.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"scenario":"simulation"}"#, Path::new("x")).unwrap();
        assert_eq!(cfg.simulation.n_particles, 200);
        assert_eq!(cfg.simulation.alphas, vec![0.5]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"scenario":"sweep","seedz":[1]}"#, Path::new("x")).is_err());
    }

    #[test]
    fn empty_sweep_is_config_error() {
        let mut cfg = ExperimentConfig::new(Scenario::Sweep);
        cfg.sweeps = vec![];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sweeps = vec![SweepSpec {
            parameter: SweepParameter::ModelCount,
            values: vec![],
        }];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sweeps[0].values = vec![2.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn simulation_segment_interiors() {
        let segs = simulation_segments(&SimulationSettings::default());
        let bounds: Vec<(usize, usize, usize)> =
            segs.iter().map(|s| (s.start, s.end, s.expected_model)).collect();
        assert_eq!(bounds, vec![(10, 100, 0), (110, 200, 1), (210, 300, 2)]);
    }

    #[test]
    fn split_proportions() {
        let data = synth_cortex(&SynthCortexSpec {
            duration_bins: 400,
            ..Default::default()
        })
        .unwrap();
        let split = split_recording(&data, 20).unwrap();
        assert_eq!(split.train.len(), 200);
        assert_eq!(split.validation.len(), 100);
        assert_eq!(split.test.len(), 100);
        assert_eq!(split.test.meta().start_step, 300);
        let mut ch = split.channels.clone();
        ch.sort_unstable();
        assert_eq!(ch, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_scenario_is_rejected() {
        let cfg = ExperimentConfig::new(Scenario::Sweep);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_simulation_scenario(&cfg, dir.path()),
            Err(Error::Config(_))
        ));
    }
}
