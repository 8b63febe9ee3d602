//! Data generators: the piecewise-measurement simulation, a surrogate
//! cortical spike-count dataset, and channel noise injection.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_from_seed;
use crate::state_space::{
    CorruptionRecord, Dataset, DatasetMeta, GenericStateTransition, LinearObservationModel,
};

/// Settings for the scalar piecewise simulation.
///
/// The state noise is Gamma with the given shape and *scale* (mean
/// `shape · scale`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSpec {
    pub length: usize,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub measurement_noise_sd: f64,
    /// Last step of each segment but the final one.
    pub boundaries: Vec<usize>,
    pub x0: f64,
    /// Test hook: generate with all noise suppressed.
    pub noiseless: bool,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            length: 300,
            gamma_shape: 3.0,
            gamma_scale: 2.0,
            measurement_noise_sd: 1.0,
            boundaries: vec![100, 200],
            x0: 0.0,
            noiseless: false,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("simulation length must be positive".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("segment boundaries must increase".into()));
        }
        if self.boundaries.iter().any(|b| *b == 0 || *b >= self.length) {
            return Err(Error::Config(
                "segment boundaries must lie inside the series".into(),
            ));
        }
        if self.boundaries.len() + 1 > SIMULATION_MODELS.len() {
            return Err(Error::Config(format!(
                "at most {} segments are defined",
                SIMULATION_MODELS.len()
            )));
        }
        if !(self.gamma_shape > 0.0 && self.gamma_scale > 0.0 && self.measurement_noise_sd >= 0.0)
        {
            return Err(Error::Config("noise parameters must be positive".into()));
        }
        Ok(())
    }

    /// Segment (0-based) that generates the measurement at step `k ≥ 1`.
    /// A boundary step belongs to the segment it closes.
    pub fn segment_of(&self, k: usize) -> usize {
        self.boundaries.iter().filter(|b| k > **b).count()
    }

    /// `(first, last)` step of every segment, inclusive.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 1;
        for &b in &self.boundaries {
            out.push((start, b));
            start = b + 1;
        }
        out.push((start, self.length));
        out
    }
}

/// `(slope, intercept)` of the three simulation measurement functions.
pub const SIMULATION_MODELS: [(f64, f64); 3] = [(2.0, -3.0), (-1.0, 8.0), (0.5, 5.0)];

/// Deterministic part of the simulated dynamics for the state at step `k`.
pub fn simulation_drift(prev: f64, k: usize) -> f64 {
    1.0 + (0.04 * PI * k as f64).sin() + 0.5 * prev
}

/// The simulated dynamics as a filter transition (Gamma state noise).
pub fn simulation_transition(spec: &SimulationSpec) -> Result<GenericStateTransition> {
    let gamma = Gamma::new(spec.gamma_shape, spec.gamma_scale)
        .map_err(|e| Error::Config(format!("gamma noise: {e}")))?;
    let noiseless = spec.noiseless;
    Ok(GenericStateTransition::new(1, move |prev, k, rng| {
        let v = if noiseless { 0.0 } else { gamma.sample(rng) };
        vec![simulation_drift(prev[0], k) + v]
    }))
}

/// The three exact candidate models, unit noise variance.
pub fn candidate_set_for_simulation() -> Vec<LinearObservationModel> {
    SIMULATION_MODELS
        .iter()
        .map(|&(h, b)| {
            LinearObservationModel::full(
                DMatrix::from_element(1, 1, h),
                DVector::from_element(1, b),
                DVector::from_element(1, 1.0),
            )
            .expect("fixed simulation models are valid")
        })
        .collect()
}

/// Generate steps `1..=length`. Row `r` holds step `r + 1`; `x_0` is not
/// stored. Per step the state noise is drawn before the measurement noise.
pub fn simulate_series(spec: &SimulationSpec, rng: &mut dyn RngCore) -> Result<Dataset> {
    spec.validate()?;
    let gamma = Gamma::new(spec.gamma_shape, spec.gamma_scale)
        .map_err(|e| Error::Config(format!("gamma noise: {e}")))?;
    let n = spec.length;
    let mut states = DMatrix::zeros(n, 1);
    let mut meas = DMatrix::zeros(n, 1);
    let mut x = spec.x0;
    for k in 1..=n {
        let v = if spec.noiseless { 0.0 } else { gamma.sample(rng) };
        x = simulation_drift(x, k) + v;
        let (h, b) = SIMULATION_MODELS[spec.segment_of(k)];
        let noise = if spec.noiseless {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            spec.measurement_noise_sd * z
        };
        states[(k - 1, 0)] = x;
        meas[(k - 1, 0)] = h * x + b + noise;
    }
    Dataset::new(
        states,
        meas,
        DatasetMeta {
            bin_width_ms: 1.0,
            channel_labels: vec!["y".into()],
            start_step: 1,
            corruption: Vec::new(),
        },
    )
}

/// Settings for the surrogate cortical dataset.
///
/// Position is zero at rest with raised-cosine press pulses at Poisson
/// event times; velocity and acceleration are per-bin central differences.
/// Informative channels have rectified-linear Poisson tuning to the state
/// whose gain drifts sinusoidally; the rest fire at a constant baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCortexSpec {
    pub channel_count: usize,
    pub duration_bins: usize,
    pub bin_width_ms: f64,
    /// Expected press events per bin.
    pub press_rate: f64,
    /// Pulse width in bins.
    pub pulse_width: f64,
    pub pulse_amplitude: f64,
    /// Spikes per bin per unit (normalized) state.
    pub tuning_scale: f64,
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Relative amplitude of the sinusoidal gain drift.
    pub drift_amplitude: f64,
    /// Drift period in bins.
    pub drift_period: f64,
    pub informative_fraction: f64,
    pub seed: u64,
    /// Test hook: emit the rates instead of Poisson counts.
    pub noise_free: bool,
}

impl Default for SynthCortexSpec {
    fn default() -> Self {
        Self {
            channel_count: 20,
            duration_bins: 4000,
            bin_width_ms: 100.0,
            press_rate: 0.025,
            pulse_width: 15.0,
            pulse_amplitude: 1.0,
            tuning_scale: 1.5,
            baseline_min: 1.0,
            baseline_max: 4.0,
            drift_amplitude: 0.5,
            drift_period: 800.0,
            informative_fraction: 0.75,
            seed: 0,
            noise_free: false,
        }
    }
}

impl SynthCortexSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channel_count == 0 || self.duration_bins < 3 {
            return Err(Error::Config("need channels and at least 3 bins".into()));
        }
        if !(0.0..=1.0).contains(&self.informative_fraction) {
            return Err(Error::Config("informative fraction must be in [0, 1]".into()));
        }
        if !(self.press_rate > 0.0 && self.pulse_width > 0.0 && self.drift_period > 0.0) {
            return Err(Error::Config(
                "press rate, pulse width and drift period must be positive".into(),
            ));
        }
        if !(self.baseline_min >= 0.0 && self.baseline_max >= self.baseline_min) {
            return Err(Error::Config("baseline range invalid".into()));
        }
        if self.bin_width_ms.is_nan() || self.bin_width_ms <= 0.0 {
            return Err(Error::Config("bin width must be positive".into()));
        }
        Ok(())
    }
}

/// Generated dataset plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCortex {
    pub dataset: Dataset,
    /// Sorted indices of channels with nonzero tuning.
    pub informative: Vec<usize>,
    /// Undrifted tuning rows (`channel_count × 3`).
    pub tuning: DMatrix<f64>,
    pub baselines: DVector<f64>,
}

fn central_difference(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| match i {
            0 => v[1] - v[0],
            i if i == n - 1 => v[n - 1] - v[n - 2],
            i => 0.5 * (v[i + 1] - v[i - 1]),
        })
        .collect()
}

/// Press trajectory `[p, v, a]` for `bins` bins.
fn press_trajectory(spec: &SynthCortexSpec, rng: &mut dyn RngCore) -> DMatrix<f64> {
    let n = spec.duration_bins;
    let gap = Exp::new(spec.press_rate).expect("validated positive rate");
    let mut position = vec![0.0; n];
    let mut t: f64 = gap.sample(rng);
    while t < n as f64 {
        let first = t.ceil() as usize;
        let last = ((t + spec.pulse_width).floor() as usize).min(n - 1);
        for (k, p) in position.iter_mut().enumerate().take(last + 1).skip(first) {
            let phase = (k as f64 - t) / spec.pulse_width;
            let value = spec.pulse_amplitude * 0.5 * (1.0 - (2.0 * PI * phase).cos());
            *p = f64::max(*p, value);
        }
        t += gap.sample(rng);
    }
    let velocity = central_difference(&position);
    let acceleration = central_difference(&velocity);
    DMatrix::from_fn(n, 3, |r, c| match c {
        0 => position[r],
        1 => velocity[r],
        _ => acceleration[r],
    })
}

/// Surrogate cortical recording. Deterministic in `spec.seed`.
pub fn synth_cortex(spec: &SynthCortexSpec) -> Result<Dataset> {
    synth_cortex_with_truth(spec).map(|s| s.dataset)
}

pub fn synth_cortex_with_truth(spec: &SynthCortexSpec) -> Result<SynthCortex> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let c = spec.channel_count;
    let n = spec.duration_bins;

    let mut order: Vec<usize> = (0..c).collect();
    for i in (1..c).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_inf = (spec.informative_fraction * c as f64).round() as usize;
    let mut informative: Vec<usize> = order[..n_inf].to_vec();
    informative.sort_unstable();

    // Scale velocity and acceleration gains by the peak magnitude of a
    // unit pulse so every component contributes comparably.
    let w = spec.pulse_width;
    let unit = [1.0, w / PI, w * w / (2.0 * PI * PI)];
    let gain_sd = [0.0, 0.5, 0.25];
    let mut tuning = DMatrix::zeros(c, 3);
    let mut phases = vec![0.0; c];
    let baselines = DVector::from_fn(c, |_, _| rng.random_range(spec.baseline_min..=spec.baseline_max));
    for &ch in &informative {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        tuning[(ch, 0)] = spec.tuning_scale * sign * rng.random_range(0.5..1.5);
        for j in 1..3 {
            let z: f64 = StandardNormal.sample(&mut rng);
            tuning[(ch, j)] = spec.tuning_scale * gain_sd[j] * unit[j] * z;
        }
        phases[ch] = rng.random_range(0.0..2.0 * PI);
    }

    let states = press_trajectory(spec, &mut rng);

    let mut meas = DMatrix::zeros(n, c);
    for k in 0..n {
        for ch in 0..c {
            let drift =
                1.0 + spec.drift_amplitude * (2.0 * PI * k as f64 / spec.drift_period + phases[ch]).sin();
            let mut rate = baselines[ch];
            for j in 0..3 {
                rate += drift * tuning[(ch, j)] * states[(k, j)];
            }
            let rate = rate.max(0.0);
            meas[(k, ch)] = if spec.noise_free {
                rate
            } else if rate > 0.0 {
                Poisson::new(rate)
                    .map_err(|e| Error::Numeric(format!("poisson rate {rate}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
        }
    }

    let dataset = Dataset::new(
        states,
        meas,
        DatasetMeta {
            bin_width_ms: spec.bin_width_ms,
            channel_labels: (0..c).map(|i| format!("ch{i}")).collect(),
            start_step: 0,
            corruption: Vec::new(),
        },
    )?;
    Ok(SynthCortex {
        dataset,
        informative,
        tuning,
        baselines,
    })
}

/// Replace `channels` in every bin with i.i.d. uniform integers in
/// `[low, high]`. Channels are processed in ascending order, one full
/// column at a time.
pub fn inject_noise(
    data: &Dataset,
    channels: &[usize],
    low: i64,
    high: i64,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if low > high {
        return Err(Error::Config(format!("noise range [{low}, {high}] is empty")));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= data.channel_count()) {
        return Err(Error::Config(format!(
            "channel {bad} out of range for {} channels",
            data.channel_count()
        )));
    }
    let mut sorted = channels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = data.clone();
    if sorted.is_empty() {
        return Ok(out);
    }
    let rows = out.len();
    {
        let meas = out.measurements_mut();
        for &ch in &sorted {
            for r in 0..rows {
                meas[(r, ch)] = rng.random_range(low..=high) as f64;
            }
        }
    }
    out.meta_mut().corruption.push(CorruptionRecord {
        channels: sorted,
        low,
        high,
        seed: None,
    });
    Ok(out)
}
