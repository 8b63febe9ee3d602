//! The dynamic-ensemble recursion.
//!
//! Each step, in order:
//!
//! 1. flatten the previous model posterior with the forgetting exponent `α`
//!    to get the predictive model probabilities;
//! 2. draw every particle from the transition prior;
//! 3. weight the particles under each candidate, `ω_{m,i} ∝ ω_i p_m(y | x_i)`;
//! 4. estimate each candidate's marginal likelihood as `Σ_i ω_i p_m(y | x_i)`;
//! 5. apply Bayes' rule to the model probabilities;
//! 6. mix the per-candidate weights by the model posterior;
//! 7. read out the posterior-mean state and resample if ESS is low.
//!
//! Model probabilities are kept as log-probabilities. Repeated
//! forgetting-and-update cycles push a losing model's probability far below
//! the smallest positive `f64`, and a probability that underflows to zero can
//! never come back (`0^α = 0`).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::numeric::{fmt_f64, log_sum_exp};
use crate::particle_core::{
    normalize_log, systematic_resample, weighted_mean, ParticleSet, ResamplePolicy,
};
use crate::state_space::{LinearObservationModel, MeasurementVector, StateTransition, StateVector};

/// Marginal log-likelihoods at or below this are treated as zero evidence.
pub const EVIDENCE_FLOOR: f64 = -700.0;

/// Probability vector over the `M` candidate models, stored in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPosterior {
    log_probs: Vec<f64>,
}

impl ModelPosterior {
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("need at least one candidate model".into()));
        }
        Ok(Self {
            log_probs: vec![-(m as f64).ln(); m],
        })
    }

    /// From linear probabilities; they must already sum to one.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Contract(
                "model probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!(
                "model probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    /// From unnormalized log-weights.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() || log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::Contract("invalid model log-weights".into()));
        }
        let total = log_sum_exp(log_weights);
        if total == f64::NEG_INFINITY {
            return Err(Error::DegenerateEvidence {
                step: 0,
                reason: "every model has zero probability".into(),
            });
        }
        Ok(Self {
            log_probs: log_weights.iter().map(|v| v - total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    /// Index of the unique most probable model; `None` on a tie.
    pub fn argmax(&self) -> Option<usize> {
        argmax_strict(&self.log_probs)
    }
}

pub(crate) fn argmax_strict(values: &[f64]) -> Option<usize> {
    let mut best = 0;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tied = false;
        } else if v == values[best] {
            tied = true;
        }
    }
    (!tied && !values.is_empty()).then_some(best)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "forgetting factor {alpha} must lie strictly between 0 and 1"
        )))
    }
}

/// Model-transition prior by forgetting: `p_m^α / Σ_j p_j^α`.
pub fn forgetting_predict(posterior: &ModelPosterior, alpha: f64) -> Result<ModelPosterior> {
    check_alpha(alpha)?;
    let scaled: Vec<f64> = posterior.log_probs.iter().map(|lp| alpha * lp).collect();
    ModelPosterior::from_log_weights(&scaled)
}

/// Bayes' rule on the model indicator: `∝ predictive_m · exp(log_marginal_m)`.
pub fn update_model_posterior(
    predictive: &ModelPosterior,
    log_marginals: &[f64],
) -> Result<ModelPosterior> {
    check_dim("marginal likelihood count", predictive.len(), log_marginals.len())?;
    if log_marginals.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("NaN marginal likelihood".into()));
    }
    let joint: Vec<f64> = predictive
        .log_probs
        .iter()
        .zip(log_marginals)
        .map(|(lp, lm)| if *lp == f64::NEG_INFINITY { *lp } else { lp + lm })
        .collect();
    ModelPosterior::from_log_weights(&joint)
}

/// `log p_m(y | x_i)` for every model (rows) and particle (columns).
///
/// Models are evaluated in parallel; every entry is computed independently,
/// so the result does not depend on the thread count.
pub fn log_likelihood_matrix(
    particles: &ParticleSet,
    y: &MeasurementVector,
    models: &[LinearObservationModel],
) -> Result<Vec<Vec<f64>>> {
    for m in models {
        check_dim("model state dimension", particles.dim(), m.state_dim())?;
        check_dim("measurement dimension", m.channel_count(), y.dim())?;
    }
    let dim = particles.dim();
    let ys = y.as_slice();
    Ok(models
        .par_iter()
        .map(|model| {
            particles
                .particles()
                .chunks_exact(dim)
                .map(|x| model.log_likelihood_unchecked(x, ys))
                .collect()
        })
        .collect())
}

/// Per-model unnormalized log-weights `log ω_i + log p_m(y | x_i)`.
fn joint_log_weights(prev_weights: &[f64], log_lik: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let log_prev: Vec<f64> = prev_weights.iter().map(|w| w.ln()).collect();
    log_lik
        .iter()
        .map(|row| row.iter().zip(&log_prev).map(|(l, w)| w + l).collect())
        .collect()
}

/// Normalized per-hypothesis particle weights, one row per model.
///
/// `particles` carries the step-`k` particles with the step-`k-1` weights.
pub fn per_hypothesis_weights(
    particles: &ParticleSet,
    y: &MeasurementVector,
    models: &[LinearObservationModel],
) -> Result<Vec<Vec<f64>>> {
    let log_lik = log_likelihood_matrix(particles, y, models)?;
    joint_log_weights(particles.weights(), &log_lik)
        .iter()
        .enumerate()
        .map(|(m, row)| {
            normalize_log(row)
                .map(|(w, _)| w)
                .map_err(|_| Error::DegenerateHypothesis { model: m })
        })
        .collect()
}

/// `log Σ_i ω_i p_m(y | x_i)` for every model; `-inf` entries are allowed.
pub fn marginal_likelihoods(
    particles: &ParticleSet,
    y: &MeasurementVector,
    models: &[LinearObservationModel],
) -> Result<Vec<f64>> {
    let log_lik = log_likelihood_matrix(particles, y, models)?;
    Ok(joint_log_weights(particles.weights(), &log_lik)
        .iter()
        .map(|row| log_sum_exp(row))
        .collect())
}

/// Mixture weights `Σ_m p_m ω_{m,i}`, accumulated model-major.
///
/// Rows of models with zero posterior probability are skipped and may be
/// empty.
pub fn combine_posterior(posterior: &ModelPosterior, hyp_weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dim("hypothesis weight rows", posterior.len(), hyp_weights.len())?;
    let probs = posterior.probs();
    let n = hyp_weights
        .iter()
        .zip(&probs)
        .find(|(_, p)| **p > 0.0)
        .map(|(row, _)| row.len())
        .ok_or_else(|| Error::Contract("model posterior has no mass".into()))?;
    let mut combined = vec![0.0; n];
    for (row, p) in hyp_weights.iter().zip(&probs) {
        if *p == 0.0 {
            continue;
        }
        check_dim("hypothesis weight columns", n, row.len())?;
        for (c, w) in combined.iter_mut().zip(row) {
            *c += p * w;
        }
    }
    Ok(combined)
}

/// Posterior-mean readout `Σ_i ω_i x_i`.
pub fn estimate_state(particles: &ParticleSet, combined_weights: &[f64]) -> Result<StateVector> {
    check_dim("combined weights", particles.len(), combined_weights.len())?;
    Ok(weighted_mean(
        particles.dim(),
        particles.particles(),
        combined_weights,
    ))
}

/// Immutable per-session settings.
#[derive(Clone)]
pub struct EnsembleConfig {
    pub alpha: f64,
    pub n_particles: usize,
    pub resample: ResamplePolicy,
    pub models: Vec<LinearObservationModel>,
    pub transition: Arc<dyn StateTransition>,
}

impl std::fmt::Debug for EnsembleConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleConfig")
            .field("alpha", &self.alpha)
            .field("n_particles", &self.n_particles)
            .field("resample", &self.resample)
            .field("models", &self.models.len())
            .finish_non_exhaustive()
    }
}

impl EnsembleConfig {
    pub fn new(
        alpha: f64,
        n_particles: usize,
        resample: ResamplePolicy,
        models: Vec<LinearObservationModel>,
        transition: Arc<dyn StateTransition>,
    ) -> Result<Self> {
        let cfg = Self {
            alpha,
            n_particles,
            resample,
            models,
            transition,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.n_particles == 0 {
            return Err(Error::Config("particle count must be positive".into()));
        }
        let first = self
            .models
            .first()
            .ok_or_else(|| Error::Config("need at least one candidate model".into()))?;
        for m in &self.models {
            check_dim("candidate state dimension", first.state_dim(), m.state_dim())?;
            check_dim("candidate channel count", first.channel_count(), m.channel_count())?;
        }
        check_dim(
            "transition state dimension",
            first.state_dim(),
            self.transition.state_dim(),
        )
    }

    pub fn model_count(&self) -> usize {
        self.models.len()
    }
}

/// Particles with combined weights, model posterior, and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFilterState {
    pub particles: ParticleSet,
    pub posterior: ModelPosterior,
    pub step_index: usize,
}

impl EnsembleFilterState {
    /// Uniform model posterior over `model_count` candidates.
    pub fn new(particles: ParticleSet, model_count: usize) -> Result<Self> {
        Ok(Self {
            particles,
            posterior: ModelPosterior::uniform(model_count)?,
            step_index: 0,
        })
    }
}

/// What one step reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub k: usize,
    pub estimate: StateVector,
    pub posterior: ModelPosterior,
    /// ESS of the combined weights before resampling.
    pub ess: f64,
    pub resampled: bool,
    /// Set when the degenerate-evidence guard fired.
    pub warning: Option<String>,
}

/// One recursion step. `state` is consumed; the updated state comes back
/// with the step report.
pub fn step(
    state: EnsembleFilterState,
    cfg: &EnsembleConfig,
    y: &MeasurementVector,
    rng: &mut dyn RngCore,
) -> Result<(EnsembleFilterState, StepOutput)> {
    check_dim("model posterior length", cfg.model_count(), state.posterior.len())?;
    let k = state.step_index + 1;
    let with_step = |e: Error| match e {
        Error::DegenerateEvidence { reason, .. } => Error::DegenerateEvidence { step: k, reason },
        other => other,
    };

    let predictive = forgetting_predict(&state.posterior, cfg.alpha).map_err(with_step)?;
    let mut particles = state.particles.propagate(cfg.transition.as_ref(), k, rng)?;

    let log_lik = log_likelihood_matrix(&particles, y, &cfg.models)?;
    let joint = joint_log_weights(particles.weights(), &log_lik);
    let log_marginals: Vec<f64> = joint.iter().map(|row| log_sum_exp(row)).collect();

    let best = log_marginals
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let (posterior, warning) = if best.is_nan() || best <= EVIDENCE_FLOOR {
        let msg = format!(
            "step {k}: every candidate's marginal log-likelihood is at or below {EVIDENCE_FLOOR}; \
             keeping predictive model probabilities and prior particle weights"
        );
        log::warn!("{msg}");
        (predictive, Some(msg))
    } else {
        let posterior = update_model_posterior(&predictive, &log_marginals).map_err(with_step)?;
        let probs = posterior.probs();
        let mut rows = Vec::with_capacity(joint.len());
        for (row, p) in joint.iter().zip(&probs) {
            if *p == 0.0 {
                rows.push(Vec::new());
            } else {
                rows.push(normalize_log(row).map_err(|e| Error::DegenerateEvidence {
                    step: k,
                    reason: e.to_string(),
                })?.0);
            }
        }
        let combined = combine_posterior(&posterior, &rows)?;
        particles.set_weights_unchecked(combined);
        (posterior, None)
    };

    let estimate = particles.weighted_mean();
    let ess = particles.effective_sample_size();
    let resampled = cfg.resample.should_resample(ess, particles.len());
    if resampled {
        particles = systematic_resample(&particles, rng)?;
    }

    let next = EnsembleFilterState {
        particles,
        posterior: posterior.clone(),
        step_index: k,
    };
    Ok((
        next,
        StepOutput {
            k,
            estimate,
            posterior,
            ess,
            resampled,
            warning,
        },
    ))
}

/// Stateful session wrapper around [`step`].
#[derive(Debug, Clone)]
pub struct EnsembleFilter {
    cfg: EnsembleConfig,
    state: Option<EnsembleFilterState>,
}

impl EnsembleFilter {
    pub fn new(cfg: EnsembleConfig, initial: ParticleSet) -> Result<Self> {
        cfg.validate()?;
        check_dim("initial particle count", cfg.n_particles, initial.len())?;
        check_dim("initial particle dimension", cfg.transition.state_dim(), initial.dim())?;
        let state = EnsembleFilterState::new(initial, cfg.model_count())?;
        Ok(Self {
            cfg,
            state: Some(state),
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnsembleFilterState {
        self.state.as_ref().expect("filter state is always present between steps")
    }

    pub fn step(&mut self, y: &MeasurementVector, rng: &mut dyn RngCore) -> Result<StepOutput> {
        let state = self.state.take().expect("filter state is always present between steps");
        match step(state.clone(), &self.cfg, y, rng) {
            Ok((next, out)) => {
                self.state = Some(next);
                Ok(out)
            }
            Err(e) => {
                self.state = Some(state);
                Err(e)
            }
        }
    }
}

/// One row of a per-step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub estimate: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub posterior: Option<Vec<f64>>,
    pub ess: Option<f64>,
}

impl TraceRecord {
    pub fn from_step(out: &StepOutput, truth: Option<&[f64]>) -> Self {
        Self {
            k: out.k,
            estimate: out.estimate.as_slice().to_vec(),
            truth: truth.map(<[f64]>::to_vec),
            posterior: Some(out.posterior.probs()),
            ess: Some(out.ess),
        }
    }
}

/// Write trace rows as CSV: `k, estimate_*, true_*, posterior_1..M, ess`.
/// Column groups absent from the first record are omitted.
pub fn write_trace<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |source| Error::Csv {
        path: "<trace>".into(),
        source,
    };
    let Some(first) = records.first() else {
        return w.flush().map_err(|e| Error::io("<trace>", e));
    };
    let mut header = vec!["k".to_string()];
    header.extend((0..first.estimate.len()).map(|i| format!("estimate_{i}")));
    if let Some(t) = &first.truth {
        header.extend((0..t.len()).map(|i| format!("true_{i}")));
    }
    if let Some(p) = &first.posterior {
        header.extend((1..=p.len()).map(|i| format!("posterior_{i}")));
    }
    if first.ess.is_some() {
        header.push("ess".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.estimate.iter().map(|v| fmt_f64(*v)));
        if first.truth.is_some() {
            row.extend(r.truth.iter().flatten().map(|v| fmt_f64(*v)));
        }
        if first.posterior.is_some() {
            row.extend(r.posterior.iter().flatten().map(|v| fmt_f64(*v)));
        }
        if first.ess.is_some() {
            row.push(r.ess.map(fmt_f64).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

pub fn write_trace_file(records: &[TraceRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(records, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv {
            path: path.to_path_buf(),
            source,
        },
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
