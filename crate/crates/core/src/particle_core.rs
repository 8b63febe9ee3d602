//! Particle machinery: weighted sets, propagation through a transition
//! prior, weight normalization, effective sample size and systematic
//! resampling. Includes a plain single-model bootstrap filter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{log_sum_exp, psd_sqrt, sample_gaussian};
use crate::state_space::{LinearObservationModel, MeasurementVector, StateTransition, StateVector};

/// Tolerance on `Σ w = 1` for inputs that must already be normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// `N_s` particles of dimension `d_x` (row-major) with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    particles: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleSet {
    pub fn new(dim: usize, particles: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("particle dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::Contract("particle set must be non-empty".into()));
        }
        check_dim("particle storage", weights.len() * dim, particles.len())?;
        check_normalized(&weights)?;
        Ok(Self {
            dim,
            particles,
            weights,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(dim: usize, particles: Vec<f64>) -> Result<Self> {
        let n = particles.len() / dim.max(1);
        Self::new(dim, particles, vec![1.0 / n as f64; n])
    }

    /// `n` copies of `point`.
    pub fn from_point(point: &[f64], n: usize) -> Result<Self> {
        let mut particles = Vec::with_capacity(point.len() * n);
        for _ in 0..n {
            particles.extend_from_slice(point);
        }
        Self::uniform(point.len(), particles)
    }

    /// `n` independent draws from `N(mean, cov)`.
    pub fn from_gaussian(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        check_dim("initial covariance", mean.len(), cov.nrows())?;
        let factor = psd_sqrt(cov);
        let mut particles = Vec::with_capacity(mean.len() * n);
        for _ in 0..n {
            particles.extend(sample_gaussian(mean, &factor, rng).iter());
        }
        Self::uniform(mean.len(), particles)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replace the weight vector, keeping particles.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_dim("weight vector", self.len(), weights.len())?;
        Self::new(self.dim, self.particles.clone(), weights)
    }

    /// Replace weights without revalidating. Callers guarantee normalization.
    pub(crate) fn set_weights_unchecked(&mut self, weights: Vec<f64>) {
        debug_assert_eq!(weights.len(), self.len());
        self.weights = weights;
    }

    /// Draw every particle from the transition prior for time `k`. Weights
    /// are carried over untouched. Particles are visited in index order, so
    /// the draw sequence is fixed by the generator state.
    pub fn propagate(
        &self,
        transition: &dyn StateTransition,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        check_dim("transition state dimension", self.dim, transition.state_dim())?;
        let mut next = vec![0.0; self.particles.len()];
        for (prev, out) in self
            .particles
            .chunks_exact(self.dim)
            .zip(next.chunks_exact_mut(self.dim))
        {
            transition.sample_into(prev, k, rng, out);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "transition produced non-finite particles at step {k}"
            )));
        }
        Ok(Self {
            dim: self.dim,
            particles: next,
            weights: self.weights.clone(),
        })
    }

    /// `Σ_i w_i x_i`, summed in particle order.
    pub fn weighted_mean(&self) -> StateVector {
        weighted_mean(self.dim, &self.particles, &self.weights)
    }

    /// Weighted per-component variance about the weighted mean.
    pub fn weighted_variance(&self) -> Vec<f64> {
        let mean = self.weighted_mean();
        let mut var = vec![0.0; self.dim];
        for (x, w) in self.particles.chunks_exact(self.dim).zip(&self.weights) {
            for (j, v) in var.iter_mut().enumerate() {
                let d = x[j] - mean.as_slice()[j];
                *v += w * d * d;
            }
        }
        var
    }

    pub fn effective_sample_size(&self) -> f64 {
        ess_unchecked(&self.weights)
    }
}

pub(crate) fn weighted_mean(dim: usize, particles: &[f64], weights: &[f64]) -> StateVector {
    let mut mean = vec![0.0; dim];
    for (x, w) in particles.chunks_exact(dim).zip(weights) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += w * xi;
        }
    }
    StateVector::from_slice(&mean).expect("weighted mean of finite particles is finite")
}

fn check_normalized(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Contract(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Contract(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Scale non-negative weights to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::DegenerateWeights("non-finite weight".into()));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::DegenerateWeights("negative weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights("weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Normalize log-weights by log-sum-exp. Returns the normalized linear
/// weights and `log Σ exp(lw)`.
pub fn normalize_log(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::DegenerateWeights("invalid log-weight".into()));
    }
    let total = log_sum_exp(log_weights);
    if total == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("every log-weight is -inf".into()));
    }
    Ok((log_weights.iter().map(|w| (w - total).exp()).collect(), total))
}

/// `1 / Σ w_i²` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Contract("empty weight vector".into()));
    }
    check_normalized(weights)?;
    Ok(ess_unchecked(weights))
}

fn ess_unchecked(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling indices for offset `u ∈ [0, 1/N)`: stratum `j`
/// selects the first particle whose cumulative weight exceeds `u + j/N`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for j in 0..n {
        let target = u + j as f64 * step;
        while cumulative <= target && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

/// Systematic resampling with one uniform offset; output weights are `1/N`.
pub fn systematic_resample(ps: &ParticleSet, rng: &mut dyn RngCore) -> Result<ParticleSet> {
    check_normalized(ps.weights()).map_err(|e| Error::DegenerateWeights(e.to_string()))?;
    let n = ps.len();
    let u = rng.random::<f64>() / n as f64;
    let idx = systematic_indices(ps.weights(), u);
    let mut particles = Vec::with_capacity(ps.particles.len());
    for i in idx {
        particles.extend_from_slice(ps.particle(i));
    }
    Ok(ParticleSet {
        dim: ps.dim,
        particles,
        weights: vec![1.0 / n as f64; n],
    })
}

/// When to resample: ESS below `threshold_fraction · N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResamplePolicy {
    pub threshold_fraction: f64,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.5,
        }
    }
}

impl ResamplePolicy {
    pub fn new(threshold_fraction: f64) -> Result<Self> {
        if threshold_fraction > 0.0 && threshold_fraction <= 1.0 {
            Ok(Self { threshold_fraction })
        } else {
            Err(Error::Config(format!(
                "ESS threshold fraction {threshold_fraction} outside (0, 1]"
            )))
        }
    }

    pub fn should_resample(&self, ess: f64, n: usize) -> bool {
        ess < self.threshold_fraction * n as f64
    }
}

/// Output of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub estimate: StateVector,
    /// ESS of the weights before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

/// Plain bootstrap particle filter with one observation model.
pub struct BootstrapFilter<'a> {
    particles: ParticleSet,
    transition: &'a dyn StateTransition,
    model: &'a LinearObservationModel,
    policy: ResamplePolicy,
    step_index: usize,
}

impl<'a> BootstrapFilter<'a> {
    pub fn new(
        particles: ParticleSet,
        transition: &'a dyn StateTransition,
        model: &'a LinearObservationModel,
        policy: ResamplePolicy,
    ) -> Result<Self> {
        check_dim("filter state dimension", particles.dim(), transition.state_dim())?;
        check_dim("model state dimension", particles.dim(), model.state_dim())?;
        Ok(Self {
            particles,
            transition,
            model,
            policy,
            step_index: 0,
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn step(&mut self, y: &MeasurementVector, rng: &mut dyn RngCore) -> Result<FilterOutput> {
        check_dim("measurement dimension", self.model.channel_count(), y.dim())?;
        let k = self.step_index + 1;
        let mut next = self.particles.propagate(self.transition, k, rng)?;
        let log_w: Vec<f64> = next
            .particles
            .chunks_exact(next.dim)
            .zip(&next.weights)
            .map(|(x, w)| w.ln() + self.model.log_likelihood_unchecked(x, y.as_slice()))
            .collect();
        let (weights, _) = normalize_log(&log_w).map_err(|e| Error::DegenerateEvidence {
            step: k,
            reason: e.to_string(),
        })?;
        next.weights = weights;
        let estimate = next.weighted_mean();
        let ess = next.effective_sample_size();
        let resampled = self.policy.should_resample(ess, next.len());
        if resampled {
            next = systematic_resample(&next, rng)?;
        }
        self.particles = next;
        self.step_index = k;
        Ok(FilterOutput {
            estimate,
            ess,
            resampled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_from_seed;
    use crate::state_space::LinearStateTransition;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(normalize(&[2.0, 6.0]).unwrap(), vec![0.25, 0.75]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::DegenerateWeights(_))));
        assert!(matches!(normalize(&[1.0, -0.5]), Err(Error::DegenerateWeights(_))));
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[0.01; 100]).unwrap() - 100.0).abs() < 1e-9);
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        assert_eq!(effective_sample_size(&w).unwrap(), 1.0);
        let e = effective_sample_size(&[0.5, 0.25, 0.25]).unwrap();
        assert!((e - 1.0 / 0.375).abs() < 1e-12);
        assert!(matches!(effective_sample_size(&[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn propagate_identity_and_collapse() {
        let ps = ParticleSet::uniform(2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let mut rng = rng_from_seed(3);
        let id = LinearStateTransition::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(ps.propagate(&id, 1, &mut rng).unwrap().particles(), ps.particles());
        let zero = LinearStateTransition::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).unwrap();
        let out = ps.propagate(&zero, 1, &mut rng).unwrap();
        assert!(out.particles().iter().all(|v| *v == 0.0));
        assert_eq!(out.weights(), ps.weights());
    }

    #[test]
    fn propagate_moments_match_gaussian_increment() {
        let n = 100_000;
        let sigma = 0.7;
        let offset = 2.5;
        let ps = ParticleSet::from_point(&[offset], n).unwrap();
        let t = LinearStateTransition::new(
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, sigma * sigma),
        )
        .unwrap();
        let out = ps.propagate(&t, 1, &mut rng_from_seed(17)).unwrap();
        let mean = out.particles().iter().sum::<f64>() / n as f64;
        let var = out.particles().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - offset).abs() < 4.0 * sigma / (n as f64).sqrt());
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
    }

    #[test]
    fn propagate_ignores_weights_and_normalize_ignores_particles() {
        // Same particles, different weights: identical propagated particles.
        let t = LinearStateTransition::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 1.0))
            .unwrap();
        let a = ParticleSet::new(1, vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let b = ParticleSet::new(1, vec![1.0, 2.0], vec![1.0, 0.0]).unwrap();
        let pa = a.propagate(&t, 1, &mut rng_from_seed(9)).unwrap();
        let pb = b.propagate(&t, 1, &mut rng_from_seed(9)).unwrap();
        assert_eq!(pa.particles(), pb.particles());
    }

    #[test]
    fn resample_point_mass_and_uniform() {
        let ps = ParticleSet::new(1, vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = systematic_resample(&ps, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.particles(), &[2.0; 4]);
        assert_eq!(out.weights(), &[0.25; 4]);

        let ps = ParticleSet::uniform(1, (0..8).map(f64::from).collect()).unwrap();
        for seed in 0..20 {
            let out = systematic_resample(&ps, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(out.particles(), ps.particles());
        }
    }

    #[test]
    fn resample_counts_bounded_on_offset_grid() {
        let w = [0.5, 0.3, 0.2];
        let n = 10;
        // Expand to N particles: three weighted ones plus zero-weight padding.
        let mut weights = w.to_vec();
        weights.resize(n, 0.0);
        for g in 0..1000 {
            let u = g as f64 / 1000.0 / n as f64;
            let idx = systematic_indices(&weights, u);
            for (i, wi) in weights.iter().enumerate() {
                let c = idx.iter().filter(|&&j| j == i).count() as f64;
                let target = n as f64 * wi;
                assert!(c == target.floor() || c == target.ceil(), "u={u} i={i} c={c}");
            }
        }
    }

    #[test]
    fn resample_preserves_mean_in_expectation() {
        let mut rng = rng_from_seed(5);
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let raw: Vec<f64> = (0..50).map(|i| 1.0 + (i % 7) as f64).collect();
        let ps = ParticleSet::new(1, x, normalize(&raw).unwrap()).unwrap();
        let target = ps.weighted_mean().as_slice()[0];
        let reps = 200;
        let means: Vec<f64> = (0..reps)
            .map(|_| systematic_resample(&ps, &mut rng).unwrap().weighted_mean().as_slice()[0])
            .collect();
        let avg = means.iter().sum::<f64>() / reps as f64;
        let sd = (means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((avg - target).abs() <= 3.0 * se.max(1e-12), "avg={avg} target={target} se={se}");
    }

    #[test]
    fn resample_rejects_unnormalized() {
        let ps = ParticleSet {
            dim: 1,
            particles: vec![0.0, 1.0],
            weights: vec![0.0, 0.0],
        };
        assert!(matches!(
            systematic_resample(&ps, &mut rng_from_seed(0)),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn resample_policy_threshold() {
        let p = ResamplePolicy::default();
        assert!(p.should_resample(49.0, 100));
        assert!(!p.should_resample(50.0, 100));
        assert!(ResamplePolicy::new(0.0).is_err());
        assert!(ResamplePolicy::new(1.0).is_ok());
    }
}
