//! Candidate-set construction: least-squares fitting of the transition and
//! observation models, random channel dropout, and Gaussian weight
//! perturbation.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{floor_eigenvalues, substream};
use crate::state_space::{Dataset, LinearObservationModel, LinearStateTransition};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Eigenvalue floor applied to the fitted process covariance.
pub const PROCESS_NOISE_FLOOR: f64 = 1e-9;

/// Relative eigenvalue threshold below which an unregularized normal matrix
/// counts as singular.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_count: usize,
    pub model_size: usize,
    pub perturbation_factor: f64,
    pub seed: u64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl GenerationConfig {
    pub fn validate(&self, channel_count: usize) -> Result<()> {
        if self.model_count == 0 {
            return Err(Error::Config("model count must be at least 1".into()));
        }
        if self.model_size == 0 || self.model_size > channel_count {
            return Err(Error::Config(format!(
                "model size {} must be in 1..={channel_count}",
                self.model_size
            )));
        }
        if !(self.perturbation_factor.is_finite() && self.perturbation_factor >= 0.0) {
            return Err(Error::Config(format!(
                "perturbation factor {} must be finite and non-negative",
                self.perturbation_factor
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Solve `(XᵀX + ridge·P) β = Xᵀ Y` for every column of `Y`. `penalized`
/// marks which regressors receive the ridge term.
fn solve_least_squares(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ridge: f64,
    penalized: &[bool],
) -> Result<DMatrix<f64>> {
    let mut gram = x.transpose() * x;
    if ridge == 0.0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.max();
        if max.is_nan() || max <= 0.0 || eig.min() <= RANK_TOLERANCE * max {
            return Err(Error::SingularFit("regressor matrix is rank deficient".into()));
        }
    } else {
        for (i, p) in penalized.iter().enumerate() {
            if *p {
                gram[(i, i)] += ridge;
            }
        }
    }
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularFit("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

fn check_rows(data: &Dataset) -> Result<()> {
    let need = data.state_dim() + 2;
    if data.len() < need {
        return Err(Error::SingularFit(format!(
            "{} rows cannot determine a fit needing at least {need}",
            data.len()
        )));
    }
    Ok(())
}

/// Least-squares `x_{k+1} ≈ A x_k` with residual covariance `Q`.
///
/// With `ridge = 0` a regressor column with zero variance is rejected along
/// with any numerically singular normal matrix.
pub fn fit_state_transition(data: &Dataset, ridge: f64) -> Result<LinearStateTransition> {
    check_rows(data)?;
    let d = data.state_dim();
    let t = data.len();
    let x = data.states().rows(0, t - 1).into_owned();
    let y = data.states().rows(1, t - 1).into_owned();
    if ridge == 0.0 {
        for c in 0..d {
            let col = x.column(c);
            let first = col[0];
            if col.iter().all(|v| *v == first) {
                return Err(Error::SingularFit(format!(
                    "state component {c} has zero variance"
                )));
            }
        }
    }
    let beta = solve_least_squares(&x, &y, ridge, &vec![true; d])?;
    let a = beta.transpose();
    let resid = &y - &x * &beta;
    let dof = if t - 1 > d { t - 1 - d } else { t - 1 };
    let q = resid.transpose() * &resid / dof as f64;
    LinearStateTransition::new(a, floor_eigenvalues(&q, PROCESS_NOISE_FLOOR))
}

/// Per-channel least squares `y_c ≈ H_c x + b_c` over `channels` (sorted
/// internally). Noise variance is the residual variance.
pub fn fit_observation(
    data: &Dataset,
    channels: &[usize],
    ridge: f64,
) -> Result<LinearObservationModel> {
    check_rows(data)?;
    let mut mask = channels.to_vec();
    mask.sort_unstable();
    mask.dedup();
    if mask.is_empty() {
        return Err(Error::Config("no channels selected".into()));
    }
    if let Some(&bad) = mask.iter().find(|&&c| c >= data.channel_count()) {
        return Err(Error::Config(format!("channel {bad} out of range")));
    }
    let d = data.state_dim();
    let t = data.len();
    let design = DMatrix::from_fn(t, d + 1, |r, c| {
        if c < d {
            data.states()[(r, c)]
        } else {
            1.0
        }
    });
    let targets = data.measurements().select_columns(&mask);
    let mut penalized = vec![true; d + 1];
    penalized[d] = false;
    let beta = solve_least_squares(&design, &targets, ridge, &penalized)?;
    let resid = &targets - &design * &beta;
    let dof = (t - d - 1).max(1) as f64;
    let r_diag = DVector::from_iterator(
        mask.len(),
        (0..mask.len()).map(|c| resid.column(c).norm_squared() / dof),
    );
    let h = beta.rows(0, d).transpose();
    let b = beta.row(d).transpose();
    LinearObservationModel::new(data.channel_count(), mask, h, b, r_diag)
}

/// Uniform random `s`-subset of `0..channel_count`, sorted.
pub fn neuron_dropout(channel_count: usize, s: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if s == 0 || s > channel_count {
        return Err(Error::Config(format!(
            "model size {s} must be in 1..={channel_count}"
        )));
    }
    let mut subset = index::sample(rng, channel_count, s).into_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// Shift every entry of `H` (row-major) and then `b` by `p · ε`, drawing
/// `ε` from `noise`. Mask and noise variances are kept.
pub fn perturb_weights_with<F>(
    model: &LinearObservationModel,
    p: f64,
    mut noise: F,
) -> Result<LinearObservationModel>
where
    F: FnMut() -> f64,
{
    let mut h = model.h().clone();
    for r in 0..h.nrows() {
        for c in 0..h.ncols() {
            h[(r, c)] += p * noise();
        }
    }
    let b = model.b().map(|v| v + p * noise());
    model.with_weights(h, b)
}

/// Gaussian weight perturbation `w ← w + p·ε`, `ε ~ N(0, 1)` per entry.
pub fn perturb_weights(
    model: &LinearObservationModel,
    p: f64,
    rng: &mut dyn RngCore,
) -> Result<LinearObservationModel> {
    if !(p.is_finite() && p >= 0.0) {
        return Err(Error::Config(format!("perturbation factor {p} invalid")));
    }
    if p == 0.0 {
        return Ok(model.clone());
    }
    perturb_weights_with(model, p, || StandardNormal.sample(rng))
}

/// Build `M` candidates: dropout, fit, perturb. Candidate `i` draws from
/// stream `seed + i`, so the list does not depend on evaluation order.
pub fn generate_candidates(
    data: &Dataset,
    cfg: &GenerationConfig,
) -> Result<Vec<LinearObservationModel>> {
    cfg.validate(data.channel_count())?;
    let built: Vec<Result<LinearObservationModel>> = (0..cfg.model_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, i as u64);
            let mut build = || -> Result<LinearObservationModel> {
                let subset = neuron_dropout(data.channel_count(), cfg.model_size, &mut rng)?;
                let fitted = fit_observation(data, &subset, cfg.ridge)?;
                perturb_weights(&fitted, cfg.perturbation_factor, &mut rng)
            };
            build().map_err(|e| Error::Candidate {
                index: i,
                source: Box::new(e),
            })
        })
        .collect();
    // Sequential collection so the reported error is the lowest index.
    built.into_iter().collect()
}

/// JSON form of one observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub channel_count: usize,
    pub mask: Vec<usize>,
    pub state_dim: usize,
    /// `H`, row-major, `mask.len() × state_dim`.
    pub h: Vec<f64>,
    pub b: Vec<f64>,
    pub r_diag: Vec<f64>,
}

impl From<&LinearObservationModel> for ModelRecord {
    fn from(m: &LinearObservationModel) -> Self {
        let h = m.h();
        let mut flat = Vec::with_capacity(h.len());
        for r in 0..h.nrows() {
            flat.extend(h.row(r).iter());
        }
        Self {
            channel_count: m.channel_count(),
            mask: m.mask().to_vec(),
            state_dim: m.state_dim(),
            h: flat,
            b: m.b().iter().copied().collect(),
            r_diag: m.r_diag().iter().copied().collect(),
        }
    }
}

impl ModelRecord {
    pub fn to_model(&self) -> Result<LinearObservationModel> {
        let s = self.mask.len();
        if self.h.len() != s * self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "serialized observation matrix",
                expected: s * self.state_dim,
                actual: self.h.len(),
            });
        }
        LinearObservationModel::new(
            self.channel_count,
            self.mask.clone(),
            DMatrix::from_row_slice(s, self.state_dim, &self.h),
            DVector::from_column_slice(&self.b),
            DVector::from_column_slice(&self.r_diag),
        )
    }
}

/// Serialized candidate set with its generation provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub config: GenerationConfig,
    pub models: Vec<ModelRecord>,
}

impl CandidateSet {
    pub fn new(config: GenerationConfig, models: &[LinearObservationModel]) -> Self {
        Self {
            config,
            models: models.iter().map(ModelRecord::from).collect(),
        }
    }

    pub fn to_models(&self) -> Result<Vec<LinearObservationModel>> {
        self.models.iter().map(ModelRecord::to_model).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_from_seed;

    fn dataset(states: DMatrix<f64>, meas: DMatrix<f64>) -> Dataset {
        Dataset::with_defaults(states, meas, 100.0).unwrap()
    }

    #[test]
    fn recovers_scalar_decay() {
        let t = 50;
        let states = DMatrix::from_fn(t, 1, |r, _| 3.0 * 0.9f64.powi(r as i32));
        let ds = dataset(states, DMatrix::zeros(t, 1));
        let tr = fit_state_transition(&ds, 0.0).unwrap();
        assert!((tr.a()[(0, 0)] - 0.9).abs() < 1e-10);
        assert!(tr.q()[(0, 0)] < 1e-8);
    }

    #[test]
    fn constant_states_are_singular_without_ridge() {
        let ds = dataset(DMatrix::from_element(20, 1, 2.0), DMatrix::zeros(20, 1));
        assert!(matches!(fit_state_transition(&ds, 0.0), Err(Error::SingularFit(_))));
        let ds3 = dataset(DMatrix::from_element(20, 3, 1.0), DMatrix::zeros(20, 1));
        assert!(matches!(fit_state_transition(&ds3, 0.0), Err(Error::SingularFit(_))));
        assert!(fit_state_transition(&ds, 1e-3).is_ok());
    }

    #[test]
    fn recovers_noisy_three_dimensional_transition() {
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.8, 0.1, 0.05, 0.0, 0.7]);
        let t = 5000;
        let mut rng = rng_from_seed(31);
        let noise = 0.1;
        let mut states = DMatrix::zeros(t, 3);
        for r in 1..t {
            let prev = states.row(r - 1).transpose();
            let next = &a * prev;
            for c in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                states[(r, c)] = next[c] + noise * e;
            }
        }
        let ds = dataset(states, DMatrix::zeros(t, 1));
        let fit = fit_state_transition(&ds, 0.0).unwrap();
        assert!((fit.a() - &a).abs().max() < 0.02, "{}", fit.a());
        assert!((fit.q()[(0, 0)] - noise * noise).abs() < 0.1 * noise * noise);
    }

    #[test]
    fn recovers_noiseless_observation_weights() {
        let t = 40;
        let mut rng = rng_from_seed(2);
        let states = DMatrix::from_fn(t, 3, |_, _| StandardNormal.sample(&mut rng));
        let meas = DMatrix::from_fn(t, 1, |r, _| 2.0 * states[(r, 0)] - 3.0);
        let m = fit_observation(&dataset(states, meas), &[0], 0.0).unwrap();
        assert!((m.h()[(0, 0)] - 2.0).abs() < 1e-8);
        assert!(m.h()[(0, 1)].abs() < 1e-8 && m.h()[(0, 2)].abs() < 1e-8);
        assert!((m.b()[0] + 3.0).abs() < 1e-8);
        assert_eq!(m.r_diag()[0], crate::state_space::NOISE_VARIANCE_FLOOR);
    }

    #[test]
    fn full_channel_fit_has_full_mask() {
        let t = 30;
        let mut rng = rng_from_seed(3);
        let states = DMatrix::from_fn(t, 2, |_, _| StandardNormal.sample(&mut rng));
        let meas = DMatrix::from_fn(t, 4, |_, _| StandardNormal.sample(&mut rng));
        let m = fit_observation(&dataset(states, meas), &[3, 1, 0, 2], 0.0).unwrap();
        assert_eq!(m.mask(), &[0, 1, 2, 3]);
        assert!(m.covers_all_channels());
    }

    #[test]
    fn too_few_rows_is_singular() {
        let ds = dataset(DMatrix::from_element(3, 3, 1.0), DMatrix::zeros(3, 2));
        assert!(matches!(fit_observation(&ds, &[0], 0.0), Err(Error::SingularFit(_))));
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors() {
        let t = 200;
        let mut rng = rng_from_seed(4);
        let states = DMatrix::from_fn(t, 3, |_, _| StandardNormal.sample(&mut rng));
        let meas = DMatrix::from_fn(t, 3, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 2.0 + 1.0
        });
        let ds = dataset(states.clone(), meas.clone());
        let m = fit_observation(&ds, &[0, 1, 2], 0.0).unwrap();
        for (row, ch) in m.mask().iter().enumerate() {
            let resid: Vec<f64> = (0..t)
                .map(|r| {
                    let pred = m.b()[row] + (0..3).map(|j| m.h()[(row, j)] * states[(r, j)]).sum::<f64>();
                    meas[(r, *ch)] - pred
                })
                .collect();
            assert!(resid.iter().sum::<f64>().abs() < 1e-8);
            for j in 0..3 {
                let dot: f64 = (0..t).map(|r| resid[r] * states[(r, j)]).sum();
                assert!(dot.abs() < 1e-8, "{dot}");
            }
        }
    }

    #[test]
    fn dropout_examples() {
        let mut rng = rng_from_seed(0);
        assert_eq!(neuron_dropout(20, 20, &mut rng).unwrap(), (0..20).collect::<Vec<_>>());
        let a = neuron_dropout(20, 15, &mut rng_from_seed(7)).unwrap();
        let b = neuron_dropout(20, 15, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(neuron_dropout(20, 0, &mut rng).is_err());
        assert!(neuron_dropout(20, 21, &mut rng).is_err());
    }

    #[test]
    fn dropout_inclusion_is_uniform() {
        let mut rng = rng_from_seed(10);
        let draws = 100_000;
        let mut hits = [0usize; 5];
        for _ in 0..draws {
            for c in neuron_dropout(5, 2, &mut rng).unwrap() {
                hits[c] += 1;
            }
        }
        let p = 0.4;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{hits:?}");
        }
    }

    fn scalar_model(w: f64) -> LinearObservationModel {
        LinearObservationModel::full(
            DMatrix::from_element(1, 1, w),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let m = scalar_model(2.0);
        assert_eq!(perturb_weights(&m, 0.0, &mut rng_from_seed(1)).unwrap(), m);
        let forced = perturb_weights_with(&m, 0.1, || 1.0).unwrap();
        assert!((forced.h()[(0, 0)] - 2.1).abs() < 1e-15);
        assert!((forced.b()[0] - 0.1).abs() < 1e-15);
        assert_eq!(forced.r_diag(), m.r_diag());
        assert_eq!(forced.mask(), m.mask());
    }

    #[test]
    fn perturbation_moments() {
        let m = scalar_model(2.0);
        let p = 0.1;
        let n = 10_000;
        let mut rng = rng_from_seed(12);
        let shifts: Vec<f64> = (0..n)
            .map(|_| perturb_weights(&m, p, &mut rng).unwrap().h()[(0, 0)] - 2.0)
            .collect();
        let mean = shifts.iter().sum::<f64>() / n as f64;
        let sd = (shifts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * p / 100.0);
        assert!((sd / p - 1.0).abs() < 0.05);
    }

    fn synthetic_dataset(t: usize, d_y: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let states = DMatrix::from_fn(t, 3, |_, _| StandardNormal.sample(&mut rng));
        let meas = DMatrix::from_fn(t, d_y, |r, c| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (c as f64 + 1.0) * states[(r, 0)] + 0.5 * e
        });
        dataset(states, meas)
    }

    #[test]
    fn single_full_unperturbed_candidate_is_plain_fit() {
        let ds = synthetic_dataset(100, 6, 1);
        let cfg = GenerationConfig {
            model_count: 1,
            model_size: 6,
            perturbation_factor: 0.0,
            seed: 5,
            ridge: DEFAULT_RIDGE,
        };
        let c = generate_candidates(&ds, &cfg).unwrap();
        let plain = fit_observation(&ds, &(0..6).collect::<Vec<_>>(), DEFAULT_RIDGE).unwrap();
        assert_eq!(c, vec![plain]);
    }

    #[test]
    fn no_dropout_no_perturbation_gives_identical_models() {
        let ds = synthetic_dataset(100, 6, 2);
        let cfg = GenerationConfig {
            model_count: 4,
            model_size: 6,
            perturbation_factor: 0.0,
            seed: 1,
            ridge: DEFAULT_RIDGE,
        };
        let c = generate_candidates(&ds, &cfg).unwrap();
        assert!(c.iter().all(|m| *m == c[0]));
    }

    #[test]
    fn full_sized_candidate_set() {
        let ds = synthetic_dataset(300, 20, 3);
        let cfg = GenerationConfig {
            model_count: 20,
            model_size: 15,
            perturbation_factor: 0.1,
            seed: 77,
            ridge: DEFAULT_RIDGE,
        };
        let c = generate_candidates(&ds, &cfg).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|m| m.size() == 15));
        let distinct: std::collections::BTreeSet<Vec<usize>> =
            c.iter().map(|m| m.mask().to_vec()).collect();
        assert!(distinct.len() >= 2);
        assert_eq!(generate_candidates(&ds, &cfg).unwrap(), c);
    }

    #[test]
    fn mask_union_coverage_matches_inclusion_probability() {
        let d_y = 20;
        let s = 5;
        let m = 12;
        let trials = 400;
        let p_cover = 1.0 - (1.0 - s as f64 / d_y as f64).powi(m);
        let mut covered = 0usize;
        for t in 0..trials {
            let mut seen = [false; 20];
            let mut rng = rng_from_seed(1000 + t);
            for _ in 0..m {
                for c in neuron_dropout(d_y, s, &mut rng).unwrap() {
                    seen[c] = true;
                }
            }
            covered += seen.iter().filter(|v| **v).count();
        }
        let n = (trials * d_y as u64) as f64;
        let sigma = (n * p_cover * (1.0 - p_cover)).sqrt();
        assert!((covered as f64 - n * p_cover).abs() < 3.0 * sigma.max(1.0), "{covered} vs {}", n * p_cover);
    }

    #[test]
    fn candidate_errors_carry_index() {
        let ds = synthetic_dataset(3, 4, 0);
        let cfg = GenerationConfig {
            model_count: 2,
            model_size: 2,
            perturbation_factor: 0.0,
            seed: 0,
            ridge: 0.0,
        };
        match generate_candidates(&ds, &cfg) {
            Err(Error::Candidate { index: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let ds = synthetic_dataset(60, 5, 9);
        let cfg = GenerationConfig {
            model_count: 3,
            model_size: 3,
            perturbation_factor: 0.1,
            seed: 2,
            ridge: DEFAULT_RIDGE,
        };
        let models = generate_candidates(&ds, &cfg).unwrap();
        let set = CandidateSet::new(cfg, &models);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        set.write_json(&path).unwrap();
        let back = CandidateSet::read_json(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_models().unwrap(), models);
    }
}
