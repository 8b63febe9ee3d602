//! Domain types shared by every filter: state and measurement vectors,
//! transition and observation models, and aligned datasets.

mod dataset;

pub use dataset::{CorruptionRecord, Dataset, DatasetMeta};

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::numeric::psd_sqrt;

/// Lower bound applied to every per-channel observation noise variance.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-6;

/// Latent state `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::Contract("state vector has non-finite entries".into()))
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Observed channel vector `y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector(DVector<f64>);

impl MeasurementVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::Contract(
                "measurement vector has non-finite entries".into(),
            ))
        }
    }

    /// Spike-count measurement: finite and non-negative.
    pub fn counts(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract("spike counts must be non-negative".into()));
        }
        Self::new(values)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Draws `x_k` given `x_{k-1}`.
///
/// Implementations must consume randomness only from `rng` so that a filter
/// run is reproducible from its seed.
pub trait StateTransition: Send + Sync {
    fn state_dim(&self) -> usize;

    /// Write one draw of `x_k` into `out`. `k` is the index of the state
    /// being produced.
    fn sample_into(&self, prev: &[f64], k: usize, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// `x_k = A x_{k-1} + v`, `v ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStateTransition {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl LinearStateTransition {
    pub fn new(a: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        check_dim("transition matrix columns", d, a.ncols())?;
        check_dim("process covariance rows", d, q.nrows())?;
        check_dim("process covariance columns", d, q.ncols())?;
        if a.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("transition has non-finite entries".into()));
        }
        let asym = (&q - q.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + q.abs().max()) {
            return Err(Error::Contract("process covariance is not symmetric".into()));
        }
        let min_eig = q.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-9 * (1.0 + q.abs().max()) {
            return Err(Error::Contract(format!(
                "process covariance has negative eigenvalue {min_eig}"
            )));
        }
        let noise_factor = psd_sqrt(&q);
        Ok(Self { a, q, noise_factor })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl StateTransition for LinearStateTransition {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn sample_into(&self, prev: &[f64], _k: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        let d = self.a.nrows();
        let mut z = [0.0_f64; 8];
        let mut z_heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            z_heap = vec![0.0; d];
            &mut z_heap
        };
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, p) in prev.iter().enumerate() {
                acc += self.a[(i, j)] * p;
            }
            for (j, zj) in z.iter().enumerate() {
                acc += self.noise_factor[(i, j)] * zj;
            }
            *o = acc;
        }
    }
}

type TransitionFn = dyn Fn(&[f64], usize, &mut dyn RngCore) -> Vec<f64> + Send + Sync;

/// Caller-supplied, time-indexed transition rule.
pub struct GenericStateTransition {
    dim: usize,
    rule: Box<TransitionFn>,
}

impl GenericStateTransition {
    pub fn new<F>(dim: usize, rule: F) -> Self
    where
        F: Fn(&[f64], usize, &mut dyn RngCore) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            rule: Box::new(rule),
        }
    }
}

impl fmt::Debug for GenericStateTransition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericStateTransition")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl StateTransition for GenericStateTransition {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, prev: &[f64], k: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        let next = (self.rule)(prev, k, rng);
        assert_eq!(next.len(), self.dim, "transition rule returned wrong dimension");
        out.copy_from_slice(&next);
    }
}

/// One candidate measurement function: `y[mask] = H x + b + n`, with
/// `n ~ N(0, diag(R))`.
///
/// Rows of `H`, `b` and `R` follow the ascending order of `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservationModel {
    channel_count: usize,
    mask: Vec<usize>,
    h: DMatrix<f64>,
    b: DVector<f64>,
    r_diag: DVector<f64>,
    inv_r: Vec<f64>,
    log_norm: f64,
}

impl LinearObservationModel {
    /// Build a model over `channel_count` measurement channels. `mask` must be
    /// strictly increasing. Variances below [`NOISE_VARIANCE_FLOOR`] are
    /// raised to it.
    pub fn new(
        channel_count: usize,
        mask: Vec<usize>,
        h: DMatrix<f64>,
        b: DVector<f64>,
        r_diag: DVector<f64>,
    ) -> Result<Self> {
        let s = mask.len();
        if s == 0 {
            return Err(Error::Contract("observation mask is empty".into()));
        }
        if mask.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "observation mask must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = mask.last() {
            if last >= channel_count {
                return Err(Error::Contract(format!(
                    "mask index {last} out of range for {channel_count} channels"
                )));
            }
        }
        check_dim("observation matrix rows", s, h.nrows())?;
        check_dim("observation bias length", s, b.len())?;
        check_dim("observation noise length", s, r_diag.len())?;
        if h.iter().chain(b.iter()).chain(r_diag.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "observation model has non-finite entries".into(),
            ));
        }
        let r_diag = r_diag.map(|r| r.max(NOISE_VARIANCE_FLOOR));
        let inv_r = r_diag.iter().map(|r| 1.0 / r).collect();
        let log_norm = -0.5 * r_diag.iter().map(|r| (2.0 * PI * r).ln()).sum::<f64>();
        Ok(Self {
            channel_count,
            mask,
            h,
            b,
            r_diag,
            inv_r,
            log_norm,
        })
    }

    /// Model over every channel (`mask = 0..d_y`).
    pub fn full(h: DMatrix<f64>, b: DVector<f64>, r_diag: DVector<f64>) -> Result<Self> {
        let d_y = h.nrows();
        Self::new(d_y, (0..d_y).collect(), h, b, r_diag)
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn size(&self) -> usize {
        self.mask.len()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn r_diag(&self) -> &DVector<f64> {
        &self.r_diag
    }

    pub fn covers_all_channels(&self) -> bool {
        self.mask.len() == self.channel_count
    }

    /// Same mask and noise, new weights.
    pub fn with_weights(&self, h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        Self::new(
            self.channel_count,
            self.mask.clone(),
            h,
            b,
            self.r_diag.clone(),
        )
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        check_dim("state dimension", self.h.ncols(), x.len())
    }

    fn check_measurement(&self, y: &[f64]) -> Result<()> {
        check_dim("measurement dimension", self.channel_count, y.len())
    }

    /// `H x + b` over the masked channels.
    pub fn predict_mean(&self, x: &StateVector) -> Result<DVector<f64>> {
        self.check_state(x.as_slice())?;
        Ok(&self.h * x.values() + &self.b)
    }

    /// Log density of `y` on the masked channels.
    pub fn log_likelihood(&self, x: &StateVector, y: &MeasurementVector) -> Result<f64> {
        self.check_state(x.as_slice())?;
        self.check_measurement(y.as_slice())?;
        Ok(self.log_likelihood_unchecked(x.as_slice(), y.as_slice()))
    }

    /// Hot-path variant: dimensions are the caller's responsibility.
    pub(crate) fn log_likelihood_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (row, &ch) in self.mask.iter().enumerate() {
            let mut mean = self.b[row];
            for (j, xj) in x.iter().enumerate() {
                mean += self.h[(row, j)] * xj;
            }
            let resid = y[ch] - mean;
            quad += resid * resid * self.inv_r[row];
        }
        self.log_norm - 0.5 * quad
    }
}
