//! Kalman filter baseline over a full-channel linear observation model.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{floor_eigenvalues, mean_and_covariance};
use crate::state_space::{
    Dataset, LinearObservationModel, LinearStateTransition, MeasurementVector, StateVector,
};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), cov.nrows())?;
        check_dim("covariance columns", mean.len(), cov.ncols())?;
        Ok(Self {
            mean,
            cov: sanitize_cov(cov)?,
        })
    }

    /// Mean and sample covariance of the training states.
    pub fn from_training(data: &Dataset) -> Result<Self> {
        let (mean, cov) = mean_and_covariance(data.states());
        Self::new(mean, cov)
    }
}

/// Enforce symmetry and a non-negative spectrum. Eigenvalues down to
/// `-1e-12` (relative) are clamped to zero; anything lower is an error.
fn sanitize_cov(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = 1.0 + cov.abs().max();
    if (&cov - cov.transpose()).abs().max() > 1e-10 * scale {
        return Err(Error::Numeric("covariance is not symmetric".into()));
    }
    let sym = (&cov + cov.transpose()) * 0.5;
    let min_eig = sym.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-12 * scale {
        return Err(Error::Numeric(format!(
            "covariance has negative eigenvalue {min_eig}"
        )));
    }
    if min_eig < 0.0 {
        Ok(floor_eigenvalues(&sym, 0.0))
    } else {
        Ok(sym)
    }
}

/// Predict with `(A, Q)`, then update on `y` with a Joseph-form covariance.
pub fn kalman_step(
    ks: &KalmanState,
    trans: &LinearStateTransition,
    obs: &LinearObservationModel,
    y: &MeasurementVector,
) -> Result<KalmanState> {
    if !obs.covers_all_channels() {
        return Err(Error::Contract(
            "Kalman update needs a model over every channel".into(),
        ));
    }
    check_dim("Kalman state dimension", ks.mean.len(), trans.a().nrows())?;
    check_dim("observation state dimension", ks.mean.len(), obs.state_dim())?;
    check_dim("measurement dimension", obs.channel_count(), y.dim())?;

    let a = trans.a();
    let mean_pred = a * &ks.mean;
    let cov_pred = a * &ks.cov * a.transpose() + trans.q();

    let h = obs.h();
    let r = DMatrix::from_diagonal(obs.r_diag());
    let innovation = y.values() - (h * &mean_pred + obs.b());
    let s = h * &cov_pred * h.transpose() + &r;
    let s_chol = s
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is not invertible".into()))?;
    // K = P Hᵀ S⁻¹  ⇔  S Kᵀ = H P
    let gain = s_chol.solve(&(h * &cov_pred)).transpose();

    let mean = mean_pred + &gain * innovation;
    let d = ks.mean.len();
    let i_kh = DMatrix::identity(d, d) - &gain * h;
    let cov = &i_kh * &cov_pred * i_kh.transpose() + &gain * r * gain.transpose();
    KalmanState::new(mean, (&cov + cov.transpose()) * 0.5)
}

/// Session wrapper for running the baseline over a measurement sequence.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    state: KalmanState,
    trans: LinearStateTransition,
    obs: LinearObservationModel,
}

impl KalmanFilter {
    pub fn new(
        initial: KalmanState,
        trans: LinearStateTransition,
        obs: LinearObservationModel,
    ) -> Result<Self> {
        if !obs.covers_all_channels() {
            return Err(Error::Contract(
                "Kalman baseline needs a model over every channel".into(),
            ));
        }
        check_dim("Kalman state dimension", initial.mean.len(), trans.a().nrows())?;
        Ok(Self {
            state: initial,
            trans,
            obs,
        })
    }

    pub fn state(&self) -> &KalmanState {
        &self.state
    }

    pub fn step(&mut self, y: &MeasurementVector) -> Result<StateVector> {
        self.state = kalman_step(&self.state, &self.trans, &self.obs, y)?;
        StateVector::new(self.state.mean.clone())
    }

    /// Filter every row of `data`, returning the posterior means.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<StateVector>> {
        (0..data.len()).map(|r| self.step(&data.measurement(r))).collect()
    }
}
