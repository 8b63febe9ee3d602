//! Small log-space and linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rand::SeedableRng;

/// Generator used for every stochastic operation in the crate.
///
/// ChaCha8 seeded through `seed_from_u64`, so a `u64` seed fully determines
/// every stream.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derived stream `index` of a master seed.
pub fn substream(master: u64, index: u64) -> SimRng {
    rng_from_seed(master.wrapping_add(index))
}

/// `log Σ exp(v_i)` with max subtraction. Returns `-inf` when every entry is
/// `-inf` (or the slice is empty). Summation is left to right.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    for &v in values {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

/// Symmetrize and clamp eigenvalues of `m` from below at `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Square-root factor `L` with `L Lᵀ = cov` for a symmetric PSD matrix.
/// Negative eigenvalues (round-off) are treated as zero, so singular and
/// zero covariances are accepted.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Draw `mean + factor·z` with `z` standard normal, one normal per column of
/// `factor` in index order.
pub fn sample_gaussian(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut dyn RngCore,
) -> DVector<f64> {
    let z = DVector::from_iterator(
        factor.ncols(),
        (0..factor.ncols()).map(|_| StandardNormal.sample(rng)),
    );
    mean + factor * z
}

pub fn mean_and_covariance(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut mean = DVector::zeros(d);
    for r in 0..n {
        for c in 0..d {
            mean[c] += rows[(r, c)];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in 0..n {
            for i in 0..d {
                let di = rows[(r, i)] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += di * (rows[(r, j)] - mean[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Output formatting for every numeric CSV cell: integral values print as
/// integers, everything else with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{:.16e}", v)
    }
}
