//! Decoding metrics, channel ranking and model-dominance statistics.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::ensemble_engine::argmax_strict;
use crate::error::{Error, Result};
use crate::state_space::Dataset;

/// Default number of quantile bins on the state axis for MI.
pub const DEFAULT_STATE_BINS: usize = 8;

const ROW_SUM_TOLERANCE: f64 = 1e-8;

/// Per-step model posteriors (`T × M`) with their step indices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrace {
    steps: Vec<usize>,
    probs: DMatrix<f64>,
}

impl WeightTrace {
    pub fn new(steps: Vec<usize>, probs: DMatrix<f64>) -> Result<Self> {
        if steps.len() != probs.nrows() {
            return Err(Error::DimensionMismatch {
                context: "weight trace steps",
                expected: probs.nrows(),
                actual: steps.len(),
            });
        }
        for (r, row) in probs.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                || (sum - 1.0).abs() > ROW_SUM_TOLERANCE
            {
                return Err(Error::Contract(format!(
                    "trace row {r} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { steps, probs })
    }

    pub fn from_rows(steps: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                context: "weight trace row",
                expected: m,
                actual: bad.len(),
            });
        }
        let probs = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
        Self::new(steps, probs)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn model_count(&self) -> usize {
        self.probs.ncols()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    fn row(&self, r: usize) -> Vec<f64> {
        self.probs.row(r).iter().copied().collect()
    }

    /// Mean L1 change between consecutive rows.
    pub fn mean_l1_change(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let total: f64 = (1..self.len())
            .map(|r| {
                (0..self.model_count())
                    .map(|c| (self.probs[(r, c)] - self.probs[(r - 1, c)]).abs())
                    .sum::<f64>()
            })
            .sum();
        total / (self.len() - 1) as f64
    }
}

/// Pearson correlation.
pub fn correlation_coefficient(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "correlation inputs",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedMetric(
            "correlation needs at least two samples".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation of a zero-variance sequence".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Interior quantile edges (linear interpolation between order statistics).
fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (1..bins)
        .map(|j| {
            let h = (n - 1) as f64 * j as f64 / bins as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Bin index of every value: the number of edges strictly below it.
pub fn quantile_bin(values: &[f64], bins: usize) -> Vec<usize> {
    let edges = quantile_edges(values, bins);
    values
        .iter()
        .map(|v| edges.iter().filter(|e| *e < v).count())
        .collect()
}

fn key(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

fn label(values: &[f64]) -> Vec<usize> {
    let mut ids: HashMap<u64, usize> = HashMap::new();
    values
        .iter()
        .map(|v| {
            let next = ids.len();
            *ids.entry(key(*v)).or_insert(next)
        })
        .collect()
}

/// Plug-in MI (bits) between two label sequences.
pub fn discrete_mutual_information(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut px: HashMap<usize, usize> = HashMap::new();
    let mut py: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1;
        *px.entry(a).or_default() += 1;
        *py.entry(b).or_default() += 1;
    }
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&((a, b), c)| {
            let c = c as f64;
            let ratio = c * n / (px[&a] as f64 * py[&b] as f64);
            c / n * ratio.log2()
        })
        .sum();
    mi.max(0.0)
}

/// Plug-in entropy (bits) of a label sequence.
pub fn discrete_entropy(x: &[usize]) -> f64 {
    let n = x.len() as f64;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &a in x {
        *counts.entry(a).or_default() += 1;
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    -c.iter()
        .map(|&k| {
            let p = k as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// MI in bits between raw counts and quantile-binned states.
pub fn mutual_information(counts: &[f64], states: &[f64], state_bins: usize) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::UndefinedMetric("mutual information of empty input".into()));
    }
    if counts.len() != states.len() {
        return Err(Error::DimensionMismatch {
            context: "mutual information inputs",
            expected: counts.len(),
            actual: states.len(),
        });
    }
    if state_bins < 2 {
        return Err(Error::Config("need at least two state bins".into()));
    }
    Ok(discrete_mutual_information(
        &label(counts),
        &quantile_bin(states, state_bins),
    ))
}

/// Channels by descending MI with one state component; ties keep
/// ascending channel order.
pub fn rank_channels(data: &Dataset, by_state_component: usize, top_k: usize) -> Result<Vec<usize>> {
    if top_k > data.channel_count() {
        return Err(Error::Config(format!(
            "top_k {top_k} exceeds {} channels",
            data.channel_count()
        )));
    }
    if by_state_component >= data.state_dim() {
        return Err(Error::Config(format!(
            "state component {by_state_component} out of range"
        )));
    }
    let target = data.state_component(by_state_component);
    let mut scored = (0..data.channel_count())
        .map(|c| Ok((c, mutual_information(&data.channel(c), &target, DEFAULT_STATE_BINS)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(top_k).map(|(c, _)| c).collect())
}

/// Inclusive step range with the model expected to dominate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub expected_model: usize,
}

/// Fraction of steps per segment whose strict argmax is the expected model.
pub fn segment_dominance(trace: &WeightTrace, segments: &[Segment]) -> Result<Vec<f64>> {
    segments
        .iter()
        .map(|seg| {
            if seg.start > seg.end || seg.expected_model >= trace.model_count() {
                return Err(Error::Config(format!("invalid segment {seg:?}")));
            }
            let rows: Vec<usize> = (0..trace.len())
                .filter(|&r| (seg.start..=seg.end).contains(&trace.steps[r]))
                .collect();
            if rows.len() != seg.end - seg.start + 1 {
                return Err(Error::Config(format!(
                    "segment {}..={} not covered by the trace",
                    seg.start, seg.end
                )));
            }
            let hits = rows
                .iter()
                .filter(|&&r| argmax_strict(&trace.row(r)) == Some(seg.expected_model))
                .count();
            Ok(hits as f64 / rows.len() as f64)
        })
        .collect()
}

/// Sample mean and sample standard deviation (n−1; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
