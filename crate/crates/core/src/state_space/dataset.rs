use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{MeasurementVector, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::numeric::fmt_f64;

/// Record of one noise-injection pass, kept in the dataset sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub channels: Vec<usize>,
    pub low: i64,
    pub high: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Sidecar metadata stored next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub bin_width_ms: f64,
    pub channel_labels: Vec<String>,
    /// Time index of the first row.
    #[serde(default)]
    pub start_step: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruption: Vec<CorruptionRecord>,
}

/// Time-aligned states (`T × d_x`) and measurements (`T × d_y`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    states: DMatrix<f64>,
    measurements: DMatrix<f64>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(states: DMatrix<f64>, measurements: DMatrix<f64>, meta: DatasetMeta) -> Result<Self> {
        if states.nrows() == 0 {
            return Err(Error::Contract("dataset must have at least one row".into()));
        }
        check_dim("dataset rows", states.nrows(), measurements.nrows())?;
        check_dim("channel labels", measurements.ncols(), meta.channel_labels.len())?;
        if !(meta.bin_width_ms > 0.0 && meta.bin_width_ms.is_finite()) {
            return Err(Error::Contract("bin width must be positive".into()));
        }
        if states.iter().chain(measurements.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("dataset has non-finite entries".into()));
        }
        Ok(Self {
            states,
            measurements,
            meta,
        })
    }

    /// Dataset with default labels `c0..`, unit start step zero.
    pub fn with_defaults(
        states: DMatrix<f64>,
        measurements: DMatrix<f64>,
        bin_width_ms: f64,
    ) -> Result<Self> {
        let labels = (0..measurements.ncols()).map(|c| format!("c{c}")).collect();
        Self::new(
            states,
            measurements,
            DatasetMeta {
                bin_width_ms,
                channel_labels: labels,
                start_step: 0,
                corruption: Vec::new(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn channel_count(&self) -> usize {
        self.measurements.ncols()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn measurements(&self) -> &DMatrix<f64> {
        &self.measurements
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    pub(crate) fn measurements_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.measurements
    }

    pub fn state(&self, row: usize) -> StateVector {
        StateVector::new(self.states.row(row).transpose()).expect("dataset entries are finite")
    }

    pub fn measurement(&self, row: usize) -> MeasurementVector {
        MeasurementVector::new(self.measurements.row(row).transpose())
            .expect("dataset entries are finite")
    }

    /// Column `component` of the state matrix.
    pub fn state_component(&self, component: usize) -> Vec<f64> {
        self.states.column(component).iter().copied().collect()
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.measurements.column(channel).iter().copied().collect()
    }

    /// Contiguous block of rows.
    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Self> {
        if rows.start >= rows.end || rows.end > self.len() {
            return Err(Error::Config(format!(
                "row range {rows:?} invalid for dataset of {} rows",
                self.len()
            )));
        }
        let n = rows.end - rows.start;
        let mut meta = self.meta.clone();
        meta.start_step += rows.start;
        Self::new(
            self.states.rows(rows.start, n).into_owned(),
            self.measurements.rows(rows.start, n).into_owned(),
            meta,
        )
    }

    /// Keep only `channels`, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channel_count()) {
            return Err(Error::Config(format!("channel {bad} out of range")));
        }
        let measurements = self.measurements.select_columns(channels);
        let mut meta = self.meta.clone();
        meta.channel_labels = channels
            .iter()
            .map(|&c| self.meta.channel_labels[c].clone())
            .collect();
        Self::new(self.states.clone(), measurements, meta)
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Write `t,x0..,c0..` CSV plus a JSON sidecar next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..self.state_dim()).map(|i| format!("x{i}")));
        header.extend((0..self.channel_count()).map(|i| format!("c{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in 0..self.len() {
            let mut rec = vec![(self.meta.start_step + r).to_string()];
            rec.extend(self.states.row(r).iter().map(|v| fmt_f64(*v)));
            rec.extend(self.measurements.row(r).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let sidecar = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).map_err(|source| Error::Json {
            path: sidecar.clone(),
            source,
        })?;
        fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let sidecar = Self::sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: sidecar.clone(),
            source,
        })?;

        let mut rdr = csv::Reader::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let headers = rdr
            .headers()
            .map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .clone();
        let d_x = headers.iter().filter(|h| h.starts_with('x')).count();
        let d_y = headers.iter().filter(|h| h.starts_with('c')).count();
        if headers.get(0) != Some("t") || headers.len() != 1 + d_x + d_y {
            return Err(Error::Config(format!(
                "{}: header must be t,x0..,c0..",
                path.display()
            )));
        }
        let mut states = Vec::new();
        let mut measurements = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            for (i, field) in rec.iter().enumerate().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("{}: unparsable value {field:?}", path.display()))
                })?;
                if i <= d_x {
                    states.push(v);
                } else {
                    measurements.push(v);
                }
            }
        }
        let t = states.len() / d_x.max(1);
        Self::new(
            DMatrix::from_row_slice(t, d_x, &states),
            DMatrix::from_row_slice(t, d_y, &measurements),
            meta,
        )
    }
}

impl Dataset {
    /// Row `r` of the measurement matrix as a plain vector.
    pub fn measurement_row(&self, r: usize) -> DVector<f64> {
        self.measurements.row(r).transpose()
    }
}
