//! Training metrics as CSV.
//!
//! Header:
//!
//! ```text
//! step,ce_loss,flow_mse_loss,flow_x_mse,total,masking_active_fraction,n_generation,n_understanding,n_text_only,n_editing,n_reconstruction
//! ```
//!
//! A loss column is empty when the logged batch held no example of that kind.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::TaskCounts;

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ce: Option<f64>,
    pub flow: Option<f64>,
    pub flow_x_mse: Option<f64>,
    pub total: f64,
}

pub const HEADER: [&str; 11] = [
    "step",
    "ce_loss",
    "flow_mse_loss",
    "flow_x_mse",
    "total",
    "masking_active_fraction",
    "n_generation",
    "n_understanding",
    "n_text_only",
    "n_editing",
    "n_reconstruction",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub ce_loss: Option<f64>,
    /// Mean v-loss of the generative examples.
    pub flow_mse_loss: Option<f64>,
    /// Their clean-image error, unweighted by time.
    pub flow_x_mse: Option<f64>,
    pub total: f64,
    pub masking_active_fraction: f64,
    pub n_generation: usize,
    pub n_understanding: usize,
    pub n_text_only: usize,
    pub n_editing: usize,
    pub n_reconstruction: usize,
}

impl MetricRow {
    pub fn new(step: usize, loss: &LossValues, masked: f64, c: TaskCounts) -> Self {
        Self {
            step,
            ce_loss: loss.ce,
            flow_mse_loss: loss.flow,
            flow_x_mse: loss.flow_x_mse,
            total: loss.total,
            masking_active_fraction: masked,
            n_generation: c.generation,
            n_understanding: c.understanding,
            n_text_only: c.text_only,
            n_editing: c.editing,
            n_reconstruction: c.reconstruction,
        }
    }
}

pub fn to_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Parse(format!("csv flush: {e}")))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Parse(format!(
            "{}: unexpected metrics header {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean of the last `window` present values of a column.
pub fn tail_mean(values: impl IntoIterator<Item = Option<f64>>, window: usize) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() || window == 0 {
        return None;
    }
    let tail = &present[present.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Trailing moving average over `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<MetricRow> {
        let c = TaskCounts {
            generation: 5,
            understanding: 2,
            text_only: 1,
            ..TaskCounts::default()
        };
        vec![
            MetricRow::new(
                0,
                &LossValues {
                    ce: Some(3.5),
                    flow: Some(0.25),
                    flow_x_mse: Some(0.0625),
                    total: 3.75,
                },
                0.0,
                c,
            ),
            MetricRow::new(
                10,
                &LossValues {
                    ce: None,
                    flow: Some(0.125),
                    flow_x_mse: Some(0.03125),
                    total: 0.125,
                },
                0.5,
                c,
            ),
        ]
    }

    #[test]
    fn csv_round_trip_and_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &rows()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&HEADER.join(",")));
        assert!(text.lines().nth(2).unwrap().starts_with("10,,0.125,0.03125,"));
        assert_eq!(read_metrics(&path).unwrap(), rows());
    }

    #[test]
    fn tail_mean_skips_missing() {
        let v = [Some(1.0), None, Some(3.0), Some(5.0)];
        assert_eq!(tail_mean(v, 2), Some(4.0));
        assert_eq!(tail_mean(v, 10), Some(3.0));
        assert_eq!(tail_mean([None], 3), None);
    }

    #[test]
    fn moving_average_matches_direct_means() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&v, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
    }
}
