//! Line-delimited JSON metrics and CSV histograms.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::analytic_alpha;
use crate::error::{Error, Result};
use crate::train::{prepare_weights, Network, NodeParams, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    /// `train` (one minibatch) or `test` (whole held-out split).
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Starts `path` afresh with `existing` records.
    pub fn create(path: &Path, existing: &[MetricRecord]) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        for r in existing {
            w.push(r)?;
        }
        Ok(w)
    }

    pub fn push(&mut self, r: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("metric records serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::FormatLine {
            context: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub layer_id: usize,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// `bins` uniform bins over `[min, max]` of `values`; the last bin is closed.
/// A constant input gets the range `[v - 0.5, v + 0.5]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, u64)> {
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        (lo, hi) = (-0.5, 0.5);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    (0..bins)
        .map(|i| {
            let right = if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width };
            (lo + i as f64 * width, right, counts[i])
        })
        .collect()
}

/// Per binary layer: scaling factors in use and pre-binarization weights.
pub fn layer_distributions(net: &Network, params: &ParamSet) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
    let prepared = prepare_weights(net, params, None)?;
    let mut out = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        if let Some(p) = p {
            let alpha = match &params.nodes[i] {
                NodeParams::Binary { alpha: Some(a), .. } => a.clone(),
                _ => analytic_alpha(&p.pre)?,
            };
            out.push((i, alpha, p.pre.data().to_vec()));
        }
    }
    Ok(out)
}

fn rows_for(layer: usize, values: &[f64]) -> impl Iterator<Item = HistogramRow> + '_ {
    histogram(values, HISTOGRAM_BINS)
        .into_iter()
        .map(move |(bin_left, bin_right, count)| HistogramRow {
            layer_id: layer,
            bin_left,
            bin_right,
            count,
        })
}

/// `(alpha rows, weight rows)`, 64 rows per binary layer each. Reads only.
pub fn histograms(net: &Network, params: &ParamSet) -> Result<(Vec<HistogramRow>, Vec<HistogramRow>)> {
    let dists = layer_distributions(net, params)?;
    let alpha = dists.iter().flat_map(|(l, a, _)| rows_for(*l, a)).collect();
    let weights = dists.iter().flat_map(|(l, _, w)| rows_for(*l, w)).collect();
    Ok((alpha, weights))
}

pub fn write_histogram_csv(path: &Path, rows: &[HistogramRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_histogram_csv(path: &Path) -> Result<Vec<HistogramRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::FormatLine {
                context: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let v = [0.0, 0.5, 1.0, 1.0, 0.25];
        let h = histogram(&v, 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<u64>(), 5);
        assert_eq!(h[0], (0.0, 0.25, 1));
        assert_eq!(h[3], (0.75, 1.0, 2));
    }

    #[test]
    fn constant_values_get_a_unit_range() {
        let h = histogram(&[2.0; 3], 64);
        assert_eq!(h[0].0, 1.5);
        assert_eq!(h[63].1, 2.5);
        assert_eq!(h.iter().map(|b| b.2).sum::<u64>(), 3);
    }
}
