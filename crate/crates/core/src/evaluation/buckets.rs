// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{EvalReport, FrequencyRecord};
use crate::error::{Error, Result};

/// Cells with fewer samples than this are suppressed.
pub const MIN_CELL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCell {
    /// Mention length in tokens; the last length bucket collects everything
    /// at or above `max_len`.
    pub length: usize,
    pub quantile_bin: usize,
    pub em: f64,
    pub n: usize,
    pub suppressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub layer: usize,
    pub n_quantiles: usize,
    pub max_len: usize,
    /// Every non-empty cell, including suppressed ones, so that the n-weighted
    /// cell EMs recompose the bucketed EM.
    pub cells: Vec<BucketCell>,
    /// Samples left out for lack of a frequency or a token length.
    pub n_unbucketed: usize,
    pub frequency_coverage: f64,
}

impl BucketReport {
    pub fn populated(&self) -> impl Iterator<Item = &BucketCell> {
        self.cells.iter().filter(|c| !c.suppressed)
    }
}

/// EM per (length, frequency-quantile) cell for the report's best layer (or
/// its only layer). Requires frequencies for at least 95% of the samples.
pub fn bucket_report(
    report: &EvalReport,
    freqs: &[FrequencyRecord],
    n_quantiles: usize,
    max_len: usize,
) -> Result<EvalReport> {
    if n_quantiles == 0 || max_len == 0 {
        return Err(Error::Config("n_quantiles and max_len must be >= 1".into()));
    }
    let layer = report
        .best_layer
        .or_else(|| report.per_layer.first().map(|s| s.layer))
        .ok_or(Error::EmptyInput("evaluation report"))?;
    let score = report.layer(layer).ok_or(Error::EmptyInput("evaluation report"))?;
    let quantile: HashMap<&str, f64> = freqs
        .iter()
        .filter_map(|f| f.quantile.map(|q| (f.mention.as_str(), q)))
        .collect();
    let with_freq = score
        .samples
        .iter()
        .filter(|s| quantile.contains_key(s.mention.as_str()))
        .count();
    let coverage = with_freq as f64 / score.n.max(1) as f64;
    if coverage < 0.95 {
        return Err(Error::Dataset(format!(
            "frequencies cover {:.1}% of mentions, need 95%",
            coverage * 100.0
        )));
    }
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    let mut unbucketed = 0;
    for s in &score.samples {
        let (Some(&q), Some(len)) = (quantile.get(s.mention.as_str()), s.mention_tokens) else {
            unbucketed += 1;
            continue;
        };
        let bin = ((q * n_quantiles as f64).floor() as usize).min(n_quantiles - 1);
        let e = cells.entry((len.clamp(1, max_len), bin)).or_default();
        e.0 += s.em as usize;
        e.1 += 1;
    }
    let cells = cells
        .into_iter()
        .map(|((length, quantile_bin), (hits, n))| BucketCell {
            length,
            quantile_bin,
            em: hits as f64 / n as f64,
            n,
            suppressed: n < MIN_CELL,
        })
        .collect();
    let mut out = report.clone();
    out.buckets = Some(BucketReport {
        layer,
        n_quantiles,
        max_len,
        cells,
        n_unbucketed: unbucketed,
        frequency_coverage: coverage,
    });
    Ok(out)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Per length: (number of populated cells, Spearman of quantile bin vs EM).
pub fn row_spearman(buckets: &BucketReport) -> BTreeMap<usize, (usize, Option<f64>)> {
    let mut rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in buckets.populated() {
        let r = rows.entry(c.length).or_default();
        r.0.push(c.quantile_bin as f64);
        r.1.push(c.em);
    }
    rows.into_iter()
        .map(|(len, (q, em))| (len, (q.len(), spearman(&q, &em))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        // ties: ranks (1.5,1.5,3) vs (1,2,3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }
}
