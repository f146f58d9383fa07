//! Grounding metrics: temporal IoU, R@1 IoU@m, mIoU and the IoU histogram.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VigtError};
use crate::heads::Interval;

/// Thresholds reported by default.
pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub predicted: Interval,
    pub ground_truth: Interval,
}

impl EvalRecord {
    pub fn iou(&self) -> f64 {
        temporal_iou(self.predicted, self.ground_truth)
    }
}

/// How a record's IoU is compared against the threshold `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// `IoU > m`
    #[default]
    Strict,
    /// `IoU >= m`
    Inclusive,
}

impl ThresholdRule {
    fn hit(self, iou: f64, m: f64) -> bool {
        match self {
            ThresholdRule::Strict => iou > m,
            ThresholdRule::Inclusive => iou >= m,
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn temporal_iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(VigtError::Usage("no evaluation records".into()));
    }
    Ok(())
}

/// R@1, IoU@m: the fraction of queries whose prediction clears `m`.
pub fn recall_at_iou(records: &[EvalRecord], m: f64) -> Result<f64> {
    recall_at_iou_with(records, m, ThresholdRule::Strict)
}

pub fn recall_at_iou_with(records: &[EvalRecord], m: f64, rule: ThresholdRule) -> Result<f64> {
    non_empty(records)?;
    if !(m > 0.0 && m < 1.0) {
        return Err(VigtError::Usage(format!("IoU threshold {m} not in (0, 1)")));
    }
    let hits = records.iter().filter(|r| rule.hit(r.iou(), m)).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::iou).sum::<f64>() / records.len() as f64)
}

/// Ten equal-width bins over `[0, 1]`.
pub fn default_bins() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| (i as f64 / 10.0, (i + 1) as f64 / 10.0))
        .collect()
}

/// Counts records per `[lo, hi)` bin; the last bin also takes `hi`.
/// Bins must be sorted, contiguous and cover `[0, 1]`.
pub fn iou_histogram(records: &[EvalRecord], bins: &[(f64, f64)]) -> Result<Vec<usize>> {
    validate_bins(bins)?;
    let mut counts = vec![0; bins.len()];
    let last = bins.len() - 1;
    for r in records {
        let iou = r.iou();
        let idx = bins
            .iter()
            .position(|&(lo, hi)| iou >= lo && iou < hi)
            .unwrap_or(last);
        counts[idx] += 1;
    }
    Ok(counts)
}

fn validate_bins(bins: &[(f64, f64)]) -> Result<()> {
    let (Some(first), Some(last)) = (bins.first(), bins.last()) else {
        return Err(VigtError::config("histogram needs at least one bin"));
    };
    if first.0 != 0.0 || last.1 != 1.0 {
        return Err(VigtError::config("histogram bins must cover [0, 1]"));
    }
    for &(lo, hi) in bins {
        if !(lo < hi) {
            return Err(VigtError::config(format!("empty bin [{lo}, {hi})")));
        }
    }
    for w in bins.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(VigtError::config(format!(
                "bins [{}, {}) and [{}, {}) overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        if w[1].0 > w[0].1 {
            return Err(VigtError::config(format!(
                "gap between {} and {}",
                w[0].1, w[1].0
            )));
        }
    }
    Ok(())
}

/// Standard metric summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `(m, R@1 IoU@m)` pairs.
    pub recall: Vec<(f64, f64)>,
    pub mean_iou: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn compute(records: &[EvalRecord]) -> Result<Self> {
        let recall = IOU_THRESHOLDS
            .iter()
            .map(|&m| recall_at_iou(records, m).map(|r| (m, r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            recall,
            mean_iou: mean_iou(records)?,
            count: records.len(),
        })
    }

    pub fn recall_at(&self, m: f64) -> Option<f64> {
        self.recall.iter().find(|(t, _)| *t == m).map(|(_, r)| *r)
    }

    /// `metric,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,value")?;
        for (m, r) in &self.recall {
            writeln!(w, "R@1_IoU@{m},{r}")?;
        }
        writeln!(w, "mIoU,{}", self.mean_iou)?;
        writeln!(w, "count,{}", self.count)?;
        Ok(())
    }
}

/// `bin_lo,bin_hi,count` rows.
pub fn write_histogram_csv<W: Write>(
    mut w: W,
    bins: &[(f64, f64)],
    counts: &[usize],
) -> Result<()> {
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (&(lo, hi), c) in bins.iter().zip(counts) {
        writeln!(w, "{lo},{hi},{c}")?;
    }
    Ok(())
}

/// `query_id,pred_start,pred_end,gt_start,gt_end,iou` rows.
pub fn write_predictions_csv<W: Write>(mut w: W, records: &[EvalRecord]) -> Result<()> {
    writeln!(w, "query_id,pred_start,pred_end,gt_start,gt_end,iou")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.query_id,
            r.predicted.start,
            r.predicted.end,
            r.ground_truth.start,
            r.ground_truth.end,
            r.iou()
        )?;
    }
    Ok(())
}

/// Reads a file written by [`write_predictions_csv`]. The `iou` column is
/// recomputed, not trusted.
pub fn read_predictions_csv<R: BufRead>(r: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 5 {
            return Err(VigtError::format(
                i,
                format!("expected 6 columns, got {}", cells.len()),
            ));
        }
        let num = |j: usize| -> Result<f64> {
            cells[j]
                .trim()
                .parse()
                .map_err(|_| VigtError::format(i, format!("bad number {:?}", cells[j])))
        };
        out.push(EvalRecord {
            query_id: cells[0].to_string(),
            predicted: Interval::new(num(1)?, num(2)?),
            ground_truth: Interval::new(num(3)?, num(4)?),
        });
    }
    Ok(out)
}
