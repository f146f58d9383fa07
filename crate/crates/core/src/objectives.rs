//! Multi-task training objective: smooth-L1 on boundaries, 1-D GIoU, and
//! per-clip foreground binary cross-entropy.
//!
//! Every term has a plain `f64` form (used by metrics and tests) and a graph
//! form that participates in backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VigtError};
use crate::heads::{moment_to_interval, moment_to_interval_var, Interval, Moment};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probability clamp used before taking logs in the BCE term.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 1.0,
            alpha: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("alpha", self.alpha),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(VigtError::config(format!(
                    "loss weight {name}={w} must be >= 0"
                )));
            }
        }
        if self.lambda == 0.0 && self.beta == 0.0 && self.alpha == 0.0 {
            return Err(VigtError::config("all loss weights are zero"));
        }
        Ok(())
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            lambda: self.lambda * k,
            beta: self.beta * k,
            alpha: self.alpha * k,
        }
    }
}

/// Which loss terms are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub smooth_l1: bool,
    pub giou: bool,
    pub cls: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        smooth_l1: true,
        giou: true,
        cls: true,
    };

    /// The six term combinations of the loss ablation, all-terms last.
    pub const ABLATION_ROWS: [LossTerms; 6] = [
        LossTerms {
            smooth_l1: true,
            giou: false,
            cls: false,
        },
        LossTerms {
            smooth_l1: false,
            giou: true,
            cls: false,
        },
        LossTerms {
            smooth_l1: true,
            giou: false,
            cls: true,
        },
        LossTerms {
            smooth_l1: false,
            giou: true,
            cls: true,
        },
        LossTerms {
            smooth_l1: true,
            giou: true,
            cls: false,
        },
        LossTerms {
            smooth_l1: true,
            giou: true,
            cls: true,
        },
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_l1 || self.giou || self.cls) {
            return Err(VigtError::config("all loss terms are disabled"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.smooth_l1 {
            parts.push("sl1");
        }
        if self.giou {
            parts.push("giou");
        }
        if self.cls {
            parts.push("cls");
        }
        parts.join("+")
    }
}

/// Weighted per-term contributions; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub smooth_l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub total: f64,
}

fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Mean smooth-L1 over the two boundaries after converting both moments to
/// `<start, end>`.
pub fn smooth_l1_boundary(pred: Moment, gt: Moment) -> f64 {
    let (p, t) = (moment_to_interval(pred), moment_to_interval(gt));
    0.5 * (smooth_l1_scalar(p.start - t.start) + smooth_l1_scalar(p.end - t.end))
}

/// Generalised IoU of two intervals.
///
/// Degenerate cases: if both are the same point (`U = 0`, `C = 0`) the result
/// is 1; if `U = 0` but `C > 0` the `I/U` term is taken as 0.
pub fn giou_1d(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    // hull >= union, but the float difference can land just below zero
    let empty = (hull - union).max(0.0);
    if union <= 0.0 {
        return if hull <= 0.0 { 1.0 } else { -empty / hull };
    }
    inter / union - empty / hull
}

pub fn giou_loss(pred: Moment, gt: Moment) -> f64 {
    1.0 - giou_1d(moment_to_interval(pred), moment_to_interval(gt))
}

/// Mean binary cross-entropy over clips, scores clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_foreground(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&a, &y)| {
            let a = a.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * a.ln() + (1.0 - y) * (1.0 - a).ln())
        })
        .sum::<f64>()
        / n
}

pub fn total_loss(
    pred: Moment,
    gt: Moment,
    scores: &[f64],
    labels: &[f64],
    w: LossWeights,
    terms: LossTerms,
) -> Result<LossBreakdown> {
    terms.validate()?;
    w.validate()?;
    let mut out = LossBreakdown::default();
    if terms.smooth_l1 {
        out.smooth_l1 = w.lambda * smooth_l1_boundary(pred, gt);
    }
    if terms.giou {
        out.giou = w.beta * giou_loss(pred, gt);
    }
    if terms.cls {
        out.cls = w.alpha * bce_foreground(scores, labels);
    }
    out.total = out.smooth_l1 + out.giou + out.cls;
    Ok(out)
}

/// Clip `t` of `clips` is foreground iff its centre `(t + 0.5) / clips`
/// lies in `[gt.start, gt.end]`.
pub fn make_foreground_labels(gt: Interval, clips: usize) -> Vec<f64> {
    (0..clips)
        .map(|t| {
            let c = (t as f64 + 0.5) / clips as f64;
            if gt.end > gt.start && c >= gt.start && c <= gt.end {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn constant<E: Scalar>(g: &mut Graph<'_, E>, x: f64) -> Var {
    g.input(Tensor::from_f64(&[1, 1], &[x]).expect("scalar"))
}

/// Graph form of [`smooth_l1_boundary`]; `pred` is a `[1, 2]` moment node.
pub fn smooth_l1_boundary_var<E: Scalar>(
    g: &mut Graph<'_, E>,
    pred: Var,
    gt: Moment,
) -> Result<Var> {
    let (ps, pe) = moment_to_interval_var(g, pred)?;
    let t = moment_to_interval(gt);
    let gt_row = g.input(Tensor::from_f64(&[1, 2], &[t.start, t.end])?);
    let p = g.concat_cols(&[ps, pe])?;
    let diff = g.sub(p, gt_row)?;
    let l = g.smooth_l1(diff);
    Ok(g.mean(l))
}

/// Graph form of [`giou_1d`] between two interval node pairs.
pub fn giou_1d_var<E: Scalar>(g: &mut Graph<'_, E>, a: (Var, Var), b: (Var, Var)) -> Result<Var> {
    let zero = constant(g, 0.0);
    let lo = g.maximum(a.0, b.0)?;
    let hi = g.minimum(a.1, b.1)?;
    let overlap = g.sub(hi, lo)?;
    let inter = g.maximum(overlap, zero)?;
    let len_a = g.sub(a.1, a.0)?;
    let len_b = g.sub(b.1, b.0)?;
    let sum = g.add(len_a, len_b)?;
    let union = g.sub(sum, inter)?;
    let hull_hi = g.maximum(a.1, b.1)?;
    let hull_lo = g.minimum(a.0, b.0)?;
    let hull = g.sub(hull_hi, hull_lo)?;

    let (u, c) = (g.scalar(union).as_f64(), g.scalar(hull).as_f64());
    if u <= 0.0 && c <= 0.0 {
        return Ok(constant(g, 1.0));
    }
    let empty = g.sub(hull, union)?;
    let penalty = g.div(empty, hull)?;
    if u <= 0.0 {
        return Ok(g.scale(penalty, -1.0));
    }
    let iou = g.div(inter, union)?;
    g.sub(iou, penalty)
}

/// Graph form of [`giou_loss`].
pub fn giou_loss_var<E: Scalar>(g: &mut Graph<'_, E>, pred: Var, gt: Moment) -> Result<Var> {
    let p = moment_to_interval_var(g, pred)?;
    let t = moment_to_interval(gt);
    let ts = constant(g, t.start);
    let te = constant(g, t.end);
    let giou = giou_1d_var(g, p, (ts, te))?;
    let neg = g.scale(giou, -1.0);
    let loss = g.add_scalar(neg, 1.0);
    g.reshape(loss, &[1])
}

/// Graph form of [`bce_foreground`]; `scores` is a `[T]` node.
pub fn bce_foreground_var<E: Scalar>(
    g: &mut Graph<'_, E>,
    scores: Var,
    labels: &[f64],
) -> Result<Var> {
    let t = g.shape(scores).to_vec();
    if t.iter().product::<usize>() != labels.len() {
        return Err(VigtError::dim(format!(
            "bce: {} labels for scores of shape {t:?}",
            labels.len()
        )));
    }
    let y = g.input(Tensor::from_f64(&t, labels)?);
    let not_y = g.input(Tensor::from_f64(
        &t,
        &labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
    )?);
    let a = g.clamp(scores, BCE_EPS, 1.0 - BCE_EPS);
    let log_a = g.log(a)?;
    let neg_a = g.scale(a, -1.0);
    let one_minus = g.add_scalar(neg_a, 1.0);
    let log_1ma = g.log(one_minus)?;
    let pos = g.mul(y, log_a)?;
    let neg = g.mul(not_y, log_1ma)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.scale(m, -1.0))
}

/// Loss node plus the weighted contribution of each enabled term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `L = λ·smooth_l1 + β·giou + α·bce` over enabled terms. `scores` may be
/// `None` only when the classification term is disabled.
pub fn total_loss_var<E: Scalar>(
    g: &mut Graph<'_, E>,
    pred: Var,
    gt: Moment,
    scores: Option<Var>,
    labels: &[f64],
    w: LossWeights,
    terms: LossTerms,
) -> Result<LossVars> {
    terms.validate()?;
    w.validate()?;
    let mut parts: Vec<Var> = Vec::with_capacity(3);
    let mut breakdown = LossBreakdown::default();
    if terms.smooth_l1 {
        let l = smooth_l1_boundary_var(g, pred, gt)?;
        let l = g.scale(l, w.lambda);
        breakdown.smooth_l1 = g.scalar(l).as_f64();
        parts.push(l);
    }
    if terms.giou {
        let l = giou_loss_var(g, pred, gt)?;
        let l = g.scale(l, w.beta);
        breakdown.giou = g.scalar(l).as_f64();
        parts.push(l);
    }
    if terms.cls {
        let scores =
            scores.ok_or_else(|| VigtError::config("classification term needs clip scores"))?;
        let l = bce_foreground_var(g, scores, labels)?;
        let l = g.scale(l, w.alpha);
        breakdown.cls = g.scalar(l).as_f64();
        parts.push(l);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    breakdown.total = g.scalar(total).as_f64();
    Ok(LossVars { total, breakdown })
}
