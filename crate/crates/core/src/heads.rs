//! Localisation heads and the moment/interval parameterisations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VigtError};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Scalar, Var};

/// Normalised `<center, width>` moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub center: f64,
    pub width: f64,
}

/// Normalised `<start, end>` interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Moment {
    pub fn new(center: f64, width: f64) -> Self {
        Self { center, width }
    }

    /// Converts to `<start, end>`, clamping both ends into `[0, 1]`.
    pub fn to_interval(self) -> Interval {
        moment_to_interval(self)
    }
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn to_moment(self) -> Moment {
        Moment {
            center: 0.5 * (self.start + self.end),
            width: self.end - self.start,
        }
    }

    pub fn is_valid(self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start <= self.end
    }
}

/// `<center, width>` to `<start, end>`, each end clamped into `[0, 1]`.
pub fn moment_to_interval(m: Moment) -> Interval {
    let start = (m.center - 0.5 * m.width).clamp(0.0, 1.0);
    let end = (m.center + 0.5 * m.width).clamp(0.0, 1.0);
    Interval {
        start,
        end: end.max(start),
    }
}

/// Differentiable version of [`moment_to_interval`] on a `[1, 2]` moment
/// node. Returns `[1, 1]` start and end nodes.
pub fn moment_to_interval_var<E: Scalar>(g: &mut Graph<'_, E>, moment: Var) -> Result<(Var, Var)> {
    let c = g.slice_cols(moment, 0, 1)?;
    let w = g.slice_cols(moment, 1, 1)?;
    let half = g.scale(w, 0.5);
    let s = g.sub(c, half)?;
    let e = g.add(c, half)?;
    Ok((g.clamp(s, 0.0, 1.0), g.clamp(e, 0.0, 1.0)))
}

/// Reads a `[1, 2]` moment node.
pub fn read_moment<E: Scalar>(g: &Graph<'_, E>, moment: Var) -> Moment {
    let v = g.value(moment).data();
    Moment {
        center: v[0].as_f64(),
        width: v[1].as_f64(),
    }
}

/// Boundary regression head: `d -> d -> d/2 -> 2`, ReLU between layers,
/// sigmoid on the output.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub layers: [Linear; 3],
}

impl RegressionHead {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 {
            return Err(VigtError::config("regression head needs d >= 2"));
        }
        let half = d / 2;
        Ok(Self {
            layers: [
                Linear::new(store, &format!("{name}.fc0"), d, d, true, rng)?,
                Linear::new(store, &format!("{name}.fc1"), d, half, true, rng)?,
                Linear::new(store, &format!("{name}.fc2"), half, 2, true, rng)?,
            ],
        })
    }

    /// `x: [1, d]` to a `[1, 2]` `(center, width)` node in `(0, 1)`.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, h)?;
        let h = g.relu(h);
        let o = self.layers[2].forward(g, h)?;
        Ok(g.sigmoid(o))
    }
}

/// Per-clip foreground classifier: linear `d -> 1` and sigmoid.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub fc: Linear,
}

impl ClassificationHead {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, &format!("{name}.fc"), d, 1, true, rng)?,
        })
    }

    /// `v: [T, d]` to `[T]` foreground probabilities.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, v: Var) -> Result<Var> {
        let t = g.shape(v)[0];
        let o = self.fc.forward(g, v)?;
        let o = g.sigmoid(o);
        g.reshape(o, &[t])
    }
}

/// Attention pooling over the transformed video features followed by the
/// regression head; used when the `[REG]` token is disabled.
///
/// A scoring vector `w` gives weights `softmax(V w)` over clips, and the
/// pooled `softmax(V w)^T V` goes through [`RegressionHead`].
#[derive(Debug, Clone)]
pub struct AttentiveRegressionHead {
    pub score: Linear,
}

impl AttentiveRegressionHead {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // A bias on the score would shift all logits equally.
        Ok(Self {
            score: Linear::new(store, &format!("{name}.score"), d, 1, false, rng)?,
        })
    }

    /// Returns the `[1, 2]` moment node and the `[1, T]` pooling-weight node.
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        v: Var,
        reg: &RegressionHead,
    ) -> Result<(Var, Var)> {
        let t = g.shape(v)[0];
        let logits = self.score.forward(g, v)?;
        let logits = g.reshape(logits, &[1, t])?;
        let weights = g.softmax_lastdim(logits)?;
        let pooled = g.matmul(weights, v)?;
        Ok((reg.forward(g, pooled)?, weights))
    }
}
