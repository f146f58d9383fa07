//! Parameterised building blocks shared by the encoder, transformer and heads.
//!
//! Blocks hold only [`ParamId`]s; values live in a [`ParamStore`] and every
//! forward runs on a caller-supplied [`Graph`].

use rand::Rng;

use crate::error::{Result, VigtError};
use crate::tensor::{AttnMap, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng)?;
        let bias = if with_bias {
            Some(store.register_full(format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register_full(format!("{name}.gain"), &[d], 1.0)?,
            bias: store.register_full(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two linear layers `d -> hidden -> d` with ReLU between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng)?,
        })
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention.
///
/// The key projection has no bias: a key bias shifts every score in a row by
/// the same amount and cancels in the softmax, leaving it with an identically
/// zero gradient.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(VigtError::config(format!(
                "model dimension {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            heads,
            d,
        })
    }

    /// Attends from `q_in: [Lq, d]` over `kv_in: [Lk, d]`. Returns the output
    /// `[Lq, d]` and the post-softmax, pre-dropout attention map.
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        q_in: Var,
        kv_in: Var,
        dropout: f64,
    ) -> Result<(Var, AttnMap)> {
        for v in [q_in, kv_in] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != self.d {
                return Err(VigtError::dim(format!(
                    "attention input {s:?} does not have model dimension {}",
                    self.d
                )));
            }
        }
        let (lq, lk) = (g.shape(q_in)[0], g.shape(kv_in)[0]);
        let dk = self.d / self.heads;
        let q = self.query.forward(g, q_in)?;
        let k = self.key.forward(g, kv_in)?;
        let v = self.value.forward(g, kv_in)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut map = AttnMap {
            heads: self.heads,
            rows: lq,
            cols: lk,
            data: Vec::with_capacity(self.heads * lq * lk),
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_lastdim(scores)?;
            map.data
                .extend(g.value(attn).data().iter().map(|x| x.as_f64()));
            let attn = g.dropout(attn, dropout)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = self.output.forward(g, joined)?;
        Ok((out, map))
    }
}

/// Fixed sinusoidal position table `[n, d]`.
pub fn sinusoidal_positions<E: Scalar>(n: usize, d: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_f64(&[n, d], &data).expect("positive dims")
}
