//! Video-language encoder: a feature encoder shared between modalities
//! followed by cross-modal co-attention in both directions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VigtError};
use crate::nn::{sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{AttnMap, Graph, ParamId, ParamStore, Scalar, Var};

/// Which encoder stages run, and in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// Shared FE, then CMCA.
    Full,
    NoFe,
    NoCmca,
    NoFeNoCmca,
    /// CMCA on the projected features, then the shared FE.
    CmcaThenFe,
    /// Separate FE weights for video and query, then CMCA.
    UnsharedFe,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 6] = [
        EncoderMode::Full,
        EncoderMode::NoFe,
        EncoderMode::NoCmca,
        EncoderMode::NoFeNoCmca,
        EncoderMode::CmcaThenFe,
        EncoderMode::UnsharedFe,
    ];

    pub fn uses_fe(self) -> bool {
        !matches!(self, EncoderMode::NoFe | EncoderMode::NoFeNoCmca)
    }

    pub fn uses_cmca(self) -> bool {
        !matches!(self, EncoderMode::NoCmca | EncoderMode::NoFeNoCmca)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Full => "full",
            EncoderMode::NoFe => "no_fe",
            EncoderMode::NoCmca => "no_cmca",
            EncoderMode::NoFeNoCmca => "no_fe_no_cmca",
            EncoderMode::CmcaThenFe => "cmca_then_fe",
            EncoderMode::UnsharedFe => "unshared_fe",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderMode {
    type Err = VigtError;

    fn from_str(s: &str) -> Result<Self> {
        EncoderMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| VigtError::config(format!("unknown encoder mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Shape hyperparameters of the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderDims {
    pub d_v: usize,
    pub d_q: usize,
    pub d: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub ffn_mult: usize,
}

/// Pre-norm feature encoder:
///
/// ```text
/// X'  = PE(X) + X
/// X̄  = ConvStack(LN(X')) + X'
/// X̃  = MSA(LN(X̄)) + X̄
/// X̂  = FFN(LN(X̃)) + X̃
/// ```
///
/// The conv stack is `conv_layers` convolutions of width `conv_kernel`, each
/// followed by ReLU, with a single residual around the whole stack.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub convs: Vec<ConvLayer>,
    pub ln_conv: LayerNorm,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub d: usize,
}

impl FeatureEncoder {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: &EncoderDims,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.d;
        if dims.conv_kernel.is_multiple_of(2) {
            return Err(VigtError::config(format!(
                "conv kernel size must be odd, got {}",
                dims.conv_kernel
            )));
        }
        if dims.conv_layers == 0 {
            return Err(VigtError::config("at least one conv layer is required"));
        }
        let mut convs = Vec::with_capacity(dims.conv_layers);
        for i in 0..dims.conv_layers {
            let kernel = store.register_uniform(
                format!("{name}.conv{i}.kernel"),
                &[dims.conv_kernel, d, d],
                dims.conv_kernel * d,
                rng,
            )?;
            let bias = store.register_full(format!("{name}.conv{i}.bias"), &[d], 0.0)?;
            convs.push(ConvLayer { kernel, bias });
        }
        Ok(Self {
            convs,
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d)?,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, dims.heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, dims.ffn_mult * d, rng)?,
            d,
        })
    }

    /// Encodes an already-projected sequence `[N, d]`.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<(Var, AttnMap)> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.d {
            return Err(VigtError::dim(format!(
                "feature encoder expects [N, {}], got {s:?}",
                self.d
            )));
        }
        let pe = g.input(sinusoidal_positions(s[0], self.d));
        let x1 = g.add(x, pe)?;

        let mut h = self.ln_conv.forward(g, x1)?;
        for conv in &self.convs {
            let (k, b) = (g.param(conv.kernel), g.param(conv.bias));
            h = g.conv1d(h, k, b)?;
            h = g.relu(h);
        }
        let x2 = g.add(h, x1)?;

        let n = self.ln_attn.forward(g, x2)?;
        let (a, map) = self.attn.forward(g, n, n, 0.0)?;
        let x3 = g.add(a, x2)?;

        let n = self.ln_ffn.forward(g, x3)?;
        let f = self.ffn.forward(g, n)?;
        Ok((g.add(f, x3)?, map))
    }
}

/// Projection followed by the feature encoder: `FE(X W)`.
pub fn feature_encode<E: Scalar>(
    g: &mut Graph<'_, E>,
    x: Var,
    proj: &Linear,
    fe: &FeatureEncoder,
) -> Result<(Var, AttnMap)> {
    let projected = project(g, x, proj)?;
    fe.forward(g, projected)
}

fn project<E: Scalar>(g: &mut Graph<'_, E>, x: Var, proj: &Linear) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != proj.d_in {
        return Err(VigtError::dim(format!(
            "projection expects [N, {}], got {s:?}",
            proj.d_in
        )));
    }
    proj.forward(g, x)
}

/// Post-norm cross-attention block:
///
/// ```text
/// Q'' = LN(MSA(Q = query_side; K, V = kv_side) + query_side)
/// out = LN(FFN(Q'') + Q'')
/// ```
#[derive(Debug, Clone)]
pub struct CoAttention {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl CoAttention {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_mult * d, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
        })
    }

    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        query_side: Var,
        kv_side: Var,
    ) -> Result<(Var, AttnMap)> {
        let (a, map) = self.attn.forward(g, query_side, kv_side, 0.0)?;
        let r = g.add(a, query_side)?;
        let q2 = self.ln_attn.forward(g, r)?;
        let f = self.ffn.forward(g, q2)?;
        let r = g.add(f, q2)?;
        Ok((self.ln_ffn.forward(g, r)?, map))
    }
}

/// Output of [`VideoLanguageEncoder::forward`].
#[derive(Debug, Clone)]
pub struct CoAttended {
    /// `[L, d]`
    pub q_star: Var,
    /// `[T, d]`
    pub v_star: Var,
    /// Video positions attending over query tokens, `[heads, T, L]`.
    pub attn_q2v: Option<AttnMap>,
    /// Query tokens attending over video positions, `[heads, L, T]`.
    pub attn_v2q: Option<AttnMap>,
    pub fe_video_attn: Option<AttnMap>,
    pub fe_query_attn: Option<AttnMap>,
}

#[derive(Debug, Clone)]
pub struct VideoLanguageEncoder {
    pub proj_v: Linear,
    pub proj_q: Linear,
    /// Shared FE (or the video FE when unshared).
    pub fe: Option<FeatureEncoder>,
    /// Query FE, present only in [`EncoderMode::UnsharedFe`].
    pub fe_query: Option<FeatureEncoder>,
    /// Produces `Q*` (query attends to video).
    pub cmca_query: Option<CoAttention>,
    /// Produces `V*` (video attends to query).
    pub cmca_video: Option<CoAttention>,
    pub mode: EncoderMode,
}

impl VideoLanguageEncoder {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        dims: &EncoderDims,
        mode: EncoderMode,
        rng: &mut R,
    ) -> Result<Self> {
        let proj_v = Linear::new(store, "encoder.proj_v", dims.d_v, dims.d, false, rng)?;
        let proj_q = Linear::new(store, "encoder.proj_q", dims.d_q, dims.d, false, rng)?;
        let (fe, fe_query) = match mode {
            EncoderMode::UnsharedFe => (
                Some(FeatureEncoder::new(store, "encoder.fe_video", dims, rng)?),
                Some(FeatureEncoder::new(store, "encoder.fe_query", dims, rng)?),
            ),
            m if m.uses_fe() => (
                Some(FeatureEncoder::new(store, "encoder.fe", dims, rng)?),
                None,
            ),
            _ => (None, None),
        };
        let (cmca_query, cmca_video) = if mode.uses_cmca() {
            (
                Some(CoAttention::new(
                    store,
                    "encoder.cmca_query",
                    dims.d,
                    dims.heads,
                    dims.ffn_mult,
                    rng,
                )?),
                Some(CoAttention::new(
                    store,
                    "encoder.cmca_video",
                    dims.d,
                    dims.heads,
                    dims.ffn_mult,
                    rng,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            proj_v,
            proj_q,
            fe,
            fe_query,
            cmca_query,
            cmca_video,
            mode,
        })
    }

    fn query_fe(&self) -> Option<&FeatureEncoder> {
        self.fe_query.as_ref().or(self.fe.as_ref())
    }

    fn run_fe<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        v: Var,
        q: Var,
    ) -> Result<(Var, Var, Option<AttnMap>, Option<AttnMap>)> {
        match (self.fe.as_ref(), self.query_fe()) {
            (Some(fv), Some(fq)) => {
                let (v, mv) = fv.forward(g, v)?;
                let (q, mq) = fq.forward(g, q)?;
                Ok((v, q, Some(mv), Some(mq)))
            }
            _ => Ok((v, q, None, None)),
        }
    }

    fn run_cmca<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        v: Var,
        q: Var,
    ) -> Result<(Var, Var, Option<AttnMap>, Option<AttnMap>)> {
        match (&self.cmca_query, &self.cmca_video) {
            (Some(cq), Some(cv)) => {
                let (q_star, v2q) = cq.forward(g, q, v)?;
                let (v_star, q2v) = cv.forward(g, v, q)?;
                Ok((v_star, q_star, Some(q2v), Some(v2q)))
            }
            _ => Ok((v, q, None, None)),
        }
    }

    /// Encodes raw video `[T, d_v]` and query `[L, d_q]` features.
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        video: Var,
        query: Var,
    ) -> Result<CoAttended> {
        let v = project(g, video, &self.proj_v)?;
        let q = project(g, query, &self.proj_q)?;
        let (v_star, q_star, q2v, v2q, fv, fq) = if self.mode == EncoderMode::CmcaThenFe {
            let (v, q, q2v, v2q) = self.run_cmca(g, v, q)?;
            let (v, q, fv, fq) = self.run_fe(g, v, q)?;
            (v, q, q2v, v2q, fv, fq)
        } else {
            let (v, q, fv, fq) = self.run_fe(g, v, q)?;
            let (v, q, q2v, v2q) = self.run_cmca(g, v, q)?;
            (v, q, q2v, v2q, fv, fq)
        };
        Ok(CoAttended {
            q_star,
            v_star,
            attn_q2v: q2v,
            attn_v2q: v2q,
            fe_video_attn: fv,
            fe_query_attn: fq,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::reference::{self as oracle, random_mat, to_mat};
    use crate::tensor::Tensor;

    fn dims() -> EncoderDims {
        EncoderDims {
            d_v: 12,
            d_q: 10,
            d: 8,
            heads: 2,
            conv_kernel: 3,
            conv_layers: 2,
            ffn_mult: 4,
        }
    }

    fn build(mode: EncoderMode, seed: u64) -> (VideoLanguageEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = VideoLanguageEncoder::new(&mut store, &dims(), mode, &mut rng).unwrap();
        (enc, store)
    }

    fn run(
        enc: &VideoLanguageEncoder,
        store: &ParamStore<f64>,
        v: &Tensor<f64>,
        q: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = crate::tensor::Graph::eval(store);
        let (vv, qv) = (g.input(v.clone()), g.input(q.clone()));
        let co = enc.forward(&mut g, vv, qv).unwrap();
        (g.value(co.v_star).clone(), g.value(co.q_star).clone())
    }

    #[test]
    fn single_row_attends_to_itself() {
        let (enc, store) = build(EncoderMode::Full, 1);
        let mut g = crate::tensor::Graph::eval(&store);
        let x = g.input(random_mat(1, 12, 2));
        let (out, map) = feature_encode(&mut g, x, &enc.proj_v, enc.fe.as_ref().unwrap()).unwrap();
        assert_eq!(g.shape(out), &[1, 8]);
        assert!(map.data.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn shared_encoder_touches_the_same_parameters() {
        let (enc, store) = build(EncoderMode::Full, 3);
        let fe = enc.fe.as_ref().unwrap();
        let touched = |x: Tensor<f64>, proj: &Linear| {
            let mut g = crate::tensor::Graph::eval(&store);
            let xv = g.input(x);
            feature_encode(&mut g, xv, proj, fe).unwrap();
            g.touched_params()
                .iter()
                .copied()
                .filter(|id| store.get(*id).name.starts_with("encoder.fe."))
                .collect::<Vec<_>>()
        };
        let a = touched(random_mat(5, 12, 4), &enc.proj_v);
        let b = touched(random_mat(3, 10, 5), &enc.proj_q);
        assert!(!a.is_empty());
        assert_eq!(a, b);
        assert!(enc.fe_query.is_none());
    }

    #[test]
    fn feature_encoder_matches_oracle() {
        let (enc, store) = build(EncoderMode::Full, 6);
        let x = random_mat(4, 12, 7);
        let mut g = crate::tensor::Graph::eval(&store);
        let xv = g.input(x.clone());
        let (out, _) = feature_encode(&mut g, xv, &enc.proj_v, enc.fe.as_ref().unwrap()).unwrap();
        let projected = oracle::linear(&store, "encoder.proj_v", &to_mat(&x));
        let want = oracle::feature_encoder(&store, "encoder.fe", &projected, 2, 2);
        assert!(oracle::max_abs_diff(&to_mat(g.value(out)), &want) < 1e-10);
    }

    #[test]
    fn co_attention_single_key_and_zero_output() {
        let (enc, mut store) = build(EncoderMode::Full, 8);
        let cq = enc.cmca_query.as_ref().unwrap();
        let (q, kv) = (random_mat(3, 8, 9), random_mat(1, 8, 10));
        let mut g = crate::tensor::Graph::eval(&store);
        let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
        let (_, map) = cq.forward(&mut g, qv, kvv).unwrap();
        assert!(map.data.iter().all(|&a| a == 1.0));
        drop(g);

        for name in [
            "encoder.cmca_query.attn.output.weight",
            "encoder.cmca_query.attn.output.bias",
        ] {
            let p = store.by_name_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = crate::tensor::Graph::eval(&store);
        let (qv, kvv) = (g.input(q.clone()), g.input(random_mat(5, 8, 11)));
        let (a, _) = cq.attn.forward(&mut g, qv, kvv, 0.0).unwrap();
        let r = g.add(a, qv).unwrap();
        let q2 = cq.ln_attn.forward(&mut g, r).unwrap();
        let want = oracle::layer_norm(&store, "encoder.cmca_query.ln_attn", &to_mat(&q));
        assert!(oracle::max_abs_diff(&to_mat(g.value(q2)), &want) < 1e-13);
    }

    #[test]
    fn co_attention_matches_oracle() {
        let (enc, store) = build(EncoderMode::Full, 12);
        let (q, kv) = (random_mat(3, 8, 13), random_mat(6, 8, 14));
        let mut g = crate::tensor::Graph::eval(&store);
        let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
        let (out, map) = enc
            .cmca_video
            .as_ref()
            .unwrap()
            .forward(&mut g, qv, kvv)
            .unwrap();
        let want = oracle::co_attention(&store, "encoder.cmca_video", &to_mat(&q), &to_mat(&kv), 2);
        assert!(oracle::max_abs_diff(&to_mat(g.value(out)), &want) < 1e-10);
        for h in 0..2 {
            for r in 0..3 {
                assert!((map.row(h, r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn modes_match_their_compositions() {
        let (v, q) = (random_mat(6, 12, 15), random_mat(4, 10, 16));
        let (vm, qm) = (to_mat(&v), to_mat(&q));

        let (enc, store) = build(EncoderMode::NoFeNoCmca, 17);
        let (vs, qs) = run(&enc, &store, &v, &q);
        assert!(
            oracle::max_abs_diff(&to_mat(&vs), &oracle::linear(&store, "encoder.proj_v", &vm))
                < 1e-13
        );
        assert!(
            oracle::max_abs_diff(&to_mat(&qs), &oracle::linear(&store, "encoder.proj_q", &qm))
                < 1e-13
        );

        let (enc, store) = build(EncoderMode::Full, 18);
        let (vs, qs) = run(&enc, &store, &v, &q);
        let fv = oracle::feature_encoder(
            &store,
            "encoder.fe",
            &oracle::linear(&store, "encoder.proj_v", &vm),
            2,
            2,
        );
        let fq = oracle::feature_encoder(
            &store,
            "encoder.fe",
            &oracle::linear(&store, "encoder.proj_q", &qm),
            2,
            2,
        );
        let want_q = oracle::co_attention(&store, "encoder.cmca_query", &fq, &fv, 2);
        let want_v = oracle::co_attention(&store, "encoder.cmca_video", &fv, &fq, 2);
        assert!(oracle::max_abs_diff(&to_mat(&qs), &want_q) < 1e-10);
        assert!(oracle::max_abs_diff(&to_mat(&vs), &want_v) < 1e-10);

        // same seed registers identical parameters, only the order differs
        let (reordered, store2) = build(EncoderMode::CmcaThenFe, 18);
        assert_eq!(store2.numel(), store.numel());
        let (vs2, _) = run(&reordered, &store2, &v, &q);
        assert!(oracle::max_abs_diff(&to_mat(&vs), &to_mat(&vs2)) > 1e-3);
    }

    #[test]
    fn unshared_doubles_only_the_feature_encoder() {
        let (_, shared) = build(EncoderMode::Full, 19);
        let (_, unshared) = build(EncoderMode::UnsharedFe, 19);
        let fe_numel = |s: &ParamStore<f64>| -> usize {
            s.iter()
                .filter(|(_, p)| p.name.starts_with("encoder.fe"))
                .map(|(_, p)| p.value.numel())
                .sum()
        };
        let rest = |s: &ParamStore<f64>| s.numel() - fe_numel(s);
        assert_eq!(fe_numel(&unshared), 2 * fe_numel(&shared));
        assert_eq!(rest(&unshared), rest(&shared));
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let (enc, store) = build(EncoderMode::Full, 20);
        let mut g = crate::tensor::Graph::new(&store, true, 0);
        let (v, q) = (
            g.input(random_mat(6, 12, 21)),
            g.input(random_mat(4, 10, 22)),
        );
        let co = enc.forward(&mut g, v, q).unwrap();
        let a = g.sum(co.v_star);
        let w = g.input(random_mat(4, 8, 23));
        let b = g.mul(co.q_star, w).unwrap();
        let b = g.sum(b);
        let w2 = g.input(random_mat(6, 8, 24));
        let c = g.mul(co.v_star, w2).unwrap();
        let c = g.sum(c);
        let ab = g.add(a, b).unwrap();
        let l = g.add(ab, c).unwrap();
        g.backward(l).unwrap();
        let grads = g.param_grads();
        for (id, p) in store.iter() {
            let gr = grads
                .get(id)
                .unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(
                gr.data().iter().any(|&x| x != 0.0),
                "{} gradient is zero",
                p.name
            );
        }
    }

    #[test]
    fn bad_inputs() {
        let (enc, store) = build(EncoderMode::Full, 25);
        let mut g = crate::tensor::Graph::eval(&store);
        let (v, q) = (
            g.input(random_mat(6, 11, 26)),
            g.input(random_mat(4, 10, 27)),
        );
        assert!(matches!(
            enc.forward(&mut g, v, q),
            Err(VigtError::Dimension(_))
        ));
        assert!(matches!(
            "sideways".parse::<EncoderMode>(),
            Err(VigtError::Config(_))
        ));
        for m in EncoderMode::ALL {
            assert_eq!(m.as_str().parse::<EncoderMode>().unwrap(), m);
        }
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let even = EncoderDims {
            conv_kernel: 4,
            ..dims()
        };
        assert!(FeatureEncoder::new(&mut store, "x", &even, &mut rng).is_err());
    }
}
