//! The full grounding model: encoder, transformer and heads wired together.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{CoAttended, EncoderDims, EncoderMode, VideoLanguageEncoder};
use crate::error::{Result, VigtError};
use crate::heads::{
    read_moment, AttentiveRegressionHead, ClassificationHead, Moment, RegressionHead,
};
use crate::objectives::{make_foreground_labels, total_loss_var, LossTerms, LossVars, LossWeights};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::transformer::{TransformerDims, TransformerOutput, VlTransformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_q: usize,
    pub d: usize,
    pub heads: usize,
    /// Clip count `T`.
    pub clips: usize,
    /// Query token count `L`.
    pub query_len: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    /// Number of transformer blocks `N_l`.
    pub layers: usize,
    pub ffn_mult: usize,
    /// Dropout on transformer attention weights.
    pub dropout: f64,
    pub encoder_mode: EncoderMode,
    /// Replace the token with attention pooling over the video outputs.
    pub no_token: bool,
    pub final_ln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 500,
            d_q: 300,
            d: 512,
            heads: 8,
            clips: 128,
            query_len: 20,
            conv_kernel: 7,
            conv_layers: 4,
            layers: 6,
            ffn_mult: 4,
            dropout: 0.1,
            encoder_mode: EncoderMode::Full,
            no_token: false,
            final_ln: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile matching the synthetic data defaults.
    pub fn toy() -> Self {
        Self {
            d_v: 64,
            d_q: 32,
            d: 64,
            heads: 4,
            clips: 32,
            query_len: 6,
            layers: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_v", self.d_v),
            ("d_q", self.d_q),
            ("d", self.d),
            ("heads", self.heads),
            ("clips", self.clips),
            ("query_len", self.query_len),
            ("conv_layers", self.conv_layers),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VigtError::config(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(VigtError::config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(VigtError::config(format!(
                "conv_kernel={} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VigtError::config(format!(
                "dropout={} not in [0, 1)",
                self.dropout
            )));
        }
        if self.d < 2 {
            return Err(VigtError::config("d must be at least 2"));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            d_v: self.d_v,
            d_q: self.d_q,
            d: self.d,
            heads: self.heads,
            conv_kernel: self.conv_kernel,
            conv_layers: self.conv_layers,
            ffn_mult: self.ffn_mult,
        }
    }

    fn transformer_dims(&self) -> TransformerDims {
        TransformerDims {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            query_len: self.query_len,
            clips: self.clips,
            ffn_mult: self.ffn_mult,
        }
    }

    /// Closed-form parameter count for this configuration.
    ///
    /// With `a = 4d² + 3d` (attention, key projection without bias),
    /// `f = 2·m·d² + (m+1)·d` (FFN with expansion `m`), `n = 2d` (layer norm):
    ///
    /// ```text
    /// projections     d·(d_v + d_q)
    /// FE              N_conv·(K·d² + d) + 3n + a + f        (×2 if unshared)
    /// CMCA            2·(a + f + 2n)
    /// transformer     d + (L+T+1)·d + N_l·(2n + a + f) [+ n if final LN]
    /// regression head d² + d + d·⌊d/2⌋ + ⌊d/2⌋ + 2·⌊d/2⌋ + 2
    /// cls head        d + 1
    /// attentive head  d                                      (no_token only)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let m = self.ffn_mult;
        let attn = 4 * d * d + 3 * d;
        let ffn = 2 * m * d * d + (m + 1) * d;
        let ln = 2 * d;
        let fe = self.conv_layers * (self.conv_kernel * d * d + d) + 3 * ln + attn + ffn;
        let cmca = attn + ffn + 2 * ln;
        let mut total = d * (self.d_v + self.d_q);
        total += match self.encoder_mode {
            EncoderMode::Full | EncoderMode::CmcaThenFe => fe + 2 * cmca,
            EncoderMode::UnsharedFe => 2 * fe + 2 * cmca,
            EncoderMode::NoFe => 2 * cmca,
            EncoderMode::NoCmca => fe,
            EncoderMode::NoFeNoCmca => 0,
        };
        let seq = self.query_len + self.clips + 1;
        total += d + seq * d + self.layers * (2 * ln + attn + ffn);
        if self.final_ln {
            total += ln;
        }
        let h = d / 2;
        total += d * d + d + d * h + h + h * 2 + 2;
        total += d + 1;
        if self.no_token {
            total += d;
        }
        total
    }
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[1, 2]` predicted `(center, width)`.
    pub moment: Var,
    /// `[T]` foreground scores, when the classification head ran.
    pub scores: Option<Var>,
    /// `[1, T]` attentive pooling weights (no-token variant only).
    pub pooling: Option<Var>,
    pub co: CoAttended,
    pub transformer: TransformerOutput,
}

/// Model structure. Parameter values live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct Vigt {
    pub config: ModelConfig,
    pub encoder: VideoLanguageEncoder,
    pub transformer: VlTransformer,
    pub reg_head: RegressionHead,
    pub cls_head: ClassificationHead,
    pub attentive_head: Option<AttentiveRegressionHead>,
    cls_calls: AtomicUsize,
    reg_token_calls: AtomicUsize,
}

impl Vigt {
    /// Builds the model and registers freshly initialised parameters.
    pub fn new<E: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<E>)> {
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn build<E: Scalar>(
        config: ModelConfig,
        store: &mut ParamStore<E>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = VideoLanguageEncoder::new(
            store,
            &config.encoder_dims(),
            config.encoder_mode,
            &mut rng,
        )?;
        let transformer = VlTransformer::new(
            store,
            config.transformer_dims(),
            config.dropout,
            config.final_ln,
            !config.no_token,
            &mut rng,
        )?;
        let reg_head = RegressionHead::new(store, "head.reg", config.d, &mut rng)?;
        let cls_head = ClassificationHead::new(store, "head.cls", config.d, &mut rng)?;
        let attentive_head = if config.no_token {
            Some(AttentiveRegressionHead::new(
                store,
                "head.attentive",
                config.d,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            encoder,
            transformer,
            reg_head,
            cls_head,
            attentive_head,
            cls_calls: AtomicUsize::new(0),
            reg_token_calls: AtomicUsize::new(0),
        })
    }

    /// How many times the classification head has run.
    pub fn cls_head_calls(&self) -> usize {
        self.cls_calls.load(Ordering::Relaxed)
    }

    /// How many times the regression head has run on the token output.
    pub fn token_head_calls(&self) -> usize {
        self.reg_token_calls.load(Ordering::Relaxed)
    }

    fn check_inputs<E: Scalar>(&self, video: &Tensor<E>, query: &Tensor<E>) -> Result<()> {
        let c = &self.config;
        if video.shape() != [c.clips, c.d_v] {
            return Err(VigtError::dim(format!(
                "video features {:?} do not match model [{}, {}]",
                video.shape(),
                c.clips,
                c.d_v
            )));
        }
        if query.shape() != [c.query_len, c.d_q] {
            return Err(VigtError::dim(format!(
                "query features {:?} do not match model [{}, {}]",
                query.shape(),
                c.query_len,
                c.d_q
            )));
        }
        Ok(())
    }

    /// Full forward pass. The classification head runs only when
    /// `with_cls` is set (training); prediction uses the regression path.
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        video: &Tensor<E>,
        query: &Tensor<E>,
        with_cls: bool,
    ) -> Result<ForwardOutput> {
        self.check_inputs(video, query)?;
        let v = g.input(video.clone());
        let q = g.input(query.clone());
        let co = self.encoder.forward(g, v, q)?;
        let tr = self.transformer.forward(g, co.q_star, co.v_star)?;
        let (moment, pooling) = match (&self.attentive_head, tr.f_r_hat) {
            (Some(head), _) => {
                let (m, w) = head.forward(g, tr.v_hat_star, &self.reg_head)?;
                (m, Some(w))
            }
            (None, Some(tok)) => {
                self.reg_token_calls.fetch_add(1, Ordering::Relaxed);
                (self.reg_head.forward(g, tok)?, None)
            }
            (None, None) => unreachable!("token disabled without an attentive head"),
        };
        let scores = if with_cls {
            self.cls_calls.fetch_add(1, Ordering::Relaxed);
            Some(self.cls_head.forward(g, tr.v_hat_star)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            moment,
            scores,
            pooling,
            co,
            transformer: tr,
        })
    }

    /// Eval-mode prediction through the regression path only.
    pub fn predict<E: Scalar>(
        &self,
        store: &ParamStore<E>,
        video: &Tensor<E>,
        query: &Tensor<E>,
    ) -> Result<Moment> {
        let mut g = Graph::eval(store);
        let out = self.forward(&mut g, video, query, false)?;
        Ok(read_moment(&g, out.moment))
    }

    /// Forward plus the multi-task loss for one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        video: &Tensor<E>,
        query: &Tensor<E>,
        gt: Moment,
        weights: LossWeights,
        terms: LossTerms,
    ) -> Result<(LossVars, ForwardOutput)> {
        let out = self.forward(g, video, query, terms.cls)?;
        let labels = make_foreground_labels(gt.to_interval(), self.config.clips);
        let loss = total_loss_var(g, out.moment, gt, out.scores, &labels, weights, terms)?;
        Ok((loss, out))
    }
}
