//! Video-language transformer over `[REG; Q*; V*] + f_pos`.

use rand::Rng;

use crate::error::{Result, VigtError};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensor::{AttnMap, Graph, ParamId, ParamStore, Scalar, Var};

/// Pre-norm block: `z' = MSA(LN(z)) + z; z = FFN(LN(z')) + z'`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_mult * d, rng)?,
        })
    }

    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        z: Var,
        dropout: f64,
    ) -> Result<(Var, AttnMap)> {
        let n = self.ln_attn.forward(g, z)?;
        let (a, map) = self.attn.forward(g, n, n, dropout)?;
        let z1 = g.add(a, z)?;
        let n = self.ln_ffn.forward(g, z1)?;
        let f = self.ffn.forward(g, n)?;
        Ok((g.add(f, z1)?, map))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerDims {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub query_len: usize,
    pub clips: usize,
    pub ffn_mult: usize,
}

/// The `[REG]` token, the learned position table and the block stack.
#[derive(Debug, Clone)]
pub struct VlTransformer {
    /// `f_r: [d]`
    pub reg_token: ParamId,
    /// `f_pos: [L + T + 1, d]`
    pub pos_table: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: Option<LayerNorm>,
    pub dims: TransformerDims,
    pub dropout: f64,
    /// When false the token is left out of the sequence and positions
    /// `1..=L+T` of the table are used for the query and video.
    pub use_token: bool,
}

/// Output of [`VlTransformer::forward`].
#[derive(Debug, Clone)]
pub struct TransformerOutput {
    /// `[1, d]`, absent when the token is disabled.
    pub f_r_hat: Option<Var>,
    /// `[T, d]`
    pub v_hat_star: Var,
    /// `[L, d]`
    pub q_hat_star: Var,
    /// One `[heads, S, S]` map per block.
    pub attn_by_layer: Vec<AttnMap>,
    pub query_len: usize,
    pub clips: usize,
}

impl VlTransformer {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        dims: TransformerDims,
        dropout: f64,
        final_ln: bool,
        use_token: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = dims.d;
        let seq = dims.query_len + dims.clips + 1;
        let reg_token = store.register_normal("transformer.reg_token", &[d], 0.02, rng)?;
        let pos_table = store.register_normal("transformer.pos_table", &[seq, d], 0.02, rng)?;
        let blocks = (0..dims.layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("transformer.block{i}"),
                    d,
                    dims.heads,
                    dims.ffn_mult,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = if final_ln {
            Some(LayerNorm::new(store, "transformer.final_ln", d)?)
        } else {
            None
        };
        Ok(Self {
            reg_token,
            pos_table,
            blocks,
            final_ln,
            dims,
            dropout,
            use_token,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.dims.query_len + self.dims.clips + 1
    }

    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<'_, E>,
        q_star: Var,
        v_star: Var,
    ) -> Result<TransformerOutput> {
        let d = self.dims.d;
        let (qs, vs) = (g.shape(q_star).to_vec(), g.shape(v_star).to_vec());
        if qs.len() != 2 || vs.len() != 2 || qs[1] != d || vs[1] != d {
            return Err(VigtError::dim(format!(
                "transformer inputs {qs:?} / {vs:?} must have model dimension {d}"
            )));
        }
        let (l, t) = (qs[0], vs[0]);
        let pos = g.param(self.pos_table);
        let table_len = g.shape(pos)[0];
        if table_len != l + t + 1 {
            return Err(VigtError::config(format!(
                "position table has {table_len} rows but the sequence needs {} (L={l}, T={t})",
                l + t + 1
            )));
        }
        let (z0, offset) = if self.use_token {
            let tok = g.param(self.reg_token);
            let tok = g.reshape(tok, &[1, d])?;
            let seq = g.concat_rows(&[tok, q_star, v_star])?;
            (g.add(seq, pos)?, 1)
        } else {
            let seq = g.concat_rows(&[q_star, v_star])?;
            let p = g.slice_rows(pos, 1, l + t)?;
            (g.add(seq, p)?, 0)
        };

        let mut z = z0;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, map) = block.forward(g, z, self.dropout)?;
            z = next;
            maps.push(map);
        }
        if let Some(ln) = &self.final_ln {
            z = ln.forward(g, z)?;
        }
        let f_r_hat = if self.use_token {
            Some(g.slice_rows(z, 0, 1)?)
        } else {
            None
        };
        Ok(TransformerOutput {
            f_r_hat,
            q_hat_star: g.slice_rows(z, offset, l)?,
            v_hat_star: g.slice_rows(z, offset + l, t)?,
            attn_by_layer: maps,
            query_len: l,
            clips: t,
        })
    }
}

fn token_slice(out: &TransformerOutput, start: usize, len: usize) -> Option<Vec<Vec<f64>>> {
    out.f_r_hat?;
    Some(
        out.attn_by_layer
            .iter()
            .map(|map| {
                (start..start + len)
                    .map(|c| {
                        (0..map.heads).map(|h| map.get(h, 0, c)).sum::<f64>() / map.heads as f64
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Head-averaged attention of the token over the video positions,
/// `[layers][T]`. `None` when the model runs without the token.
pub fn token_video_attention(out: &TransformerOutput) -> Option<Vec<Vec<f64>>> {
    token_slice(out, 1 + out.query_len, out.clips)
}

/// Head-averaged attention of the token over the query tokens, `[layers][L]`.
pub fn token_query_attention(out: &TransformerOutput) -> Option<Vec<Vec<f64>>> {
    token_slice(out, 1, out.query_len)
}

/// Head-averaged attention of the token on itself, `[layers]`.
pub fn token_self_attention(out: &TransformerOutput) -> Option<Vec<f64>> {
    token_slice(out, 0, 1).map(|m| m.into_iter().map(|r| r[0]).collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::reference::{self as oracle, random_mat, to_mat};
    use crate::tensor::Tensor;

    fn build(
        layers: usize,
        heads: usize,
        final_ln: bool,
        use_token: bool,
    ) -> (VlTransformer, ParamStore<f64>) {
        let dims = TransformerDims {
            d: 16,
            heads,
            layers,
            query_len: 4,
            clips: 8,
            ffn_mult: 4,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(layers as u64 * 10 + heads as u64);
        let tr = VlTransformer::new(&mut store, dims, 0.1, final_ln, use_token, &mut rng).unwrap();
        (tr, store)
    }

    fn zero(store: &mut ParamStore<f64>, name: &str) {
        let p = store.by_name_mut(name).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }

    /// Runs in eval mode and returns the final sequence `[tok; q; v]` and the
    /// output record.
    fn run(tr: &VlTransformer, store: &ParamStore<f64>) -> (Vec<Vec<f64>>, TransformerOutput) {
        let mut g = Graph::eval(store);
        let (q, v) = (g.input(random_mat(4, 16, 1)), g.input(random_mat(8, 16, 2)));
        let out = tr.forward(&mut g, q, v).unwrap();
        let mut rows = Vec::new();
        if let Some(tok) = out.f_r_hat {
            rows.extend(to_mat(g.value(tok)));
        }
        rows.extend(to_mat(g.value(out.q_hat_star)));
        rows.extend(to_mat(g.value(out.v_hat_star)));
        (rows, out)
    }

    fn token_plus_pos(store: &ParamStore<f64>) -> Vec<Vec<f64>> {
        let tok = oracle::param(store, "transformer.reg_token");
        let pos = oracle::param(store, "transformer.pos_table");
        vec![tok.iter().zip(&pos[..16]).map(|(a, b)| a + b).collect()]
    }

    #[test]
    fn empty_stack_is_layer_norm_of_the_token() {
        let (tr, store) = build(0, 2, true, true);
        let (rows, out) = run(&tr, &store);
        assert!(out.attn_by_layer.is_empty());
        let want = oracle::layer_norm(&store, "transformer.final_ln", &token_plus_pos(&store));
        assert!(oracle::max_abs_diff(&rows[..1].to_vec(), &want) < 1e-13);
    }

    #[test]
    fn zero_output_projections_pass_the_input_through() {
        let (tr, mut store) = build(2, 2, true, true);
        for b in 0..2 {
            for n in [
                "attn.output.weight",
                "attn.output.bias",
                "ffn.down.weight",
                "ffn.down.bias",
            ] {
                zero(&mut store, &format!("transformer.block{b}.{n}"));
            }
        }
        let (rows, _) = run(&tr, &store);
        let want = oracle::layer_norm(&store, "transformer.final_ln", &token_plus_pos(&store));
        assert!(oracle::max_abs_diff(&rows[..1].to_vec(), &want) < 1e-15);
    }

    #[test]
    fn matches_oracle() {
        for (final_ln, use_token) in [(true, true), (false, true), (true, false)] {
            let (tr, store) = build(2, 2, final_ln, use_token);
            let (rows, out) = run(&tr, &store);
            let (want, maps) = oracle::vl_transformer(
                &store,
                &to_mat(&random_mat(4, 16, 1)),
                &to_mat(&random_mat(8, 16, 2)),
                2,
                2,
                use_token,
            );
            assert!(
                oracle::max_abs_diff(&rows, &want) < 1e-10,
                "final_ln={final_ln} token={use_token}"
            );
            let s = if use_token { 13 } else { 12 };
            for (layer, map) in out.attn_by_layer.iter().enumerate() {
                assert_eq!((map.heads, map.rows, map.cols), (2, s, s));
                for h in 0..2 {
                    for r in 0..s {
                        for c in 0..s {
                            assert!((map.get(h, r, c) - maps[layer][h][r][c]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_slices() {
        let (tr, mut store) = build(1, 1, true, true);
        zero(&mut store, "transformer.block0.attn.query.weight");
        zero(&mut store, "transformer.block0.attn.query.bias");
        let (_, out) = run(&tr, &store);
        let u = 1.0 / 13.0;
        for row in token_video_attention(&out).unwrap() {
            assert_eq!(row.len(), 8);
            assert!(row.iter().all(|a| (a - u).abs() < 1e-15));
        }
        for row in token_query_attention(&out).unwrap() {
            assert_eq!(row.len(), 4);
            assert!(row.iter().all(|a| (a - u).abs() < 1e-15));
        }
    }

    #[test]
    fn token_slices_match_index_arithmetic() {
        let (tr, store) = build(3, 4, true, true);
        let (_, out) = run(&tr, &store);
        let video = token_video_attention(&out).unwrap();
        let query = token_query_attention(&out).unwrap();
        let own = token_self_attention(&out).unwrap();
        assert_eq!(video.len(), 3);
        for (n, map) in out.attn_by_layer.iter().enumerate() {
            // row 0 of the flat [heads, S, S] buffer for each head
            let mean_at =
                |c: usize| -> f64 { (0..4).map(|h| map.data[h * 13 * 13 + c]).sum::<f64>() / 4.0 };
            for j in 0..8 {
                assert_eq!(video[n][j], mean_at(5 + j));
            }
            for i in 0..4 {
                assert_eq!(query[n][i], mean_at(1 + i));
            }
            assert_eq!(own[n], mean_at(0));
            let total = own[n] + query[n].iter().sum::<f64>() + video[n].iter().sum::<f64>();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(video[n].iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn no_token_has_no_token_outputs() {
        let (tr, store) = build(2, 2, true, false);
        let (rows, out) = run(&tr, &store);
        assert!(out.f_r_hat.is_none());
        assert_eq!(rows.len(), 12);
        assert!(token_video_attention(&out).is_none());
        assert!(token_query_attention(&out).is_none());
    }

    #[test]
    fn token_receives_gradient() {
        let (tr, store) = build(2, 2, true, true);
        let mut g = Graph::new(&store, true, 5);
        let (q, v) = (g.input(random_mat(4, 16, 1)), g.input(random_mat(8, 16, 2)));
        let out = tr.forward(&mut g, q, v).unwrap();
        let w = g.input(random_mat(1, 16, 3));
        let p = g.mul(out.f_r_hat.unwrap(), w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let grad = g.param_grads();
        let tok = grad.get(tr.reg_token).unwrap();
        assert!(tok.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_lengths_are_checked() {
        let (tr, store) = build(2, 2, true, true);
        assert_eq!(run(&tr, &store).0, run(&tr, &store).0);
        let mut g = Graph::eval(&store);
        let (q, v) = (g.input(random_mat(4, 16, 1)), g.input(random_mat(9, 16, 2)));
        assert!(matches!(
            tr.forward(&mut g, q, v),
            Err(VigtError::Config(_))
        ));
        assert_eq!(
            store
                .by_name("transformer.pos_table")
                .unwrap()
                .value
                .shape(),
            &[13, 16]
        );
    }
}
