//! Mini-batch training loop and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::data::synth::mix_seed;
use crate::data::GroundingSample;
use crate::error::{Result, VigtError};
use crate::heads::{moment_to_interval, Moment};
use crate::metrics::{EvalRecord, MetricSummary};
use crate::model::Vigt;
use crate::objectives::LossBreakdown;
use crate::tensor::{Gradients, Graph, ParamStore, Scalar, Tensor};

/// A sample with features already converted to the run's precision.
#[derive(Debug, Clone)]
pub struct Prepared<E> {
    pub query_id: String,
    pub video: Tensor<E>,
    pub query: Tensor<E>,
    pub gt: Moment,
}

impl<E: Scalar> Prepared<E> {
    pub fn new(s: &GroundingSample) -> Self {
        Self {
            query_id: s.query_id(),
            video: s.video.cast(),
            query: s.query.cast(),
            gt: s.gt_moment,
        }
    }
}

pub fn prepare<E: Scalar>(samples: &[GroundingSample]) -> Vec<Prepared<E>> {
    samples.iter().map(Prepared::new).collect()
}

/// Batch-mean loss terms for one optimizer step (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Sample indices for optimizer step `step` (0-based): consecutive slices of
/// a per-epoch shuffle of `0..n`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch as u64 {
        let pos = step * batch as u64 + i;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                seed ^ 0x5EED,
                epoch,
            )));
            cached = Some((epoch, perm));
        }
        let perm = &cached.as_ref().expect("filled").1;
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

pub struct Trainer<E: Scalar> {
    pub config: TrainConfig,
    pub model: Vigt,
    pub store: ParamStore<E>,
    pub adam: Adam<E>,
}

impl<E: Scalar> Trainer<E> {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Vigt::new::<E>(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.adam, &store)?;
        Ok(Self {
            config,
            model,
            store,
            adam,
        })
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Summed per-sample gradients over `batch`, scaled by `1 / |batch|`,
    /// plus the batch-mean loss terms.
    pub fn batch_gradients(
        &self,
        data: &[Prepared<E>],
        batch: &[usize],
    ) -> Result<(Gradients<E>, LossBreakdown)> {
        let step = self.step();
        let mut grads = Gradients::empty(self.store.len());
        let mut mean = LossBreakdown::default();
        for (i, &idx) in batch.iter().enumerate() {
            let s = &data[idx];
            let seed = mix_seed(mix_seed(self.config.seed, step), i as u64);
            let mut g = Graph::new(&self.store, true, seed);
            let (loss, _) = self.model.loss(
                &mut g,
                &s.video,
                &s.query,
                s.gt,
                self.config.weights,
                self.config.terms,
            )?;
            let b = loss.breakdown;
            if !b.total.is_finite() {
                return Err(VigtError::Numeric(format!(
                    "non-finite loss {} at step {} on sample {}",
                    b.total,
                    step + 1,
                    s.query_id
                )));
            }
            mean.smooth_l1 += b.smooth_l1;
            mean.giou += b.giou;
            mean.cls += b.cls;
            mean.total += b.total;
            g.backward(loss.total)?;
            grads.add_assign(&g.param_grads());
        }
        let k = 1.0 / batch.len() as f64;
        grads.scale(E::from_f64_lossy(k));
        mean.smooth_l1 *= k;
        mean.giou *= k;
        mean.cls *= k;
        mean.total *= k;
        Ok((grads, mean))
    }

    /// One optimizer step. On error nothing is updated, so the current
    /// parameters remain the last good state.
    pub fn train_step(&mut self, data: &[Prepared<E>]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(VigtError::Usage("empty training set".into()));
        }
        let batch = batch_indices(
            self.config.seed,
            self.step(),
            data.len(),
            self.config.batch_size,
        );
        let (grads, loss) = self.batch_gradients(data, &batch)?;
        self.adam.update(&mut self.store, &grads)?;
        Ok(StepLog {
            step: self.step(),
            loss,
        })
    }

    /// Runs until `config.max_steps` steps have been taken in total.
    pub fn train(
        &mut self,
        data: &[Prepared<E>],
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while (self.step() as usize) < self.config.max_steps {
            let log = self.train_step(data)?;
            on_step(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn evaluate(&self, data: &[Prepared<E>]) -> Result<Evaluation> {
        evaluate(&self.model, &self.store, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: MetricSummary,
    pub records: Vec<EvalRecord>,
}

/// Eval-mode predictions (regression path only) and their metrics.
pub fn evaluate<E: Scalar>(
    model: &Vigt,
    store: &ParamStore<E>,
    data: &[Prepared<E>],
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(VigtError::Usage("empty evaluation set".into()));
    }
    let records = data
        .iter()
        .map(|s| {
            let m = model.predict(store, &s.video, &s.query)?;
            Ok(EvalRecord {
                query_id: s.query_id.clone(),
                predicted: moment_to_interval(m),
                ground_truth: moment_to_interval(s.gt),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        summary: MetricSummary::compute(&records)?,
        records,
    })
}

/// `step,total,smooth_l1,giou,cls` rows.
pub fn write_loss_log<W: Write>(mut w: W, logs: &[StepLog]) -> Result<()> {
    writeln!(w, "step,total,smooth_l1,giou,cls")?;
    for l in logs {
        let b = &l.loss;
        writeln!(
            w,
            "{},{},{},{},{}",
            l.step, b.total, b.smooth_l1, b.giou, b.cls
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny() -> (TrainConfig, SynthConfig) {
        let mut cfg = TrainConfig::toy();
        cfg.model = ModelConfig {
            d_v: 12,
            d_q: 10,
            d: 16,
            heads: 2,
            clips: 8,
            query_len: 4,
            layers: 1,
            conv_layers: 1,
            conv_kernel: 3,
            ..ModelConfig::toy()
        };
        cfg.batch_size = 4;
        cfg.max_steps = 3;
        let synth = SynthConfig {
            clips: 8,
            query_len: 4,
            d_v: 12,
            d_q: 10,
            ..SynthConfig::default()
        };
        (cfg, synth)
    }

    #[test]
    fn batches_cover_each_epoch() {
        let n = 10;
        let mut seen = Vec::new();
        for step in 0..5 {
            seen.extend(batch_indices(3, step, n, 2));
        }
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (mut cfg, synth) = tiny();
        cfg.adam.lr = 0.0;
        let data = prepare::<f64>(&generate(&synth, 8).unwrap());
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let before = t.store.clone();
        t.train(&data, |_, _| Ok(())).unwrap();
        assert_eq!(t.step(), 3);
        for ((_, a), (_, b)) in before.iter().zip(t.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn evaluation_never_runs_the_cls_head() {
        let (cfg, synth) = tiny();
        let data = prepare::<f32>(&generate(&synth, 5).unwrap());
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.train_step(&data).unwrap();
        let calls = t.model.cls_head_calls();
        assert_eq!(calls, 4);
        let ev = t.evaluate(&data).unwrap();
        assert_eq!(ev.records.len(), 5);
        assert_eq!(t.model.cls_head_calls(), calls);
    }

    #[test]
    fn empty_sets_rejected() {
        let (cfg, _) = tiny();
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        assert!(matches!(t.train_step(&[]), Err(VigtError::Usage(_))));
        assert!(matches!(t.evaluate(&[]), Err(VigtError::Usage(_))));
    }

    #[test]
    fn nan_input_aborts_without_update() {
        let (cfg, synth) = tiny();
        let mut samples = generate(&synth, 4).unwrap();
        for s in &mut samples {
            s.video.data_mut()[0] = f64::NAN;
        }
        let data = prepare::<f64>(&samples);
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let before = t.store.clone();
        assert!(matches!(t.train_step(&data), Err(VigtError::Numeric(_))));
        assert_eq!(t.step(), 0);
        for ((_, a), (_, b)) in before.iter().zip(t.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
