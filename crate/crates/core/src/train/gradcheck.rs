//! Finite-difference check of every parameter gradient of the total loss.
//!
//! Runs at `f64` on a tiny model. Numeric derivatives use the five-point
//! central stencil. An element is skipped when any perturbed forward pass
//! takes a different branch (ReLU side, max/min winner, clamp region) than
//! the unperturbed one, since the loss is not differentiable across those
//! kinks.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::synth::{generate, SynthConfig};
use crate::error::{Result, VigtError};
use crate::model::{ModelConfig, Vigt};
use crate::objectives::{LossTerms, LossWeights};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::Moment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub terms: LossTerms,
    /// Stencil step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub threshold: f64,
    /// Denominator floor of the relative error, so that gradients at
    /// round-off level compare absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_v: 12,
                d_q: 10,
                d: 16,
                heads: 2,
                clips: 8,
                query_len: 4,
                layers: 2,
                ..ModelConfig::toy()
            },
            seed: 7,
            weights: LossWeights::default(),
            terms: LossTerms::ALL,
            step: 1e-4,
            threshold: 1e-4,
            floor: 1e-6,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub params: usize,
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a kink.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst element.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn offenders(&self) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_err < self.threshold))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty() && self.groups.iter().all(|g| g.checked > 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "group,params,checked,kinks,max_rel_err,worst_param")?;
        for g in &self.groups {
            writeln!(
                w,
                "{},{},{},{},{:.3e},{}",
                g.group, g.params, g.checked, g.kinks, g.max_rel_err, g.worst
            )?;
        }
        Ok(())
    }

    /// `Verification` error listing failing groups, if any.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let list: Vec<String> = self
            .offenders()
            .iter()
            .map(|g| format!("{} ({:.3e} in {})", g.group, g.max_rel_err, g.worst))
            .collect();
        Err(VigtError::Verification(format!(
            "gradient check failed for: {}",
            list.join(", ")
        )))
    }
}

/// Parameter group: the first two dot-separated segments of the name.
pub fn param_group(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

struct Problem {
    model: Vigt,
    video: Tensor<f64>,
    query: Tensor<f64>,
    gt: Moment,
    cfg: GradcheckConfig,
}

impl Problem {
    fn loss(&self, store: &ParamStore<f64>) -> Result<(f64, u64)> {
        let mut g = Graph::new(store, true, self.cfg.seed);
        g.track_branches(true);
        let (loss, _) = self.model.loss(
            &mut g,
            &self.video,
            &self.query,
            self.gt,
            self.cfg.weights,
            self.cfg.terms,
        )?;
        Ok((g.scalar(loss.total), g.branch_signature()))
    }
}

/// Runs the check. `corrupt` may tamper with analytic gradients (by
/// parameter name) before comparison, as a negative control.
pub fn gradcheck(
    cfg: &GradcheckConfig,
    corrupt: Option<&dyn Fn(&str, &mut [f64])>,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let m = &cfg.model;
    let synth = SynthConfig {
        clips: m.clips,
        query_len: m.query_len,
        d_v: m.d_v,
        d_q: m.d_q,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let sample = generate(&synth, 1)?.remove(0);
    let (model, mut store) = Vigt::new::<f64>(cfg.model.clone(), cfg.seed)?;
    let problem = Problem {
        model,
        video: sample.video,
        query: sample.query,
        gt: sample.gt_moment,
        cfg: cfg.clone(),
    };

    let analytic = {
        let mut g = Graph::new(&store, true, cfg.seed);
        let (loss, _) = problem.model.loss(
            &mut g,
            &problem.video,
            &problem.query,
            problem.gt,
            cfg.weights,
            cfg.terms,
        )?;
        g.backward(loss.total)?;
        g.param_grads()
    };
    let (_, base_sig) = problem.loss(&store)?;

    let h = cfg.step;
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let n = store.get(id).value.numel();
        let mut grad = analytic
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        if let Some(f) = corrupt {
            f(&name, &mut grad);
        }
        let picks: Vec<usize> = match cfg.max_elements {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let entry = groups
            .entry(param_group(&name))
            .or_insert_with(|| GroupReport {
                group: param_group(&name),
                params: 0,
                checked: 0,
                kinks: 0,
                max_rel_err: 0.0,
                worst: String::new(),
            });
        entry.params += n;
        for k in picks {
            let x0 = store.value(id).data()[k];
            let mut f = [0.0; 4];
            let mut kink = false;
            for (slot, off) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                store.value_mut(id).data_mut()[k] = x0 + off * h;
                let (l, sig) = problem.loss(&store)?;
                f[slot] = l;
                kink |= sig != base_sig;
            }
            store.value_mut(id).data_mut()[k] = x0;
            if kink {
                entry.kinks += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            let a = grad[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            entry.checked += 1;
            if !(err <= entry.max_rel_err) {
                entry.max_rel_err = err;
                entry.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(GradcheckReport {
        threshold: cfg.threshold,
        groups: groups.into_values().collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
