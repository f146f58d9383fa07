//! Planted-moment synthetic benchmark.
//!
//! Each sample draws a latent concept code, plants its video projection on
//! every clip whose centre falls inside a random interval, and builds the
//! query from noisy copies of the concept's text projection. Everything is a
//! pure function of the config and the sample id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::GroundingSample;
use crate::error::{Result, VigtError};
use crate::heads::{moment_to_interval, Moment};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips: usize,
    pub query_len: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub n_concepts: usize,
    /// Dimension of the latent concept codes.
    pub code_dim: usize,
    pub noise_std: f64,
    pub min_width: f64,
    pub max_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips: 32,
            query_len: 6,
            d_v: 64,
            d_q: 32,
            n_concepts: 16,
            code_dim: 16,
            noise_std: 0.5,
            min_width: 0.1,
            max_width: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.query_len == 0 || self.d_v == 0 || self.d_q == 0 {
            return Err(VigtError::config("synthetic dims must be positive"));
        }
        if self.code_dim == 0 {
            return Err(VigtError::config("code_dim must be positive"));
        }
        if self.n_concepts < 2 {
            return Err(VigtError::config("need at least two concepts"));
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width && self.max_width <= 1.0) {
            return Err(VigtError::config(format!(
                "width range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_width, self.max_width
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(VigtError::config(
                "noise_std must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// Fixed per-seed world: concept codes and the two modality projections.
#[derive(Debug, Clone)]
pub struct PlantedWorld {
    /// `[n_concepts][code_dim]`, unit norm.
    pub codes: Vec<Vec<f64>>,
    /// Video-side signal per concept, `[n_concepts][d_v]`.
    pub video_signal: Vec<Vec<f64>>,
    /// Query-side signal per concept, `[n_concepts][d_q]`.
    pub query_signal: Vec<Vec<f64>>,
}

impl PlantedWorld {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gauss =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let codes: Vec<Vec<f64>> = (0..cfg.n_concepts)
            .map(|_| {
                let v = gauss(cfg.code_dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let proj_v = gauss(cfg.code_dim * cfg.d_v);
        let proj_q = gauss(cfg.code_dim * cfg.d_q);
        let project = |code: &[f64], proj: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| {
                    code.iter()
                        .enumerate()
                        .map(|(i, c)| c * proj[i * out + j])
                        .sum()
                })
                .collect()
        };
        Self {
            video_signal: codes.iter().map(|c| project(c, &proj_v, cfg.d_v)).collect(),
            query_signal: codes.iter().map(|c| project(c, &proj_q, cfg.d_q)).collect(),
            codes,
        }
    }
}

/// Combines two integers into a well-mixed seed (splitmix64 finaliser).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-sample RNG derived from `(seed, sample_id)`.
pub fn sample_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, sample_id))
}

/// One sample with id `sample_id`.
pub fn generate_one(
    cfg: &SynthConfig,
    world: &PlantedWorld,
    sample_id: u64,
) -> Result<GroundingSample> {
    let mut rng = sample_rng(cfg.seed, sample_id);
    let concept = rng.random_range(0..cfg.n_concepts);
    let width = if cfg.max_width > cfg.min_width {
        rng.random_range(cfg.min_width..=cfg.max_width)
    } else {
        cfg.min_width
    };
    let half = 0.5 * width;
    let center = if 1.0 - width > 0.0 {
        half + rng.random::<f64>() * (1.0 - width)
    } else {
        0.5
    };
    let moment = Moment::new(center, width);
    let interval = moment_to_interval(moment);

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if cfg.noise_std > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };
    let signal_v = &world.video_signal[concept];
    let mut video = Vec::with_capacity(cfg.clips * cfg.d_v);
    for t in 0..cfg.clips {
        let c = (t as f64 + 0.5) / cfg.clips as f64;
        let inside = c >= interval.start && c <= interval.end;
        for &s in signal_v.iter() {
            let base = if inside { s } else { 0.0 };
            video.push(base + draw(&mut rng));
        }
    }
    let signal_q = &world.query_signal[concept];
    let mut query = Vec::with_capacity(cfg.query_len * cfg.d_q);
    for _ in 0..cfg.query_len {
        for &s in signal_q.iter() {
            query.push(s + draw(&mut rng));
        }
    }
    Ok(GroundingSample {
        sample_id,
        video: Tensor::new(vec![cfg.clips, cfg.d_v], video)?,
        query: Tensor::new(vec![cfg.query_len, cfg.d_q], query)?,
        gt_moment: moment,
        gt_interval: interval,
        concept: Some(concept),
    })
}

/// `n` samples with ids `0..n`.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<GroundingSample>> {
    generate_range(cfg, 0, n)
}

/// `n` samples with ids `first_id..first_id + n`, e.g. a held-out split
/// drawn from the same world.
pub fn generate_range(cfg: &SynthConfig, first_id: u64, n: usize) -> Result<Vec<GroundingSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(VigtError::Usage("sample count must be at least 1".into()));
    }
    let world = PlantedWorld::new(cfg);
    (0..n as u64)
        .map(|i| generate_one(cfg, &world, first_id + i))
        .collect()
}
