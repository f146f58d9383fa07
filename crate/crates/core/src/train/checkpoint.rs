//! Checkpoints in the named-array container.
//!
//! Entries: `meta/version`, `meta/step`, `param/<name>`, `adam/m/<name>`,
//! `adam/v/<name>`. The configuration snapshot is written next to the
//! container as `<path>.cfg` in the `key = value` format.

use std::path::{Path, PathBuf};

use super::adam::Adam;
use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::data::container::{ArrayFile, NamedArray};
use crate::data::GroundingSample;
use crate::error::{Result, VigtError};
use crate::model::{ModelConfig, Vigt};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_checkpoint<E: Scalar>(path: impl AsRef<Path>, trainer: &Trainer<E>) -> Result<()> {
    let path = path.as_ref();
    let mut f = ArrayFile::new();
    f.push(NamedArray::from_tensor(
        "meta/version",
        &Tensor::<f64>::scalar(CHECKPOINT_VERSION as f64),
    ));
    f.push(NamedArray::from_tensor(
        "meta/step",
        &Tensor::<f64>::scalar(trainer.adam.step as f64),
    ));
    for (id, p) in trainer.store.iter() {
        f.push(NamedArray::from_tensor(
            format!("param/{}", p.name),
            &p.value,
        ));
        f.push(NamedArray::from_tensor(
            format!("adam/m/{}", p.name),
            &trainer.adam.m[id.index()],
        ));
        f.push(NamedArray::from_tensor(
            format!("adam/v/{}", p.name),
            &trainer.adam.v[id.index()],
        ));
    }
    f.save(path)?;
    std::fs::write(config_path(path), trainer.config.to_kv())?;
    Ok(())
}

fn entry<'f>(f: &'f ArrayFile, name: &str) -> Result<&'f NamedArray> {
    f.get(name)
        .ok_or_else(|| VigtError::Load(format!("checkpoint has no entry `{name}`")))
}

fn tensor_like<E: Scalar>(f: &ArrayFile, name: &str, shape: &[usize]) -> Result<Tensor<E>> {
    let a = entry(f, name)?;
    if a.dims != shape {
        return Err(VigtError::Load(format!(
            "entry `{name}` has shape {:?}, model expects {shape:?}",
            a.dims
        )));
    }
    a.to_tensor()
        .map_err(|e| VigtError::Load(format!("entry `{name}`: {e}")))
}

/// Restores model, parameters and optimizer state.
pub fn load_checkpoint<E: Scalar>(path: impl AsRef<Path>) -> Result<Trainer<E>> {
    let path = path.as_ref();
    let cfg_text = std::fs::read_to_string(config_path(path)).map_err(|e| {
        VigtError::Load(format!(
            "cannot read config snapshot {}: {e}",
            config_path(path).display()
        ))
    })?;
    let config = TrainConfig::from_kv(TrainConfig::default(), &cfg_text)?;
    let f = ArrayFile::load(path).map_err(|e| match e {
        VigtError::Io(io) => VigtError::Load(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let version = entry(&f, "meta/version")?.values_f64();
    if version != [CHECKPOINT_VERSION as f64] {
        return Err(VigtError::Load(format!(
            "unsupported checkpoint version {version:?}"
        )));
    }
    let step = entry(&f, "meta/step")?.values_f64();
    let step = match step.as_slice() {
        [s] if *s >= 0.0 && s.fract() == 0.0 => *s as u64,
        _ => return Err(VigtError::Load(format!("bad step counter {step:?}"))),
    };

    let (model, mut store) = Vigt::new::<E>(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(config.adam, &store)?;
    adam.step = step;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (name, shape) = {
            let p = store.get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        *store.value_mut(id) = tensor_like(&f, &format!("param/{name}"), &shape)?;
        adam.m[id.index()] = tensor_like(&f, &format!("adam/m/{name}"), &shape)?;
        adam.v[id.index()] = tensor_like(&f, &format!("adam/v/{name}"), &shape)?;
    }
    let expected = 2 + 3 * store.len();
    if f.entries.len() != expected {
        return Err(VigtError::Load(format!(
            "checkpoint has {} entries, model needs {expected}",
            f.entries.len()
        )));
    }
    Ok(Trainer {
        config,
        model,
        store,
        adam,
    })
}

/// Rejects samples whose feature shapes do not fit `cfg`.
pub fn check_sample_dims(cfg: &ModelConfig, s: &GroundingSample) -> Result<()> {
    let want_v = [cfg.clips, cfg.d_v];
    let want_q = [cfg.query_len, cfg.d_q];
    if s.video.shape() != want_v || s.query.shape() != want_q {
        return Err(VigtError::Load(format!(
            "sample {} has video {:?} / query {:?}, checkpoint expects {want_v:?} / {want_q:?}",
            s.sample_id,
            s.video.shape(),
            s.query.shape()
        )));
    }
    Ok(())
}
