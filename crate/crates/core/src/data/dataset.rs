//! Feature-file datasets.
//!
//! A dataset is a JSON-lines file, one record per sample:
//!
//! ```text
//! {"sample_id":3,"gt_start":0.21,"gt_end":0.48,"video":"video/3","query":"query/3"}
//! ```
//!
//! `video` and `query` name arrays in the sidecar container `<path>.arr`
//! (or in the file given by an optional `container` field, relative to the
//! dataset's directory). Video arrays are `[T', d_v]` and are pooled to the
//! model's clip count; query arrays are `[L', d_q]` and are zero-padded or
//! truncated to the model's query length.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{ArrayFile, NamedArray};
use super::GroundingSample;
use crate::error::{Result, VigtError};
use crate::heads::Interval;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    sample_id: u64,
    gt_start: f64,
    gt_end: f64,
    video: String,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    container: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arr");
    PathBuf::from(s)
}

/// Writes `samples` as `path` plus its `.arr` sidecar.
pub fn save_dataset(path: impl AsRef<Path>, samples: &[GroundingSample]) -> Result<()> {
    let path = path.as_ref();
    let mut arrays = ArrayFile::new();
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = Record {
            sample_id: s.sample_id,
            gt_start: s.gt_interval.start,
            gt_end: s.gt_interval.end,
            video: format!("video/{}", s.sample_id),
            query: format!("query/{}", s.sample_id),
            container: None,
        };
        arrays.push(NamedArray::from_tensor(rec.video.clone(), &s.video));
        arrays.push(NamedArray::from_tensor(rec.query.clone(), &s.query));
        let line = serde_json::to_string(&rec).map_err(|e| VigtError::format(0, e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    arrays.save(sidecar_path(path))
}

/// Uniform mean pooling of `[n, d]` rows onto `clips` rows. Output row `t`
/// averages input rows `floor(t·n/clips) .. max(floor((t+1)·n/clips), lo+1)`,
/// so shorter inputs repeat rows and equal lengths pass through unchanged.
pub fn resample_clips(x: &Tensor<f64>, clips: usize) -> Result<Tensor<f64>> {
    if x.rank() != 2 || clips == 0 {
        return Err(VigtError::dim(format!(
            "cannot resample {:?} onto {clips} clips",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n == clips {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(clips * d);
    for t in 0..clips {
        let lo = t * n / clips;
        let hi = ((t + 1) * n / clips).max(lo + 1);
        let k = (hi - lo) as f64;
        for j in 0..d {
            out.push((lo..hi).map(|r| x.at(r, j)).sum::<f64>() / k);
        }
    }
    Tensor::new(vec![clips, d], out)
}

fn fit_query(x: &Tensor<f64>, len: usize) -> Result<Tensor<f64>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = x.data()[..n.min(len) * d].to_vec();
    data.resize(len * d, 0.0);
    Tensor::new(vec![len, d], data)
}

fn fetch(arrays: &ArrayFile, name: &str, index: usize) -> Result<Tensor<f64>> {
    let a = arrays
        .get(name)
        .ok_or_else(|| VigtError::format(index, format!("array {name:?} not in container")))?;
    if a.dims.len() != 2 || a.dims.contains(&0) {
        return Err(VigtError::format(
            index,
            format!(
                "array {name:?} has shape {:?}, expected [rows, dim]",
                a.dims
            ),
        ));
    }
    let t: Tensor<f64> = a
        .to_tensor()
        .map_err(|e| VigtError::format(index, e.to_string()))?;
    if !t.is_finite() {
        return Err(VigtError::format(
            index,
            format!("array {name:?} has non-finite values"),
        ));
    }
    Ok(t)
}

/// Reads a dataset written by [`save_dataset`] (or by external tooling in
/// the same layout), fitting every sample to `clips × query_len`.
pub fn load_feature_file(
    path: impl AsRef<Path>,
    clips: usize,
    query_len: usize,
) -> Result<Vec<GroundingSample>> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut default_arrays: Option<ArrayFile> = None;
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| VigtError::format(index, format!("malformed record: {e}")))?;
        if !(rec.gt_start.is_finite()
            && rec.gt_end.is_finite()
            && 0.0 <= rec.gt_start
            && rec.gt_start <= rec.gt_end
            && rec.gt_end <= 1.0)
        {
            return Err(VigtError::format(
                index,
                format!(
                    "moment [{}, {}] is not inside [0, 1]",
                    rec.gt_start, rec.gt_end
                ),
            ));
        }
        let other;
        let arrays = match &rec.container {
            Some(c) => {
                other = ArrayFile::load(dir.join(c))?;
                &other
            }
            None => {
                if default_arrays.is_none() {
                    default_arrays = Some(ArrayFile::load(sidecar_path(path))?);
                }
                default_arrays.as_ref().expect("loaded")
            }
        };
        let video = fetch(arrays, &rec.video, index)?;
        let query = fetch(arrays, &rec.query, index)?;
        let here = (video.shape()[1], query.shape()[1]);
        match dims {
            None => dims = Some(here),
            Some(first) if first != here => {
                return Err(VigtError::format(
                    index,
                    format!("feature dims {here:?} differ from earlier records {first:?}"),
                ))
            }
            _ => {}
        }
        let interval = Interval::new(rec.gt_start, rec.gt_end);
        samples.push(GroundingSample {
            sample_id: rec.sample_id,
            video: resample_clips(&video, clips)?,
            query: fit_query(&query, query_len)?,
            gt_moment: interval.to_moment(),
            gt_interval: interval,
            concept: None,
        });
    }
    Ok(samples)
}
