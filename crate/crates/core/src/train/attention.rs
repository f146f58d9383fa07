//! Attention dumps as labelled CSV matrices.
//!
//! Every file has a header `<corner>,<col labels...>` followed by one
//! `<row label>,<values...>` line per row. Values are printed with Rust's
//! shortest round-trip formatting, so reading a file back is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, VigtError};
use crate::model::Vigt;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};
use crate::transformer::{token_query_attention, token_self_attention, token_video_attention};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub corner: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LabeledMatrix {
    pub fn new(corner: &str, row_prefix: &str, col_prefix: &str, rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            corner: corner.to_string(),
            row_labels: (0..rows.len())
                .map(|i| format!("{row_prefix}{i}"))
                .collect(),
            col_labels: (0..cols).map(|j| format!("{col_prefix}{j}")).collect(),
            rows,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},{}", self.corner, self.col_labels.join(","))?;
        for (label, row) in self.row_labels.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{label},{}", vals.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| VigtError::format(0, "empty matrix file"))??;
        let mut cells = header.split(',');
        let corner = cells.next().unwrap_or("").to_string();
        let col_labels: Vec<String> = cells.map(str::to_string).collect();
        let mut row_labels = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            row_labels.push(cells.next().unwrap_or("").to_string());
            let row = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| VigtError::format(i + 1, format!("bad value {c:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != col_labels.len() {
                return Err(VigtError::format(
                    i + 1,
                    format!("{} values for {} columns", row.len(), col_labels.len()),
                ));
            }
            rows.push(row);
        }
        Ok(Self {
            corner,
            row_labels,
            col_labels,
            rows,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }
}

/// Eval-mode attention for one sample. Token maps are `None` for models
/// without the token; the co-attention map is `None` when that stage is
/// bypassed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// `[N_l][T]`
    pub token_video: Option<Vec<Vec<f64>>>,
    /// `[N_l][L]`
    pub token_query: Option<Vec<Vec<f64>>>,
    /// `[N_l]`
    pub token_self: Option<Vec<f64>>,
    /// Full token row, `[N_l][1 + L + T]`.
    pub token_sequence: Option<Vec<Vec<f64>>>,
    /// Video positions over query tokens, `[T][L]`.
    pub cmca_q2v: Option<Vec<Vec<f64>>>,
}

pub fn attention_dump<E: Scalar>(
    model: &Vigt,
    store: &ParamStore<E>,
    video: &Tensor<E>,
    query: &Tensor<E>,
) -> Result<AttentionDump> {
    let mut g = Graph::eval(store);
    let out = model.forward(&mut g, video, query, false)?;
    let tr = &out.transformer;
    let token_sequence = tr.f_r_hat.map(|_| {
        tr.attn_by_layer
            .iter()
            .map(|m| m.head_mean().swap_remove(0))
            .collect()
    });
    Ok(AttentionDump {
        token_video: token_video_attention(tr),
        token_query: token_query_attention(tr),
        token_self: token_self_attention(tr),
        token_sequence,
        cmca_q2v: out.co.attn_q2v.as_ref().map(|m| m.head_mean()),
    })
}

impl AttentionDump {
    /// Writes whichever maps exist into `dir`; returns the paths written.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let mut emit = |name: &str, m: LabeledMatrix| -> Result<()> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path)?);
            m.write_csv(&mut w)?;
            w.flush()?;
            files.push(path);
            Ok(())
        };
        if let Some(rows) = &self.token_video {
            emit(
                "token_video_attention.csv",
                LabeledMatrix::new("layer", "layer", "clip", rows.clone()),
            )?;
        }
        if let Some(rows) = &self.token_query {
            emit(
                "token_query_attention.csv",
                LabeledMatrix::new("layer", "layer", "token", rows.clone()),
            )?;
        }
        if let Some(rows) = &self.token_sequence {
            let mut m = LabeledMatrix::new("layer", "layer", "", rows.clone());
            let l = self
                .token_query
                .as_ref()
                .map_or(0, |q| q.first().map_or(0, Vec::len));
            m.col_labels = (0..m.col_labels.len())
                .map(|j| match j {
                    0 => "reg".to_string(),
                    j if j <= l => format!("token{}", j - 1),
                    j => format!("clip{}", j - 1 - l),
                })
                .collect();
            emit("token_sequence_attention.csv", m)?;
        }
        if let Some(rows) = &self.cmca_q2v {
            emit(
                "cmca_q2v_attention.csv",
                LabeledMatrix::new("clip", "clip", "token", rows.clone()),
            )?;
        }
        Ok(files)
    }
}
