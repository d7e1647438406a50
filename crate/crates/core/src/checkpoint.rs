//! Versioned JSON checkpoints.
//!
//! ```text
//! {"config": {...}, "format_version": 1,
//!  "tensors": {"block0.head0.wq": {"cols": c, "data": [...], "rows": r}, ...}}
//! ```
//!
//! Keys are written in sorted order and floats in shortest round-trip form,
//! so saving the same parameters twice gives identical bytes.
//!
//! Tensor names:
//!
//! | name | shape |
//! |------|-------|
//! | `input.we`, `input.be` | `(d_feature + d_pv) × d`, `1 × d` |
//! | `input.pe` | `n_max × (d_feature + d_pv)` |
//! | `block{k}.head{j}.wq` / `wk` / `wv` | `d × d_head` |
//! | `block{k}.wo` | `h·d_head × d` |
//! | `block{k}.ffn.w1`, `b1`, `w2`, `b2` | `d × inner`, `1 × inner`, `inner × d`, `1 × d` |
//! | `block{k}.ln1.gain` / `bias`, `block{k}.ln2.*` | `1 × d` |
//! | `output.wf`, `output.bf` | `d × 1`, `1 × 1` |
//!
//! The personalization and pointwise networks use `emb.*`, `mlp.l{k}.w/b`
//! and `out.w/b`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::to_canonical_json;
use crate::error::{PrmError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new<C: Serialize, T: Scalar>(config: &C, params: &ParamStore<T>) -> Result<Self> {
        let tensors = params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorRecord {
                        rows: t.rows(),
                        cols: t.cols(),
                        data: t.data().iter().map(|x| x.to_f64_lossy()).collect(),
                    },
                )
            })
            .collect();
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(config)?,
            tensors,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| PrmError::Checkpoint(format!("config does not match model: {e}")))
    }

    pub fn params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut p = ParamStore::new();
        for (k, rec) in &self.tensors {
            let data = rec.data.iter().map(|&x| T::of(x)).collect();
            let t = Tensor2::from_vec(rec.rows, rec.cols, data)
                .map_err(|_| PrmError::Checkpoint(format!("tensor `{k}` has wrong data length")))?;
            p.insert(k.clone(), t);
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| PrmError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(PrmError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Checks that `params` holds exactly the tensors of `expected` with the same
/// shapes.
pub fn check_layout<T: Scalar>(params: &ParamStore<T>, expected: &ParamStore<T>) -> Result<()> {
    for (k, t) in expected.iter() {
        let got = params.get(k)?;
        if got.shape() != t.shape() {
            return Err(PrmError::Checkpoint(format!(
                "tensor `{k}` has shape {:?}, model expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = params.names().find(|k| !expected.contains(k)) {
        return Err(PrmError::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}
