//! The listwise re-ranking network.
//!
//! Each list is embedded as `n × d` rows (raw features, optional personalized
//! vectors and a learnable position embedding), passed through a stack of
//! self-attention encoder blocks, and scored with a softmax over the list.

mod layers;

pub use layers::{attention, encode, encoder_block, input_layer, listwise_loss, multi_head, output_logits, Attended};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Mask, Tape, Var};
use crate::checkpoint::{check_layout, Checkpoint};
use crate::data::RerankRecord;
use crate::error::{PrmError, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::pretrain::PvTable;
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStyle {
    /// Every head projects to the full width `d`; `W^O` is `h·d × d`.
    #[default]
    PaperLiteral,
    /// Heads of width `d / h`.
    Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmConfig {
    pub d_feature: usize,
    pub d_pv: usize,
    pub d_model: usize,
    pub n_max: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Inner width of the feed-forward layer; 0 selects `4·d_model`.
    pub ffn_inner: usize,
    pub dropout: f64,
    pub use_pe: bool,
    pub use_pv: bool,
    pub use_residual: bool,
    pub use_dropout: bool,
    pub head_style: HeadStyle,
    pub layer_norm_eps: f64,
}

impl Default for PrmConfig {
    fn default() -> Self {
        Self {
            d_feature: 0,
            d_pv: 32,
            d_model: 64,
            n_max: crate::data::DEFAULT_N_MAX,
            num_blocks: 4,
            num_heads: 3,
            ffn_inner: 0,
            dropout: 0.1,
            use_pe: true,
            use_pv: true,
            use_residual: true,
            use_dropout: true,
            head_style: HeadStyle::PaperLiteral,
            layer_norm_eps: 1e-6,
        }
    }
}

impl PrmConfig {
    pub fn new(d_feature: usize, d_pv: usize, d_model: usize, n_max: usize) -> Self {
        Self {
            d_feature,
            d_pv,
            d_model,
            n_max,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_inner == 0 {
            4 * self.d_model
        } else {
            self.ffn_inner
        }
    }

    /// Width of the concatenated input rows.
    pub fn d_input(&self) -> usize {
        self.d_feature + if self.use_pv { self.d_pv } else { 0 }
    }

    pub fn head_width(&self) -> Result<usize> {
        layers::check_head_style(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PrmError::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be at least 1".into());
        }
        if self.num_heads == 0 {
            return bad("num_heads must be at least 1".into());
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if self.d_feature == 0 {
            return bad("d_feature must be at least 1".into());
        }
        if self.use_pv && self.d_pv == 0 {
            return bad("use_pv needs d_pv >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        self.head_width().map(|_| ())
    }

    /// Freshly initialized parameters: Glorot weights, zero biases, zero
    /// position embedding, unit layer-norm gains.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let d = self.d_model;
        let dk = self.head_width()?;
        let mut p = ParamStore::new();
        let w = |p: &mut ParamStore<T>, name: String, r: usize, c: usize| {
            let t = glorot(seed, &name, r, c);
            p.insert(name, t);
        };
        w(&mut p, "input.we".into(), self.d_input(), d);
        p.insert("input.be", Tensor2::zeros(1, d));
        if self.use_pe {
            p.insert("input.pe", Tensor2::zeros(self.n_max, self.d_input()));
        }
        for k in 0..self.num_blocks {
            for j in 0..self.num_heads {
                for m in ["wq", "wk", "wv"] {
                    w(&mut p, format!("block{k}.head{j}.{m}"), d, dk);
                }
            }
            w(&mut p, format!("block{k}.wo"), self.num_heads * dk, d);
            let inner = self.ffn_width();
            w(&mut p, format!("block{k}.ffn.w1"), d, inner);
            p.insert(format!("block{k}.ffn.b1"), Tensor2::zeros(1, inner));
            w(&mut p, format!("block{k}.ffn.w2"), inner, d);
            p.insert(format!("block{k}.ffn.b2"), Tensor2::zeros(1, d));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("block{k}.{ln}.gain"), Tensor2::filled(1, d, T::one()));
                p.insert(format!("block{k}.{ln}.bias"), Tensor2::zeros(1, d));
            }
        }
        w(&mut p, "output.wf".into(), d, 1);
        p.insert("output.bf", Tensor2::zeros(1, 1));
        Ok(p)
    }
}

/// Inputs of one list: raw features, optional personalized vectors and the
/// validity of each row. Rows past the real items are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ListInput<T> {
    pub features: Tensor2<T>,
    pub pv: Option<Tensor2<T>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> ListInput<T> {
    pub fn unpadded(features: Tensor2<T>, pv: Option<Tensor2<T>>) -> Self {
        let valid = vec![true; features.rows()];
        Self { features, pv, valid }
    }

    /// Builds the input of `record`, padded to `pad_to` rows when given. PV
    /// rows come from `pv` when the model uses them.
    pub fn from_record(
        record: &RerankRecord,
        cfg: &PrmConfig,
        pv: Option<&PvTable>,
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let n = record.items.len();
        if n == 0 {
            return Err(PrmError::InvalidMask(format!(
                "request `{}` has an empty list",
                record.request_id
            )));
        }
        if n > cfg.n_max {
            return Err(PrmError::Capacity { len: n, max: cfg.n_max });
        }
        let rows = pad_to.unwrap_or(n).max(n);
        let mut x = Tensor2::zeros(rows, cfg.d_feature);
        for (k, it) in record.items.iter().enumerate() {
            if it.features.len() != cfg.d_feature {
                return Err(PrmError::Config(format!(
                    "item `{}` has {} features, model expects {}",
                    it.item_id,
                    it.features.len(),
                    cfg.d_feature
                )));
            }
            for (dst, &src) in x.row_mut(k).iter_mut().zip(&it.features) {
                *dst = T::of(src);
            }
        }
        let pv = if cfg.use_pv {
            let table = pv.ok_or_else(|| {
                PrmError::Dependency {
                    artifact: "pv table".into(),
                    stage: "extract-pv".into(),
                }
            })?;
            let mut m = Tensor2::zeros(rows, cfg.d_pv);
            for (k, it) in record.items.iter().enumerate() {
                let v = table.lookup(&record.request_id, &it.item_id)?;
                if v.len() != cfg.d_pv {
                    return Err(PrmError::Config(format!(
                        "pv width {} does not match model d_pv {}",
                        v.len(),
                        cfg.d_pv
                    )));
                }
                for (dst, &src) in m.row_mut(k).iter_mut().zip(v) {
                    *dst = T::of(src);
                }
            }
            Some(m)
        } else {
            None
        };
        let mut valid = vec![false; rows];
        valid[..n].iter_mut().for_each(|v| *v = true);
        Ok(Self { features: x, pv, valid })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Result of recording one list on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `n × 1` logits.
    pub logits: Var,
    /// Attention weights indexed `[block][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Records the full network for one list.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PrmConfig,
    input: &ListInput<T>,
    training: bool,
    key: DropoutKey,
) -> Result<ForwardVars> {
    if input.num_valid() == 0 {
        return Err(PrmError::InvalidMask("list has no valid items".into()));
    }
    let n = input.len();
    let x = tape.constant(input.features.clone());
    let pv = input.pv.as_ref().map(|p| tape.constant(p.clone()));
    let e = input_layer(tape, bound, cfg, x, pv)?;
    let mask = if input.valid.iter().all(|&v| v) {
        None
    } else {
        Some(Mask::keys(n, &input.valid))
    };
    let (f, attention) = encode(tape, bound, cfg, e, training, mask.as_ref(), key)?;
    let logits = output_logits(tape, bound, f)?;
    Ok(ForwardVars { logits, attention })
}

/// Scores for the real items of a list and the re-ranked order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredList {
    pub request_id: String,
    /// `Score(i)` in initial-list order.
    pub scores: Vec<f64>,
    /// Item indices sorted by descending score; ties keep initial order.
    pub order: Vec<usize>,
}

impl ScoredList {
    /// Softmax over the unmasked entries of `logits` followed by a stable
    /// descending sort. Masked entries are dropped.
    pub fn from_logits<T: Scalar>(request_id: impl Into<String>, logits: &[T], valid: &[bool]) -> Result<Self> {
        let n = logits.len();
        let row = Tensor2::row_vector(logits);
        let mask = Mask::new(1, n, valid.to_vec())?;
        let probs = autodiff::softmax_rows(&row, Some(&mask))?;
        let scores: Vec<f64> = probs
            .data()
            .iter()
            .zip(valid)
            .filter(|(_, &v)| v)
            .map(|(p, _)| p.to_f64_lossy())
            .collect();
        Ok(Self {
            request_id: request_id.into(),
            order: rank_order(&scores),
            scores,
        })
    }

    /// Scores listed in re-ranked order.
    pub fn ordered_scores(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.scores[i]).collect()
    }
}

/// Indices sorted by descending score, stable on ties.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Output of [`PrmModel::score`].
#[derive(Clone, Debug)]
pub struct Scored<T> {
    pub list: ScoredList,
    /// `[block][head]` attention matrices over all rows, padding included.
    pub attention: Vec<Vec<Tensor2<T>>>,
}

/// Trained parameters together with their configuration.
#[derive(Debug)]
pub struct PrmModel<T> {
    pub config: PrmConfig,
    pub params: ParamStore<T>,
    forward_passes: AtomicU64,
}

impl<T: Scalar> Clone for PrmModel<T> {
    fn clone(&self) -> Self {
        Self::with_params(self.config.clone(), self.params.clone())
    }
}

impl<T: Scalar> PrmModel<T> {
    pub fn new(config: PrmConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self::with_params(config, params))
    }

    fn with_params(config: PrmConfig, params: ParamStore<T>) -> Self {
        Self {
            config,
            params,
            forward_passes: AtomicU64::new(0),
        }
    }

    /// Wraps existing parameters after checking their layout against `config`.
    pub fn from_params(config: PrmConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = config.init_params::<T>(0)?;
        check_layout(&params, &expected)?;
        Ok(Self::with_params(config, params))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: PrmConfig = ck.config()?;
        Self::from_params(config, ck.params()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.config, &self.params)
    }

    /// Number of inference passes run through [`PrmModel::score`].
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Inference on one list.
    pub fn score(&self, request_id: &str, input: &ListInput<T>) -> Result<Scored<T>> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let fv = forward(&mut tape, &bound, &self.config, input, false, DropoutKey::new(0, 0, 0, 0))?;
        let logits = tape.value(fv.logits).data().to_vec();
        let list = ScoredList::from_logits(request_id, &logits, &input.valid)?;
        let attention = fv
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
            .collect();
        Ok(Scored { list, attention })
    }

    pub fn score_record(&self, record: &RerankRecord, pv: Option<&PvTable>) -> Result<Scored<T>> {
        let input = ListInput::from_record(record, &self.config, pv, None)?;
        self.score(&record.request_id, &input)
    }
}
