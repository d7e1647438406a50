//! Building blocks of the re-ranking network, recorded on a [`Tape`].

use crate::autodiff::{Mask, Tape, Var};
use crate::error::{PrmError, Result};
use crate::params::Bound;
use crate::prm::{HeadStyle, PrmConfig};
use crate::rng::DropoutKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// `E = ([X ; PV] + PE[0..n]) · W^E + b^E`.
pub fn input_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PrmConfig,
    x: Var,
    pv: Option<Var>,
) -> Result<Var> {
    let (n, d_feature) = tape.shape(x);
    if n > cfg.n_max {
        return Err(PrmError::Capacity {
            len: n,
            max: cfg.n_max,
        });
    }
    if d_feature != cfg.d_feature {
        return Err(PrmError::Config(format!(
            "feature width {d_feature} does not match model d_feature {}",
            cfg.d_feature
        )));
    }
    let concat = match (cfg.use_pv, pv) {
        (true, Some(pv)) => {
            let s = tape.shape(pv);
            if s != (n, cfg.d_pv) {
                return Err(PrmError::Dimension {
                    op: "input_layer.pv",
                    lhs: (n, cfg.d_pv),
                    rhs: s,
                });
            }
            tape.concat_cols(&[x, pv])?
        }
        (false, None) => x,
        (true, None) => {
            return Err(PrmError::Config("model uses PV but no PV rows were given".into()))
        }
        (false, Some(_)) => {
            return Err(PrmError::Config("PV rows given to a model without PV".into()))
        }
    };
    let with_pos = if cfg.use_pe {
        let pe = bound.get("input.pe")?;
        let pe_n = tape.slice_rows(pe, 0, n)?;
        tape.add(concat, pe_n)?
    } else {
        concat
    };
    let proj = tape.matmul(with_pos, bound.get("input.we")?)?;
    tape.add_row(proj, bound.get("input.be")?)
}

/// Scaled dot-product attention output together with its weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` with an optional key mask.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Attended> {
    let (nq, dk) = tape.shape(q);
    let (nk, dk2) = tape.shape(k);
    if dk != dk2 || tape.shape(v).0 != nk {
        return Err(PrmError::Dimension {
            op: "attention",
            lhs: (nq, dk),
            rhs: (nk, dk2),
        });
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, T::one() / T::of_usize(dk).sqrt());
    let weights = tape.softmax_rows(scaled, mask)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Multi-head self-attention of block `block`. Returns the `n × d` output and
/// each head's attention weights.
pub fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PrmConfig,
    block: usize,
    e: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Vec<Var>)> {
    cfg.head_width()?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for j in 0..cfg.num_heads {
        let p = |w: &str| format!("block{block}.head{j}.{w}");
        let q = tape.matmul(e, bound.get(&p("wq"))?)?;
        let k = tape.matmul(e, bound.get(&p("wk"))?)?;
        let v = tape.matmul(e, bound.get(&p("wv"))?)?;
        let att = attention(tape, q, k, v, mask)?;
        heads.push(att.output);
        weights.push(att.weights);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(cat, bound.get(&format!("block{block}.wo"))?)?;
    Ok((out, weights))
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &PrmConfig,
    a: Var,
    training: bool,
    key: DropoutKey,
) -> Result<Var> {
    if cfg.use_dropout {
        tape.dropout(a, T::of(cfg.dropout), training, key)
    } else {
        Ok(a)
    }
}

/// One post-norm encoder block:
/// `S = LN(E + Dropout(MH(E)))`, `F = LN(S + Dropout(FFN(S)))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PrmConfig,
    block: usize,
    e: Var,
    training: bool,
    mask: Option<&Mask>,
    key: DropoutKey,
) -> Result<(Var, Vec<Var>)> {
    let p = |w: &str| format!("block{block}.{w}");
    let eps = T::of(cfg.layer_norm_eps);

    let (mh, weights) = multi_head(tape, bound, cfg, block, e, mask)?;
    let mh = maybe_dropout(tape, cfg, mh, training, key.with_layer(2 * block as u64))?;
    let pre = if cfg.use_residual { tape.add(e, mh)? } else { mh };
    let s = tape.layer_norm(pre, bound.get(&p("ln1.gain"))?, bound.get(&p("ln1.bias"))?, eps)?;

    let h = tape.matmul(s, bound.get(&p("ffn.w1"))?)?;
    let h = tape.add_row(h, bound.get(&p("ffn.b1"))?)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, bound.get(&p("ffn.w2"))?)?;
    let h = tape.add_row(h, bound.get(&p("ffn.b2"))?)?;
    let h = maybe_dropout(tape, cfg, h, training, key.with_layer(2 * block as u64 + 1))?;
    let pre = if cfg.use_residual { tape.add(s, h)? } else { h };
    let f = tape.layer_norm(pre, bound.get(&p("ln2.gain"))?, bound.get(&p("ln2.bias"))?, eps)?;
    Ok((f, weights))
}

/// Applies all encoder blocks in sequence; the attention weights are indexed
/// `[block][head]`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &PrmConfig,
    e: Var,
    training: bool,
    mask: Option<&Mask>,
    key: DropoutKey,
) -> Result<(Var, Vec<Vec<Var>>)> {
    if cfg.num_blocks == 0 {
        return Err(PrmError::Config("num_blocks must be at least 1".into()));
    }
    let mut x = e;
    let mut all = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let (f, w) = encoder_block(tape, bound, cfg, b, x, training, mask, key)?;
        x = f;
        all.push(w);
    }
    Ok((x, all))
}

/// One logit per item: `F · W^F + b^F` (an `n × 1` node).
pub fn output_logits<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, f: Var) -> Result<Var> {
    let z = tape.matmul(f, bound.get("output.wf")?)?;
    tape.add_row(z, bound.get("output.bf")?)
}

/// `-Σ_i y_i log Score(i)` for one list, with the softmax taken over valid
/// items only.
pub fn listwise_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[T],
    valid: &[bool],
) -> Result<Var> {
    let n = tape.shape(logits).0;
    if labels.len() != n || valid.len() != n {
        return Err(PrmError::Dimension {
            op: "listwise_loss",
            lhs: (n, 1),
            rhs: (labels.len(), valid.len()),
        });
    }
    let row = tape.transpose(logits);
    let mask = Mask::new(1, n, valid.to_vec())?;
    let logp = tape.log_softmax_rows(row, Some(&mask))?;
    let y: Vec<T> = labels
        .iter()
        .zip(valid)
        .map(|(&l, &v)| if v { l } else { T::zero() })
        .collect();
    let yv = tape.constant(Tensor2::row_vector(&y));
    let picked = tape.mul(logp, yv)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -T::one()))
}

pub(crate) fn check_head_style(cfg: &PrmConfig) -> Result<usize> {
    match cfg.head_style {
        HeadStyle::PaperLiteral => Ok(cfg.d_model),
        HeadStyle::Split => {
            if cfg.num_heads == 0 || !cfg.d_model.is_multiple_of(cfg.num_heads) {
                Err(PrmError::Config(format!(
                    "split heads need num_heads ({}) to divide d_model ({})",
                    cfg.num_heads, cfg.d_model
                )))
            } else {
                Ok(cfg.d_model / cfg.num_heads)
            }
        }
    }
}
