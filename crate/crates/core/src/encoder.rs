//! Multi-scale sequence encoder.
//!
//! Behavior-aware context embedding feeds a stack of layers, each of
//! which runs low-rank self-attention over all positions plus full
//! attention over mean-pooled sub-sequences at two granularities,
//! fuses the three signals along the sequence axis, and applies a
//! position-wise feed-forward network. Residual connections and layer
//! normalization wrap both sublayers.

use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Forward regime: training applies dropout, evaluation does not.
pub enum Regime<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

/// Multiply by an inverted-dropout mask in training mode.
pub fn apply_dropout(tape: &mut Tape, x: TensorId, regime: &mut Regime) -> Result<TensorId> {
    match regime {
        Regime::Eval => Ok(x),
        Regime::Train { dropout, rng } => {
            if *dropout <= 0.0 {
                return Ok(x);
            }
            let keep = 1.0 - *dropout;
            let shape = tape.value(x).shape().to_vec();
            let numel = tape.value(x).numel();
            let mask: Vec<f64> =
                (0..numel).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
            let m = tape.constant(Tensor::new(shape, mask)?);
            tape.mul(x, m)
        }
    }
}

/// Attention output together with its pre-dropout probability matrix.
pub struct AttentionOut {
    pub out: TensorId,
    pub probs: TensorId,
}

/// Query/key/value projections for one attention head.
#[derive(Clone, Copy)]
pub struct HeadIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
}

/// Per-layer attention parameters bound to a tape.
pub enum LayerAttentionIds {
    /// Low-rank attention plus two pooled-scale attentions, fused along
    /// the sequence axis.
    MultiScale {
        e: TensorId,
        f: TensorId,
        lowrank_heads: Vec<HeadIds>,
        scale1_heads: Vec<HeadIds>,
        scale2_heads: Vec<HeadIds>,
        fuse_w: TensorId,
    },
    /// Plain dense multi-head self-attention (ablation variant).
    Vanilla { heads: Vec<HeadIds> },
}

pub struct LayerIds {
    pub attn: LayerAttentionIds,
    pub wd: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
}

pub struct EncoderIds {
    pub item_table: TensorId,
    pub pos_table: TensorId,
    pub beh_table: TensorId,
    pub layers: Vec<LayerIds>,
}

/// Attention probability matrices recorded per layer for inspection.
#[derive(Default)]
pub struct LayerTrace {
    pub lowrank: Vec<TensorId>,
    pub scale1: Vec<TensorId>,
    pub scale2: Vec<TensorId>,
}

pub struct EncodeTrace {
    pub layers: Vec<LayerTrace>,
}

/// Sum of item, position and behavior embedding rows per position.
pub fn embed_sequence(
    tape: &mut Tape,
    seq: &BehaviorSequence,
    item_table: TensorId,
    pos_table: TensorId,
    beh_table: TensorId,
) -> Result<TensorId> {
    let items = tape.gather_rows(item_table, &seq.item_tokens())?;
    let behaviors = tape.gather_rows(beh_table, &seq.behavior_tokens())?;
    let (rows, _) = tape.value(pos_table).dims2("embed_sequence")?;
    if rows != seq.len() {
        return Err(Error::Shape {
            op: "embed_sequence",
            detail: format!("position table has {rows} rows, sequence length {}", seq.len()),
        });
    }
    let ip = tape.add(items, pos_table)?;
    tape.add(ip, behaviors)
}

/// Scaled dot-product self-attention with keys and values linearly
/// compressed along the sequence axis by `e` and `f`.
pub fn lowrank_attention(
    tape: &mut Tape,
    h: TensorId,
    e: TensorId,
    f: TensorId,
    head: HeadIds,
    regime: &mut Regime,
) -> Result<AttentionOut> {
    let q = tape.matmul(h, head.wq)?;
    let eh = tape.matmul(e, h)?;
    let k = tape.matmul(eh, head.wk)?;
    let fh = tape.matmul(f, h)?;
    let v = tape.matmul(fh, head.wv)?;
    attention_core(tape, q, k, v, regime)
}

/// Full scaled dot-product self-attention over the given rows.
pub fn scale_attention(
    tape: &mut Tape,
    x: TensorId,
    head: HeadIds,
    regime: &mut Regime,
) -> Result<AttentionOut> {
    let q = tape.matmul(x, head.wq)?;
    let k = tape.matmul(x, head.wk)?;
    let v = tape.matmul(x, head.wv)?;
    attention_core(tape, q, k, v, regime)
}

fn attention_core(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    regime: &mut Regime,
) -> Result<AttentionOut> {
    let dk = tape.value(q).shape()[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let probs = tape.softmax(scaled, 1)?;
    let applied = apply_dropout(tape, probs, regime)?;
    let out = tape.matmul(applied, v)?;
    Ok(AttentionOut { out, probs })
}

/// Mean-pool consecutive windows of `p` rows into one row each.
pub fn granularity_aggregate(tape: &mut Tape, h: TensorId, p: usize) -> Result<TensorId> {
    tape.mean_pool_rows(h, p)
}

/// Concatenate the three scale-specific embeddings along the sequence
/// axis and project back to `J` rows with a trainable fusion matrix.
pub fn fuse_scales(
    tape: &mut Tape,
    h_hat: TensorId,
    h_p1: TensorId,
    h_p2: TensorId,
    fuse_w: TensorId,
) -> Result<TensorId> {
    let stacked = tape.concat_rows(&[h_hat, h_p1, h_p2])?;
    tape.matmul(fuse_w, stacked)
}

/// Per-head multi-scale pipeline with head outputs concatenated along
/// the feature axis and mapped by the output transformation.
pub fn multihead_encode(
    tape: &mut Tape,
    h_masked: TensorId,
    attn: &LayerAttentionIds,
    wd: TensorId,
    p1: usize,
    p2: usize,
    regime: &mut Regime,
) -> Result<(TensorId, LayerTrace)> {
    let mut trace = LayerTrace::default();
    let mut head_outputs = Vec::new();
    match attn {
        LayerAttentionIds::MultiScale { e, f, lowrank_heads, scale1_heads, scale2_heads, fuse_w } => {
            let gamma1 = granularity_aggregate(tape, h_masked, p1)?;
            let gamma2 = granularity_aggregate(tape, h_masked, p2)?;
            for n in 0..lowrank_heads.len() {
                let lr = lowrank_attention(tape, h_masked, *e, *f, lowrank_heads[n], regime)?;
                let s1 = scale_attention(tape, gamma1, scale1_heads[n], regime)?;
                let s2 = scale_attention(tape, gamma2, scale2_heads[n], regime)?;
                trace.lowrank.push(lr.probs);
                trace.scale1.push(s1.probs);
                trace.scale2.push(s2.probs);
                head_outputs.push(fuse_scales(tape, lr.out, s1.out, s2.out, *fuse_w)?);
            }
        }
        LayerAttentionIds::Vanilla { heads } => {
            for &head in heads {
                let att = scale_attention(tape, h_masked, head, regime)?;
                trace.lowrank.push(att.probs);
                head_outputs.push(att.out);
            }
        }
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(concat, wd)?;
    Ok((out, trace))
}

/// Position-wise feed-forward network: `GELU(x W1 + b1) W2 + b2` per row.
pub fn pffn(
    tape: &mut Tape,
    h: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let a = tape.matmul(h, w1)?;
    let a = tape.add_row(a, b1)?;
    let g = tape.gelu(a);
    let o = tape.matmul(g, w2)?;
    tape.add_row(o, b2)
}

/// Full encoder: embedding followed by `L` (multi-head attention, FFN)
/// layers with residual connections and layer normalization. PAD rows
/// are zeroed before every attention input so padding content cannot
/// reach other positions.
pub fn encode(
    tape: &mut Tape,
    seq: &BehaviorSequence,
    ids: &EncoderIds,
    p1: usize,
    p2: usize,
    regime: &mut Regime,
) -> Result<(TensorId, EncodeTrace)> {
    let mut h = embed_sequence(tape, seq, ids.item_table, ids.pos_table, ids.beh_table)?;
    let keep: Vec<f64> =
        seq.attention_mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let keep_col = tape.constant(Tensor::new(vec![seq.len(), 1], keep)?);
    let mut trace = EncodeTrace { layers: Vec::new() };

    for layer in &ids.layers {
        let hm = tape.mul_col(h, keep_col)?;
        let (att, layer_trace) =
            multihead_encode(tape, hm, &layer.attn, layer.wd, p1, p2, regime)?;
        let res = tape.add(h, att)?;
        let normed = tape.layer_norm(res, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;
        let ff = pffn(tape, normed, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2)?;
        let ff = apply_dropout(tape, ff, regime)?;
        let res2 = tape.add(normed, ff)?;
        h = tape.layer_norm(res2, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;
        trace.layers.push(layer_trace);
    }
    Ok((h, trace))
}
