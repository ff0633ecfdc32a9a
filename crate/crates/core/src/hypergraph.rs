//! Per-user hypergraph view of multi-behavior item dependencies.
//!
//! Two hyperedge families are built over the positions of one
//! sequence: a semantic family with one hyperedge per unique item
//! (anchored at its first visible occurrence) connecting the top-k
//! most similar positions under a learned multi-channel cosine metric,
//! and a multi-behavior family with one hyperedge per item interacted
//! at two or more positions. Propagation is linear: a two-stage pass
//! through the incidence matrix, or a one-matrix approximation built
//! from truncated similarities.
//!
//! Masked and PAD positions stay out of the structure entirely: their
//! incidence rows are zero and their propagated embeddings remain zero.

use crate::data::{BehaviorSequence, Slot};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorId};

/// Positions, items and hyperedge candidates of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceTopology {
    pub j: usize,
    /// Dense item id per position; `None` at PAD and masked slots.
    pub item_of: Vec<Option<u32>>,
    /// Unique visible items as (item, first occurrence position),
    /// ordered by anchor position.
    pub anchors: Vec<(u32, usize)>,
    /// Items occurring at two or more visible positions, with their
    /// member positions.
    pub multi_occurrence: Vec<(u32, Vec<usize>)>,
}

impl SequenceTopology {
    pub fn of(seq: &BehaviorSequence) -> Self {
        let j = seq.len();
        let mut item_of = vec![None; j];
        let mut anchors: Vec<(u32, usize)> = Vec::new();
        let mut occurrences: Vec<(u32, Vec<usize>)> = Vec::new();
        for (pos, slot) in seq.slots().iter().enumerate() {
            if let Slot::Item { item, .. } = slot {
                item_of[pos] = Some(*item);
                match occurrences.iter_mut().find(|(i, _)| i == item) {
                    Some((_, members)) => members.push(pos),
                    None => {
                        anchors.push((*item, pos));
                        occurrences.push((*item, vec![pos]));
                    }
                }
            }
        }
        let multi_occurrence =
            occurrences.into_iter().filter(|(_, members)| members.len() >= 2).collect();
        Self { j, item_of, anchors, multi_occurrence }
    }

    pub fn visible(&self, pos: usize) -> bool {
        self.item_of[pos].is_some()
    }

    /// Anchor position of the item at `pos`, if visible.
    pub fn anchor_of(&self, pos: usize) -> Option<usize> {
        let item = self.item_of[pos]?;
        self.anchors.iter().find(|(i, _)| *i == item).map(|(_, a)| *a)
    }
}

/// Pairwise item dependency scores under the multi-channel metric:
/// the mean over channels of the cosine similarity between
/// channel-weighted position vectors. Rows of `v` at masked/PAD
/// positions must be zero; their similarities come out zero.
pub fn pairwise_semantic(
    tape: &mut Tape,
    v: TensorId,
    channels: &[TensorId],
) -> Result<TensorId> {
    assert!(!channels.is_empty(), "metric needs at least one channel");
    let mut acc: Option<TensorId> = None;
    for &w in channels {
        let weighted = tape.mul_row(v, w)?;
        let unit = tape.row_normalize(weighted)?;
        let unit_t = tape.transpose(unit)?;
        let sim = tape.matmul(unit, unit_t)?;
        acc = Some(match acc {
            None => sim,
            Some(a) => tape.add(a, sim)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / channels.len() as f64))
}

/// Metric score between two single position vectors.
pub fn semantic_similarity(
    tape: &mut Tape,
    v_a: TensorId,
    v_b: TensorId,
    channels: &[TensorId],
) -> Result<TensorId> {
    let pair = tape.concat_rows(&[v_a, v_b])?;
    let sim = pairwise_semantic(tape, pair, channels)?;
    let row = tape.gather_rows(sim, &[0])?;
    tape.gather_cols(row, &[1])
}

/// Selected anchor indices per position: the k anchors with highest
/// similarity, ties broken in favor of the position's own item and
/// then by anchor position. Non-visible positions select nothing.
pub fn top_k_anchors(topo: &SequenceTopology, beta: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let mut selected = vec![Vec::new(); topo.j];
    for pos in 0..topo.j {
        if !topo.visible(pos) {
            continue;
        }
        let own_anchor = topo.anchor_of(pos);
        let mut ranked: Vec<(usize, usize)> = topo.anchors.iter().map(|(_, a)| *a).enumerate().collect();
        ranked.sort_by(|&(ia, a), &(ib, b)| {
            let ba = beta.at(pos, a);
            let bb = beta.at(pos, b);
            bb.partial_cmp(&ba)
                .unwrap()
                .then_with(|| {
                    let own_a = Some(a) == own_anchor;
                    let own_b = Some(b) == own_anchor;
                    own_b.cmp(&own_a)
                })
                .then(ia.cmp(&ib))
        });
        selected[pos] = ranked.into_iter().take(k).map(|(idx, _)| idx).collect();
    }
    selected
}

/// Semantic incidence block plus provenance.
pub struct SemanticIncidence {
    /// `J x |anchors|` tape node, entries are truncated similarities.
    pub id: TensorId,
    /// Per-position selected anchor indices (into `topo.anchors`).
    pub topk: Vec<Vec<usize>>,
}

/// One hyperedge per unique visible item; each visible position
/// connects to its top-k anchors with the metric score to the anchor
/// position.
pub fn build_semantic_incidence(
    tape: &mut Tape,
    topo: &SequenceTopology,
    beta: TensorId,
    k: usize,
) -> Result<Option<SemanticIncidence>> {
    if topo.anchors.is_empty() {
        return Ok(None);
    }
    let topk = top_k_anchors(topo, tape.value(beta), k);
    let mut mask = Tensor::zeros(vec![topo.j, topo.j]);
    for (pos, anchors) in topk.iter().enumerate() {
        for &aidx in anchors {
            let a = topo.anchors[aidx].1;
            mask.data_mut()[pos * topo.j + a] = 1.0;
        }
    }
    let mask_id = tape.constant(mask);
    let truncated = tape.mul(beta, mask_id)?;
    let cols: Vec<usize> = topo.anchors.iter().map(|(_, a)| *a).collect();
    let id = tape.gather_cols(truncated, &cols)?;
    Ok(Some(SemanticIncidence { id, topk }))
}

/// One hyperedge per multi-occurrence item, connecting all its visible
/// positions with weight 1.
pub fn build_behavior_incidence(
    tape: &mut Tape,
    topo: &SequenceTopology,
) -> Option<TensorId> {
    if topo.multi_occurrence.is_empty() {
        return None;
    }
    let cols = topo.multi_occurrence.len();
    let mut m = Tensor::zeros(vec![topo.j, cols]);
    for (c, (_, members)) in topo.multi_occurrence.iter().enumerate() {
        for &pos in members {
            m.data_mut()[pos * cols + c] = 1.0;
        }
    }
    Some(tape.constant(m))
}

/// Concatenated incidence matrix with provenance tags.
pub struct IncidenceBuild {
    /// `J x (|E_semantic| + |E_behavior|)`; `None` when both families
    /// are empty or ablated away.
    pub id: Option<TensorId>,
    /// (item, anchor position) per semantic column.
    pub semantic_cols: Vec<(u32, usize)>,
    /// (item, member positions) per behavior column.
    pub behavior_cols: Vec<(u32, Vec<usize>)>,
    /// Per-position selected anchors, used by the simplified operator.
    pub topk: Vec<Vec<usize>>,
}

pub fn build_incidence(
    tape: &mut Tape,
    topo: &SequenceTopology,
    beta: Option<TensorId>,
    k: usize,
    with_semantic: bool,
    with_behavior: bool,
) -> Result<IncidenceBuild> {
    let semantic = match (with_semantic, beta) {
        (true, Some(b)) => build_semantic_incidence(tape, topo, b, k)?,
        _ => None,
    };
    let behavior = if with_behavior { build_behavior_incidence(tape, topo) } else { None };

    let semantic_cols = if semantic.is_some() { topo.anchors.clone() } else { Vec::new() };
    let behavior_cols =
        if behavior.is_some() { topo.multi_occurrence.clone() } else { Vec::new() };
    let topk = semantic.as_ref().map(|s| s.topk.clone()).unwrap_or_default();

    let id = match (&semantic, behavior) {
        (Some(s), Some(b)) => Some(tape.concat_cols(&[s.id, b])?),
        (Some(s), None) => Some(s.id),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    };
    Ok(IncidenceBuild { id, semantic_cols, behavior_cols, topk })
}

/// Behavior-aware self-gated initial embeddings: each position vector
/// is scaled by a sigmoid gate of its own projection; masked and PAD
/// rows are zeroed so they stay out of the propagation.
pub fn self_gate_init(
    tape: &mut Tape,
    v: TensorId,
    gate_w: TensorId,
    gate_r: TensorId,
    visible_col: TensorId,
) -> Result<TensorId> {
    let score = tape.matmul(v, gate_w)?;
    let shifted = tape.add_scalar(score, gate_r)?;
    let gate = tape.sigmoid(shifted);
    let gated = tape.mul_col(v, gate)?;
    tape.mul_col(gated, visible_col)
}

/// Two-stage propagation `Dv^-1 M De^-1 M^T X` with degrees taken as
/// absolute row/column sums. Zero-degree rows pass their input through
/// unchanged.
pub fn hyperconv_full(tape: &mut Tape, x: TensorId, m: TensorId) -> Result<TensorId> {
    let (j, e) = tape.value(m).dims2("hyperconv_full")?;
    let abs_m = tape.abs(m);
    let ones_e = tape.constant(Tensor::filled(vec![e, 1], 1.0));
    let deg_v = tape.matmul(abs_m, ones_e)?;
    let inv_dv = tape.recip0(deg_v);
    let abs_mt = tape.transpose(abs_m)?;
    let ones_j = tape.constant(Tensor::filled(vec![j, 1], 1.0));
    let deg_e = tape.matmul(abs_mt, ones_j)?;
    let inv_de = tape.recip0(deg_e);

    let mt = tape.transpose(m)?;
    let up = tape.matmul(mt, x)?; // hyperedge aggregation
    let up = tape.mul_col(up, inv_de)?;
    let down = tape.matmul(m, up)?; // back to positions
    let down = tape.mul_col(down, inv_dv)?;

    // Identity passthrough for zero-degree positions.
    let zero_mask: Vec<f64> =
        tape.value(deg_v).data().iter().map(|&d| if d == 0.0 { 1.0 } else { 0.0 }).collect();
    if zero_mask.iter().all(|&z| z == 0.0) {
        return Ok(down);
    }
    let zm = tape.constant(Tensor::new(vec![j, 1], zero_mask)?);
    let passthrough = tape.mul_col(x, zm)?;
    tape.add(down, passthrough)
}

/// One-matrix approximation `M' = C + A + W` of the two-stage pass:
/// same-item indicator, truncated first-order similarities, and a
/// constant `w0` standing in for second-order cross terms. Masked and
/// PAD rows/columns are zero.
pub struct SimplifiedOperator {
    pub id: TensorId,
    pub w0: f64,
}

pub fn build_simplified_operator(
    tape: &mut Tape,
    topo: &SequenceTopology,
    beta: Option<TensorId>,
    topk: &[Vec<usize>],
    w0: f64,
    with_semantic: bool,
    with_behavior: bool,
) -> Result<SimplifiedOperator> {
    let j = topo.j;
    let mut acc: Option<TensorId> = None;

    if with_behavior {
        // C: 1 where both positions hold the same item.
        let mut c = Tensor::zeros(vec![j, j]);
        for a in 0..j {
            for b in 0..j {
                if let (Some(ia), Some(ib)) = (topo.item_of[a], topo.item_of[b]) {
                    if ia == ib {
                        c.data_mut()[a * j + b] = 1.0;
                    }
                }
            }
        }
        acc = Some(tape.constant(c));
    }

    if with_semantic {
        if let Some(beta) = beta {
            // Truncated similarity toward each position's item anchor:
            // btilde = (beta . topk mask) * select, where select maps
            // column a -> positions whose item anchors at a.
            let mut mask = Tensor::zeros(vec![j, j]);
            for (pos, anchors) in topk.iter().enumerate() {
                for &aidx in anchors {
                    let a = topo.anchors[aidx].1;
                    mask.data_mut()[pos * j + a] = 1.0;
                }
            }
            let mask_id = tape.constant(mask);
            let truncated = tape.mul(beta, mask_id)?;
            let mut select = Tensor::zeros(vec![j, j]);
            for pos in 0..j {
                if let Some(anchor) = topo.anchor_of(pos) {
                    select.data_mut()[anchor * j + pos] = 1.0;
                }
            }
            let select_id = tape.constant(select);
            let btilde = tape.matmul(truncated, select_id)?;

            // A = btilde + btilde^T restricted to distinct-item pairs.
            let mut not_same = Tensor::zeros(vec![j, j]);
            for a in 0..j {
                for b in 0..j {
                    if let (Some(ia), Some(ib)) = (topo.item_of[a], topo.item_of[b]) {
                        if ia != ib {
                            not_same.data_mut()[a * j + b] = 1.0;
                        }
                    }
                }
            }
            let ns = tape.constant(not_same);
            let bt = tape.transpose(btilde)?;
            let cross = tape.mul(bt, ns)?;
            let a_mat = tape.add(btilde, cross)?;
            acc = Some(match acc {
                None => a_mat,
                Some(prev) => tape.add(prev, a_mat)?,
            });

            // W: w0 between visible positions.
            let mut w = Tensor::zeros(vec![j, j]);
            for a in 0..j {
                for b in 0..j {
                    if topo.visible(a) && topo.visible(b) {
                        w.data_mut()[a * j + b] = w0;
                    }
                }
            }
            let w_id = tape.constant(w);
            acc = Some(tape.add(acc.unwrap(), w_id)?);
        }
    }

    let id = match acc {
        Some(id) => id,
        None => tape.constant(Tensor::zeros(vec![j, j])),
    };
    Ok(SimplifiedOperator { id, w0 })
}

/// One-matrix propagation `D^-1 M' X` with plain row-sum degrees and
/// identity passthrough at zero-degree rows.
pub fn hyperconv_simplified(tape: &mut Tape, x: TensorId, m_prime: TensorId) -> Result<TensorId> {
    let (j, _) = tape.value(m_prime).dims2("hyperconv_simplified")?;
    let ones = tape.constant(Tensor::filled(vec![j, 1], 1.0));
    let deg = tape.matmul(m_prime, ones)?;
    let inv = tape.recip0(deg);
    let prop = tape.matmul(m_prime, x)?;
    let prop = tape.mul_col(prop, inv)?;

    let zero_mask: Vec<f64> =
        tape.value(deg).data().iter().map(|&d| if d == 0.0 { 1.0 } else { 0.0 }).collect();
    if zero_mask.iter().all(|&z| z == 0.0) {
        return Ok(prop);
    }
    let zm = tape.constant(Tensor::new(vec![j, 1], zero_mask)?);
    let passthrough = tape.mul_col(x, zm)?;
    tape.add(prop, passthrough)
}

/// Mean of the layer stack, input layer included, to counter
/// over-smoothing.
pub fn layer_average(tape: &mut Tape, layers: &[TensorId]) -> Result<TensorId> {
    assert!(!layers.is_empty());
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / layers.len() as f64))
}

/// Context window for a masked position: visible neighbors within
/// `[m - q1, m + q2]`, clipped to the sequence.
pub fn pool_window(seq: &BehaviorSequence, m: usize, q1: usize, q2: usize) -> Vec<usize> {
    let lo = m.saturating_sub(q1);
    let hi = (m + q2).min(seq.len() - 1);
    (lo..=hi)
        .filter(|&i| matches!(seq.slot(i), Slot::Item { .. }))
        .collect()
}

/// Sliding-window mean of hypergraph embeddings around each masked
/// position. Returns the pooled rows plus a flag per position marking
/// empty windows (which pool to zero).
pub fn masked_position_pool(
    tape: &mut Tape,
    x_avg: TensorId,
    seq: &BehaviorSequence,
    q1: usize,
    q2: usize,
) -> Result<(TensorId, Vec<bool>)> {
    let masked = seq.masked_positions();
    let windows: Vec<Vec<usize>> =
        masked.iter().map(|&(m, _)| pool_window(seq, m, q1, q2)).collect();
    let empty: Vec<bool> = windows.iter().map(|w| w.is_empty()).collect();
    let pooled = tape.window_pool(x_avg, &windows)?;
    Ok((pooled, empty))
}
