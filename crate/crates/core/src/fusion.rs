//! Cross-view aggregation, item scoring, and the masked-item loss.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Per-position fused representation with the two view weights.
pub struct FusedViews {
    pub g: TensorId,
    pub alpha_seq: TensorId,
    pub alpha_hyper: TensorId,
}

/// Attentive combination of the sequential and hypergraph views:
/// each view's score is `a^T W_a e`, the two scores softmax to weights
/// alpha that mix the views elementwise. The second weight is computed
/// as `1 - alpha_1`, which keeps the pair summing to one exactly.
pub fn cross_view_attention(
    tape: &mut Tape,
    h_rows: TensorId,
    x_rows: TensorId,
    attn_a: TensorId,
    attn_wa: TensorId,
) -> Result<FusedViews> {
    let wa_t = tape.transpose(attn_wa)?;
    let probe = tape.matmul(wa_t, attn_a)?; // W_a^T a, shape d x 1
    let s_seq = tape.matmul(h_rows, probe)?;
    let s_hyper = tape.matmul(x_rows, probe)?;
    let scores = tape.concat_cols(&[s_seq, s_hyper])?;
    let probs = tape.softmax(scores, 1)?;
    let alpha_seq = tape.gather_cols(probs, &[0])?;
    let rows = tape.value(alpha_seq).shape()[0];
    let ones = tape.constant(Tensor::filled(vec![rows, 1], 1.0));
    let alpha_hyper = tape.sub(ones, alpha_seq)?;
    let weighted_h = tape.mul_col(h_rows, alpha_seq)?;
    let weighted_x = tape.mul_col(x_rows, alpha_hyper)?;
    let g = tape.add(weighted_h, weighted_x)?;
    Ok(FusedViews { g, alpha_seq, alpha_hyper })
}

/// Dot-product scores of fused rows against every real item embedding
/// (weight tying with the input item table; PAD/MASK rows excluded).
pub fn score_items(
    tape: &mut Tape,
    g: TensorId,
    item_table: TensorId,
    n_items: usize,
) -> Result<TensorId> {
    let real_rows: Vec<usize> =
        (0..n_items).map(|i| i + crate::data::RESERVED_TOKENS).collect();
    let items = tape.gather_rows(item_table, &real_rows)?;
    let items_t = tape.transpose(items)?;
    tape.matmul(g, items_t)
}

/// Mean negative log softmax probability of the true labels. Errors on
/// an empty mask set (skip-batch signal for the caller).
pub fn cloze_loss(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    if labels.is_empty() {
        return Err(Error::Shape { op: "cloze_loss", detail: "empty mask set".into() });
    }
    let total = tape.cross_entropy_sum(logits, labels)?;
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn equal_views_split_evenly_and_reproduce_the_view() {
        let mut r = rng(1);
        let h = uniform(vec![3, 4], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let hid = t.constant(h.clone());
        let a = t.constant(uniform(vec![4, 1], -1.0, 1.0, &mut r));
        let wa = t.constant(uniform(vec![4, 4], -1.0, 1.0, &mut r));
        let fused = cross_view_attention(&mut t, hid, hid, a, wa).unwrap();
        for i in 0..3 {
            assert!((t.value(fused.alpha_seq).at(i, 0) - 0.5).abs() < 1e-12);
            assert!((t.value(fused.alpha_hyper).at(i, 0) - 0.5).abs() < 1e-12);
            for c in 0..4 {
                assert!((t.value(fused.g).at(i, c) - h.at(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn view_weights_sum_to_one_exactly() {
        let mut r = rng(2);
        for _ in 0..20 {
            let mut t = Tape::new();
            let h = t.constant(uniform(vec![5, 4], -3.0, 3.0, &mut r));
            let x = t.constant(uniform(vec![5, 4], -3.0, 3.0, &mut r));
            let a = t.constant(uniform(vec![4, 1], -1.0, 1.0, &mut r));
            let wa = t.constant(uniform(vec![4, 4], -1.0, 1.0, &mut r));
            let fused = cross_view_attention(&mut t, h, x, a, wa).unwrap();
            for i in 0..5 {
                let a1 = t.value(fused.alpha_seq).at(i, 0);
                let a2 = t.value(fused.alpha_hyper).at(i, 0);
                assert_eq!(a1 + a2, 1.0, "weights must sum to one exactly");
                assert!(a1 > 0.0 && a1 < 1.0);
                assert!(a2 > 0.0 && a2 < 1.0);
            }
        }
    }

    #[test]
    fn view_weights_match_two_entry_softmax_oracle() {
        let mut r = rng(3);
        let h = uniform(vec![4, 3], -1.0, 1.0, &mut r);
        let x = uniform(vec![4, 3], -1.0, 1.0, &mut r);
        let a = uniform(vec![3, 1], -1.0, 1.0, &mut r);
        let wa = uniform(vec![3, 3], -1.0, 1.0, &mut r);
        // Oracle: s_view = a^T (W_a e) computed longhand.
        let score = |e: &[f64]| -> f64 {
            let mut we = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    we[i] += wa.at(i, j) * e[j];
                }
            }
            (0..3).map(|i| a.at(i, 0) * we[i]).sum()
        };
        let mut t = Tape::new();
        let hid = t.constant(h.clone());
        let xid = t.constant(x.clone());
        let aid = t.constant(a.clone());
        let waid = t.constant(wa.clone());
        let fused = cross_view_attention(&mut t, hid, xid, aid, waid).unwrap();
        for i in 0..4 {
            let hrow: Vec<f64> = (0..3).map(|c| h.at(i, c)).collect();
            let xrow: Vec<f64> = (0..3).map(|c| x.at(i, c)).collect();
            let s1 = score(&hrow);
            let s2 = score(&xrow);
            let m = s1.max(s2);
            let e1 = (s1 - m).exp();
            let e2 = (s2 - m).exp();
            let want = e1 / (e1 + e2);
            assert!((t.value(fused.alpha_seq).at(i, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_item_gets_unique_max_score() {
        // g equals item row 1, all rows mutually orthogonal.
        let mut t = Tape::new();
        let mut table = Tensor::zeros(vec![5, 3]); // 2 reserved + 3 items
        table.data_mut()[2 * 3] = 1.0; // item 0 -> e_x
        table.data_mut()[3 * 3 + 1] = 1.0; // item 1 -> e_y
        table.data_mut()[4 * 3 + 2] = 1.0; // item 2 -> e_z
        let tid = t.constant(table);
        let g = t.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]));
        let scores = score_items(&mut t, g, tid, 3).unwrap();
        let s = t.value(scores);
        assert_eq!(s.shape(), &[1, 3]);
        assert!(s.at(0, 1) > s.at(0, 0) && s.at(0, 1) > s.at(0, 2));
    }

    #[test]
    fn zero_vector_scores_zero_everywhere() {
        let mut r = rng(4);
        let mut t = Tape::new();
        let table = t.constant(uniform(vec![6, 3], -1.0, 1.0, &mut r));
        let g = t.constant(Tensor::zeros(vec![1, 3]));
        let scores = score_items(&mut t, g, table, 4).unwrap();
        assert!(t.value(scores).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scores_match_matmul_oracle() {
        let mut r = rng(5);
        let table = uniform(vec![7, 4], -1.0, 1.0, &mut r);
        let g = uniform(vec![2, 4], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let tid = t.constant(table.clone());
        let gid = t.constant(g.clone());
        let scores = score_items(&mut t, gid, tid, 5).unwrap();
        for m in 0..2 {
            for item in 0..5 {
                let want: f64 = (0..4).map(|c| g.at(m, c) * table.at(item + 2, c)).sum();
                assert!((t.value(scores).at(m, item) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_cost_log_catalog_size() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![1, 100]));
        let loss = cloze_loss(&mut t, logits, &[42]).unwrap();
        assert!((t.value(loss).data()[0] - (100.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_logit_loss_is_negligible() {
        let mut data = vec![0.0; 50];
        data[7] = 30.0;
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new(vec![1, 50], data).unwrap());
        let loss = cloze_loss(&mut t, logits, &[7]).unwrap();
        assert!(t.value(loss).data()[0] < 1e-9);
    }

    #[test]
    fn loss_matches_log_sum_exp_oracle() {
        let mut r = rng(6);
        let logits = uniform(vec![3, 20], -2.0, 2.0, &mut r);
        let labels = [4usize, 0, 19];
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..20).map(|c| logits.at(i, c)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[l];
        }
        want /= 3.0;
        let mut t = Tape::new();
        let lid = t.constant(logits);
        let loss = cloze_loss(&mut t, lid, &labels).unwrap();
        assert!((t.value(loss).data()[0] - want).abs() < 1e-10);
        assert!(t.value(loss).data()[0] >= 0.0);
    }

    #[test]
    fn empty_mask_set_is_skip_signal() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![0, 5]));
        assert!(cloze_loss(&mut t, logits, &[]).is_err());
    }
}
