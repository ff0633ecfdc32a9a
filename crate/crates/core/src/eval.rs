//! Leave-one-out ranking evaluation with popularity-sampled negatives.

use crate::data::{sample_negatives, BehaviorSequence, DatasetStats};
use crate::error::Result;
use crate::model::{ForwardMode, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// splitmix64-style mixer for deriving per-user / per-epoch streams
/// from one experiment seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mean ranking quality over evaluated users.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub users_evaluated: usize,
}

impl RankingMetrics {
    pub fn hr_at(&self, n: usize) -> f64 {
        self.hr.get(&n).copied().unwrap_or(0.0)
    }
}

/// Accumulates per-user ranks into mean HR@N / NDCG@N / MRR.
pub struct RankingAccumulator {
    ns: Vec<usize>,
    hr_hits: BTreeMap<usize, usize>,
    ndcg_sums: BTreeMap<usize, f64>,
    mrr_sum: f64,
    users: usize,
}

impl RankingAccumulator {
    pub fn new(ns: &[usize]) -> Self {
        Self {
            ns: ns.to_vec(),
            hr_hits: ns.iter().map(|&n| (n, 0)).collect(),
            ndcg_sums: ns.iter().map(|&n| (n, 0.0)).collect(),
            mrr_sum: 0.0,
            users: 0,
        }
    }

    /// Record one user's 1-based rank of the ground truth.
    pub fn add_rank(&mut self, rank: usize) {
        debug_assert!(rank >= 1);
        for &n in &self.ns {
            if rank <= n {
                *self.hr_hits.get_mut(&n).unwrap() += 1;
                *self.ndcg_sums.get_mut(&n).unwrap() += 1.0 / ((rank + 1) as f64).log2();
            }
        }
        self.mrr_sum += 1.0 / rank as f64;
        self.users += 1;
    }

    pub fn finish(self) -> RankingMetrics {
        let users = self.users.max(1) as f64;
        RankingMetrics {
            hr: self.hr_hits.iter().map(|(&n, &h)| (n, h as f64 / users)).collect(),
            ndcg: self.ndcg_sums.iter().map(|(&n, &s)| (n, s / users)).collect(),
            mrr: self.mrr_sum / users,
            users_evaluated: self.users,
        }
    }
}

/// 1-based rank of the ground truth among scored candidates; ties are
/// broken by ascending item id so metrics are deterministic.
pub fn rank_of_truth(candidates: &[(u32, f64)], truth: u32, truth_score: f64) -> usize {
    let mut rank = 1;
    for &(id, score) in candidates {
        if id == truth {
            continue;
        }
        if score > truth_score || (score == truth_score && id < truth) {
            rank += 1;
        }
    }
    rank
}

const EVAL_BATCH: usize = 64;

/// Rank each user's held-out item against `n_neg` popularity-sampled
/// negatives. Never touches gradients; negatives are reproducible from
/// the seed alone.
pub fn evaluate(
    model: &Model,
    split: &BTreeMap<u64, BehaviorSequence>,
    stats: &DatasetStats,
    ns: &[usize],
    n_neg: usize,
    seed: u64,
) -> Result<RankingMetrics> {
    let mut acc = RankingAccumulator::new(ns);
    let entries: Vec<(u64, &BehaviorSequence)> =
        split.iter().map(|(&u, s)| (u, s)).collect();
    for chunk in entries.chunks(EVAL_BATCH) {
        let fwd = model.forward_batch(chunk, ForwardMode::Eval, None)?;
        for user_fwd in &fwd.users {
            let Some(logits) = user_fwd.logits else { continue };
            let scores = fwd.tape.value(logits);
            // Eval-mode sequences carry exactly one masked position.
            let truth = user_fwd.labels[0] as u32;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, user_fwd.user));
            let negatives =
                sample_negatives(user_fwd.user, truth, n_neg, &stats.frequency, &mut rng);
            let truth_score = scores.at(0, truth as usize);
            let candidates: Vec<(u32, f64)> = negatives
                .candidates
                .iter()
                .map(|&id| (id, scores.at(0, id as usize)))
                .collect();
            acc.add_rank(rank_of_truth(&candidates, truth, truth_score));
        }
    }
    Ok(acc.finish())
}

/// Emit metrics as a delimiter-separated table: `metric,n,value`.
pub fn write_metrics(metrics: &RankingMetrics, path: &Path) -> Result<()> {
    let mut out = String::from("metric,n,value\n");
    for (n, v) in &metrics.hr {
        out.push_str(&format!("hr,{n},{v:.6}\n"));
    }
    for (n, v) in &metrics.ndcg {
        out.push_str(&format!("ndcg,{n},{v:.6}\n"));
    }
    out.push_str(&format!("mrr,,{:.6}\n", metrics.mrr));
    out.push_str(&format!("users,,{}\n", metrics.users_evaluated));
    let mut f = std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| crate::Error::io(path, e))
}

/// One-paragraph human summary.
pub fn format_summary(metrics: &RankingMetrics) -> String {
    let mut parts = Vec::new();
    for (n, v) in &metrics.hr {
        parts.push(format!("HR@{n}={v:.4}"));
    }
    for (n, v) in &metrics.ndcg {
        parts.push(format!("NDCG@{n}={v:.4}"));
    }
    parts.push(format!("MRR={:.4}", metrics.mrr));
    format!("{} over {} users", parts.join(" "), metrics.users_evaluated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rank_one_gives_perfect_metrics() {
        let mut acc = RankingAccumulator::new(&[5, 10]);
        acc.add_rank(1);
        let m = acc.finish();
        assert_eq!(m.hr_at(5), 1.0);
        assert_eq!(m.ndcg[&5], 1.0);
        assert_eq!(m.mrr, 1.0);
    }

    #[test]
    fn rank_four_matches_closed_form() {
        let mut acc = RankingAccumulator::new(&[5]);
        acc.add_rank(4);
        let m = acc.finish();
        assert_eq!(m.hr_at(5), 1.0);
        assert!((m.ndcg[&5] - 1.0 / 5.0f64.log2()).abs() < 1e-12);
        assert!((m.ndcg[&5] - 0.4307).abs() < 1e-4);
        assert_eq!(m.mrr, 0.25);
    }

    #[test]
    fn rank_twelve_misses_top_ten() {
        let mut acc = RankingAccumulator::new(&[10]);
        acc.add_rank(12);
        let m = acc.finish();
        assert_eq!(m.hr_at(10), 0.0);
        assert_eq!(m.ndcg[&10], 0.0);
        assert!((m.mrr - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_ascending_item_id() {
        // truth id 5 scores 1.0; id 3 ties, id 7 ties.
        let candidates = vec![(3u32, 1.0), (7u32, 1.0), (9u32, 0.5)];
        // id 3 < 5 outranks truth; id 7 > 5 does not.
        assert_eq!(rank_of_truth(&candidates, 5, 1.0), 2);
    }

    #[test]
    fn random_scorer_hits_at_its_base_rate() {
        // 1 truth + 100 negatives, random scores: P(rank <= 5) = 5/101.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = RankingAccumulator::new(&[5]);
        for _ in 0..2000 {
            let truth_score: f64 = rng.gen();
            let candidates: Vec<(u32, f64)> =
                (0..100).map(|i| (i as u32, rng.gen())).collect();
            acc.add_rank(rank_of_truth(&candidates, 200, truth_score));
        }
        let hr = acc.finish().hr_at(5);
        assert!((hr - 5.0 / 101.0).abs() < 0.01, "random HR@5 = {hr}");
    }

    proptest::proptest! {
        #[test]
        fn hr_monotone_in_n_and_ndcg_bounded_by_hr(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = RankingAccumulator::new(&[1, 5, 10, 20]);
            for _ in 0..50 {
                acc.add_rank(rng.gen_range(1..30));
            }
            let m = acc.finish();
            proptest::prop_assert!(m.hr_at(1) <= m.hr_at(5));
            proptest::prop_assert!(m.hr_at(5) <= m.hr_at(10));
            proptest::prop_assert!(m.hr_at(10) <= m.hr_at(20));
            for (&n, &ndcg) in &m.ndcg {
                proptest::prop_assert!(ndcg <= m.hr_at(n) + 1e-12);
                proptest::prop_assert!((0.0..=1.0).contains(&ndcg));
            }
            proptest::prop_assert!((0.0..=1.0).contains(&m.mrr));
        }
    }
}
