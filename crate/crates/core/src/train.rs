//! Training loop: shuffled mini-batches of masked sequences, Adam
//! updates, per-epoch validation, and early stopping.

use crate::config::{EvalSection, TrainSection};
use crate::data::{BehaviorSequence, DatasetStats, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mix_seed, RankingMetrics};
use crate::model::{ForwardMode, Model};
use crate::tensor::{adam_step, AdamState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub val: Option<RankingMetrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Epoch with the best validation HR@5 (the restored checkpoint).
    pub converged_epoch: Option<usize>,
}

/// One pass over the training users in shuffled mini-batches. Returns
/// the mean masked cross-entropy over the epoch.
pub fn train_epoch(
    model: &mut Model,
    train: &[(u64, BehaviorSequence)],
    optimizer: &mut AdamState,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    let mut order: Vec<usize> = (0..train.len())
        // Sequences without masked positions carry no loss signal.
        .filter(|&i| !train[i].1.masked_positions().is_empty())
        .collect();
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut mask_total = 0usize;
    for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
        let batch: Vec<(u64, &BehaviorSequence)> =
            chunk.iter().map(|&i| (train[i].0, &train[i].1)).collect();
        let mut fwd = model.forward_batch(&batch, ForwardMode::Train, Some(&mut rng))?;
        let Some(loss_id) = fwd.loss else { continue };
        let loss = fwd.tape.value(loss_id).data()[0];
        if !loss.is_finite() {
            return Err(Error::NanLoss { batch: batch_idx });
        }
        loss_sum += loss * fwd.masked_count as f64;
        mask_total += fwd.masked_count;
        let grads = Model::gradients(&mut fwd)?;
        let mut params = model.params_mut();
        adam_step(&mut params, &grads, optimizer)?;
    }
    Ok(if mask_total == 0 { 0.0 } else { loss_sum / mask_total as f64 })
}

/// Full training run with per-epoch validation and early stopping on
/// validation HR@5. The model is left at the best-validation epoch.
pub fn train(
    model: &mut Model,
    splits: &Splits,
    stats: &DatasetStats,
    tcfg: &TrainSection,
    ecfg: &EvalSection,
) -> Result<TrainReport> {
    let train_set: Vec<(u64, BehaviorSequence)> =
        splits.train.iter().map(|(&u, s)| (u, s.clone())).collect();
    let mut optimizer = AdamState::new(tcfg.adam());
    let mut report = TrainReport::default();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        let loss =
            train_epoch(model, &train_set, &mut optimizer, tcfg.batch_size, tcfg.seed, epoch)?;
        let val = evaluate(model, &splits.valid, stats, &ecfg.ns, ecfg.n_neg, tcfg.seed)?;
        let hr5 = val.hr_at(5);
        let seconds = start.elapsed().as_secs_f64();
        report.epochs.push(EpochReport { epoch, loss, val: Some(val), seconds });

        let improved = best.as_ref().map_or(true, |(_, best_hr, _)| hr5 > *best_hr);
        if improved {
            best = Some((epoch, hr5, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                break;
            }
        }
    }

    if let Some((epoch, _, best_model)) = best {
        *model = best_model;
        report.converged_epoch = Some(epoch);
    }
    Ok(report)
}

/// Emit the per-epoch table: `epoch,loss,val_hr_5,val_ndcg_5,val_mrr,seconds`.
pub fn write_train_report(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,val_hr_5,val_ndcg_5,val_mrr,seconds\n");
    for row in &report.epochs {
        let (hr5, ndcg5, mrr) = match &row.val {
            Some(v) => (
                format!("{:.6}", v.hr_at(5)),
                format!("{:.6}", v.ndcg.get(&5).copied().unwrap_or(0.0)),
                format!("{:.6}", v.mrr),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{:.6},{},{},{},{:.3}\n",
            row.epoch, row.loss, hr5, ndcg5, mrr, row.seconds
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{build_sequences, split_leave_one_out, DatasetStats};
    use crate::model::ModelDims;
    use crate::synthetic::{planted_chain_events, SyntheticSpec};

    fn tiny_setup() -> (RunConfig, Splits, DatasetStats) {
        let config = RunConfig::from_toml(
            r#"
[dataset]
path = "unused.csv"
behaviors = ["pv", "fav", "buy"]
target = "buy"

[model]
j = 8
d = 8
layers = 1
heads = 2
c = 2
p1 = 2
p2 = 4
k = 2
dropout = 0.1

[train]
batch_size = 8
seed = 5
"#,
            &[],
        )
        .unwrap();
        let events = planted_chain_events(&SyntheticSpec {
            users: 12,
            items: 10,
            chains_per_user: 4,
            seed: 9,
        });
        let stats = DatasetStats::build(&events, 3);
        let built = build_sequences(&events, &stats, 8, 2).unwrap();
        let splits = split_leave_one_out(&built.sequences, 2);
        (config, splits, stats)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (config, splits, stats) = tiny_setup();
        let dims = ModelDims::from_config(&config, stats.item_count(), 3);
        let mut model = Model::init(dims, 1);
        let before = model.param_hash();
        let train_set: Vec<(u64, BehaviorSequence)> =
            splits.train.iter().map(|(&u, s)| (u, s.clone())).collect();
        let mut adam = AdamState::new(crate::tensor::AdamConfig { lr: 0.0, ..Default::default() });
        train_epoch(&mut model, &train_set, &mut adam, 8, 5, 0).unwrap();
        assert_eq!(model.param_hash(), before);
    }

    #[test]
    fn fixed_seed_reproduces_identical_epoch_losses() {
        let (config, splits, stats) = tiny_setup();
        let run = || {
            let dims = ModelDims::from_config(&config, stats.item_count(), 3);
            let mut model = Model::init(dims, 1);
            let train_set: Vec<(u64, BehaviorSequence)> =
                splits.train.iter().map(|(&u, s)| (u, s.clone())).collect();
            let mut adam = AdamState::new(config.train.adam());
            (0..3)
                .map(|e| {
                    train_epoch(&mut model, &train_set, &mut adam, 8, 5, e).unwrap()
                })
                .collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn evaluation_never_mutates_parameters() {
        let (config, splits, stats) = tiny_setup();
        let dims = ModelDims::from_config(&config, stats.item_count(), 3);
        let model = Model::init(dims, 2);
        let before = model.param_hash();
        let _ = evaluate(&model, &splits.test, &stats, &[5, 10], 100, 5).unwrap();
        assert_eq!(model.param_hash(), before);
    }

    #[test]
    fn training_reduces_loss_on_planted_patterns() {
        let (config, splits, stats) = tiny_setup();
        let dims = ModelDims::from_config(&config, stats.item_count(), 3);
        let mut model = Model::init(dims, 1);
        let train_set: Vec<(u64, BehaviorSequence)> =
            splits.train.iter().map(|(&u, s)| (u, s.clone())).collect();
        let mut adam =
            AdamState::new(crate::tensor::AdamConfig { lr: 3e-3, ..Default::default() });
        let first = train_epoch(&mut model, &train_set, &mut adam, 8, 5, 0).unwrap();
        let mut last = first;
        for e in 1..10 {
            last = train_epoch(&mut model, &train_set, &mut adam, 8, 5, e).unwrap();
        }
        assert!(last < first, "loss should drop: first {first}, last {last}");
    }
}
