//! Wall-clock comparisons of the attention and propagation variants.
//!
//! Timings are medians over repeated forward passes on fixed random
//! instances; all runs share the same tape machinery so the comparison
//! isolates the arithmetic being swapped.

use crate::data::BehaviorSequence;
use crate::encoder::{self, HeadIds, Regime};
use crate::error::Result;
use crate::hypergraph::{self, SequenceTopology};
use crate::tensor::{uniform, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn median_us(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = samples.len() / 2;
    if samples.len() % 2 == 0 {
        0.5 * (samples[mid - 1] + samples[mid])
    } else {
        samples[mid]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBenchRow {
    pub j: usize,
    pub d: usize,
    pub c: usize,
    pub median_lowrank_us: f64,
    pub median_dense_us: f64,
    pub reps: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionBench {
    pub rows: Vec<AttentionBenchRow>,
    /// Max |lowrank - dense| with C=1 identity projections.
    pub c1_identity_max_diff: f64,
}

/// Time low-rank attention against dense attention at each compression
/// scale, and verify the C=1 identity-projection case reproduces dense
/// outputs numerically.
pub fn benchmark_attention(
    j: usize,
    d: usize,
    cs: &[usize],
    reps: usize,
    seed: u64,
) -> Result<AttentionBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = uniform(vec![j, d], -1.0, 1.0, &mut rng);
    let wq = uniform(vec![d, d], -0.2, 0.2, &mut rng);
    let wk = uniform(vec![d, d], -0.2, 0.2, &mut rng);
    let wv = uniform(vec![d, d], -0.2, 0.2, &mut rng);

    let dense_run = |h: &Tensor| -> (f64, Tape, TensorId) {
        let start = Instant::now();
        let mut tape = Tape::new();
        let hid = tape.constant(h.clone());
        let head = HeadIds {
            wq: tape.constant(wq.clone()),
            wk: tape.constant(wk.clone()),
            wv: tape.constant(wv.clone()),
        };
        let out = encoder::scale_attention(&mut tape, hid, head, &mut Regime::Eval).unwrap();
        (start.elapsed().as_secs_f64() * 1e6, tape, out.out)
    };

    let mut dense_samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        dense_samples.push(dense_run(&h).0);
    }
    let median_dense = median_us(dense_samples);

    let mut rows = Vec::new();
    let mut c1_identity_max_diff = 0.0f64;
    for &c in cs {
        assert_eq!(j % c, 0, "J must be divisible by every C");
        let (e, f) = if c == 1 {
            (Tensor::eye(j), Tensor::eye(j))
        } else {
            (
                uniform(vec![j / c, j], -0.2, 0.2, &mut rng),
                uniform(vec![j / c, j], -0.2, 0.2, &mut rng),
            )
        };
        let mut samples = Vec::with_capacity(reps);
        let mut last_out: Option<Vec<f64>> = None;
        for _ in 0..reps {
            let start = Instant::now();
            let mut tape = Tape::new();
            let hid = tape.constant(h.clone());
            let eid = tape.constant(e.clone());
            let fid = tape.constant(f.clone());
            let head = HeadIds {
                wq: tape.constant(wq.clone()),
                wk: tape.constant(wk.clone()),
                wv: tape.constant(wv.clone()),
            };
            let out =
                encoder::lowrank_attention(&mut tape, hid, eid, fid, head, &mut Regime::Eval)?;
            samples.push(start.elapsed().as_secs_f64() * 1e6);
            last_out = Some(tape.value(out.out).data().to_vec());
        }
        if c == 1 {
            let (_, dense_tape, dense_out) = dense_run(&h);
            let dense_vals = dense_tape.value(dense_out).data();
            let diff = last_out
                .as_ref()
                .unwrap()
                .iter()
                .zip(dense_vals)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            c1_identity_max_diff = c1_identity_max_diff.max(diff);
        }
        rows.push(AttentionBenchRow {
            j,
            d,
            c,
            median_lowrank_us: median_us(samples),
            median_dense_us: median_dense,
            reps,
        });
    }
    Ok(AttentionBench { rows, c1_identity_max_diff })
}

#[derive(Clone, Debug)]
pub struct HyperconvBenchRow {
    pub j: usize,
    pub k: usize,
    pub w0: f64,
    pub median_full_us: f64,
    pub median_simplified_us: f64,
    pub mean_abs_divergence: f64,
    pub max_abs_divergence: f64,
    pub reps: usize,
}

/// Time the two propagation modes on random per-user instances and
/// record how far their outputs diverge.
pub fn benchmark_hyperconv(
    js: &[usize],
    k: usize,
    w0: f64,
    d: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<HyperconvBenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &j in js {
        // Random sequence over a catalog half the sequence length, so
        // repeated items (behavior hyperedges) are plentiful.
        let catalog = (j / 2).max(2);
        let events: Vec<(u32, u8)> = (0..j)
            .map(|_| (rng.gen_range(0..catalog) as u32, rng.gen_range(0..3u8)))
            .collect();
        let seq = BehaviorSequence::from_events(&events, j);
        let topo = SequenceTopology::of(&seq);

        // Shared structure, built outside the timed region.
        let mut setup = Tape::new();
        let item_table = uniform(vec![catalog + 2, d], -1.0, 1.0, &mut rng);
        let beh_table = uniform(vec![5, d], -1.0, 1.0, &mut rng);
        let items = setup.constant(item_table);
        let behs = setup.constant(beh_table);
        let iv = setup.gather_rows(items, &seq.item_tokens())?;
        let bv = setup.gather_rows(behs, &seq.behavior_tokens())?;
        let v = setup.add(iv, bv)?;
        let w = setup.constant(Tensor::filled(vec![1, d], 1.0));
        let beta_id = hypergraph::pairwise_semantic(&mut setup, v, &[w])?;
        let beta = setup.value(beta_id).clone();
        let topk = hypergraph::top_k_anchors(&topo, &beta, k);
        let inc = hypergraph::build_incidence(&mut setup, &topo, Some(beta_id), k, true, true)?;
        let m = setup.value(inc.id.expect("instance has hyperedges")).clone();
        let op = hypergraph::build_simplified_operator(
            &mut setup,
            &topo,
            Some(beta_id),
            &topk,
            w0,
            true,
            true,
        )?;
        let m_prime = setup.value(op.id).clone();
        let x = uniform(vec![j, d], -1.0, 1.0, &mut rng);

        let mut full_samples = Vec::with_capacity(reps);
        let mut simp_samples = Vec::with_capacity(reps);
        let mut full_out = Vec::new();
        let mut simp_out = Vec::new();
        for _ in 0..reps {
            let start = Instant::now();
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let mi = tape.constant(m.clone());
            let out = hypergraph::hyperconv_full(&mut tape, xi, mi)?;
            full_samples.push(start.elapsed().as_secs_f64() * 1e6);
            full_out = tape.value(out).data().to_vec();

            let start = Instant::now();
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let mi = tape.constant(m_prime.clone());
            let out = hypergraph::hyperconv_simplified(&mut tape, xi, mi)?;
            simp_samples.push(start.elapsed().as_secs_f64() * 1e6);
            simp_out = tape.value(out).data().to_vec();
        }
        let diffs: Vec<f64> =
            full_out.iter().zip(&simp_out).map(|(a, b)| (a - b).abs()).collect();
        rows.push(HyperconvBenchRow {
            j,
            k,
            w0,
            median_full_us: median_us(full_samples),
            median_simplified_us: median_us(simp_samples),
            mean_abs_divergence: diffs.iter().sum::<f64>() / diffs.len() as f64,
            max_abs_divergence: diffs.iter().cloned().fold(0.0, f64::max),
            reps,
        });
    }
    Ok(rows)
}

/// Emit the attention table:
/// `j,d,c,median_lowrank_us,median_dense_us,reps`.
pub fn write_attention_table(bench: &AttentionBench, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("j,d,c,median_lowrank_us,median_dense_us,reps\n");
    for r in &bench.rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{}\n",
            r.j, r.d, r.c, r.median_lowrank_us, r.median_dense_us, r.reps
        ));
    }
    std::fs::write(path, out).map_err(|e| crate::Error::io(path, e))
}

/// Emit the propagation table: `j,k,w0,median_full_us,
/// median_simplified_us,mean_abs_divergence,max_abs_divergence,reps`.
pub fn write_hyperconv_table(rows: &[HyperconvBenchRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from(
        "j,k,w0,median_full_us,median_simplified_us,mean_abs_divergence,max_abs_divergence,reps\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.6e},{:.6e},{}\n",
            r.j,
            r.k,
            r.w0,
            r.median_full_us,
            r.median_simplified_us,
            r.mean_abs_divergence,
            r.max_abs_divergence,
            r.reps
        ));
    }
    std::fs::write(path, out).map_err(|e| crate::Error::io(path, e))
}
