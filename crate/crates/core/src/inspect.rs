//! Case-study exports: attention maps, view weights, and the
//! hypergraph operators for a single user, written as
//! delimiter-separated matrices.

use crate::data::{BehaviorSequence, Slot};
use crate::error::{Error, Result};
use crate::fusion;
use crate::hypergraph::{self, SequenceTopology};
use crate::model::{ForwardMode, Model};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Write a matrix with a one-line `c0,c1,...` header and full float
/// precision (round-trips exactly through `parse_matrix`).
pub fn write_matrix(t: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = t.dims2("write_matrix")?;
    let mut out = String::new();
    out.push_str(
        &(0..cols).map(|c| format!("c{c}")).collect::<Vec<_>>().join(","),
    );
    out.push('\n');
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{:.17e}", t.at(r, c))).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read back a matrix written by [`write_matrix`].
pub fn parse_matrix(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols = if header.is_empty() { 0 } else { header.split(',').count() };
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            data.push(field.parse::<f64>().map_err(|_| Error::Checkpoint(
                format!("bad float '{field}' in {}", path.display()),
            ))?);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols], data)
}

/// Exported artifacts for one user.
pub struct InspectionOutput {
    pub files: Vec<PathBuf>,
}

/// Run one evaluation forward pass and export, per layer and head, the
/// attention probability matrices of each scale; the cross-view weight
/// pair per non-PAD position; and the incidence matrix, its one-matrix
/// approximation, and the realized two-stage operator `M M^T`.
pub fn export_inspection(
    model: &Model,
    user: u64,
    seq: &BehaviorSequence,
    out_dir: &Path,
) -> Result<InspectionOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut fwd = model.forward_batch(&[(user, seq)], ForwardMode::Eval, None)?;
    let mut files = Vec::new();

    // Attention probability matrices.
    for (l, layer) in fwd.users[0].trace.layers.iter().enumerate() {
        for (tag, probs) in [
            ("lowrank", &layer.lowrank),
            ("scale1", &layer.scale1),
            ("scale2", &layer.scale2),
        ] {
            for (h, &p) in probs.iter().enumerate() {
                let path = out_dir.join(format!("attn_l{l}_h{h}_{tag}.csv"));
                write_matrix(fwd.tape.value(p), &path)?;
                files.push(path);
            }
        }
    }

    // Cross-view weights for every non-PAD position: masked positions
    // use the sliding-window pooled hypergraph embedding, visible ones
    // their own row.
    if let (Some(hyper_avg), Some((attn_a, attn_wa))) =
        (fwd.users[0].hyper_avg, fwd.bound.fusion)
    {
        let encoded = fwd.users[0].encoded;
        let positions: Vec<usize> = (0..seq.len())
            .filter(|&p| !matches!(seq.slot(p), Slot::Pad))
            .collect();
        let windows: Vec<Vec<usize>> = positions
            .iter()
            .map(|&p| match seq.slot(p) {
                Slot::Masked { .. } => {
                    hypergraph::pool_window(seq, p, model.dims.q1, model.dims.q2)
                }
                _ => vec![p],
            })
            .collect();
        let x_rows = fwd.tape.window_pool(hyper_avg, &windows)?;
        let h_rows = fwd.tape.gather_rows(encoded, &positions)?;
        let fused =
            fusion::cross_view_attention(&mut fwd.tape, h_rows, x_rows, attn_a, attn_wa)?;
        let mut out = String::from("position,alpha_seq,alpha_hyper\n");
        for (i, &p) in positions.iter().enumerate() {
            out.push_str(&format!(
                "{p},{:.17e},{:.17e}\n",
                fwd.tape.value(fused.alpha_seq).at(i, 0),
                fwd.tape.value(fused.alpha_hyper).at(i, 0)
            ));
        }
        let path = out_dir.join("alphas.csv");
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }

    // Hypergraph structures: both forms are exported regardless of the
    // configured propagation mode, plus the realized M M^T product.
    if model.dims.ablation != crate::config::Ablation::NoHypergraph {
        let tape = &mut fwd.tape;
        let topo = SequenceTopology::of(seq);
        let items = tape.gather_rows(fwd.bound.encoder.item_table, &seq.item_tokens())?;
        let behs = tape.gather_rows(fwd.bound.encoder.beh_table, &seq.behavior_tokens())?;
        let v = tape.add(items, behs)?;
        let visible: Vec<f64> =
            (0..seq.len()).map(|p| if topo.visible(p) { 1.0 } else { 0.0 }).collect();
        let visible_col = tape.constant(Tensor::new(vec![seq.len(), 1], visible)?);
        let v_visible = tape.mul_col(v, visible_col)?;
        let with_semantic = fwd.bound.metric.is_some();
        let with_behavior = model.dims.ablation != crate::config::Ablation::NoMbHyper;
        let beta = match &fwd.bound.metric {
            Some(channels) => Some(hypergraph::pairwise_semantic(tape, v_visible, channels)?),
            None => None,
        };
        let inc = hypergraph::build_incidence(
            tape,
            &topo,
            beta,
            model.dims.k,
            with_semantic,
            with_behavior,
        )?;
        let topk = beta
            .map(|b| hypergraph::top_k_anchors(&topo, tape.value(b), model.dims.k))
            .unwrap_or_default();
        let op = hypergraph::build_simplified_operator(
            tape,
            &topo,
            beta,
            &topk,
            model.dims.w0,
            with_semantic,
            with_behavior,
        )?;

        let incidence_value = match inc.id {
            Some(m) => tape.value(m).clone(),
            None => Tensor::zeros(vec![seq.len(), 0]),
        };
        let mmt_value = match inc.id {
            Some(m) => {
                let mt = tape.transpose(m)?;
                let mmt = tape.matmul(m, mt)?;
                tape.value(mmt).clone()
            }
            None => Tensor::zeros(vec![seq.len(), seq.len()]),
        };
        for (name, value) in [
            ("incidence.csv", &incidence_value),
            ("mprime.csv", tape.value(op.id)),
            ("mmt.csv", &mmt_value),
        ] {
            let path = out_dir.join(name);
            write_matrix(value, &path)?;
            files.push(path);
        }
    }

    Ok(InspectionOutput { files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{apply_cloze_mask, MaskMode};
    use crate::model::ModelDims;

    fn setup() -> (Model, BehaviorSequence) {
        let config = RunConfig::from_toml(
            r#"
[dataset]
path = "x.csv"
behaviors = ["pv", "fav", "buy"]
target = "buy"

[model]
j = 8
d = 8
layers = 2
heads = 2
c = 2
p1 = 2
p2 = 4
k = 2
"#,
            &[],
        )
        .unwrap();
        let model = Model::init(ModelDims::from_config(&config, 10, 3), 9);
        let events: Vec<(u32, u8)> =
            vec![(0, 0), (1, 1), (2, 2), (3, 0), (2, 2), (4, 1), (5, 2), (6, 0)];
        let seq = BehaviorSequence::from_events(&events, 8);
        let seq = apply_cloze_mask(&seq, 2, MaskMode::Eval).unwrap();
        (model, seq)
    }

    #[test]
    fn matrix_files_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let t = crate::tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let path = dir.path().join("m.csv");
        write_matrix(&t, &path).unwrap();
        let back = parse_matrix(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn exported_attention_rows_sum_to_one() {
        let (model, seq) = setup();
        let dir = tempfile::tempdir().unwrap();
        let out = export_inspection(&model, 1, &seq, dir.path()).unwrap();
        let attn_files: Vec<_> = out
            .files
            .iter()
            .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("attn_"))
            .collect();
        // 2 layers x 2 heads x 3 scales.
        assert_eq!(attn_files.len(), 12);
        for f in attn_files {
            let m = parse_matrix(f).unwrap();
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            for r in 0..rows {
                let sum: f64 = (0..cols).map(|c| m.at(r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-6, "{}: row {r} sums to {sum}", f.display());
            }
        }
    }

    #[test]
    fn exported_alphas_sum_to_one_per_position() {
        let (model, seq) = setup();
        let dir = tempfile::tempdir().unwrap();
        export_inspection(&model, 1, &seq, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("alphas.csv")).unwrap();
        let mut count = 0;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let a1: f64 = fields[1].parse().unwrap();
            let a2: f64 = fields[2].parse().unwrap();
            assert_eq!(a1 + a2, 1.0);
            count += 1;
        }
        assert_eq!(count, 8); // all positions are non-PAD here
    }

    #[test]
    fn exported_product_matches_in_memory_product() {
        let (model, seq) = setup();
        let dir = tempfile::tempdir().unwrap();
        export_inspection(&model, 1, &seq, dir.path()).unwrap();
        let m = parse_matrix(&dir.path().join("incidence.csv")).unwrap();
        let mmt = parse_matrix(&dir.path().join("mmt.csv")).unwrap();
        let (j, e) = (m.shape()[0], m.shape()[1]);
        for a in 0..j {
            for b in 0..j {
                let want: f64 = (0..e).map(|c| m.at(a, c) * m.at(b, c)).sum();
                assert!((mmt.at(a, b) - want).abs() < 1e-12);
            }
        }
    }
}
