//! Full model: parameter store, tape binding, and the fused two-view
//! forward pass over a batch of sequences.

use crate::config::{Ablation, ConvMode, RunConfig};
use crate::data::BehaviorSequence;
use crate::encoder::{self, EncodeTrace, EncoderIds, HeadIds, LayerAttentionIds, LayerIds, Regime};
use crate::error::{Error, Result};
use crate::fusion;
use crate::hypergraph::{self, SequenceTopology};
use crate::tensor::{truncated_normal, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const INIT_STD: f64 = 0.02;

/// Everything the architecture needs to know about its own shape.
#[derive(Clone, Debug)]
pub struct ModelDims {
    pub j: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub c: usize,
    pub p1: usize,
    pub p2: usize,
    pub k: usize,
    pub w0: f64,
    pub q1: usize,
    pub q2: usize,
    pub d_h: usize,
    pub dropout: f64,
    pub conv_mode: ConvMode,
    pub ablation: Ablation,
    pub metric_channels: usize,
    pub n_items: usize,
    pub n_behaviors: usize,
}

impl ModelDims {
    pub fn from_config(config: &RunConfig, n_items: usize, n_behaviors: usize) -> Self {
        let m = &config.model;
        Self {
            j: m.j,
            d: m.d,
            layers: m.layers,
            heads: m.heads,
            c: m.c,
            p1: m.p1,
            p2: m.p2,
            k: m.k,
            w0: m.w0,
            q1: m.q1,
            q2: m.q2,
            d_h: m.ffn_width(),
            dropout: m.dropout,
            conv_mode: m.conv_mode,
            ablation: m.ablation,
            metric_channels: m.metric_channels,
            n_items,
            n_behaviors,
        }
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn with_hypergraph(&self) -> bool {
        self.ablation != Ablation::NoHypergraph
    }

    fn with_semantic(&self) -> bool {
        self.with_hypergraph() && self.ablation != Ablation::NoMlHyper
    }

    fn with_behavior_edges(&self) -> bool {
        self.with_hypergraph() && self.ablation != Ablation::NoMbHyper
    }

    fn multiscale(&self) -> bool {
        self.ablation != Ablation::NoMsAttention
    }
}

#[derive(Clone)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Clone)]
pub enum AttnParams {
    MultiScale {
        e: Tensor,
        f: Tensor,
        lowrank: Vec<HeadParams>,
        scale1: Vec<HeadParams>,
        scale2: Vec<HeadParams>,
        fuse_w: Tensor,
    },
    Vanilla { heads: Vec<HeadParams> },
}

#[derive(Clone)]
pub struct LayerParams {
    pub attn: AttnParams,
    pub wd: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Clone)]
pub struct HypergraphParams {
    /// Metric channel weights; absent under the no-semantic ablation.
    pub metric: Option<Vec<Tensor>>,
    pub gate_w: Tensor,
    pub gate_r: Tensor,
}

#[derive(Clone)]
pub struct FusionParams {
    pub attn_a: Tensor,
    pub attn_wa: Tensor,
}

/// Trainable state. Ablated components simply have no parameters, so
/// their paths are verifiably absent from the computation graph.
#[derive(Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub item_table: Tensor,
    pub pos_table: Tensor,
    pub beh_table: Tensor,
    pub layers: Vec<LayerParams>,
    pub hypergraph: Option<HypergraphParams>,
    pub fusion: Option<FusionParams>,
}

impl Model {
    /// Fresh model with truncated-normal weights (PAD embedding rows
    /// zeroed) from a fixed seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let dh = dims.head_dim();
        let tn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| truncated_normal(shape, INIT_STD, rng);

        let mut item_table = tn(vec![dims.n_items + 2, d], &mut rng);
        let pos_table = tn(vec![dims.j, d], &mut rng);
        let mut beh_table = tn(vec![dims.n_behaviors + 2, d], &mut rng);
        for c in 0..d {
            item_table.data_mut()[c] = 0.0; // PAD row
            beh_table.data_mut()[c] = 0.0;
        }

        let mk_heads = |rng: &mut ChaCha8Rng| -> Vec<HeadParams> {
            (0..dims.heads)
                .map(|_| HeadParams {
                    wq: tn(vec![d, dh], rng),
                    wk: tn(vec![d, dh], rng),
                    wv: tn(vec![d, dh], rng),
                })
                .collect()
        };

        let layers = (0..dims.layers)
            .map(|_| {
                let attn = if dims.multiscale() {
                    AttnParams::MultiScale {
                        e: tn(vec![dims.j / dims.c, dims.j], &mut rng),
                        f: tn(vec![dims.j / dims.c, dims.j], &mut rng),
                        lowrank: mk_heads(&mut rng),
                        scale1: mk_heads(&mut rng),
                        scale2: mk_heads(&mut rng),
                        fuse_w: tn(
                            vec![dims.j, dims.j + dims.j / dims.p1 + dims.j / dims.p2],
                            &mut rng,
                        ),
                    }
                } else {
                    AttnParams::Vanilla { heads: mk_heads(&mut rng) }
                };
                LayerParams {
                    attn,
                    wd: tn(vec![d, d], &mut rng),
                    ffn_w1: tn(vec![d, dims.d_h], &mut rng),
                    ffn_b1: Tensor::zeros(vec![1, dims.d_h]),
                    ffn_w2: tn(vec![dims.d_h, d], &mut rng),
                    ffn_b2: Tensor::zeros(vec![1, d]),
                    ln1_gamma: Tensor::filled(vec![1, d], 1.0),
                    ln1_beta: Tensor::zeros(vec![1, d]),
                    ln2_gamma: Tensor::filled(vec![1, d], 1.0),
                    ln2_beta: Tensor::zeros(vec![1, d]),
                }
            })
            .collect();

        let hypergraph = dims.with_hypergraph().then(|| HypergraphParams {
            metric: dims.with_semantic().then(|| {
                (0..dims.metric_channels).map(|_| tn(vec![1, d], &mut rng)).collect()
            }),
            gate_w: tn(vec![d, 1], &mut rng),
            gate_r: Tensor::zeros(vec![1, 1]),
        });
        let fusion = dims.with_hypergraph().then(|| FusionParams {
            attn_a: tn(vec![d, 1], &mut rng),
            attn_wa: tn(vec![d, d], &mut rng),
        });

        Self {
            dims,
            item_table,
            pos_table,
            beh_table,
            layers,
            hypergraph,
            fusion,
        }
    }

    /// Visit every named parameter in a stable order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("item_table".into(), &self.item_table),
            ("pos_table".into(), &self.pos_table),
            ("beh_table".into(), &self.beh_table),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            match &layer.attn {
                AttnParams::MultiScale { e, f, lowrank, scale1, scale2, fuse_w } => {
                    out.push((format!("layer{l}.e"), e));
                    out.push((format!("layer{l}.f"), f));
                    for (n, h) in lowrank.iter().enumerate() {
                        out.push((format!("layer{l}.lowrank{n}.wq"), &h.wq));
                        out.push((format!("layer{l}.lowrank{n}.wk"), &h.wk));
                        out.push((format!("layer{l}.lowrank{n}.wv"), &h.wv));
                    }
                    for (n, h) in scale1.iter().enumerate() {
                        out.push((format!("layer{l}.scale1_{n}.wq"), &h.wq));
                        out.push((format!("layer{l}.scale1_{n}.wk"), &h.wk));
                        out.push((format!("layer{l}.scale1_{n}.wv"), &h.wv));
                    }
                    for (n, h) in scale2.iter().enumerate() {
                        out.push((format!("layer{l}.scale2_{n}.wq"), &h.wq));
                        out.push((format!("layer{l}.scale2_{n}.wk"), &h.wk));
                        out.push((format!("layer{l}.scale2_{n}.wv"), &h.wv));
                    }
                    out.push((format!("layer{l}.fuse_w"), fuse_w));
                }
                AttnParams::Vanilla { heads } => {
                    for (n, h) in heads.iter().enumerate() {
                        out.push((format!("layer{l}.vanilla{n}.wq"), &h.wq));
                        out.push((format!("layer{l}.vanilla{n}.wk"), &h.wk));
                        out.push((format!("layer{l}.vanilla{n}.wv"), &h.wv));
                    }
                }
            }
            out.push((format!("layer{l}.wd"), &layer.wd));
            out.push((format!("layer{l}.ffn_w1"), &layer.ffn_w1));
            out.push((format!("layer{l}.ffn_b1"), &layer.ffn_b1));
            out.push((format!("layer{l}.ffn_w2"), &layer.ffn_w2));
            out.push((format!("layer{l}.ffn_b2"), &layer.ffn_b2));
            out.push((format!("layer{l}.ln1_gamma"), &layer.ln1_gamma));
            out.push((format!("layer{l}.ln1_beta"), &layer.ln1_beta));
            out.push((format!("layer{l}.ln2_gamma"), &layer.ln2_gamma));
            out.push((format!("layer{l}.ln2_beta"), &layer.ln2_beta));
        }
        if let Some(h) = &self.hypergraph {
            if let Some(metric) = &h.metric {
                for (n, w) in metric.iter().enumerate() {
                    out.push((format!("metric{n}.w"), w));
                }
            }
            out.push(("gate.w".into(), &h.gate_w));
            out.push(("gate.r".into(), &h.gate_r));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.a".into(), &f.attn_a));
            out.push(("fusion.wa".into(), &f.attn_wa));
        }
        out
    }

    /// Mutable variant of [`Model::params`], same names, same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("item_table".into(), &mut self.item_table),
            ("pos_table".into(), &mut self.pos_table),
            ("beh_table".into(), &mut self.beh_table),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            match &mut layer.attn {
                AttnParams::MultiScale { e, f, lowrank, scale1, scale2, fuse_w } => {
                    out.push((format!("layer{l}.e"), e));
                    out.push((format!("layer{l}.f"), f));
                    for (n, h) in lowrank.iter_mut().enumerate() {
                        out.push((format!("layer{l}.lowrank{n}.wq"), &mut h.wq));
                        out.push((format!("layer{l}.lowrank{n}.wk"), &mut h.wk));
                        out.push((format!("layer{l}.lowrank{n}.wv"), &mut h.wv));
                    }
                    for (n, h) in scale1.iter_mut().enumerate() {
                        out.push((format!("layer{l}.scale1_{n}.wq"), &mut h.wq));
                        out.push((format!("layer{l}.scale1_{n}.wk"), &mut h.wk));
                        out.push((format!("layer{l}.scale1_{n}.wv"), &mut h.wv));
                    }
                    for (n, h) in scale2.iter_mut().enumerate() {
                        out.push((format!("layer{l}.scale2_{n}.wq"), &mut h.wq));
                        out.push((format!("layer{l}.scale2_{n}.wk"), &mut h.wk));
                        out.push((format!("layer{l}.scale2_{n}.wv"), &mut h.wv));
                    }
                    out.push((format!("layer{l}.fuse_w"), fuse_w));
                }
                AttnParams::Vanilla { heads } => {
                    for (n, h) in heads.iter_mut().enumerate() {
                        out.push((format!("layer{l}.vanilla{n}.wq"), &mut h.wq));
                        out.push((format!("layer{l}.vanilla{n}.wk"), &mut h.wk));
                        out.push((format!("layer{l}.vanilla{n}.wv"), &mut h.wv));
                    }
                }
            }
            out.push((format!("layer{l}.wd"), &mut layer.wd));
            out.push((format!("layer{l}.ffn_w1"), &mut layer.ffn_w1));
            out.push((format!("layer{l}.ffn_b1"), &mut layer.ffn_b1));
            out.push((format!("layer{l}.ffn_w2"), &mut layer.ffn_w2));
            out.push((format!("layer{l}.ffn_b2"), &mut layer.ffn_b2));
            out.push((format!("layer{l}.ln1_gamma"), &mut layer.ln1_gamma));
            out.push((format!("layer{l}.ln1_beta"), &mut layer.ln1_beta));
            out.push((format!("layer{l}.ln2_gamma"), &mut layer.ln2_gamma));
            out.push((format!("layer{l}.ln2_beta"), &mut layer.ln2_beta));
        }
        if let Some(h) = &mut self.hypergraph {
            if let Some(metric) = &mut h.metric {
                for (n, w) in metric.iter_mut().enumerate() {
                    out.push((format!("metric{n}.w"), w));
                }
            }
            out.push(("gate.w".into(), &mut h.gate_w));
            out.push(("gate.r".into(), &mut h.gate_r));
        }
        if let Some(f) = &mut self.fusion {
            out.push(("fusion.a".into(), &mut f.attn_a));
            out.push(("fusion.wa".into(), &mut f.attn_wa));
        }
        out
    }

    /// SHA-256 over shapes and raw little-endian values of all
    /// parameters, for change detection.
    pub fn param_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, tensor) in self.params() {
            hasher.update(name.as_bytes());
            for &dim in tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Tape handles for every bound parameter plus the flat (name, id)
/// list used to read gradients back out.
pub struct BoundModel {
    pub encoder: EncoderIds,
    pub metric: Option<Vec<TensorId>>,
    pub gate: Option<(TensorId, TensorId)>,
    pub fusion: Option<(TensorId, TensorId)>,
    pub item_table: TensorId,
    pub flat: Vec<(String, TensorId)>,
}

impl Model {
    /// Insert every parameter as a trainable leaf. The traversal order
    /// matches [`Model::params`] exactly.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        fn leaf(
            tape: &mut Tape,
            flat: &mut Vec<(String, TensorId)>,
            name: String,
            t: &Tensor,
        ) -> TensorId {
            let id = tape.leaf(t.clone());
            flat.push((name, id));
            id
        }
        fn bind_heads(
            tape: &mut Tape,
            flat: &mut Vec<(String, TensorId)>,
            heads: &[HeadParams],
            l: usize,
            tag: &str,
        ) -> Vec<HeadIds> {
            heads
                .iter()
                .enumerate()
                .map(|(n, h)| HeadIds {
                    wq: leaf(tape, flat, format!("layer{l}.{tag}{n}.wq"), &h.wq),
                    wk: leaf(tape, flat, format!("layer{l}.{tag}{n}.wk"), &h.wk),
                    wv: leaf(tape, flat, format!("layer{l}.{tag}{n}.wv"), &h.wv),
                })
                .collect()
        }

        let mut flat = Vec::new();
        let item_table = leaf(tape, &mut flat, "item_table".into(), &self.item_table);
        let pos_table = leaf(tape, &mut flat, "pos_table".into(), &self.pos_table);
        let beh_table = leaf(tape, &mut flat, "beh_table".into(), &self.beh_table);
        let mut layers = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let attn = match &layer.attn {
                AttnParams::MultiScale { e, f, lowrank, scale1, scale2, fuse_w } => {
                    let e = leaf(tape, &mut flat, format!("layer{l}.e"), e);
                    let f = leaf(tape, &mut flat, format!("layer{l}.f"), f);
                    let lowrank_heads = bind_heads(tape, &mut flat, lowrank, l, "lowrank");
                    let scale1_heads = bind_heads(tape, &mut flat, scale1, l, "scale1_");
                    let scale2_heads = bind_heads(tape, &mut flat, scale2, l, "scale2_");
                    let fuse_w = leaf(tape, &mut flat, format!("layer{l}.fuse_w"), fuse_w);
                    LayerAttentionIds::MultiScale {
                        e,
                        f,
                        lowrank_heads,
                        scale1_heads,
                        scale2_heads,
                        fuse_w,
                    }
                }
                AttnParams::Vanilla { heads } => LayerAttentionIds::Vanilla {
                    heads: bind_heads(tape, &mut flat, heads, l, "vanilla"),
                },
            };
            layers.push(LayerIds {
                attn,
                wd: leaf(tape, &mut flat, format!("layer{l}.wd"), &layer.wd),
                ffn_w1: leaf(tape, &mut flat, format!("layer{l}.ffn_w1"), &layer.ffn_w1),
                ffn_b1: leaf(tape, &mut flat, format!("layer{l}.ffn_b1"), &layer.ffn_b1),
                ffn_w2: leaf(tape, &mut flat, format!("layer{l}.ffn_w2"), &layer.ffn_w2),
                ffn_b2: leaf(tape, &mut flat, format!("layer{l}.ffn_b2"), &layer.ffn_b2),
                ln1_gamma: leaf(tape, &mut flat, format!("layer{l}.ln1_gamma"), &layer.ln1_gamma),
                ln1_beta: leaf(tape, &mut flat, format!("layer{l}.ln1_beta"), &layer.ln1_beta),
                ln2_gamma: leaf(tape, &mut flat, format!("layer{l}.ln2_gamma"), &layer.ln2_gamma),
                ln2_beta: leaf(tape, &mut flat, format!("layer{l}.ln2_beta"), &layer.ln2_beta),
            });
        }
        let metric = match &self.hypergraph {
            Some(h) => h.metric.as_ref().map(|ws| {
                ws.iter()
                    .enumerate()
                    .map(|(n, w)| leaf(tape, &mut flat, format!("metric{n}.w"), w))
                    .collect()
            }),
            None => None,
        };
        let gate = self.hypergraph.as_ref().map(|h| {
            let w = leaf(tape, &mut flat, "gate.w".into(), &h.gate_w);
            let r = leaf(tape, &mut flat, "gate.r".into(), &h.gate_r);
            (w, r)
        });
        let fusion = self.fusion.as_ref().map(|f| {
            let a = leaf(tape, &mut flat, "fusion.a".into(), &f.attn_a);
            let wa = leaf(tape, &mut flat, "fusion.wa".into(), &f.attn_wa);
            (a, wa)
        });
        BoundModel {
            encoder: EncoderIds { item_table, pos_table, beh_table, layers },
            metric,
            gate,
            fusion,
            item_table,
            flat,
        }
    }
}

/// Per-user forward artifacts.
pub struct UserForward {
    pub user: u64,
    /// Logits over the real item catalog at each masked position;
    /// `None` when the sequence holds no masked position.
    pub logits: Option<TensorId>,
    pub labels: Vec<usize>,
    pub alphas: Option<(TensorId, TensorId)>,
    pub trace: EncodeTrace,
    pub incidence: Option<TensorId>,
    pub simplified: Option<TensorId>,
    pub hyper_avg: Option<TensorId>,
    pub encoded: TensorId,
}

pub struct BatchForward {
    pub tape: Tape,
    pub bound: BoundModel,
    /// Mean masked cross-entropy over the whole batch.
    pub loss: Option<TensorId>,
    pub masked_count: usize,
    pub users: Vec<UserForward>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

impl Model {
    /// Run the fused forward pass for a batch of sequences on a fresh
    /// tape. In train mode `rng` drives dropout.
    pub fn forward_batch(
        &self,
        batch: &[(u64, &BehaviorSequence)],
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchForward> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut users = Vec::new();
        let mut ce_sums: Vec<TensorId> = Vec::new();
        let mut masked_count = 0usize;

        for &(user, seq) in batch {
            if seq.len() != self.dims.j {
                return Err(Error::Shape {
                    op: "forward_batch",
                    detail: format!("sequence length {} != J {}", seq.len(), self.dims.j),
                });
            }
            let mut regime = match (&mode, rng.as_deref_mut()) {
                (ForwardMode::Train, Some(r)) => {
                    Regime::Train { dropout: self.dims.dropout, rng: r }
                }
                _ => Regime::Eval,
            };
            let (encoded, trace) = encoder::encode(
                &mut tape,
                seq,
                &bound.encoder,
                self.dims.p1,
                self.dims.p2,
                &mut regime,
            )?;

            let masked = seq.masked_positions();

            // Hypergraph view.
            let mut incidence = None;
            let mut simplified = None;
            let mut hyper_avg = None;
            let mut x_masked_rows = None;
            if self.dims.with_hypergraph() {
                let topo = SequenceTopology::of(seq);
                let items = tape.gather_rows(bound.encoder.item_table, &seq.item_tokens())?;
                let behs = tape.gather_rows(bound.encoder.beh_table, &seq.behavior_tokens())?;
                let v = tape.add(items, behs)?;
                let visible: Vec<f64> = (0..seq.len())
                    .map(|p| if topo.visible(p) { 1.0 } else { 0.0 })
                    .collect();
                let visible_col = tape.constant(Tensor::new(vec![seq.len(), 1], visible)?);
                let v_visible = tape.mul_col(v, visible_col)?;

                let beta = match &bound.metric {
                    Some(channels) if self.dims.with_semantic() => {
                        Some(hypergraph::pairwise_semantic(&mut tape, v_visible, channels)?)
                    }
                    _ => None,
                };
                let (gate_w, gate_r) = bound.gate.expect("gate bound with hypergraph");
                let x0 = hypergraph::self_gate_init(&mut tape, v, gate_w, gate_r, visible_col)?;

                let mut layers_x = vec![x0];
                match self.dims.conv_mode {
                    ConvMode::Full => {
                        let inc = hypergraph::build_incidence(
                            &mut tape,
                            &topo,
                            beta,
                            self.dims.k,
                            self.dims.with_semantic(),
                            self.dims.with_behavior_edges(),
                        )?;
                        for _ in 0..self.dims.layers.max(1) {
                            let prev = *layers_x.last().unwrap();
                            let next = match inc.id {
                                Some(m) => hypergraph::hyperconv_full(&mut tape, prev, m)?,
                                None => prev,
                            };
                            layers_x.push(next);
                        }
                        incidence = inc.id;
                    }
                    ConvMode::Simplified => {
                        let topk = beta
                            .map(|b| {
                                hypergraph::top_k_anchors(&topo, tape.value(b), self.dims.k)
                            })
                            .unwrap_or_default();
                        let op = hypergraph::build_simplified_operator(
                            &mut tape,
                            &topo,
                            beta,
                            &topk,
                            self.dims.w0,
                            self.dims.with_semantic(),
                            self.dims.with_behavior_edges(),
                        )?;
                        for _ in 0..self.dims.layers.max(1) {
                            let prev = *layers_x.last().unwrap();
                            let next =
                                hypergraph::hyperconv_simplified(&mut tape, prev, op.id)?;
                            layers_x.push(next);
                        }
                        simplified = Some(op.id);
                    }
                }
                let avg = hypergraph::layer_average(&mut tape, &layers_x)?;
                hyper_avg = Some(avg);
                if !masked.is_empty() {
                    let (pooled, _empty) = hypergraph::masked_position_pool(
                        &mut tape,
                        avg,
                        seq,
                        self.dims.q1,
                        self.dims.q2,
                    )?;
                    x_masked_rows = Some(pooled);
                }
            }

            // Fusion and scoring at masked positions.
            let mut logits = None;
            let mut labels = Vec::new();
            let mut alphas = None;
            if !masked.is_empty() {
                let positions: Vec<usize> = masked.iter().map(|(p, _)| *p).collect();
                labels = masked.iter().map(|(_, item)| *item as usize).collect();
                let h_rows = tape.gather_rows(encoded, &positions)?;
                let g = match (x_masked_rows, bound.fusion) {
                    (Some(x_rows), Some((attn_a, attn_wa))) => {
                        let fused = fusion::cross_view_attention(
                            &mut tape, h_rows, x_rows, attn_a, attn_wa,
                        )?;
                        alphas = Some((fused.alpha_seq, fused.alpha_hyper));
                        fused.g
                    }
                    _ => h_rows,
                };
                let scores =
                    fusion::score_items(&mut tape, g, bound.item_table, self.dims.n_items)?;
                let ce = tape.cross_entropy_sum(scores, &labels)?;
                ce_sums.push(ce);
                masked_count += labels.len();
                logits = Some(scores);
            }

            users.push(UserForward {
                user,
                logits,
                labels,
                alphas,
                trace,
                incidence,
                simplified,
                hyper_avg,
                encoded,
            });
        }

        let loss = if masked_count > 0 {
            let mut total = ce_sums[0];
            for &s in &ce_sums[1..] {
                total = tape.add(total, s)?;
            }
            Some(tape.scale(total, 1.0 / masked_count as f64))
        } else {
            None
        };

        Ok(BatchForward { tape, bound, loss, masked_count, users })
    }

    /// Backward over a batch loss and return named gradients.
    pub fn gradients(forward: &mut BatchForward) -> Result<BTreeMap<String, Vec<f64>>> {
        let loss = forward
            .loss
            .ok_or(Error::Shape { op: "gradients", detail: "batch has no loss".into() })?;
        forward.tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, id) in &forward.bound.flat {
            if let Some(g) = forward.tape.grad(*id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{apply_cloze_mask, BehaviorSequence, MaskMode};

    fn test_config(extra: &[&str]) -> RunConfig {
        let base = r#"
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
dropout = 0.0
"#;
        let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        RunConfig::from_toml(base, &overrides).unwrap()
    }

    fn masked_seq() -> BehaviorSequence {
        let events: Vec<(u32, u8)> =
            vec![(0, 0), (1, 1), (2, 2), (3, 0), (2, 2), (4, 1), (5, 2), (6, 0)];
        let seq = BehaviorSequence::from_events(&events, 8);
        apply_cloze_mask(&seq, 2, MaskMode::Train).unwrap()
    }

    #[test]
    fn params_and_params_mut_agree_on_names() {
        for ablation in ["none", "no_mb_hyper", "no_ml_hyper", "no_hypergraph", "no_ms_attention"]
        {
            let cfg = test_config(&[&format!("model.ablation=\"{ablation}\"")]);
            let dims = ModelDims::from_config(&cfg, 10, 3);
            let mut model = Model::init(dims, 1);
            let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
            let names_mut: Vec<String> =
                model.params_mut().into_iter().map(|(n, _)| n).collect();
            assert_eq!(names, names_mut);
        }
    }

    #[test]
    fn bind_covers_exactly_the_named_params() {
        let cfg = test_config(&[]);
        let dims = ModelDims::from_config(&cfg, 10, 3);
        let model = Model::init(dims, 1);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let bound_names: Vec<String> = bound.flat.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, bound_names);
    }

    #[test]
    fn forward_produces_finite_loss_and_gradients() {
        let cfg = test_config(&[]);
        let dims = ModelDims::from_config(&cfg, 10, 3);
        let model = Model::init(dims, 7);
        let seq = masked_seq();
        let mut fwd =
            model.forward_batch(&[(1, &seq)], ForwardMode::Eval, None).unwrap();
        let loss = fwd.loss.expect("has masked positions");
        assert!(fwd.tape.value(loss).data()[0].is_finite());
        let grads = Model::gradients(&mut fwd).unwrap();
        assert_eq!(grads.len(), model.params().len());
        for (name, g) in &grads {
            assert!(g.iter().all(|v| v.is_finite()), "grad {name} not finite");
        }
    }

    #[test]
    fn ablations_remove_their_parameters_from_the_graph() {
        let item_cases = [
            ("no_ml_hyper", vec!["metric0.w", "metric1.w"], vec!["gate.w", "fusion.a"]),
            (
                "no_hypergraph",
                vec!["metric0.w", "gate.w", "gate.r", "fusion.a", "fusion.wa"],
                vec!["item_table", "layer0.e"],
            ),
            (
                "no_ms_attention",
                vec!["layer0.e", "layer0.f", "layer0.fuse_w", "layer0.scale1_0.wq"],
                vec!["layer0.vanilla0.wq", "gate.w"],
            ),
            ("no_mb_hyper", vec![], vec!["metric0.w", "gate.w"]),
        ];
        for (ablation, absent, present) in item_cases {
            let cfg = test_config(&[&format!("model.ablation=\"{ablation}\"")]);
            let dims = ModelDims::from_config(&cfg, 10, 3);
            let model = Model::init(dims, 3);
            let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
            for a in absent {
                assert!(!names.contains(&a.to_string()), "{ablation}: {a} should be absent");
            }
            for p in present {
                assert!(names.contains(&p.to_string()), "{ablation}: {p} should be present");
            }
            // Forward still works and produces a loss.
            let seq = masked_seq();
            let fwd = model.forward_batch(&[(1, &seq)], ForwardMode::Eval, None).unwrap();
            assert!(fwd.loss.is_some());
        }
    }

    #[test]
    fn no_mb_hyper_has_no_behavior_columns() {
        let cfg = test_config(&["model.ablation=\"no_mb_hyper\"", "model.conv_mode=\"full\""]);
        let dims = ModelDims::from_config(&cfg, 10, 3);
        let model = Model::init(dims, 3);
        // Sequence with a repeated item (would normally create a
        // behavior hyperedge).
        let seq = masked_seq();
        let fwd = model.forward_batch(&[(1, &seq)], ForwardMode::Eval, None).unwrap();
        let inc = fwd.users[0].incidence.expect("semantic incidence present");
        let topo = SequenceTopology::of(&seq);
        // Columns = semantic anchors only.
        assert_eq!(fwd.tape.value(inc).shape()[1], topo.anchors.len());
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let cfg = test_config(&[]);
        let dims = ModelDims::from_config(&cfg, 10, 3);
        let model = Model::init(dims, 11);
        let seq = masked_seq();
        let loss = |model: &Model| {
            let fwd = model.forward_batch(&[(1, &seq)], ForwardMode::Eval, None).unwrap();
            fwd.tape.value(fwd.loss.unwrap()).data()[0]
        };
        let a = loss(&model);
        let b = loss(&model);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn full_and_simplified_conv_modes_both_run() {
        for mode in ["full", "simplified"] {
            let cfg = test_config(&[&format!("model.conv_mode=\"{mode}\"")]);
            let dims = ModelDims::from_config(&cfg, 10, 3);
            let model = Model::init(dims, 5);
            let seq = masked_seq();
            let fwd = model.forward_batch(&[(2, &seq)], ForwardMode::Eval, None).unwrap();
            assert!(fwd.loss.is_some());
            match mode {
                "full" => assert!(fwd.users[0].incidence.is_some()),
                _ => assert!(fwd.users[0].simplified.is_some()),
            }
        }
    }
}
