//! The HIEGNet architecture.
//!
//! Each layer sums one contribution per edge type: a message aggregation
//! (kind chosen per edge-type group) followed by an update MLP, with a
//! separate parameter set for every (layer, edge type) pair. A node with no
//! neighbours under a relation receives nothing from it; a node no relation
//! reaches gets the zero vector. The classification head is a single affine
//! layer over the final glomerulus embeddings (or the concatenation of all
//! layer embeddings when jumping knowledge is enabled), with softmax applied
//! outside the tape.
//!
//! Message kinds, for target v with source neighbours u and edge feature e:
//!
//! - `GCN`: Σ h_u / √(d̂_v d̂_u), degrees within the edge type plus one;
//! - `SAGE`: mean of h_u;
//! - `ESAGE`: mean of W h_u;
//! - `GATV2`: Σ α_vu (W h_u) with α from aᵀ LeakyReLU(W_s h_v + W_t h_u + w_e e);
//!   same-type relations include the node itself with e = 0;
//! - `GINE`: Σ ReLU(W h_u + w_e e), combined as (1 + ε) h_v + m;
//! - `CFCONV`: Σ h_u / (e + 0.01).

use crate::diffmath::{softmax_rows, Tape, TensorRef};
use crate::hetgraph::{EdgeGroup, EdgeType, HeteroGraph, NodeType};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

/// Slope of the LeakyReLU inside GATv2 attention scoring.
const GAT_LEAKY_SLOPE: f64 = 0.2;
/// Inverse-distance guard for CFCONV weights.
const CFCONV_DELTA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

/// Message-passing function choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MessagePassingKind {
    Gcn,
    Sage,
    Esage,
    Gatv2,
    Gine,
    Cfconv,
}

impl MessagePassingKind {
    pub const ALL: [MessagePassingKind; 6] = [
        MessagePassingKind::Gcn,
        MessagePassingKind::Sage,
        MessagePassingKind::Esage,
        MessagePassingKind::Gatv2,
        MessagePassingKind::Gine,
        MessagePassingKind::Cfconv,
    ];
}

/// Message-passing kind per edge-type group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKinds {
    pub gg: MessagePassingKind,
    pub ig: MessagePassingKind,
    pub ii: MessagePassingKind,
}

impl GroupKinds {
    pub fn for_group(&self, group: EdgeGroup) -> MessagePassingKind {
        match group {
            EdgeGroup::GlomGlom => self.gg,
            EdgeGroup::ImmuneGlom => self.ig,
            EdgeGroup::ImmuneImmune => self.ii,
        }
    }
}

/// Architecture hyperparameters. The defaults are the tuned operating point:
/// two layers of width 64, dropout 0.2, two FC layers per update, ESAGE for
/// g-g, GATv2 for immune-glomerulus and CFconv for immune-immune edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub kinds: GroupKinds,
    pub n_fc: usize,
    pub jk: bool,
    pub classes: usize,
    /// Input feature width per node type (g, m, t).
    pub input_dims: [usize; 3],
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            layers: 2,
            hidden: 64,
            dropout: 0.2,
            kinds: GroupKinds {
                gg: MessagePassingKind::Esage,
                ig: MessagePassingKind::Gatv2,
                ii: MessagePassingKind::Cfconv,
            },
            n_fc: 2,
            jk: false,
            classes: crate::hetgraph::NUM_CLASSES,
            input_dims: [
                crate::morphology::GLOM_FEATURES,
                crate::morphology::CELL_FEATURES,
                crate::morphology::CELL_FEATURES,
            ],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::BadSpec("layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadSpec(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(1..=2).contains(&self.n_fc) {
            return Err(ModelError::BadSpec(format!("n_fc must be 1 or 2, got {}", self.n_fc)));
        }
        if self.hidden == 0 || self.classes == 0 {
            return Err(ModelError::BadSpec("hidden and classes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the classifier input: h^(L), or every layer including the
    /// raw glomerulus features under jumping knowledge.
    pub fn head_input_dim(&self) -> usize {
        if self.jk {
            self.input_dims[0] + self.layers * self.hidden
        } else {
            self.hidden
        }
    }

    fn dims_at_layer(&self, layer: usize) -> [usize; 3] {
        if layer == 0 {
            self.input_dims
        } else {
            [self.hidden; 3]
        }
    }
}

fn update_input_dim(
    kind: MessagePassingKind,
    d_src: usize,
    d_dst: usize,
    hidden: usize,
    same_type: bool,
) -> usize {
    match kind {
        MessagePassingKind::Gcn | MessagePassingKind::Sage | MessagePassingKind::Cfconv => {
            d_dst + d_src
        }
        MessagePassingKind::Esage => d_dst + hidden,
        // Same-type attention folds the node itself into the neighbourhood,
        // so the update sees the message alone; across types the node state
        // is concatenated instead.
        MessagePassingKind::Gatv2 => {
            if same_type {
                hidden
            } else {
                d_dst + hidden
            }
        }
        MessagePassingKind::Gine => d_dst,
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum Init {
    Glorot,
    Zero,
}

fn param_layout(spec: &ModelSpec) -> Vec<(String, (usize, usize), Init)> {
    let mut out = Vec::new();
    for layer in 0..spec.layers {
        let dims = spec.dims_at_layer(layer);
        for et in EdgeType::ALL {
            let kind = spec.kinds.for_group(et.group());
            let d_src = dims[et.src.index()];
            let d_dst = dims[et.dst.index()];
            let h = spec.hidden;
            let key = |role: &str| format!("l{layer}.{}.{role}", et.name());
            match kind {
                MessagePassingKind::Gcn | MessagePassingKind::Sage | MessagePassingKind::Cfconv => {}
                MessagePassingKind::Esage => {
                    out.push((key("m.w_n"), (d_src, h), Init::Glorot));
                }
                MessagePassingKind::Gatv2 => {
                    out.push((key("m.w_v"), (d_src, h), Init::Glorot));
                    out.push((key("m.w_s"), (d_dst, h), Init::Glorot));
                    out.push((key("m.w_t"), (d_src, h), Init::Glorot));
                    out.push((key("m.w_e"), (1, h), Init::Glorot));
                    out.push((key("m.a"), (h, 1), Init::Glorot));
                }
                MessagePassingKind::Gine => {
                    out.push((key("m.w"), (d_src, d_dst), Init::Glorot));
                    out.push((key("m.w_e"), (1, d_dst), Init::Glorot));
                    out.push((key("m.eps"), (1, 1), Init::Zero));
                }
            }
            let u_in = update_input_dim(kind, d_src, d_dst, h, et.src == et.dst);
            out.push((key("u.w1"), (u_in, h), Init::Glorot));
            out.push((key("u.b1"), (1, h), Init::Zero));
            if spec.n_fc == 2 {
                out.push((key("u.w2"), (h, h), Init::Glorot));
                out.push((key("u.b2"), (1, h), Init::Zero));
            }
        }
    }
    out.push(("head.w".into(), (spec.head_input_dim(), spec.classes), Init::Glorot));
    out.push(("head.b".into(), (1, spec.classes), Init::Zero));
    out
}

/// All trainable weights, keyed `l<layer>.<edge_type>.<role>` plus `head.*`.
/// Parameters are never shared across edge types, even within a group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HGCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    /// Glorot-uniform initialisation, deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (key, (rows, cols), init) in param_layout(spec) {
            let tensor = match init {
                Init::Zero => Array2::zeros((rows, cols)),
                Init::Glorot => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
                }
            };
            tensors.insert(key, tensor);
        }
        ParamStore { tensors }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Little-endian binary checkpoint with a shape header per entry.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (key, tensor) in &self.tensors {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(tensor.nrows() as u64).to_le_bytes());
            buf.extend_from_slice(&(tensor.ncols() as u64).to_le_bytes());
            for v in tensor.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<ParamStore, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let err = |offset: usize, message: &str| ModelError::Parse {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(err(0, "bad checkpoint magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CHECKPOINT_VERSION {
            return Err(err(4, "unsupported checkpoint version"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut pos = 16usize;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if pos + n > bytes.len() {
                return Err(err(pos, "truncated checkpoint"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let key_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let key = String::from_utf8(take(key_len)?.to_vec())
                .map_err(|_| err(0, "checkpoint key is not utf-8"))?;
            let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let data = take(rows * cols * 8)?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(key, Array2::from_shape_vec((rows, cols), values).unwrap());
        }
        Ok(ParamStore { tensors })
    }
}

// ---------------------------------------------------------------------------
// Graph tensors
// ---------------------------------------------------------------------------

/// Per-edge-type index and constant buffers derived from one graph, reused
/// across epochs.
pub struct GraphTensors {
    pub n: [usize; 3],
    pub features: [Array2<f64>; 3],
    pub labels: Vec<Option<usize>>,
    src_idx: [Rc<Vec<usize>>; 9],
    dst_idx: [Rc<Vec<usize>>; 9],
    dist_feat: [Array2<f64>; 9],
    /// Per-edge GCN coefficient 1/√(d̂_src d̂_dst).
    gcn_coeff: [Array2<f64>; 9],
    /// Per-dst-node indicator of a non-empty neighbourhood.
    active_mask: [Array2<f64>; 9],
    /// Same-type edge lists augmented with a self edge for each active node.
    self_src: [Rc<Vec<usize>>; 9],
    self_dst: [Rc<Vec<usize>>; 9],
    self_dist: [Array2<f64>; 9],
}

impl GraphTensors {
    pub fn new(graph: &HeteroGraph) -> GraphTensors {
        let n = std::array::from_fn(|i| graph.nodes.centroids[i].len());
        let features = graph.features.clone();
        let labels = graph.nodes.labels.iter().map(|l| l.map(|c| c.index())).collect();
        let mut src_idx: [Rc<Vec<usize>>; 9] = std::array::from_fn(|_| Rc::new(Vec::new()));
        let mut dst_idx: [Rc<Vec<usize>>; 9] = std::array::from_fn(|_| Rc::new(Vec::new()));
        let mut dist_feat: [Array2<f64>; 9] = std::array::from_fn(|_| Array2::zeros((0, 1)));
        let mut gcn_coeff: [Array2<f64>; 9] = std::array::from_fn(|_| Array2::zeros((0, 1)));
        let mut active_mask: [Array2<f64>; 9] = std::array::from_fn(|_| Array2::zeros((0, 1)));
        let mut self_src: [Rc<Vec<usize>>; 9] = std::array::from_fn(|_| Rc::new(Vec::new()));
        let mut self_dst: [Rc<Vec<usize>>; 9] = std::array::from_fn(|_| Rc::new(Vec::new()));
        let mut self_dist: [Array2<f64>; 9] = std::array::from_fn(|_| Array2::zeros((0, 1)));

        for et in EdgeType::ALL {
            let ei = et.index();
            let store = &graph.edges[ei];
            if store.is_empty() {
                continue;
            }
            let e = store.len();
            let src: Vec<usize> = store.src.iter().map(|&v| v as usize).collect();
            let dst: Vec<usize> = store.dst.iter().map(|&v| v as usize).collect();
            let n_src = n[et.src.index()];
            let n_dst = n[et.dst.index()];
            let mut out_deg = vec![0.0f64; n_src];
            let mut in_deg = vec![0.0f64; n_dst];
            for i in 0..e {
                out_deg[src[i]] += 1.0;
                in_deg[dst[i]] += 1.0;
            }
            gcn_coeff[ei] = Array2::from_shape_fn((e, 1), |(i, _)| {
                1.0 / ((1.0 + out_deg[src[i]]) * (1.0 + in_deg[dst[i]])).sqrt()
            });
            active_mask[ei] =
                Array2::from_shape_fn((n_dst, 1), |(v, _)| if in_deg[v] > 0.0 { 1.0 } else { 0.0 });
            dist_feat[ei] = Array2::from_shape_fn((e, 1), |(i, _)| store.dist_feature[i]);

            if et.src == et.dst {
                // Self edges (distance feature 0) for the attention variant.
                let mut s2 = src.clone();
                let mut d2 = dst.clone();
                let mut e2: Vec<f64> = store.dist_feature.clone();
                for v in 0..n_dst {
                    if in_deg[v] > 0.0 {
                        s2.push(v);
                        d2.push(v);
                        e2.push(0.0);
                    }
                }
                self_dist[ei] = Array2::from_shape_vec((e2.len(), 1), e2).unwrap();
                self_src[ei] = Rc::new(s2);
                self_dst[ei] = Rc::new(d2);
            }

            src_idx[ei] = Rc::new(src);
            dst_idx[ei] = Rc::new(dst);
        }
        GraphTensors {
            n,
            features,
            labels,
            src_idx,
            dst_idx,
            dist_feat,
            gcn_coeff,
            active_mask,
            self_src,
            self_dst,
            self_dist,
        }
    }

    pub fn has_edges(&self, et: EdgeType) -> bool {
        !self.src_idx[et.index()].is_empty()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub train: bool,
    pub dropout_seed: u64,
}

impl ForwardOpts {
    pub fn eval() -> ForwardOpts {
        ForwardOpts {
            train: false,
            dropout_seed: 0,
        }
    }
}

/// Tape handles produced by a forward pass.
pub struct ForwardTrace {
    pub logits: TensorRef,
    /// Glomerulus embeddings per layer, h^(0) .. h^(L).
    pub glom_layers: Vec<TensorRef>,
}

fn mix_seed(base: u64, layer: usize, node_type: usize) -> u64 {
    let mut z = base ^ ((layer * 3 + node_type + 1) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct LayerCtx<'a> {
    spec: &'a ModelSpec,
    params: &'a BTreeMap<String, TensorRef>,
    gt: &'a GraphTensors,
}

impl LayerCtx<'_> {
    fn param(&self, layer: usize, et: EdgeType, role: &str) -> TensorRef {
        let key = format!("l{layer}.{}.{role}", et.name());
        *self
            .params
            .get(&key)
            .unwrap_or_else(|| panic!("missing parameter {key}"))
    }

    /// Message aggregation for one edge type; returns the per-target message
    /// matrix (n_dst × message_dim).
    fn message(
        &self,
        tape: &mut Tape,
        layer: usize,
        et: EdgeType,
        h_src: TensorRef,
        h_dst: TensorRef,
    ) -> TensorRef {
        let ei = et.index();
        let gt = self.gt;
        let n_dst = gt.n[et.dst.index()];
        let kind = self.spec.kinds.for_group(et.group());
        match kind {
            MessagePassingKind::Sage => {
                let gathered = tape.gather(h_src, gt.src_idx[ei].clone());
                tape.segment_mean(gathered, gt.dst_idx[ei].clone(), n_dst)
            }
            MessagePassingKind::Esage => {
                let projected = tape.matmul(h_src, self.param(layer, et, "m.w_n"));
                let gathered = tape.gather(projected, gt.src_idx[ei].clone());
                tape.segment_mean(gathered, gt.dst_idx[ei].clone(), n_dst)
            }
            MessagePassingKind::Gcn => {
                let gathered = tape.gather(h_src, gt.src_idx[ei].clone());
                let coeff = tape.constant(gt.gcn_coeff[ei].clone());
                let scaled = tape.row_scale(gathered, coeff);
                tape.segment_sum(scaled, gt.dst_idx[ei].clone(), n_dst)
            }
            MessagePassingKind::Cfconv => {
                let gathered = tape.gather(h_src, gt.src_idx[ei].clone());
                let weights = tape.constant(gt.dist_feat[ei].mapv(|e| 1.0 / (e + CFCONV_DELTA)));
                let scaled = tape.row_scale(gathered, weights);
                tape.segment_sum(scaled, gt.dst_idx[ei].clone(), n_dst)
            }
            MessagePassingKind::Gine => {
                let projected = tape.matmul(h_src, self.param(layer, et, "m.w"));
                let gathered = tape.gather(projected, gt.src_idx[ei].clone());
                let e_col = tape.constant(gt.dist_feat[ei].clone());
                let e_term = tape.matmul(e_col, self.param(layer, et, "m.w_e"));
                let pre = tape.add(gathered, e_term);
                let act = tape.relu(pre);
                tape.segment_sum(act, gt.dst_idx[ei].clone(), n_dst)
            }
            MessagePassingKind::Gatv2 => {
                let same = et.src == et.dst;
                let (src_idx, dst_idx, e_feat) = if same {
                    (
                        gt.self_src[ei].clone(),
                        gt.self_dst[ei].clone(),
                        gt.self_dist[ei].clone(),
                    )
                } else {
                    (
                        gt.src_idx[ei].clone(),
                        gt.dst_idx[ei].clone(),
                        gt.dist_feat[ei].clone(),
                    )
                };
                let values = tape.matmul(h_src, self.param(layer, et, "m.w_v"));
                let gathered_v = tape.gather(values, src_idx.clone());
                let s_dst = tape.matmul(h_dst, self.param(layer, et, "m.w_s"));
                let s_src = tape.matmul(h_src, self.param(layer, et, "m.w_t"));
                let g_dst = tape.gather(s_dst, dst_idx.clone());
                let g_src = tape.gather(s_src, src_idx);
                let e_col = tape.constant(e_feat);
                let e_term = tape.matmul(e_col, self.param(layer, et, "m.w_e"));
                let sum = tape.add(g_dst, g_src);
                let pre = tape.add(sum, e_term);
                let act = tape.leaky_relu(pre, GAT_LEAKY_SLOPE);
                let scores = tape.matmul(act, self.param(layer, et, "m.a"));
                let alpha = tape.segment_softmax(scores, dst_idx.clone());
                let weighted = tape.row_scale(gathered_v, alpha);
                tape.segment_sum(weighted, dst_idx, n_dst)
            }
        }
    }

    /// Update MLP over the kind-specific combination of node state and
    /// message; rows whose neighbourhood is empty are zeroed afterwards.
    fn update(
        &self,
        tape: &mut Tape,
        layer: usize,
        et: EdgeType,
        h_dst: TensorRef,
        message: TensorRef,
    ) -> TensorRef {
        let kind = self.spec.kinds.for_group(et.group());
        let input = match kind {
            MessagePassingKind::Gine => {
                // (1 + eps) h_v + m, with eps broadcast through a constant
                // ones column so its gradient flows.
                let n_dst = self.gt.n[et.dst.index()];
                let ones = tape.constant(Array2::from_elem((n_dst, 1), 1.0));
                let eps_col = tape.matmul(ones, self.param(layer, et, "m.eps"));
                let scaled = tape.row_scale(h_dst, eps_col);
                let with_self = tape.add(h_dst, scaled);
                tape.add(with_self, message)
            }
            MessagePassingKind::Gatv2 if et.src == et.dst => message,
            _ => tape.concat_cols(h_dst, message),
        };
        let z = tape.matmul(input, self.param(layer, et, "u.w1"));
        let z = tape.add_bias(z, self.param(layer, et, "u.b1"));
        let mut z = tape.relu(z);
        if self.spec.n_fc == 2 {
            let z2 = tape.matmul(z, self.param(layer, et, "u.w2"));
            let z2 = tape.add_bias(z2, self.param(layer, et, "u.b2"));
            z = tape.relu(z2);
        }
        let mask = tape.constant(self.gt.active_mask[et.index()].clone());
        tape.row_scale(z, mask)
    }
}

/// Runs the model on an existing tape; the caller owns parameter insertion
/// so it can read gradients back after attaching a loss.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &BTreeMap<String, TensorRef>,
    gt: &GraphTensors,
    opts: ForwardOpts,
) -> ForwardTrace {
    let ctx = LayerCtx { spec, params, gt };
    let mut h: [TensorRef; 3] =
        std::array::from_fn(|ti| tape.constant(gt.features[ti].clone()));
    let mut glom_layers = vec![h[0]];

    for layer in 0..spec.layers {
        let mut contrib: [Option<TensorRef>; 3] = [None, None, None];
        for et in EdgeType::ALL {
            if !gt.has_edges(et) {
                continue;
            }
            let h_src = h[et.src.index()];
            let h_dst = h[et.dst.index()];
            let message = ctx.message(tape, layer, et, h_src, h_dst);
            let updated = ctx.update(tape, layer, et, h_dst, message);
            let di = et.dst.index();
            contrib[di] = Some(match contrib[di] {
                Some(acc) => tape.add(acc, updated),
                None => updated,
            });
        }
        for (ti, slot) in contrib.into_iter().enumerate() {
            let mut next = slot.unwrap_or_else(|| {
                tape.constant(Array2::zeros((gt.n[ti], spec.hidden)))
            });
            if opts.train && spec.dropout > 0.0 {
                next = tape.dropout(next, spec.dropout, mix_seed(opts.dropout_seed, layer, ti));
            }
            h[ti] = next;
        }
        glom_layers.push(h[0]);
    }

    let head_in = if spec.jk {
        let mut acc = glom_layers[0];
        for &layer_ref in &glom_layers[1..] {
            acc = tape.concat_cols(acc, layer_ref);
        }
        acc
    } else {
        h[0]
    };
    let head_w = *params.get("head.w").expect("missing parameter head.w");
    let head_b = *params.get("head.b").expect("missing parameter head.b");
    let logits = tape.matmul(head_in, head_w);
    let logits = tape.add_bias(logits, head_b);
    ForwardTrace { logits, glom_layers }
}

/// Evaluation products of a standalone forward pass.
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// Glomerulus embeddings per layer, h^(0) .. h^(L).
    pub glom_layers: Vec<Array2<f64>>,
}

/// Convenience forward pass that owns its tape.
pub fn forward(
    spec: &ModelSpec,
    store: &ParamStore,
    gt: &GraphTensors,
    opts: ForwardOpts,
) -> ForwardOutput {
    let mut tape = Tape::new();
    let refs: BTreeMap<String, TensorRef> = store
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false)))
        .collect();
    let trace = forward_on_tape(&mut tape, spec, &refs, gt, opts);
    let logits = tape.value(trace.logits).clone();
    ForwardOutput {
        probs: softmax_rows(&logits),
        logits,
        glom_layers: trace
            .glom_layers
            .iter()
            .map(|&r| tape.value(r).clone())
            .collect(),
    }
}

/// Argmax per row; ties resolve to the lowest class index.
pub fn predict(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
