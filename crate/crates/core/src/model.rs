//! Transformer workload definition: encoder hyperparameters, the per-layer
//! memory-load/compute operation graph with exact tensor shapes, and main
//! memory footprint accounting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{quantize, FixedFormat, FixedTensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("hidden size {h} not divisible by head count {n}")]
    Divisibility { h: usize, n: usize },
    #[error("{field} must be >= 1")]
    ZeroDimension { field: &'static str },
    #[error("seq_len {s} exceeds max_seq_len {max}")]
    SeqTooLong { s: usize, max: usize },
    #[error("weight_sparsity {0} outside [0, 1]")]
    BadSparsity(f64),
}

/// Encoder-stack hyperparameters defining the workload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub ff_dim: Option<usize>,
    #[serde(default)]
    pub weight_sparsity: f64,
}

impl ModelConfig {
    /// Feed-forward width; defaults to 4*hidden.
    pub fn ff_dim(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.hidden)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn bert_tiny() -> Self {
        serde_json::from_str(BERT_TINY_JSON).expect("bundled preset parses")
    }

    pub fn bert_base() -> Self {
        serde_json::from_str(BERT_BASE_JSON).expect("bundled preset parses")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bert-tiny" => Some(Self::bert_tiny()),
            "bert-base" => Some(Self::bert_base()),
            _ => None,
        }
    }
}

pub const BERT_TINY_JSON: &str = include_str!("../presets/bert-tiny.json");
pub const BERT_BASE_JSON: &str = include_str!("../presets/bert-base.json");

pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig, ModelError> {
    for (v, field) in [
        (cfg.vocab_size, "vocab_size"),
        (cfg.max_seq_len, "max_seq_len"),
        (cfg.seq_len, "seq_len"),
        (cfg.batch, "batch"),
        (cfg.hidden, "hidden"),
        (cfg.layers, "layers"),
        (cfg.heads, "heads"),
        (cfg.ff_dim(), "ff_dim"),
    ] {
        if v == 0 {
            return Err(ModelError::ZeroDimension { field });
        }
    }
    if cfg.hidden % cfg.heads != 0 {
        return Err(ModelError::Divisibility { h: cfg.hidden, n: cfg.heads });
    }
    if cfg.seq_len > cfg.max_seq_len {
        return Err(ModelError::SeqTooLong { s: cfg.seq_len, max: cfg.max_seq_len });
    }
    if !(0.0..=1.0).contains(&cfg.weight_sparsity) {
        return Err(ModelError::BadSparsity(cfg.weight_sparsity));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Embedding,
    Weight,
    /// Layer-norm affine parameters: loaded like weights but exempt from
    /// static magnitude pruning and runtime threshold pruning.
    NormParam,
    Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: (usize, usize, usize),
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn elements(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    MemLoad,
    Matmul,
    Softmax,
    LayerNorm,
    AddResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusedActivation {
    Gelu,
}

/// One memory-load or compute operation of the per-layer schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    pub label: String,
    pub kind: OpKind,
    /// For compute ops: input tensors. Matmul: [lhs, rhs]. Softmax: [scores].
    /// LayerNorm: `concat_parts` leading tensors concatenated along columns,
    /// optionally a residual tensor, then gamma and beta.
    pub operands: Vec<TensorId>,
    pub output: TensorId,
    /// Tensors brought on-chip by a MemLoad node (includes `output` when the
    /// load also materializes an activation, as for the embedding load).
    pub loads: Vec<TensorId>,
    pub deps: Vec<usize>,
    pub layer_index: usize,
    pub head_index: Option<usize>,
    pub fused_activation: Option<FusedActivation>,
    /// Matmul only: treat rhs as transposed (rhs shape (b, z, y) for a
    /// (b, x, y) x (y, z) product).
    pub transpose_rhs: bool,
    /// Softmax only: scalar applied to scores before the exponent.
    pub softmax_scale: f64,
    /// LayerNorm only: number of leading operands concatenated along columns.
    pub concat_parts: usize,
    /// LayerNorm only: whether a residual operand follows the concat group.
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct OpGraph {
    pub tensors: Vec<TensorInfo>,
    pub nodes: Vec<OpNode>,
    /// The activation produced by the embedding load (model input).
    pub input: TensorId,
    /// Final encoder output.
    pub output: TensorId,
}

impl OpGraph {
    pub fn tensor(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[id.0 as usize]
    }

    pub fn compute_nodes(&self) -> impl Iterator<Item = &OpNode> {
        self.nodes.iter().filter(|n| n.kind != OpKind::MemLoad)
    }

    pub fn load_nodes(&self) -> impl Iterator<Item = &OpNode> {
        self.nodes.iter().filter(|n| n.kind == OpKind::MemLoad)
    }

    /// Topological order of node ids; panics if the graph is cyclic (it is
    /// acyclic by construction).
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for &d in &node.deps {
                out[d].push(node.id);
                indeg[node.id] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop() {
            order.push(i);
            for &s in &out[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push(s);
                }
            }
        }
        assert_eq!(order.len(), n, "operation graph has a cycle");
        order.sort_by_key(|&i| depth_key(self, i));
        order
    }

    /// Depth of each node: 0 for roots, 1 + max(dep depths) otherwise.
    pub fn depths(&self) -> Vec<u32> {
        let mut depth = vec![0u32; self.nodes.len()];
        // node ids are already topologically ordered by construction
        for node in &self.nodes {
            let d = node.deps.iter().map(|&d| depth[d] + 1).max().unwrap_or(0);
            depth[node.id] = d;
        }
        depth
    }
}

fn depth_key(g: &OpGraph, i: usize) -> (usize, usize) {
    (g.nodes[i].layer_index, i)
}

struct GraphBuilder {
    tensors: Vec<TensorInfo>,
    nodes: Vec<OpNode>,
    producer: BTreeMap<TensorId, usize>,
}

impl GraphBuilder {
    fn tensor(&mut self, name: String, shape: (usize, usize, usize), kind: TensorKind) -> TensorId {
        let id = TensorId(self.tensors.len() as u32);
        self.tensors.push(TensorInfo { name, shape, kind });
        id
    }

    fn node(&mut self, mut node: OpNode) -> usize {
        let id = self.nodes.len();
        node.id = id;
        // dependencies: producers of all operands
        let mut deps: Vec<usize> = node
            .operands
            .iter()
            .filter_map(|t| self.producer.get(t).copied())
            .collect();
        deps.sort_unstable();
        deps.dedup();
        node.deps = deps;
        self.producer.insert(node.output, id);
        if node.kind == OpKind::MemLoad {
            for &t in &node.loads {
                self.producer.insert(t, id);
            }
        }
        self.nodes.push(node);
        id
    }
}

fn blank_node(label: String, kind: OpKind, layer: usize) -> OpNode {
    OpNode {
        id: 0,
        label,
        kind,
        operands: Vec::new(),
        output: TensorId(0),
        loads: Vec::new(),
        deps: Vec::new(),
        layer_index: layer,
        head_index: None,
        fused_activation: None,
        transpose_rhs: false,
        softmax_scale: 1.0,
        concat_parts: 1,
        residual: false,
    }
}

/// Expand a validated config into the full per-layer operation graph.
pub fn build_op_graph(cfg: &ModelConfig) -> OpGraph {
    let (b, s, h, n) = (cfg.batch, cfg.seq_len, cfg.hidden, cfg.heads);
    let hd = cfg.head_dim();
    let ff = cfg.ff_dim();
    let mut gb = GraphBuilder { tensors: Vec::new(), nodes: Vec::new(), producer: BTreeMap::new() };

    // Embedding load: brings the token and position tables on-chip and
    // materializes the embedded input sequence.
    let emb = gb.tensor("emb.table".into(), (1, cfg.vocab_size, h), TensorKind::Embedding);
    let pos = gb.tensor("emb.pos".into(), (1, cfg.max_seq_len, h), TensorKind::Embedding);
    let h0 = gb.tensor("emb.out".into(), (b, s, h), TensorKind::Activation);
    let mut load = blank_node("load.emb".into(), OpKind::MemLoad, 0);
    load.loads = vec![emb, pos];
    load.output = h0;
    gb.node(load);

    let mut layer_in = h0;
    for l in 0..cfg.layers {
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        let mut wo = Vec::new();
        for i in 0..n {
            wq.push(gb.tensor(format!("l{l}.h{i}.wq"), (1, h, hd), TensorKind::Weight));
            wk.push(gb.tensor(format!("l{l}.h{i}.wk"), (1, h, hd), TensorKind::Weight));
            wv.push(gb.tensor(format!("l{l}.h{i}.wv"), (1, h, hd), TensorKind::Weight));
            wo.push(gb.tensor(format!("l{l}.h{i}.wo"), (1, hd, hd), TensorKind::Weight));
        }
        let ln1_g = gb.tensor(format!("l{l}.ln1.gamma"), (1, 1, h), TensorKind::NormParam);
        let ln1_b = gb.tensor(format!("l{l}.ln1.beta"), (1, 1, h), TensorKind::NormParam);
        let w1 = gb.tensor(format!("l{l}.ff1.w"), (1, h, ff), TensorKind::Weight);
        let w2 = gb.tensor(format!("l{l}.ff2.w"), (1, ff, h), TensorKind::Weight);
        let ln2_g = gb.tensor(format!("l{l}.ln2.gamma"), (1, 1, h), TensorKind::NormParam);
        let ln2_b = gb.tensor(format!("l{l}.ln2.beta"), (1, 1, h), TensorKind::NormParam);

        // weight loads for the attention block
        for (idx, (label, group)) in [
            ("load.wq", wq.clone()),
            ("load.wk", wk.clone()),
            ("load.wv", wv.clone()),
            ("load.wo", wo.clone()),
        ]
        .into_iter()
        .enumerate()
        {
            let mut node = blank_node(format!("l{l}.{label}"), OpKind::MemLoad, l);
            node.loads = group;
            if idx == 3 {
                // the attention output load also carries the first layer-norm
                // affine parameters
                node.loads.push(ln1_g);
                node.loads.push(ln1_b);
            }
            node.output = node.loads[0];
            gb.node(node);
        }

        // per-head attention
        let mut head_outs = Vec::new();
        for i in 0..n {
            let q = gb.tensor(format!("l{l}.h{i}.q"), (b, s, hd), TensorKind::Activation);
            let k = gb.tensor(format!("l{l}.h{i}.k"), (b, s, hd), TensorKind::Activation);
            let v = gb.tensor(format!("l{l}.h{i}.v"), (b, s, hd), TensorKind::Activation);
            for (out, w, what) in [(q, wq[i], "q"), (k, wk[i], "k"), (v, wv[i], "v")] {
                let mut node = blank_node(format!("l{l}.h{i}.proj_{what}"), OpKind::Matmul, l);
                node.operands = vec![layer_in, w];
                node.output = out;
                node.head_index = Some(i);
                gb.node(node);
            }
            let scores = gb.tensor(format!("l{l}.h{i}.scores"), (b, s, s), TensorKind::Activation);
            let mut node = blank_node(format!("l{l}.h{i}.qk"), OpKind::Matmul, l);
            node.operands = vec![q, k];
            node.output = scores;
            node.transpose_rhs = true;
            node.head_index = Some(i);
            gb.node(node);

            let probs = gb.tensor(format!("l{l}.h{i}.probs"), (b, s, s), TensorKind::Activation);
            let mut node = blank_node(format!("l{l}.h{i}.softmax"), OpKind::Softmax, l);
            node.operands = vec![scores];
            node.output = probs;
            node.softmax_scale = 1.0 / (h as f64).sqrt();
            node.head_index = Some(i);
            gb.node(node);

            let ctx = gb.tensor(format!("l{l}.h{i}.ctx"), (b, s, hd), TensorKind::Activation);
            let mut node = blank_node(format!("l{l}.h{i}.sv"), OpKind::Matmul, l);
            node.operands = vec![probs, v];
            node.output = ctx;
            node.head_index = Some(i);
            gb.node(node);

            let out = gb.tensor(format!("l{l}.h{i}.attn_out"), (b, s, hd), TensorKind::Activation);
            let mut node = blank_node(format!("l{l}.h{i}.out_proj"), OpKind::Matmul, l);
            node.operands = vec![ctx, wo[i]];
            node.output = out;
            node.head_index = Some(i);
            gb.node(node);
            head_outs.push(out);
        }

        // add + layer-norm over the concatenated head outputs
        let ln1_out = gb.tensor(format!("l{l}.ln1.out"), (b, s, h), TensorKind::Activation);
        let mut node = blank_node(format!("l{l}.ln1"), OpKind::LayerNorm, l);
        node.operands = head_outs.clone();
        node.operands.push(layer_in);
        node.operands.push(ln1_g);
        node.operands.push(ln1_b);
        node.output = ln1_out;
        node.concat_parts = n;
        node.residual = true;
        gb.node(node);

        // feed-forward weight loads
        for (label, w, extra) in
            [("load.ff1", w1, None), ("load.ff2", w2, Some((ln2_g, ln2_b)))]
        {
            let mut node = blank_node(format!("l{l}.{label}"), OpKind::MemLoad, l);
            node.loads = vec![w];
            if let Some((g, bb)) = extra {
                node.loads.push(g);
                node.loads.push(bb);
            }
            node.output = node.loads[0];
            gb.node(node);
        }

        let ff1_out = gb.tensor(format!("l{l}.ff1.out"), (b, s, ff), TensorKind::Activation);
        let mut node = blank_node(format!("l{l}.ff1"), OpKind::Matmul, l);
        node.operands = vec![ln1_out, w1];
        node.output = ff1_out;
        node.fused_activation = Some(FusedActivation::Gelu);
        gb.node(node);

        let ff2_out = gb.tensor(format!("l{l}.ff2.out"), (b, s, h), TensorKind::Activation);
        let mut node = blank_node(format!("l{l}.ff2"), OpKind::Matmul, l);
        node.operands = vec![ff1_out, w2];
        node.output = ff2_out;
        node.fused_activation = Some(FusedActivation::Gelu);
        gb.node(node);

        let ln2_out = gb.tensor(format!("l{l}.ln2.out"), (b, s, h), TensorKind::Activation);
        let mut node = blank_node(format!("l{l}.ln2"), OpKind::LayerNorm, l);
        node.operands = vec![ff2_out, ln2_g, ln2_b];
        node.output = ln2_out;
        gb.node(node);

        layer_in = ln2_out;
    }

    OpGraph { tensors: gb.tensors, nodes: gb.nodes, input: h0, output: layer_in }
}

/// Main memory footprint in bytes for a workload at a given element width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub embeddings_bytes: u64,
    pub weights_bytes: u64,
    pub activations_bytes: u64,
    pub mask_bytes: u64,
    pub total_bytes: u64,
}

pub fn memory_footprint(cfg: &ModelConfig, bits_per_element: u32) -> MemoryFootprint {
    let graph = build_op_graph(cfg);
    let bits = bits_per_element as u64;
    let mut emb_elems: u64 = 0;
    let mut weight_elems: u64 = 0;
    let mut act_elems: u64 = 0;
    for t in &graph.tensors {
        let e = t.elements() as u64;
        match t.kind {
            TensorKind::Embedding => emb_elems += e,
            TensorKind::Weight | TensorKind::NormParam => weight_elems += e,
            TensorKind::Activation => act_elems += e,
        }
    }
    let embeddings_bytes = emb_elems * bits / 8;
    let weights_bytes =
        ((weight_elems * bits) as f64 * (1.0 - cfg.weight_sparsity) / 8.0).round() as u64;
    let activations_bytes = act_elems * bits / 8;
    let mask_bytes = (weight_elems + act_elems) / 8;
    MemoryFootprint {
        embeddings_bytes,
        weights_bytes,
        activations_bytes,
        mask_bytes,
        total_bytes: embeddings_bytes + weights_bytes + activations_bytes + mask_bytes,
    }
}

/// Seeded parameter tensors keyed by graph tensor id.
#[derive(Debug, Clone)]
pub struct Weights {
    pub tensors: BTreeMap<TensorId, FixedTensor>,
}

impl Weights {
    pub fn get(&self, id: TensorId) -> &FixedTensor {
        &self.tensors[&id]
    }
}

fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the tensor name so generation is order-independent
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for byte in name.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Zero out all but the `keep` largest-magnitude entries (ties keep the
/// lower index), modeling a statically weight-pruned model.
fn prune_to_sparsity(t: &mut FixedTensor, sparsity: f64) {
    if sparsity <= 0.0 {
        return;
    }
    let keep = ((t.raw.len() as f64) * (1.0 - sparsity)).round() as usize;
    let mut order: Vec<usize> = (0..t.raw.len()).collect();
    order.sort_by(|&a, &b| {
        t.raw[b]
            .unsigned_abs()
            .cmp(&t.raw[a].unsigned_abs())
            .then(a.cmp(&b))
    });
    for &i in &order[keep.min(order.len())..] {
        t.raw[i] = 0;
    }
}

/// Generate the synthetic parameter set for a workload. Matmul weights are
/// Gaussian with 1/sqrt(fan_in) scale and magnitude-pruned to
/// `cfg.weight_sparsity`; layer-norm affine parameters are exempt from
/// pruning. Deterministic in (cfg, fmt, seed).
pub fn generate_weights(cfg: &ModelConfig, graph: &OpGraph, fmt: FixedFormat, seed: u64) -> Weights {
    let mut tensors = BTreeMap::new();
    for (i, info) in graph.tensors.iter().enumerate() {
        let id = TensorId(i as u32);
        match info.kind {
            TensorKind::Weight => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &info.name));
                let fan_in = info.shape.1.max(1) as f64;
                let sigma = fan_in.sqrt().recip();
                let vals: Vec<f64> =
                    (0..info.elements()).map(|_| gaussian(&mut rng) * sigma).collect();
                let mut t = FixedTensor::from_f64(info.shape, &vals, fmt);
                prune_to_sparsity(&mut t, cfg.weight_sparsity);
                tensors.insert(id, t);
            }
            TensorKind::NormParam => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &info.name));
                let gamma = info.name.ends_with("gamma");
                let vals: Vec<f64> = (0..info.elements())
                    .map(|_| {
                        if gamma {
                            0.25 + 0.03 * gaussian(&mut rng)
                        } else {
                            0.02 * gaussian(&mut rng)
                        }
                    })
                    .collect();
                tensors.insert(id, FixedTensor::from_f64(info.shape, &vals, fmt));
            }
            _ => {}
        }
    }
    Weights { tensors }
}

/// Seeded input activation (the embedded sequence produced by the embedding
/// load).
pub fn generate_input(cfg: &ModelConfig, fmt: FixedFormat, seed: u64) -> FixedTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "input"));
    let shape = (cfg.batch, cfg.seq_len, cfg.hidden);
    let mut t = FixedTensor::zeros(shape, fmt);
    for v in t.raw.iter_mut() {
        *v = quantize(0.3 * gaussian(&mut rng), fmt);
    }
    t
}
