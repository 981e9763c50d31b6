//! Functional execution of the operation graph with exact fixed-point math.
//!
//! This path runs the workload with no tiling and no scheduling and is the
//! ground truth the cycle engine is checked against: because matmul
//! accumulation is exact in a wide integer register, the engine's tiled
//! execution must reproduce these outputs bit-for-bit.

use crate::model::{
    FusedActivation, ModelConfig, OpGraph, OpKind, TensorId, TensorKind, Weights,
};
use crate::numerics::{
    gelu, layer_norm, rescale_accumulator, softmax_row, FixedTensor, NumericsError,
    LAYER_NORM_EPS,
};
use crate::sparsity::{dynatran_prune, PruneThreshold};

use std::collections::BTreeMap;

/// Element-level pruning tallies accumulated over one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct PruneStats {
    pub act_zeros: u64,
    pub act_elems: u64,
    pub weight_zeros: u64,
    pub weight_elems: u64,
}

impl PruneStats {
    pub fn activation_sparsity(&self) -> f64 {
        if self.act_elems == 0 {
            0.0
        } else {
            self.act_zeros as f64 / self.act_elems as f64
        }
    }

    pub fn weight_sparsity(&self) -> f64 {
        if self.weight_elems == 0 {
            0.0
        } else {
            self.weight_zeros as f64 / self.weight_elems as f64
        }
    }

    pub fn overall_sparsity(&self) -> f64 {
        let total = self.act_elems + self.weight_elems;
        if total == 0 {
            0.0
        } else {
            (self.act_zeros + self.weight_zeros) as f64 / total as f64
        }
    }
}

/// General matmul with optional rhs transpose, batch broadcast on the rhs,
/// and an optional fused activation applied after the single final rescale.
pub fn matmul(
    lhs: &FixedTensor,
    rhs: &FixedTensor,
    transpose_rhs: bool,
    fused: Option<FusedActivation>,
) -> Result<FixedTensor, NumericsError> {
    let (b, x, y) = lhs.shape;
    let (rb, r1, r2) = rhs.shape;
    let (inner, z) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
    if inner != y || (rb != b && rb != 1) {
        return Err(NumericsError::ShapeMismatch(format!(
            "lhs {:?} rhs {:?} (transpose={transpose_rhs})",
            lhs.shape, rhs.shape
        )));
    }
    let mut out = FixedTensor::zeros((b, x, z), lhs.fmt);
    for bi in 0..b {
        let rbi = if rb == 1 { 0 } else { bi };
        for i in 0..x {
            for j in 0..z {
                let mut acc: i64 = 0;
                for k in 0..y {
                    let r = if transpose_rhs { rhs.get(rbi, j, k) } else { rhs.get(rbi, k, j) };
                    acc += lhs.get(bi, i, k) as i64 * r as i64;
                }
                let mut v = rescale_accumulator(acc, lhs.fmt);
                if fused == Some(FusedActivation::Gelu) {
                    v = gelu(v, lhs.fmt);
                }
                out.set(bi, i, j, v);
            }
        }
    }
    Ok(out)
}

fn maybe_prune(
    t: &FixedTensor,
    kind: TensorKind,
    tau: Option<PruneThreshold>,
    stats: &mut PruneStats,
) -> FixedTensor {
    // layer-norm affine parameters bypass the pruning unit
    if kind == TensorKind::NormParam {
        return t.clone();
    }
    let pruned = match tau {
        Some(th) => dynatran_prune(t, th).0,
        None => t.clone(),
    };
    let zeros = (pruned.len() - pruned.count_nonzero()) as u64;
    match kind {
        TensorKind::Activation => {
            stats.act_zeros += zeros;
            stats.act_elems += pruned.len() as u64;
        }
        _ => {
            stats.weight_zeros += zeros;
            stats.weight_elems += pruned.len() as u64;
        }
    }
    pruned
}

/// What a node's evaluation consumed, for the cycle engine's timing model.
#[derive(Debug, Clone)]
pub enum EvalArtifacts {
    Load,
    /// The pruned operands the multiply actually ran on.
    Matmul { lhs: FixedTensor, rhs: FixedTensor },
    /// Row-module work size (rows, cols).
    Rows { rows: usize, cols: usize },
}

/// Per-node functional evaluator. Both the untiled reference pass and the
/// cycle engine run nodes through this, so their outputs agree bit-for-bit
/// by construction.
pub struct EvalContext<'a> {
    graph: &'a OpGraph,
    weights: &'a Weights,
    input: &'a FixedTensor,
    tau: Option<PruneThreshold>,
    pub store: BTreeMap<TensorId, FixedTensor>,
    pub stats: PruneStats,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        graph: &'a OpGraph,
        weights: &'a Weights,
        input: &'a FixedTensor,
        tau: Option<PruneThreshold>,
    ) -> Self {
        Self { graph, weights, input, tau, store: BTreeMap::new(), stats: PruneStats::default() }
    }

    pub fn input_tensor(&self) -> &FixedTensor {
        self.input
    }

    pub fn weight_tensor(&self, id: TensorId) -> &FixedTensor {
        self.weights.get(id)
    }

    /// Produced tensor if available, else the stored weight.
    pub fn stored_or_weight(&self, id: TensorId) -> &FixedTensor {
        self.store.get(&id).unwrap_or_else(|| self.weights.get(id))
    }

    fn fetch(&self, id: TensorId) -> FixedTensor {
        match self.store.get(&id) {
            Some(t) => t.clone(),
            None => self.weights.get(id).clone(),
        }
    }

    /// Evaluate one node; callers must respect dependency order.
    pub fn eval(&mut self, node: &crate::model::OpNode) -> Result<EvalArtifacts, NumericsError> {
        match node.kind {
            OpKind::MemLoad => {
                if node.output == self.graph.input {
                    self.store.insert(node.output, self.input.clone());
                }
                Ok(EvalArtifacts::Load)
            }
            OpKind::Matmul => {
                let lhs_raw = self.fetch(node.operands[0]);
                let rhs_raw = self.fetch(node.operands[1]);
                let lhs = maybe_prune(
                    &lhs_raw,
                    self.graph.tensor(node.operands[0]).kind,
                    self.tau,
                    &mut self.stats,
                );
                let rhs = maybe_prune(
                    &rhs_raw,
                    self.graph.tensor(node.operands[1]).kind,
                    self.tau,
                    &mut self.stats,
                );
                let out = matmul(&lhs, &rhs, node.transpose_rhs, node.fused_activation)?;
                self.store.insert(node.output, out);
                Ok(EvalArtifacts::Matmul { lhs, rhs })
            }
            OpKind::Softmax => {
                let x_raw = self.fetch(node.operands[0]);
                let x = maybe_prune(&x_raw, TensorKind::Activation, self.tau, &mut self.stats);
                let (b, r, c) = x.shape;
                let mut out = FixedTensor::zeros((b, r, c), x.fmt);
                for bi in 0..b {
                    for ri in 0..r {
                        let row = softmax_row(x.row(bi, ri), node.softmax_scale, x.fmt)?;
                        for (ci, v) in row.into_iter().enumerate() {
                            out.set(bi, ri, ci, v);
                        }
                    }
                }
                self.store.insert(node.output, out);
                Ok(EvalArtifacts::Rows { rows: b * r, cols: c })
            }
            OpKind::LayerNorm | OpKind::AddResidual => {
                let x = layer_norm_input(
                    self.graph,
                    node,
                    &self.store,
                    self.weights,
                    self.input,
                    self.tau,
                    &mut self.stats,
                )?;
                let gamma = self.fetch(node.operands[node.operands.len() - 2]);
                let beta = self.fetch(node.operands[node.operands.len() - 1]);
                let (b, r, c) = x.shape;
                let mut out = FixedTensor::zeros((b, r, c), x.fmt);
                for bi in 0..b {
                    for ri in 0..r {
                        let row = layer_norm(
                            x.row(bi, ri),
                            &gamma.raw,
                            &beta.raw,
                            LAYER_NORM_EPS,
                            x.fmt,
                        )?;
                        for (ci, v) in row.into_iter().enumerate() {
                            out.set(bi, ri, ci, v);
                        }
                    }
                }
                self.store.insert(node.output, out);
                Ok(EvalArtifacts::Rows { rows: b * r, cols: c })
            }
        }
    }

    pub fn take_output(&mut self) -> Result<FixedTensor, NumericsError> {
        self.store
            .remove(&self.graph.output)
            .ok_or_else(|| NumericsError::ShapeMismatch("graph produced no output".into()))
    }
}

/// Run the graph functionally, optionally applying threshold pruning to every
/// weight and activation operand as it enters a compute operation. Returns
/// the encoder output and the pruning tallies.
pub fn forward_with_pruning(
    cfg: &ModelConfig,
    graph: &OpGraph,
    weights: &Weights,
    input: &FixedTensor,
    tau: Option<PruneThreshold>,
) -> Result<(FixedTensor, PruneStats), NumericsError> {
    let _ = cfg;
    let mut ctx = EvalContext::new(graph, weights, input, tau);
    for node in &graph.nodes {
        ctx.eval(node)?;
    }
    let out = ctx.take_output()?;
    Ok((out, ctx.stats))
}

/// Concatenate the leading operands along columns and add the residual, all
/// in raw integer arithmetic (saturating), after per-operand pruning.
pub fn layer_norm_input(
    graph: &OpGraph,
    node: &crate::model::OpNode,
    store: &BTreeMap<TensorId, FixedTensor>,
    weights: &Weights,
    input: &FixedTensor,
    tau: Option<PruneThreshold>,
    stats: &mut PruneStats,
) -> Result<FixedTensor, NumericsError> {
    let fetch = |id: TensorId| -> FixedTensor {
        if id == graph.input {
            if let Some(t) = store.get(&id) {
                return t.clone();
            }
            return input.clone();
        }
        match store.get(&id) {
            Some(t) => t.clone(),
            None => weights.get(id).clone(),
        }
    };
    let parts: Vec<FixedTensor> = node.operands[..node.concat_parts]
        .iter()
        .map(|&id| maybe_prune(&fetch(id), graph.tensor(id).kind, tau, stats))
        .collect();
    let (b, r, _) = parts[0].shape;
    let total_c: usize = parts.iter().map(|p| p.shape.2).sum();
    let fmt = parts[0].fmt;
    let mut x = FixedTensor::zeros((b, r, total_c), fmt);
    let mut col = 0;
    for p in &parts {
        for bi in 0..b {
            for ri in 0..r {
                for ci in 0..p.shape.2 {
                    x.set(bi, ri, col + ci, p.get(bi, ri, ci));
                }
            }
        }
        col += p.shape.2;
    }
    if node.residual {
        let res_id = node.operands[node.concat_parts];
        let res = maybe_prune(&fetch(res_id), graph.tensor(res_id).kind, tau, stats);
        if res.shape != x.shape {
            return Err(NumericsError::ShapeMismatch(format!(
                "residual {:?} vs {:?}",
                res.shape, x.shape
            )));
        }
        let (lo, hi) = (fmt.raw_min(), fmt.raw_max());
        for (xi, ri) in x.raw.iter_mut().zip(res.raw.iter()) {
            *xi = ((*xi as i64 + *ri as i64).clamp(lo, hi)) as i32;
        }
    }
    Ok(x)
}

/// Dense (unpruned) reference forward pass: the ground truth for the
/// simulator's functional output.
pub fn dense_forward_reference(
    cfg: &ModelConfig,
    graph: &OpGraph,
    weights: &Weights,
    input: &FixedTensor,
) -> Result<FixedTensor, NumericsError> {
    forward_with_pruning(cfg, graph, weights, input, None).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_op_graph, generate_input, generate_weights, validate_config, ModelConfig};
    use crate::numerics::DEFAULT_FORMAT;

    fn tiny(s: usize) -> ModelConfig {
        let mut cfg = ModelConfig::bert_tiny();
        cfg.seq_len = s;
        cfg.batch = 1;
        validate_config(cfg).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(16);
        let g = build_op_graph(&cfg);
        let w = generate_weights(&cfg, &g, DEFAULT_FORMAT, 42);
        let x = generate_input(&cfg, DEFAULT_FORMAT, 42);
        let a = dense_forward_reference(&cfg, &g, &w, &x).unwrap();
        let b = dense_forward_reference(&cfg, &g, &w, &x).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.shape, (1, 16, 128));
    }

    #[test]
    fn matmul_transpose_matches_explicit() {
        use crate::numerics::{mac_reference, FixedTensor};
        use rand::{Rng, SeedableRng};
        let f = DEFAULT_FORMAT;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let av: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = FixedTensor::from_f64((2, 3, 4), &av, f);
        let bt = FixedTensor::from_f64((2, 5, 4), &bv, f);
        // explicit transpose
        let mut b = FixedTensor::zeros((2, 4, 5), f);
        for bi in 0..2 {
            for r in 0..5 {
                for c in 0..4 {
                    b.set(bi, c, r, bt.get(bi, r, c));
                }
            }
        }
        let via_flag = matmul(&a, &bt, true, None).unwrap();
        let explicit = mac_reference(&a, &b).unwrap();
        assert_eq!(via_flag.raw, explicit.raw);
    }

    #[test]
    fn pruning_stats_monotone_in_tau() {
        let cfg = tiny(8);
        let g = build_op_graph(&cfg);
        let w = generate_weights(&cfg, &g, DEFAULT_FORMAT, 1);
        let x = generate_input(&cfg, DEFAULT_FORMAT, 1);
        let mut last = -1.0;
        for tau in [0.0, 0.02, 0.05, 0.1] {
            let (_, stats) = forward_with_pruning(
                &cfg,
                &g,
                &w,
                &x,
                Some(PruneThreshold::new(tau).unwrap()),
            )
            .unwrap();
            let rho = stats.activation_sparsity();
            assert!(rho >= last, "tau={tau} rho={rho} last={last}");
            last = rho;
        }
    }
}
