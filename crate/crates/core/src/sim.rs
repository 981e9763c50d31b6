//! The cycle engine: advances a global cycle counter, moves compressed
//! tensors through memory, buffers, and processing elements per the
//! schedule, executes the fixed-point math, and accumulates metrics.
//!
//! Matmul accumulation is exact in wide integer registers and every node
//! runs through the same functional evaluator as the untiled reference
//! pass, so the engine's output is bit-identical to the reference for any
//! threshold, tile size, dataflow, or schedule.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    layernorm_cycles, mac_lane_cycles, main_mem_cycles, softmax_cycles, Buffer, BufferKind,
    BufferOutcome, EnergyModel, HardwareConfig, ModuleKind,
};
use crate::forward::{EvalArtifacts, EvalContext};
use crate::model::{build_op_graph, generate_input, generate_weights, ModelConfig, OpKind, TensorId};
use crate::numerics::{FixedTensor, NumericsError};
use crate::sched::{Priority, StallReason};
use crate::sparsity::{threshold_lookup, PruneThreshold, SparsityProfile};
use crate::tiling::{tile_matmul, Dataflow, TileSpec, DEFAULT_TILE_SPEC};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation options: {0}")]
    Config(String),
    #[error("deadlock at cycle {cycle}: nothing schedulable; stalled ops: {summary}")]
    Deadlock { cycle: u64, summary: String },
    #[error("cycle cap {0} exceeded")]
    MaxCycles(u64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sparsity error: {0}")]
    Sparsity(String),
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub tau: Option<f64>,
    pub rho_target: Option<f64>,
    pub profile: Option<SparsityProfile>,
    pub stagger: bool,
    pub seed: u64,
    pub trace_enabled: bool,
    pub dataflow: Dataflow,
    pub tile_spec: TileSpec,
    pub max_cycles: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tau: None,
            rho_target: None,
            profile: None,
            stagger: true,
            seed: 42,
            trace_enabled: false,
            dataflow: Dataflow::DEFAULT,
            tile_spec: DEFAULT_TILE_SPEC,
            max_cycles: 2_000_000_000,
        }
    }
}

impl SimOptions {
    /// Resolve the pruning setting: an explicit threshold, a target sparsity
    /// looked up on the profiled curve, or dense mode.
    pub fn resolve_threshold(&self) -> Result<Option<PruneThreshold>, SimError> {
        if self.max_cycles == 0 {
            return Err(SimError::Config("max_cycles must be > 0".into()));
        }
        match (self.tau, self.rho_target) {
            (Some(_), Some(_)) => {
                Err(SimError::Config("tau and rho_target are mutually exclusive".into()))
            }
            (Some(t), None) => PruneThreshold::new(t)
                .map(Some)
                .map_err(|e| SimError::Config(e.to_string())),
            (None, Some(rho)) => {
                let profile = self.profile.as_ref().ok_or_else(|| {
                    SimError::Config(
                        "rho_target requires a sparsity profile; run the `profile` command first"
                            .into(),
                    )
                })?;
                threshold_lookup(profile, rho)
                    .map(Some)
                    .map_err(|e| SimError::Sparsity(e.to_string()))
            }
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub total_cycles: u64,
    pub stall_cycles: BTreeMap<StallReason, u64>,
    pub energy_fj: BTreeMap<String, u64>,
    /// Independently accumulated event ledger; must equal the component sum.
    pub energy_total_fj: u64,
    pub utilization: BTreeMap<ModuleKind, f64>,
    pub throughput_seq_per_s: f64,
    pub avg_power_w: f64,
    pub macs_total: u64,
    pub macs_skipped: u64,
    pub achieved_activation_sparsity: f64,
    pub prune_invocations: u64,
    pub prune_cycles: u64,
}

impl Metrics {
    pub fn compute_stall_cycles(&self) -> u64 {
        self.stall_cycles.iter().filter(|(r, _)| !r.is_memory()).map(|(_, c)| c).sum()
    }

    pub fn memory_stall_cycles(&self) -> u64 {
        self.stall_cycles.iter().filter(|(r, _)| r.is_memory()).map(|(_, c)| c).sum()
    }

    pub fn total_stall_cycles(&self) -> u64 {
        self.stall_cycles.values().sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub op: String,
    pub event: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct UtilSample {
    pub cycle: u64,
    pub mac_util: f64,
    pub softmax_util: f64,
    pub layernorm_util: f64,
    pub act_buf_frac: f64,
    pub wt_buf_frac: f64,
    pub mask_buf_frac: f64,
    pub power_w: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub samples: Vec<UtilSample>,
}

/// Render utilization samples as CSV, one row per engine event boundary.
pub fn utilization_trace(trace: &Trace) -> String {
    let mut out = String::from(
        "cycle,mac_util,softmax_util,layernorm_util,act_buf_frac,wt_buf_frac,mask_buf_frac,power_w\n",
    );
    for s in &trace.samples {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.cycle,
            s.mac_util,
            s.softmax_util,
            s.layernorm_util,
            s.act_buf_frac,
            s.wt_buf_frac,
            s.mask_buf_frac,
            s.power_w
        ));
    }
    out
}

pub fn schedule_trace_csv(trace: &Trace) -> String {
    let mut out = String::from("cycle,op,event\n");
    for e in &trace.events {
        out.push_str(&format!("{},{},{}\n", e.cycle, e.op, e.event));
    }
    out
}

#[derive(Debug)]
pub struct SimResult {
    pub metrics: Metrics,
    pub output: FixedTensor,
    pub trace: Option<Trace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodePhase {
    Pending,
    Running,
    Done,
}

struct ChainStep {
    prune: bool,
    mac_cycles: u64,
}

struct Chain {
    steps: Vec<ChainStep>,
}

impl Chain {
    fn duration(&self) -> u64 {
        self.steps.iter().map(|s| s.mac_cycles + if s.prune { 1 } else { 0 }).sum()
    }
}

struct NodeRt {
    phase: NodePhase,
    prepared: bool,
    chains: VecDeque<Chain>,
    units_running: usize,
    units_done: usize,
    units_total: usize,
    /// Duration for single-unit (load / row-module) ops.
    duration: u64,
    stall: Option<StallReason>,
}

enum Completion {
    Mem { node: usize },
    Chain { node: usize },
    Row { node: usize, kind: ModuleKind },
}

struct Ledger {
    components: BTreeMap<String, u64>,
    total: u64,
}

impl Ledger {
    fn new() -> Self {
        Self { components: BTreeMap::new(), total: 0 }
    }

    fn charge(&mut self, component: &str, fj: u64) {
        *self.components.entry(component.to_string()).or_insert(0) += fj;
        self.total += fj;
    }
}

fn value_bytes(nnz: u64, bits: u32) -> u64 {
    (nnz * bits as u64).div_ceil(8)
}

fn mask_bytes(elems: u64) -> u64 {
    elems.div_ceil(8)
}

/// Per-operand-tensor nonzero counts folded to tile granularity, for
/// effectual-pair counting: n_eff of a tile = sum over reduction positions
/// of nnz(lhs rows slab) * nnz(rhs cols slab).
struct NnzSlabs {
    /// [batch][row_tile][reduction_pos]
    lhs: Vec<Vec<Vec<u32>>>,
    /// [batch][col_tile][reduction_pos]
    rhs: Vec<Vec<Vec<u32>>>,
    rhs_broadcast: bool,
}

fn nnz_slabs(
    lhs: &FixedTensor,
    rhs: &FixedTensor,
    transpose_rhs: bool,
    spec: TileSpec,
    z: usize,
) -> NnzSlabs {
    let (b, x, y) = lhs.shape;
    let ni = x.div_ceil(spec.tx);
    let nj = z.div_ceil(spec.ty);
    let rb = rhs.shape.0;
    let mut l = vec![vec![vec![0u32; y]; ni]; b];
    for bi in 0..b {
        for i in 0..x {
            let ti = i / spec.tx;
            for k in 0..y {
                if lhs.get(bi, i, k) != 0 {
                    l[bi][ti][k] += 1;
                }
            }
        }
    }
    let mut r = vec![vec![vec![0u32; y]; nj]; rb];
    for bi in 0..rb {
        for j in 0..z {
            let tj = j / spec.ty;
            for k in 0..y {
                let v = if transpose_rhs { rhs.get(bi, j, k) } else { rhs.get(bi, k, j) };
                if v != 0 {
                    r[bi][tj][k] += 1;
                }
            }
        }
    }
    NnzSlabs { lhs: l, rhs: r, rhs_broadcast: rb == 1 }
}

impl NnzSlabs {
    fn n_eff(&self, bt: usize, tb: usize, batches: usize, ti: usize, tj: usize, k_lo: usize, k_hi: usize) -> u64 {
        let mut total = 0u64;
        for bi in (bt * tb)..((bt * tb + tb).min(batches)) {
            let rbi = if self.rhs_broadcast { 0 } else { bi };
            let lrow = &self.lhs[bi][ti];
            let rrow = &self.rhs[rbi][tj];
            for k in k_lo..k_hi {
                total += lrow[k] as u64 * rrow[k] as u64;
            }
        }
        total
    }
}

struct Engine<'a> {
    hw: &'a HardwareConfig,
    costs: &'a EnergyModel,
    opts: &'a SimOptions,
    tau: Option<PruneThreshold>,
    nodes: Vec<NodeRt>,
    depths: Vec<u32>,
    priority: Priority,
    act_buf: Buffer,
    wt_buf: Buffer,
    mask_buf: Buffer,
    lanes_free: usize,
    lanes_total: usize,
    softmax_free: usize,
    softmax_total: usize,
    layernorm_free: usize,
    layernorm_total: usize,
    mem_free: bool,
    // resident tensor -> (value buffer, value bytes, mask bytes)
    resident: BTreeMap<TensorId, (BufferKind, u64, u64)>,
    pending_readers: BTreeMap<TensorId, usize>,
    heap: BinaryHeap<std::cmp::Reverse<(u64, u64)>>,
    completions: Vec<Option<Completion>>,
    next_unit: u64,
    ledger: Ledger,
    busy_cycles: BTreeMap<ModuleKind, u64>,
    stall_cycles: BTreeMap<StallReason, u64>,
    macs_total: u64,
    macs_skipped: u64,
    prune_invocations: u64,
    prune_cycles: u64,
    trace: Trace,
    fj_at_last_sample: u64,
}

impl<'a> Engine<'a> {
    fn pool_free(&self, kind: ModuleKind) -> usize {
        match kind {
            ModuleKind::MacLane => self.lanes_free,
            ModuleKind::Softmax => self.softmax_free,
            ModuleKind::Layernorm => self.layernorm_free,
            ModuleKind::Pruner => self.lanes_free,
        }
    }

    fn take_module(&mut self, kind: ModuleKind) {
        match kind {
            ModuleKind::MacLane | ModuleKind::Pruner => self.lanes_free -= 1,
            ModuleKind::Softmax => self.softmax_free -= 1,
            ModuleKind::Layernorm => self.layernorm_free -= 1,
        }
    }

    fn release_module(&mut self, kind: ModuleKind) {
        match kind {
            ModuleKind::MacLane | ModuleKind::Pruner => self.lanes_free += 1,
            ModuleKind::Softmax => self.softmax_free += 1,
            ModuleKind::Layernorm => self.layernorm_free += 1,
        }
    }

    fn schedule(&mut self, end: u64, c: Completion) {
        let id = self.next_unit;
        self.next_unit += 1;
        self.completions.push(Some(c));
        self.heap.push(std::cmp::Reverse((end, id)));
    }

    fn buffer(&mut self, kind: BufferKind) -> &mut Buffer {
        match kind {
            BufferKind::Act => &mut self.act_buf,
            BufferKind::Wt => &mut self.wt_buf,
            BufferKind::Mask => &mut self.mask_buf,
        }
    }

    /// Reserve buffer space for a tensor's compressed values and mask.
    /// Returns false (buffer-full) without side effects if either part
    /// does not fit.
    fn reserve(&mut self, id: TensorId, value_buf: BufferKind, vbytes: u64, mbytes: u64) -> bool {
        if vbytes > self.buffer(value_buf).free_bytes() || mbytes > self.mask_buf.free_bytes() {
            return false;
        }
        let costs = self.costs;
        match self.buffer(value_buf).write(vbytes, costs) {
            BufferOutcome::Done { energy_fj, .. } => self.ledger.charge("buffer_wr", energy_fj),
            BufferOutcome::Full { .. } => unreachable!("checked free space"),
        }
        match self.mask_buf.write(mbytes, costs) {
            BufferOutcome::Done { energy_fj, .. } => self.ledger.charge("buffer_wr", energy_fj),
            BufferOutcome::Full { .. } => unreachable!("checked free space"),
        }
        self.resident.insert(id, (value_buf, vbytes, mbytes));
        true
    }

    fn evict_dead(&mut self, keep: &[TensorId]) {
        let dead: Vec<TensorId> = self
            .resident
            .keys()
            .copied()
            .filter(|id| {
                self.pending_readers.get(id).copied().unwrap_or(0) == 0 && !keep.contains(id)
            })
            .collect();
        for id in dead {
            let (buf, vbytes, mbytes) = self.resident.remove(&id).unwrap();
            self.buffer(buf).evict(vbytes);
            self.mask_buf.evict(mbytes);
        }
    }

    fn charge_read(&mut self, vbytes: u64, mbytes: u64) {
        let fj = self.costs.buffer_rd_fj(vbytes + mbytes);
        self.ledger.charge("buffer_rd", fj);
    }
}

fn compressed_size(t: &FixedTensor) -> (u64, u64) {
    let nnz = t.count_nonzero() as u64;
    (value_bytes(nnz, t.fmt.bits()), mask_bytes(t.len() as u64))
}

/// Run one simulation: build the graph, generate weights and input from the
/// seed, and execute the workload cycle-accurately.
pub fn run(
    cfg: &ModelConfig,
    hw: &HardwareConfig,
    costs: &EnergyModel,
    opts: &SimOptions,
) -> Result<SimResult, SimError> {
    hw.validate().map_err(|e| SimError::Config(e.to_string()))?;
    costs.validate().map_err(|e| SimError::Config(e.to_string()))?;
    let tau = opts.resolve_threshold()?;

    let graph = build_op_graph(cfg);
    let weights = generate_weights(cfg, &graph, hw.fmt, opts.seed);
    let input = generate_input(cfg, hw.fmt, opts.seed);
    let mut ctx = EvalContext::new(&graph, &weights, &input, tau);

    let depths = graph.depths();
    let priority =
        if opts.stagger { Priority::staggered(cfg.heads) } else { Priority::equal(cfg.heads) };

    let mut pending_readers: BTreeMap<TensorId, usize> = BTreeMap::new();
    for node in graph.compute_nodes() {
        for &op in &node.operands {
            *pending_readers.entry(op).or_insert(0) += 1;
        }
    }

    let mut eng = Engine {
        hw,
        costs,
        opts,
        tau,
        nodes: graph
            .nodes
            .iter()
            .map(|_| NodeRt {
                phase: NodePhase::Pending,
                prepared: false,
                chains: VecDeque::new(),
                units_running: 0,
                units_done: 0,
                units_total: 0,
                duration: 0,
                stall: None,
            })
            .collect(),
        depths,
        priority,
        act_buf: Buffer::new(BufferKind::Act, hw.act_buffer_bytes, hw.buffer_port_bytes),
        wt_buf: Buffer::new(BufferKind::Wt, hw.wt_buffer_bytes, hw.buffer_port_bytes),
        mask_buf: Buffer::new(BufferKind::Mask, hw.mask_buffer_bytes, hw.buffer_port_bytes),
        lanes_free: hw.usable(hw.lanes_per_pe) * hw.pe_count,
        lanes_total: hw.usable(hw.lanes_per_pe) * hw.pe_count,
        softmax_free: hw.usable(hw.softmax_per_pe) * hw.pe_count,
        softmax_total: hw.usable(hw.softmax_per_pe) * hw.pe_count,
        layernorm_free: hw.usable(hw.layernorm_per_pe) * hw.pe_count,
        layernorm_total: hw.usable(hw.layernorm_per_pe) * hw.pe_count,
        mem_free: true,
        resident: BTreeMap::new(),
        pending_readers,
        heap: BinaryHeap::new(),
        completions: Vec::new(),
        next_unit: 0,
        ledger: Ledger::new(),
        busy_cycles: BTreeMap::new(),
        stall_cycles: BTreeMap::new(),
        macs_total: 0,
        macs_skipped: 0,
        prune_invocations: 0,
        prune_cycles: 0,
        trace: Trace::default(),
        fj_at_last_sample: 0,
    };

    let mut done = vec![false; graph.nodes.len()];
    let mut done_count = 0usize;
    let mut t: u64 = 0;

    while done_count < graph.nodes.len() {
        // complete everything ending at t, issue, repeat until quiescent
        loop {
            let mut progressed = false;
            while let Some(&std::cmp::Reverse((end, uid))) = eng.heap.peek() {
                if end > t {
                    break;
                }
                eng.heap.pop();
                let c = eng.completions[uid as usize].take().expect("unit completed once");
                progressed = true;
                let node_id = match &c {
                    Completion::Mem { node } => {
                        eng.mem_free = true;
                        *node
                    }
                    Completion::Chain { node } => {
                        eng.release_module(ModuleKind::MacLane);
                        *node
                    }
                    Completion::Row { node, kind } => {
                        let k = *kind;
                        eng.release_module(k);
                        *node
                    }
                };
                let rt = &mut eng.nodes[node_id];
                rt.units_running -= 1;
                rt.units_done += 1;
                if rt.units_done == rt.units_total && rt.prepared {
                    rt.phase = NodePhase::Done;
                    done[node_id] = true;
                    done_count += 1;
                    let node = &graph.nodes[node_id];
                    if opts.trace_enabled {
                        eng.trace.events.push(TraceEvent {
                            cycle: t,
                            op: node.label.clone(),
                            event: "complete".into(),
                        });
                    }
                    for &op in &node.operands {
                        if let Some(n) = eng.pending_readers.get_mut(&op) {
                            *n -= 1;
                        }
                    }
                    eng.evict_dead(&[graph.output]);
                }
            }

            let issued = issue_phase(&mut eng, &graph, &mut ctx, &done, t)?;
            if !issued && !progressed {
                break;
            }
        }

        if done_count == graph.nodes.len() {
            break;
        }

        let next = match eng.heap.peek() {
            Some(&std::cmp::Reverse((end, _))) => end,
            None => {
                let summary: Vec<String> = graph
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !done[*i])
                    .map(|(i, n)| {
                        let reason = eng.nodes[i]
                            .stall
                            .map(|r| r.to_string())
                            .unwrap_or_else(|| "waiting-on-deps".into());
                        format!("{} [{}]", n.label, reason)
                    })
                    .take(12)
                    .collect();
                return Err(SimError::Deadlock { cycle: t, summary: summary.join(", ") });
            }
        };
        if next > opts.max_cycles {
            return Err(SimError::MaxCycles(opts.max_cycles));
        }

        let span = next - t;
        accrue_span(&mut eng, &graph, &done, t, span);
        t = next;
    }

    let total_cycles = t.max(1);
    let mut utilization = BTreeMap::new();
    for (kind, pool) in [
        (ModuleKind::MacLane, eng.lanes_total),
        (ModuleKind::Softmax, eng.softmax_total),
        (ModuleKind::Layernorm, eng.layernorm_total),
    ] {
        let busy = eng.busy_cycles.get(&kind).copied().unwrap_or(0);
        utilization.insert(kind, busy as f64 / (pool as u64 * total_cycles) as f64);
    }

    let seconds = total_cycles as f64 / hw.clock_hz;
    let energy_total_fj = eng.ledger.total;
    let metrics = Metrics {
        total_cycles,
        stall_cycles: eng.stall_cycles,
        energy_fj: eng.ledger.components,
        energy_total_fj,
        utilization,
        throughput_seq_per_s: cfg.batch as f64 / seconds,
        avg_power_w: energy_total_fj as f64 * 1e-15 / seconds,
        macs_total: eng.macs_total,
        macs_skipped: eng.macs_skipped,
        achieved_activation_sparsity: ctx.stats.activation_sparsity(),
        prune_invocations: eng.prune_invocations,
        prune_cycles: eng.prune_cycles,
    };

    let trace = if opts.trace_enabled { Some(eng.trace) } else { None };
    let output = ctx.take_output()?;
    Ok(SimResult { metrics, output, trace })
}

/// One issue pass at cycle `t`; returns whether anything was issued.
fn issue_phase(
    eng: &mut Engine,
    graph: &crate::model::OpGraph,
    ctx: &mut EvalContext,
    done: &[bool],
    t: u64,
) -> Result<bool, SimError> {
    // candidates in priority order
    let mut order: Vec<(u32, Option<usize>, u32)> = graph
        .nodes
        .iter()
        .filter(|n| eng.nodes[n.id].phase != NodePhase::Done)
        .map(|n| (n.id as u32, n.head_index, eng.depths[n.id]))
        .collect();
    crate::sched::sort_candidates(&mut order, &eng.priority);

    let mut issued_any = false;
    for (id, _, _) in order {
        let node_id = id as usize;
        let node = &graph.nodes[node_id];
        eng.nodes[node_id].stall = None;

        let compute_deps_done =
            node.deps.iter().all(|&d| done[d] || graph.nodes[d].kind == OpKind::MemLoad);
        let load_deps_done = node
            .deps
            .iter()
            .all(|&d| done[d] || graph.nodes[d].kind != OpKind::MemLoad);

        match node.kind {
            OpKind::MemLoad => {
                if eng.nodes[node_id].phase != NodePhase::Pending || !(compute_deps_done && load_deps_done) {
                    continue;
                }
                if !eng.mem_free {
                    eng.nodes[node_id].stall = Some(StallReason::MemBufferBusy);
                    continue;
                }
                // loaded bytes: compressed weights into the weight buffer, or
                // the input activations into the activation buffer
                let mut total_v = 0u64;
                let mut total_m = 0u64;
                let mut parts: Vec<(TensorId, BufferKind, u64, u64)> = Vec::new();
                if node.output == graph.input {
                    let (v, m) = compressed_size(ctx.input_tensor());
                    parts.push((graph.input, BufferKind::Act, v, m));
                    total_v += v;
                    total_m += m;
                } else {
                    for &tid in &node.loads {
                        let (v, m) = compressed_size(ctx.weight_tensor(tid));
                        parts.push((tid, BufferKind::Wt, v, m));
                        total_v += v;
                        total_m += m;
                    }
                }
                let fits = parts.iter().all(|&(_, buf, v, _)| {
                    v <= match buf {
                        BufferKind::Act => eng.act_buf.free_bytes(),
                        BufferKind::Wt => eng.wt_buf.free_bytes(),
                        BufferKind::Mask => unreachable!(),
                    }
                }) && total_m <= eng.mask_buf.free_bytes();
                if !fits {
                    eng.nodes[node_id].stall = Some(StallReason::MemBufferFull);
                    continue;
                }
                for (tid, buf, v, m) in parts {
                    let ok = eng.reserve(tid, buf, v, m);
                    debug_assert!(ok);
                }
                ctx.eval(node)?;
                let bytes = total_v + total_m;
                let dur = main_mem_cycles(bytes, eng.hw)
                    + bytes.div_ceil(eng.hw.buffer_port_bytes);
                let fj = eng.costs.mem_fj(bytes);
                eng.ledger.charge("mem", fj);
                eng.mem_free = false;
                let rt = &mut eng.nodes[node_id];
                rt.phase = NodePhase::Running;
                rt.prepared = true;
                rt.units_total = 1;
                rt.units_running = 1;
                eng.schedule(t + dur, Completion::Mem { node: node_id });
                if eng.opts.trace_enabled {
                    eng.trace.events.push(TraceEvent {
                        cycle: t,
                        op: node.label.clone(),
                        event: "issue".into(),
                    });
                }
                issued_any = true;
            }
            OpKind::Matmul | OpKind::Softmax | OpKind::LayerNorm | OpKind::AddResidual => {
                if !compute_deps_done {
                    continue; // upstream work outstanding, not a stall
                }
                if !load_deps_done {
                    eng.nodes[node_id].stall = Some(StallReason::ComputeOperandMissing);
                    continue;
                }
                if !eng.nodes[node_id].prepared {
                    if !prepare_compute(eng, graph, ctx, node_id, t)? {
                        continue; // stall recorded inside
                    }
                    issued_any = true;
                }
                // assign outstanding units to free modules
                let kind = match node.kind {
                    OpKind::Matmul => ModuleKind::MacLane,
                    OpKind::Softmax => ModuleKind::Softmax,
                    _ => ModuleKind::Layernorm,
                };
                if node.kind == OpKind::Matmul {
                    let mut blocked = false;
                    while !eng.nodes[node_id].chains.is_empty() {
                        if eng.pool_free(ModuleKind::MacLane) == 0 {
                            blocked = true;
                            break;
                        }
                        let chain = eng.nodes[node_id].chains.pop_front().unwrap();
                        let dur = chain.duration();
                        eng.take_module(ModuleKind::MacLane);
                        eng.nodes[node_id].units_running += 1;
                        eng.schedule(t + dur, Completion::Chain { node: node_id });
                        issued_any = true;
                    }
                    if blocked {
                        eng.nodes[node_id].stall = Some(StallReason::ComputeNoModule);
                    }
                } else if eng.nodes[node_id].units_running == 0
                    && eng.nodes[node_id].units_done == 0
                {
                    if eng.pool_free(kind) == 0 {
                        eng.nodes[node_id].stall = Some(StallReason::ComputeNoModule);
                        continue;
                    }
                    eng.take_module(kind);
                    let dur = eng.nodes[node_id].duration;
                    eng.nodes[node_id].units_running = 1;
                    eng.schedule(t + dur, Completion::Row { node: node_id, kind });
                    issued_any = true;
                }
                if eng.nodes[node_id].phase == NodePhase::Pending
                    && eng.nodes[node_id].units_running > 0
                {
                    eng.nodes[node_id].phase = NodePhase::Running;
                    if eng.opts.trace_enabled {
                        eng.trace.events.push(TraceEvent {
                            cycle: t,
                            op: node.label.clone(),
                            event: "issue".into(),
                        });
                    }
                }
            }
        }
    }
    Ok(issued_any)
}

/// Evaluate a compute node functionally, reserve its output, charge operand
/// reads, and build its execution units. Returns false on a buffer-full
/// stall.
fn prepare_compute(
    eng: &mut Engine,
    graph: &crate::model::OpGraph,
    ctx: &mut EvalContext,
    node_id: usize,
    t: u64,
) -> Result<bool, SimError> {
    let node = &graph.nodes[node_id];
    let out_info = graph.tensor(node.output);
    // conservative reservation: dense output size
    let out_elems = out_info.elements() as u64;
    let out_v = value_bytes(out_elems, eng.hw.fmt.bits());
    let out_m = mask_bytes(out_elems);
    if out_v > eng.act_buf.free_bytes() || out_m > eng.mask_buf.free_bytes() {
        eng.nodes[node_id].stall = Some(StallReason::MemBufferFull);
        return Ok(false);
    }

    let artifacts = ctx.eval(node)?;
    let ok = eng.reserve(node.output, BufferKind::Act, out_v, out_m);
    debug_assert!(ok);

    match artifacts {
        EvalArtifacts::Matmul { lhs, rhs } => {
            let (b, x, y) = lhs.shape;
            let z = if node.transpose_rhs { rhs.shape.1 } else { rhs.shape.2 };
            let dims = (b, x, y, z);
            let spec = eng.opts.tile_spec;
            let (lv, lm) = compressed_size(&lhs);
            let (rv, rm) = compressed_size(&rhs);
            eng.charge_read(lv + rv, lm + rm);
            if eng.tau.is_some() {
                let fj = eng.costs.prune_fj((lhs.len() + rhs.len()) as u64);
                eng.ledger.charge("prune", fj);
            }

            let slabs = nnz_slabs(&lhs, &rhs, node.transpose_rhs, spec, z);
            let ops = tile_matmul(dims, spec, eng.opts.dataflow);
            let m = eng.hw.multipliers_per_lane;
            let mut chain_order: Vec<(usize, usize, usize)> = Vec::new();
            let mut chain_map: BTreeMap<(usize, usize, usize), Chain> = BTreeMap::new();
            let mut mac_fj_total = 0u64;
            for op in &ops {
                let (bt, ti, tj, tk) = op.indices;
                let key = (bt, ti, tj);
                let k_lo = tk * spec.ty;
                let k_hi = (k_lo + spec.ty).min(y);
                let n_eff = slabs.n_eff(bt, spec.tb, b, ti, tj, k_lo, k_hi);
                let tile_macs = op.mac_count();
                eng.macs_total += tile_macs;
                eng.macs_skipped += tile_macs - n_eff;
                mac_fj_total += eng.costs.mac_fj(n_eff);
                let prune = eng.tau.is_some();
                if prune {
                    eng.prune_invocations += 1;
                    eng.prune_cycles += 1; // every pruning invocation is one cycle
                    if eng.opts.trace_enabled {
                        eng.trace.events.push(TraceEvent {
                            cycle: t,
                            op: node.label.clone(),
                            event: "prune".into(),
                        });
                    }
                }
                let step = ChainStep { prune, mac_cycles: mac_lane_cycles(n_eff, m) };
                if let Some(c) = chain_map.get_mut(&key) {
                    c.steps.push(step);
                } else {
                    chain_order.push(key);
                    chain_map.insert(key, Chain { steps: vec![step] });
                }
            }
            eng.ledger.charge("mac", mac_fj_total);
            let rt = &mut eng.nodes[node_id];
            for key in chain_order {
                let chain = chain_map.remove(&key).unwrap();
                if chain.duration() > 0 {
                    rt.chains.push_back(chain);
                }
            }
            rt.units_total = rt.chains.len();
            rt.prepared = true;
            if rt.units_total == 0 {
                // fully skipped op: completes instantly
                rt.phase = NodePhase::Running;
                rt.units_total = 1;
                rt.units_running = 1;
                eng.take_module(ModuleKind::MacLane);
                eng.schedule(t, Completion::Chain { node: node_id });
            }
        }
        EvalArtifacts::Rows { rows, cols } => {
            // operand reads
            let mut v = 0u64;
            let mut mb = 0u64;
            for &op in &node.operands {
                let tensor = ctx.stored_or_weight(op);
                let (tv, tm) = compressed_size(tensor);
                v += tv;
                mb += tm;
            }
            eng.charge_read(v, mb);
            let m = eng.hw.multipliers_per_lane;
            let (dur, fj, comp) = match node.kind {
                OpKind::Softmax => (
                    softmax_cycles(rows, cols, m),
                    eng.costs.softmax_fj((rows * cols) as u64),
                    "softmax",
                ),
                _ => (
                    layernorm_cycles(rows, cols, m),
                    eng.costs.layernorm_fj((rows * cols) as u64),
                    "layernorm",
                ),
            };
            eng.ledger.charge(comp, fj);
            let mut dur = dur;
            if eng.tau.is_some() {
                let elems: u64 = (rows * cols) as u64;
                eng.ledger.charge("prune", eng.costs.prune_fj(elems));
                eng.prune_invocations += 1;
                eng.prune_cycles += 1;
                dur += 1;
                if eng.opts.trace_enabled {
                    eng.trace.events.push(TraceEvent {
                        cycle: t,
                        op: node.label.clone(),
                        event: "prune".into(),
                    });
                }
            }
            let rt = &mut eng.nodes[node_id];
            rt.duration = dur;
            rt.units_total = 1;
            rt.prepared = true;
        }
        EvalArtifacts::Load => unreachable!("loads handled by the caller"),
    }
    Ok(true)
}

fn accrue_span(
    eng: &mut Engine,
    graph: &crate::model::OpGraph,
    done: &[bool],
    t: u64,
    span: u64,
) {
    // module busy time and leakage; idle modules are power-gated
    let pools = [
        (ModuleKind::MacLane, eng.lanes_total, eng.lanes_total - eng.lanes_free),
        (ModuleKind::Softmax, eng.softmax_total, eng.softmax_total - eng.softmax_free),
        (ModuleKind::Layernorm, eng.layernorm_total, eng.layernorm_total - eng.layernorm_free),
    ];
    let mut leak_fj = 0u64;
    for (kind, total, busy) in pools {
        *eng.busy_cycles.entry(kind).or_insert(0) += busy as u64 * span;
        let active = eng.costs.leak_fj(kind, false);
        let gated = eng.costs.leak_fj(kind, true);
        leak_fj += span * (busy as u64 * active + (total - busy) as u64 * gated);
    }
    eng.ledger.charge("leakage", leak_fj);

    // stall accrual: every classified op waits for the whole span
    for (i, _) in graph.nodes.iter().enumerate() {
        if done[i] {
            continue;
        }
        if let Some(reason) = eng.nodes[i].stall {
            *eng.stall_cycles.entry(reason).or_insert(0) += span;
        }
    }

    if eng.opts.trace_enabled {
        let charged = eng.ledger.total - eng.fj_at_last_sample;
        eng.fj_at_last_sample = eng.ledger.total;
        let power =
            charged as f64 * 1e-15 / (span as f64 / eng.hw.clock_hz);
        eng.trace.samples.push(UtilSample {
            cycle: t,
            mac_util: (eng.lanes_total - eng.lanes_free) as f64 / eng.lanes_total as f64,
            softmax_util: (eng.softmax_total - eng.softmax_free) as f64
                / eng.softmax_total as f64,
            layernorm_util: (eng.layernorm_total - eng.layernorm_free) as f64
                / eng.layernorm_total as f64,
            act_buf_frac: eng.act_buf.occupancy as f64 / eng.act_buf.capacity as f64,
            wt_buf_frac: eng.wt_buf.occupancy as f64 / eng.wt_buf.capacity as f64,
            mask_buf_frac: eng.mask_buf.occupancy as f64 / eng.mask_buf.capacity as f64,
            power_w: power,
        });
    }
}

/// Two runs differing only in the stagger flag.
pub struct SchedulePair {
    pub staggered: SimResult,
    pub equal: SimResult,
}

pub fn compare_schedules(
    cfg: &ModelConfig,
    hw: &HardwareConfig,
    costs: &EnergyModel,
    opts: &SimOptions,
) -> Result<SchedulePair, SimError> {
    let mut a = opts.clone();
    a.stagger = true;
    let mut b = opts.clone();
    b.stagger = false;
    Ok(SchedulePair { staggered: run(cfg, hw, costs, &a)?, equal: run(cfg, hw, costs, &b)? })
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignPoint {
    pub pe_count: usize,
    pub buffer_bytes: u64,
    pub compute_stalls: u64,
    pub memory_stalls: u64,
    pub total_cycles: u64,
}

/// Sweep PE count and total buffer size; buffers split 4:8:1 across the
/// activation, weight, and mask buffers.
pub fn design_sweep(
    cfg: &ModelConfig,
    base: &HardwareConfig,
    costs: &EnergyModel,
    opts: &SimOptions,
    pe_list: &[usize],
    buffer_totals: &[u64],
) -> Result<Vec<DesignPoint>, SimError> {
    if pe_list.is_empty() || buffer_totals.is_empty() {
        return Err(SimError::Config("design sweep grid must be non-empty".into()));
    }
    let mut out = Vec::new();
    for &pe in pe_list {
        for &total in buffer_totals {
            let mut hw = base.clone();
            hw.pe_count = pe;
            hw.act_buffer_bytes = total * 4 / 13;
            hw.wt_buffer_bytes = total * 8 / 13;
            hw.mask_buffer_bytes = total - hw.act_buffer_bytes - hw.wt_buffer_bytes;
            let res = run(cfg, &hw, costs, opts)?;
            out.push(DesignPoint {
                pe_count: pe,
                buffer_bytes: total,
                compute_stalls: res.metrics.compute_stall_cycles(),
                memory_stalls: res.metrics.memory_stall_cycles(),
                total_cycles: res.metrics.total_cycles,
            });
        }
    }
    Ok(out)
}
