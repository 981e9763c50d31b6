//! Tiled matrix-multiply decomposition, loop-order (dataflow) enumeration,
//! and data-reuse / dynamic-energy accounting per dataflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::EnergyModel;

#[derive(Debug, Error, PartialEq)]
pub enum TilingError {
    #[error("unknown dataflow '{0}': expected a permutation of b, i, j, k")]
    BadDataflow(String),
}

/// Tile edge lengths along batch, rows, and columns. The reduction dimension
/// uses the column edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tb: usize,
    pub tx: usize,
    pub ty: usize,
}

impl TileSpec {
    pub const fn new(tb: usize, tx: usize, ty: usize) -> Self {
        Self { tb, tx, ty }
    }
}

/// Shipped default: 1 x 16 x 16 tiles.
pub const DEFAULT_TILE_SPEC: TileSpec = TileSpec { tb: 1, tx: 16, ty: 16 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopAxis {
    B,
    I,
    J,
    K,
}

impl LoopAxis {
    fn letter(self) -> char {
        match self {
            LoopAxis::B => 'b',
            LoopAxis::I => 'i',
            LoopAxis::J => 'j',
            LoopAxis::K => 'k',
        }
    }
}

/// A loop-unrolling order: the four tile loops listed outermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dataflow {
    pub order: [LoopAxis; 4],
}

impl Dataflow {
    pub const DEFAULT: Dataflow =
        Dataflow { order: [LoopAxis::B, LoopAxis::I, LoopAxis::J, LoopAxis::K] };

    pub fn parse(s: &str) -> Result<Self, TilingError> {
        let cleaned: String = s
            .chars()
            .filter(|c| !matches!(c, '[' | ']' | ',' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        let mut order = [LoopAxis::B; 4];
        if cleaned.len() != 4 {
            return Err(TilingError::BadDataflow(s.into()));
        }
        let mut seen = [false; 4];
        for (i, c) in cleaned.chars().enumerate() {
            let axis = match c {
                'b' => LoopAxis::B,
                'i' => LoopAxis::I,
                'j' => LoopAxis::J,
                'k' => LoopAxis::K,
                _ => return Err(TilingError::BadDataflow(s.into())),
            };
            let slot = axis as usize;
            if seen[slot] {
                return Err(TilingError::BadDataflow(s.into()));
            }
            seen[slot] = true;
            order[i] = axis;
        }
        Ok(Dataflow { order })
    }
}

impl std::fmt::Display for Dataflow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in self.order {
            write!(f, "{}", a.letter())?;
        }
        Ok(())
    }
}

/// All 24 loop orders, lexicographic in (b, i, j, k), so `bijk` is first.
pub fn enumerate_dataflows() -> Vec<Dataflow> {
    let axes = [LoopAxis::B, LoopAxis::I, LoopAxis::J, LoopAxis::K];
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            if b == a {
                continue;
            }
            for c in 0..4 {
                if c == a || c == b {
                    continue;
                }
                let d = 6 - a - b - c;
                out.push(Dataflow { order: [axes[a], axes[b], axes[c], axes[d]] });
            }
        }
    }
    out
}

/// One tile-level multiply-accumulate of a larger matmul.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TiledOp {
    /// Tile coordinates along (batch, rows, cols, reduction).
    pub indices: (usize, usize, usize, usize),
    /// Actual (unpadded) tile extents; ragged at the far edges.
    pub extents: (usize, usize, usize, usize),
    /// True when this op accumulates onto an earlier partial sum.
    pub is_partial_sum: bool,
}

impl TiledOp {
    /// Identity of the weight (lhs) tile this op consumes.
    pub fn weight_tile(&self) -> (usize, usize, usize) {
        (self.indices.0, self.indices.1, self.indices.3)
    }

    /// Identity of the activation (rhs) tile this op consumes.
    pub fn activation_tile(&self) -> (usize, usize, usize) {
        (self.indices.0, self.indices.3, self.indices.2)
    }

    /// Multiplication count for the unpadded tile.
    pub fn mac_count(&self) -> u64 {
        let (b, x, z, y) = self.extents;
        (b * x * z * y) as u64
    }
}

pub fn tile_counts(dims: (usize, usize, usize, usize), spec: TileSpec) -> (usize, usize, usize, usize) {
    let (b, x, y, z) = dims;
    (b.div_ceil(spec.tb), x.div_ceil(spec.tx), z.div_ceil(spec.ty), y.div_ceil(spec.ty))
}

/// Decompose a (B, X, Y, Z) matmul (lhs B x X x Y, rhs B x Y x Z) into tiles
/// ordered by the nested loops of the dataflow.
pub fn tile_matmul(dims: (usize, usize, usize, usize), spec: TileSpec, df: Dataflow) -> Vec<TiledOp> {
    let (dim_b, dim_x, dim_y, dim_z) = dims;
    let (nb, ni, nj, nk) = tile_counts(dims, spec);
    let bound = |axis: LoopAxis| match axis {
        LoopAxis::B => nb,
        LoopAxis::I => ni,
        LoopAxis::J => nj,
        LoopAxis::K => nk,
    };
    let mut ops = Vec::with_capacity(nb * ni * nj * nk);
    let mut idx = [0usize; 4];
    let edge = |tile: usize, t_edge: usize, dim: usize| -> usize {
        (dim - tile * t_edge).min(t_edge)
    };
    loop {
        let mut coord = std::collections::HashMap::new();
        for (pos, axis) in df.order.iter().enumerate() {
            coord.insert(*axis, idx[pos]);
        }
        let (tb, ti, tj, tk) = (
            coord[&LoopAxis::B],
            coord[&LoopAxis::I],
            coord[&LoopAxis::J],
            coord[&LoopAxis::K],
        );
        ops.push(TiledOp {
            indices: (tb, ti, tj, tk),
            extents: (
                edge(tb, spec.tb, dim_b),
                edge(ti, spec.tx, dim_x),
                edge(tj, spec.ty, dim_z),
                edge(tk, spec.ty, dim_y),
            ),
            is_partial_sum: tk > 0,
        });
        // odometer over the nested loops, innermost last
        let mut pos = 3;
        loop {
            idx[pos] += 1;
            if idx[pos] < bound(df.order[pos]) {
                break;
            }
            idx[pos] = 0;
            if pos == 0 {
                return ops;
            }
            pos -= 1;
        }
    }
}

/// How lane registers retain operand tiles between assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LanePolicy {
    /// Each lane keeps its last weight tile in a register; activations
    /// stream through the pre-compute filter and are not retained. This is
    /// the policy the shipped hardware models use.
    #[default]
    WeightStationary,
    /// Each lane keeps one register per operand kind; reuse of either
    /// counts.
    WeightAndActivation,
}

/// Count assignments whose lane already holds a needed operand tile from its
/// immediately preceding assignment. Tiled ops are issued round-robin to
/// lanes in dataflow order.
pub fn count_reuse(
    df: Dataflow,
    dims: (usize, usize, usize, usize),
    spec: TileSpec,
    lanes: usize,
    policy: LanePolicy,
) -> u64 {
    assert!(lanes >= 1);
    let ops = tile_matmul(dims, spec, df);
    let mut wt_reg: Vec<Option<(usize, usize, usize)>> = vec![None; lanes];
    let mut act_reg: Vec<Option<(usize, usize, usize)>> = vec![None; lanes];
    let mut reuse = 0u64;
    for (t, op) in ops.iter().enumerate() {
        let lane = t % lanes;
        let w = op.weight_tile();
        let a = op.activation_tile();
        if wt_reg[lane] == Some(w) {
            reuse += 1;
        }
        if policy == LanePolicy::WeightAndActivation && act_reg[lane] == Some(a) {
            reuse += 1;
        }
        wt_reg[lane] = Some(w);
        act_reg[lane] = Some(a);
    }
    reuse
}

/// Bytes of one nominal operand tile at the given element width.
fn tile_bytes(spec: TileSpec, fmt: crate::numerics::FixedFormat) -> u64 {
    ((spec.tb * spec.tx * spec.ty) as u64 * fmt.bits() as u64).div_ceil(8)
}

/// Dynamic energy of executing the tiled matmul under a dataflow, in
/// integer femtojoules: every op fetches two operand tiles, each reuse
/// instance saves one fetch, and the MAC work itself is dataflow-invariant.
pub fn dataflow_energy(
    df: Dataflow,
    dims: (usize, usize, usize, usize),
    spec: TileSpec,
    lanes: usize,
    fmt: crate::numerics::FixedFormat,
    costs: &EnergyModel,
    policy: LanePolicy,
) -> u64 {
    let ops = tile_matmul(dims, spec, df);
    let reuse = count_reuse(df, dims, spec, lanes, policy);
    let fetches = 2 * ops.len() as u64;
    let macs: u64 = ops.iter().map(|op| op.mac_count()).sum();
    let fetch_fj = costs.buffer_rd_fj(tile_bytes(spec, fmt));
    (fetches - reuse) * fetch_fj + costs.mac_fj(macs)
}
