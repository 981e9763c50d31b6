//! Scheduling primitives: operation state, stall classification, staggered
//! head priority, buffer eviction, and power gating. These are pure decision
//! functions; the engine owns the mutable state and replays them each step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallReason {
    ComputeNoModule,
    ComputeOperandMissing,
    MemBufferBusy,
    MemBufferFull,
    MemStoreBeforeCompute,
}

impl std::fmt::Display for StallReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StallReason::ComputeNoModule => "compute-no-module",
            StallReason::ComputeOperandMissing => "compute-operand-missing",
            StallReason::MemBufferBusy => "mem-buffer-busy",
            StallReason::MemBufferFull => "mem-buffer-full",
            StallReason::MemStoreBeforeCompute => "mem-store-before-compute",
        };
        f.write_str(s)
    }
}

impl StallReason {
    pub fn is_memory(self) -> bool {
        matches!(
            self,
            StallReason::MemBufferBusy
                | StallReason::MemBufferFull
                | StallReason::MemStoreBeforeCompute
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpStatus {
    Waiting,
    Ready,
    Issued,
    Done,
}

#[derive(Debug, Clone)]
pub struct OpState {
    pub status: OpStatus,
    pub stall_reason: Option<StallReason>,
    pub assigned_module: Option<usize>,
    pub start_cycle: Option<u64>,
    pub end_cycle: Option<u64>,
}

impl Default for OpState {
    fn default() -> Self {
        Self {
            status: OpStatus::Waiting,
            stall_reason: None,
            assigned_module: None,
            start_cycle: None,
            end_cycle: None,
        }
    }
}

/// Issue priority. When staggering is enabled, heads are ranked in ascending
/// index order so one head's attention pipeline runs ahead and its softmax
/// overlaps the other heads' matmuls. Ops outside any head share rank 0.
#[derive(Debug, Clone)]
pub struct Priority {
    pub head_rank: Vec<usize>,
    pub stagger_enabled: bool,
}

impl Priority {
    pub fn staggered(heads: usize) -> Self {
        Self { head_rank: (0..heads).collect(), stagger_enabled: true }
    }

    pub fn equal(heads: usize) -> Self {
        Self { head_rank: (0..heads).collect(), stagger_enabled: false }
    }

    /// Sort key: head rank (stagger only), then topological depth, then id.
    pub fn key(&self, head_index: Option<usize>, depth: u32, id: u32) -> (usize, u32, u32) {
        let rank = if self.stagger_enabled {
            head_index.map(|h| self.head_rank[h] + 1).unwrap_or(0)
        } else {
            0
        };
        (rank, depth, id)
    }
}

/// Order candidate ops (id, head, depth) for issue under the priority.
pub fn sort_candidates(candidates: &mut [(u32, Option<usize>, u32)], pri: &Priority) {
    candidates.sort_by_key(|&(id, head, depth)| pri.key(head, depth, id));
}

/// Tiles eligible for eviction: resident, with zero pending readers, and not
/// pinned. Returns (ids, freed bytes).
pub fn evict_dead<T: Ord + Copy>(
    resident: &BTreeMap<T, u64>,
    pending_readers: &BTreeMap<T, usize>,
    pinned: &[T],
) -> (Vec<T>, u64) {
    let mut ids = Vec::new();
    let mut freed = 0;
    for (&id, &bytes) in resident {
        let live = pending_readers.get(&id).copied().unwrap_or(0) > 0;
        if !live && !pinned.contains(&id) {
            ids.push(id);
            freed += bytes;
        }
    }
    (ids, freed)
}

/// A module is power-gated exactly when idle this cycle.
pub fn power_gate(busy: &[bool]) -> Vec<bool> {
    busy.iter().map(|b| !b).collect()
}
