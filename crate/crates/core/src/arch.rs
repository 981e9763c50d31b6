//! Hardware resource models: timing and energy of MAC lanes, softmax and
//! layer-norm modules, pruning modules, buffers, and main memory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::FixedFormat;
use crate::tiling::TileSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("invalid hardware config: {0}")]
    BadConfig(String),
    #[error("multipliers per lane must be a power of two, got {0}")]
    BadLaneWidth(usize),
    #[error("tile {got:?} exceeds comparator array {max:?}")]
    OversizedTile { got: (usize, usize, usize), max: (usize, usize, usize) },
    #[error("unknown hardware preset '{0}'")]
    UnknownPreset(String),
    #[error("bad preset json: {0}")]
    BadJson(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemKind {
    Lpddr3,
    Mono3dRram,
}

impl MemKind {
    /// Fixed access latency in cycles before streaming begins.
    pub fn default_latency_cycles(self) -> u64 {
        match self {
            MemKind::Lpddr3 => 50,
            MemKind::Mono3dRram => 10,
        }
    }
}

pub const DEFAULT_BUFFER_PORT_BYTES: u64 = 64;

fn default_port_bytes() -> u64 {
    DEFAULT_BUFFER_PORT_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub name: String,
    pub pe_count: usize,
    pub lanes_per_pe: usize,
    pub softmax_per_pe: usize,
    pub layernorm_per_pe: usize,
    pub multipliers_per_lane: usize,
    pub clock_hz: f64,
    pub fmt: FixedFormat,
    pub act_buffer_bytes: u64,
    pub wt_buffer_bytes: u64,
    pub mask_buffer_bytes: u64,
    #[serde(default = "default_port_bytes")]
    pub buffer_port_bytes: u64,
    pub mem_bandwidth_bytes_per_s: f64,
    pub mem_kind: MemKind,
    #[serde(default)]
    pub mem_latency_cycles: Option<u64>,
    pub batch: usize,
    #[serde(default)]
    pub lp_mode: bool,
    /// Extra peak-throughput ops per nonlinear (softmax/layer-norm) module
    /// per cycle, counted alongside MAC throughput.
    #[serde(default)]
    pub nonlinear_ops_per_module_per_cycle: f64,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<(), ArchError> {
        let counts = [
            ("pe_count", self.pe_count),
            ("lanes_per_pe", self.lanes_per_pe),
            ("softmax_per_pe", self.softmax_per_pe),
            ("layernorm_per_pe", self.layernorm_per_pe),
            ("multipliers_per_lane", self.multipliers_per_lane),
            ("batch", self.batch),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(ArchError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.multipliers_per_lane.is_power_of_two() {
            return Err(ArchError::BadLaneWidth(self.multipliers_per_lane));
        }
        if self.act_buffer_bytes == 0 || self.wt_buffer_bytes == 0 || self.mask_buffer_bytes == 0 {
            return Err(ArchError::BadConfig("buffer sizes must be > 0".into()));
        }
        if self.buffer_port_bytes == 0 {
            return Err(ArchError::BadConfig("buffer_port_bytes must be > 0".into()));
        }
        if !(self.clock_hz > 0.0) || !(self.mem_bandwidth_bytes_per_s > 0.0) {
            return Err(ArchError::BadConfig("clock and bandwidth must be > 0".into()));
        }
        Ok(())
    }

    pub fn mem_latency(&self) -> u64 {
        self.mem_latency_cycles.unwrap_or_else(|| self.mem_kind.default_latency_cycles())
    }

    /// lp_mode halves usable compute modules, not configured counts.
    pub fn usable(&self, configured: usize) -> usize {
        if self.lp_mode {
            (configured / 2).max(1)
        } else {
            configured
        }
    }

    pub fn total_lanes(&self) -> usize {
        self.pe_count * self.lanes_per_pe
    }

    pub fn preset(name: &str) -> Result<Self, ArchError> {
        let json = match name {
            "acceltran-edge" => ACCELTRAN_EDGE_JSON,
            "acceltran-server" => ACCELTRAN_SERVER_JSON,
            "acceltran-edge-lp" => ACCELTRAN_EDGE_LP_JSON,
            _ => return Err(ArchError::UnknownPreset(name.into())),
        };
        let cfg: HardwareConfig =
            serde_json::from_str(json).map_err(|e| ArchError::BadJson(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const ACCELTRAN_EDGE_JSON: &str = include_str!("../presets/acceltran-edge.json");
pub const ACCELTRAN_SERVER_JSON: &str = include_str!("../presets/acceltran-server.json");
pub const ACCELTRAN_EDGE_LP_JSON: &str = include_str!("../presets/acceltran-edge-lp.json");
pub const ENERGY_14NM_DEFAULT_JSON: &str = include_str!("../presets/energy-14nm-default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    MacLane,
    Softmax,
    Layernorm,
    Pruner,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] =
        [ModuleKind::MacLane, ModuleKind::Softmax, ModuleKind::Layernorm, ModuleKind::Pruner];
}

/// Per-event energy costs. Configured in picojoules; accounting runs on
/// integer femtojoules so sums are exact and order-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub mac_pj: f64,
    pub buffer_rd_pj_per_byte: f64,
    pub buffer_wr_pj_per_byte: f64,
    pub mem_pj_per_byte: f64,
    pub softmax_elem_pj: f64,
    pub layernorm_elem_pj: f64,
    pub dynatran_cmp_pj: f64,
    pub leakage_pj_per_cycle: BTreeMap<ModuleKind, f64>,
    pub power_gated_leak_fraction: f64,
}

fn to_fj(pj: f64) -> u64 {
    (pj * 1000.0).round().max(0.0) as u64
}

impl EnergyModel {
    pub fn default_14nm() -> Self {
        serde_json::from_str(ENERGY_14NM_DEFAULT_JSON).expect("shipped energy table parses")
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let vals = [
            self.mac_pj,
            self.buffer_rd_pj_per_byte,
            self.buffer_wr_pj_per_byte,
            self.mem_pj_per_byte,
            self.softmax_elem_pj,
            self.layernorm_elem_pj,
            self.dynatran_cmp_pj,
        ];
        if vals.iter().chain(self.leakage_pj_per_cycle.values()).any(|v| *v < 0.0) {
            return Err(ArchError::BadConfig("energy costs must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.power_gated_leak_fraction) {
            return Err(ArchError::BadConfig("power_gated_leak_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn mac_fj(&self, macs: u64) -> u64 {
        macs * to_fj(self.mac_pj)
    }

    pub fn buffer_rd_fj(&self, bytes: u64) -> u64 {
        bytes * to_fj(self.buffer_rd_pj_per_byte)
    }

    pub fn buffer_wr_fj(&self, bytes: u64) -> u64 {
        bytes * to_fj(self.buffer_wr_pj_per_byte)
    }

    pub fn mem_fj(&self, bytes: u64) -> u64 {
        bytes * to_fj(self.mem_pj_per_byte)
    }

    pub fn softmax_fj(&self, elems: u64) -> u64 {
        elems * to_fj(self.softmax_elem_pj)
    }

    pub fn layernorm_fj(&self, elems: u64) -> u64 {
        elems * to_fj(self.layernorm_elem_pj)
    }

    pub fn prune_fj(&self, elems: u64) -> u64 {
        elems * to_fj(self.dynatran_cmp_pj)
    }

    /// Leakage per cycle for one module, full when active, scaled by the
    /// gated fraction when idle.
    pub fn leak_fj(&self, kind: ModuleKind, gated: bool) -> u64 {
        let pj = self.leakage_pj_per_cycle.get(&kind).copied().unwrap_or(0.0);
        let fj = to_fj(pj);
        if gated {
            ((fj as f64) * self.power_gated_leak_fraction).round() as u64
        } else {
            fj
        }
    }
}

/// cycles = ceil(n_eff / M) + log2(M) + 1; a fully pruned invocation is
/// skipped outright.
pub fn mac_lane_cycles(n_eff: u64, m: usize) -> u64 {
    assert!(m.is_power_of_two(), "multipliers per lane must be a power of two");
    if n_eff == 0 {
        return 0;
    }
    n_eff.div_ceil(m as u64) + m.trailing_zeros() as u64 + 1
}

/// Pruning a tile takes exactly one cycle in the comparator array.
pub fn dynatran_module_cycles(
    tile: (usize, usize, usize),
    spec: TileSpec,
) -> Result<u64, ArchError> {
    let max = (spec.tb, spec.tx, spec.ty);
    if tile.0 > max.0 || tile.1 > max.1 || tile.2 > max.2 {
        return Err(ArchError::OversizedTile { got: tile, max });
    }
    Ok(1)
}

const SOFTMAX_PASSES: u64 = 3;
const LAYERNORM_PASSES: u64 = 2;
const ROW_PIPELINE_CYCLES: u64 = 4;

pub fn softmax_cycles(rows: usize, cols: usize, m: usize) -> u64 {
    assert!(rows >= 1 && cols >= 1);
    rows as u64 * ((cols as u64).div_ceil(m as u64) * SOFTMAX_PASSES + ROW_PIPELINE_CYCLES)
}

pub fn layernorm_cycles(rows: usize, cols: usize, m: usize) -> u64 {
    assert!(rows >= 1 && cols >= 1);
    rows as u64 * ((cols as u64).div_ceil(m as u64) * LAYERNORM_PASSES + ROW_PIPELINE_CYCLES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferKind {
    Act,
    Wt,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferOutcome {
    Done { busy_cycles: u64, energy_fj: u64 },
    Full { free_bytes: u64 },
}

/// On-chip buffer with a single read and a single write port.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub kind: BufferKind,
    pub capacity: u64,
    pub port_bytes: u64,
    pub occupancy: u64,
}

impl Buffer {
    pub fn new(kind: BufferKind, capacity: u64, port_bytes: u64) -> Self {
        assert!(capacity > 0 && port_bytes > 0);
        Self { kind, capacity, port_bytes, occupancy: 0 }
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.occupancy
    }

    fn port_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.port_bytes)
    }

    pub fn read(&self, bytes: u64, costs: &EnergyModel) -> BufferOutcome {
        BufferOutcome::Done { busy_cycles: self.port_cycles(bytes), energy_fj: costs.buffer_rd_fj(bytes) }
    }

    /// Fails soft on overflow: the scheduler turns this into a stall.
    pub fn write(&mut self, bytes: u64, costs: &EnergyModel) -> BufferOutcome {
        if bytes > self.free_bytes() {
            return BufferOutcome::Full { free_bytes: self.free_bytes() };
        }
        self.occupancy += bytes;
        BufferOutcome::Done { busy_cycles: self.port_cycles(bytes), energy_fj: costs.buffer_wr_fj(bytes) }
    }

    /// Eviction frees space immediately at zero cost.
    pub fn evict(&mut self, bytes: u64) -> u64 {
        let freed = bytes.min(self.occupancy);
        self.occupancy -= freed;
        freed
    }
}

/// Streaming cycles plus fixed access latency.
pub fn main_mem_cycles(bytes: u64, cfg: &HardwareConfig) -> u64 {
    let latency = cfg.mem_latency();
    if bytes == 0 {
        return latency;
    }
    let bytes_per_cycle = cfg.mem_bandwidth_bytes_per_s / cfg.clock_hz;
    (bytes as f64 / bytes_per_cycle).ceil() as u64 + latency
}

/// Theoretical peak throughput in TOP/s: one multiply and one add per
/// multiplier per cycle, plus the configured nonlinear-module term.
pub fn peak_tops(cfg: &HardwareConfig) -> f64 {
    let lanes = cfg.usable(cfg.lanes_per_pe) * cfg.pe_count;
    let mac_ops = lanes as f64 * cfg.multipliers_per_lane as f64 * 2.0 * cfg.clock_hz;
    let nl_modules = (cfg.usable(cfg.softmax_per_pe) + cfg.usable(cfg.layernorm_per_pe))
        * cfg.pe_count;
    let nl_ops = nl_modules as f64 * cfg.nonlinear_ops_per_module_per_cycle * cfg.clock_hz;
    (mac_ops + nl_ops) / 1e12
}
