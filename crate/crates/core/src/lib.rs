//! Cycle-accurate, sparsity-aware simulator core for a transformer
//! accelerator: fixed-point numerics, encoder op graphs, dynamic pruning,
//! tiled-matmul dataflows, hardware resource models, scheduling, and the
//! simulation engine.

pub mod arch;
pub mod forward;
pub mod model;
pub mod numerics;
pub mod sched;
pub mod sim;
pub mod sparsity;
pub mod tiling;

pub use arch::{ArchError, Buffer, BufferKind, EnergyModel, HardwareConfig, MemKind, ModuleKind};
pub use model::{ModelConfig, OpGraph, OpKind, OpNode, TensorId, TensorInfo, TensorKind, Weights};
pub use numerics::{FixedFormat, FixedTensor, NumericsError, DEFAULT_FORMAT};
pub use sched::{Priority, StallReason};
pub use sim::{Metrics, SimError, SimOptions, SimResult, Trace};
pub use sparsity::{CompressedTile, Mask, PruneThreshold, SparsityProfile};
pub use tiling::{Dataflow, LanePolicy, TileSpec, TiledOp, TilingError, DEFAULT_TILE_SPEC};
