//! Recursive enhancement network built from harmonic dense blocks.

pub mod arch;
pub mod cost;
pub mod memory;
pub mod model;
pub mod rules;

pub use arch::{build_hblock, HBlockGraph, HBlockSpec, LayerKind, LayerNode, NetworkSpec, RowKind, TableRow, Variant, TRUNK_WIDTH};
pub use cost::{count_flops, count_macs, count_params, ConvDesc, CostSummary};
pub use memory::{peak_activation_memory, peak_activation_memory_wired, ActivationLedger, MemoryReport, Wiring};
pub use model::{EnhanceNet, EnhanceOutput};
pub use rules::{bottleneck_channels, channel_width, harmonic_inputs};
