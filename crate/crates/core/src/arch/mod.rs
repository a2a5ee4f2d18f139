//! Dynamic blocks, their fixed and original counterparts, network assembly
//! and MAC counting.

mod flops;
mod network;
mod plan;
mod spec;

pub use flops::{
    block_conv_macs, block_flops, block_table, conv_macs, count_flops, count_flops_at,
    dy_mobile_block, flops_ratio_dy_mobile, fusion_macs, ratio_to_original, BlockFlops, Cost,
    FlopsEntry, FlopsReport,
};
pub use network::{FusionPath, Network, Trace};
pub use plan::{plan_block, BlockPlan, ConvPlan, PredictorPlan, Topology};
pub use spec::{
    builtin, tiny_mobile, BlockKind, BlockSpec, Family, NetworkSpec, StemSpec, Variant,
    DEFAULT_GROUP_SIZE,
};
