//! Multiply-accumulate counts of the inference path.
//!
//! Dynamic layers are charged one convolution with the fused kernel, plus
//! the fusion itself (`C_out * g_t * C_in/groups * k^2`) and the predictor's
//! linear layers. Pooling, activations and batch norm are not counted.

use num_rational::Ratio;

use super::plan::{plan_block, BlockPlan};
use super::spec::{BlockKind, BlockSpec, Family, NetworkSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cost {
    Conv,
    Fusion,
    Predictor,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsEntry {
    pub scope: String,
    pub layer: String,
    pub cost: Cost,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockFlops {
    pub index: usize,
    pub kind: BlockKind,
    pub conv: u64,
    pub fusion: u64,
    pub predictor: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.conv + self.fusion + self.predictor
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub entries: Vec<FlopsEntry>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_of(&self, cost: Cost) -> u64 {
        self.entries.iter().filter(|e| e.cost == cost).map(|e| e.macs).sum()
    }

    /// Fusion plus predictor cost.
    pub fn overhead(&self) -> u64 {
        self.total_of(Cost::Fusion) + self.total_of(Cost::Predictor)
    }

    pub fn scope_total(&self, scope: &str) -> u64 {
        self.entries.iter().filter(|e| e.scope == scope).map(|e| e.macs).sum()
    }
}

pub fn conv_macs(geom: &ConvGeometry, out_hw: (usize, usize)) -> u64 {
    geom.macs(out_hw.0, out_hw.1)
}

pub fn fusion_macs(geom: &ConvGeometry, group_size: usize) -> u64 {
    (geom.out_channels * group_size * geom.in_per_group() * geom.kernel_size * geom.kernel_size) as u64
}

fn plan_entries(plan: &BlockPlan, scope: &str) -> Vec<FlopsEntry> {
    let entry = |layer: String, cost, macs| FlopsEntry {
        scope: scope.to_string(),
        layer,
        cost,
        macs,
    };
    let mut out = Vec::new();
    for c in plan.convs() {
        out.push(entry(c.name.to_string(), Cost::Conv, conv_macs(&c.geom, c.out_hw)));
        if c.dynamic {
            out.push(entry(
                format!("{}.fusion", c.name),
                Cost::Fusion,
                fusion_macs(&c.geom, c.group_size),
            ));
        }
    }
    if let Some(p) = &plan.predictor {
        let macs = match p.hidden {
            Some(h) => p.in_channels * h + h * p.out_features,
            None => p.in_channels * p.out_features,
        };
        out.push(entry("predictor".into(), Cost::Predictor, macs as u64));
    }
    out
}

/// Entries for one block on an `in_hw` input.
pub fn block_flops(spec: &BlockSpec, in_hw: (usize, usize)) -> Result<Vec<FlopsEntry>> {
    Ok(plan_entries(&plan_block(spec, in_hw)?, "block"))
}

/// Conv-only MACs of one block, excluding fusion and predictor.
pub fn block_conv_macs(spec: &BlockSpec, in_hw: (usize, usize)) -> Result<u64> {
    Ok(block_flops(spec, in_hw)?
        .iter()
        .filter(|e| e.cost == Cost::Conv)
        .map(|e| e.macs)
        .sum())
}

pub fn count_flops(net: &NetworkSpec) -> Result<FlopsReport> {
    count_flops_at(net, net.input.1, net.input.2)
}

/// Count at an input resolution other than the spec's own.
pub fn count_flops_at(net: &NetworkSpec, h: usize, w: usize) -> Result<FlopsReport> {
    net.validate()?;
    let mut entries = Vec::new();
    let stem = ConvGeometry::same(
        net.input.0,
        net.stem.out_channels,
        net.stem.kernel_size,
        net.stem.stride,
        1,
    )?;
    let mut hw = stem.output_hw(h, w)?;
    entries.push(FlopsEntry {
        scope: "stem".into(),
        layer: "conv".into(),
        cost: Cost::Conv,
        macs: conv_macs(&stem, hw),
    });
    for (i, b) in net.blocks.iter().enumerate() {
        let plan = plan_block(b, hw)?;
        entries.extend(plan_entries(&plan, &format!("block{i}")));
        hw = plan.out_hw;
    }
    entries.push(FlopsEntry {
        scope: "head".into(),
        layer: "fc".into(),
        cost: Cost::Classifier,
        macs: (net.feature_channels() * net.classes) as u64,
    });
    Ok(FlopsReport { entries })
}

/// Per-block subtotals in network order.
pub fn block_table(net: &NetworkSpec, report: &FlopsReport) -> Vec<BlockFlops> {
    net.blocks
        .iter()
        .enumerate()
        .map(|(index, b)| {
            let scope = format!("block{index}");
            let sum = |cost| {
                report
                    .entries
                    .iter()
                    .filter(|e| e.scope == scope && e.cost == cost)
                    .map(|e| e.macs)
                    .sum()
            };
            BlockFlops {
                index,
                kind: b.kind,
                conv: sum(Cost::Conv),
                fusion: sum(Cost::Fusion),
                predictor: sum(Cost::Predictor),
            }
        })
        .collect()
}

/// Conv cost of the original-variant block over this block's conv cost,
/// both measured by the counter.
pub fn ratio_to_original(spec: &BlockSpec, in_hw: (usize, usize)) -> Result<Ratio<u64>> {
    let orig = BlockSpec::new(
        spec.kind.with_variant(Variant::Original),
        spec.in_channels,
        spec.out_channels,
        spec.stride,
        1,
    )?;
    Ok(Ratio::new(
        block_conv_macs(&orig, in_hw)?,
        block_conv_macs(spec, in_hw)?,
    ))
}

/// Closed form of the MobileNetV2-block to dy-mobile-block cost ratio for
/// `C` channels: `(6C + 27) / (C + 27)`.
pub fn flops_ratio_dy_mobile(channels: usize) -> Result<Ratio<u64>> {
    if channels == 0 || !channels.is_multiple_of(6) {
        return Err(Error::invalid(format!(
            "C={channels} is not a positive multiple of 6"
        )));
    }
    let c = channels as u64;
    Ok(Ratio::new(6 * c + 27, c + 27))
}

/// Dynamic stride-1 mobile block of width `channels`.
pub fn dy_mobile_block(channels: usize, group_size: usize) -> Result<BlockSpec> {
    BlockSpec::new(
        BlockKind::new(Family::Mobile, Variant::Dynamic),
        channels,
        channels,
        1,
        group_size,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_and_depthwise_examples() {
        let pw = ConvGeometry::new(16, 32, 1, 1, 0, 1).unwrap();
        assert_eq!(conv_macs(&pw, (8, 8)), 32768);
        let dw = ConvGeometry::new(48, 48, 3, 1, 1, 48).unwrap();
        assert_eq!(conv_macs(&dw, (14, 14)), 84672);
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(flops_ratio_dy_mobile(30).unwrap(), Ratio::new(207, 57));
        assert_eq!(flops_ratio_dy_mobile(6).unwrap(), Ratio::new(63, 33));
        assert_eq!(flops_ratio_dy_mobile(5400).unwrap(), Ratio::new(32427, 5427));
        assert!(flops_ratio_dy_mobile(27).is_err());
        assert!(flops_ratio_dy_mobile(0).is_err());
    }

    #[test]
    fn counter_matches_closed_form() {
        for c in (6..=96).step_by(6) {
            let spec = dy_mobile_block(c, 6).unwrap();
            assert_eq!(ratio_to_original(&spec, (7, 7)).unwrap(), flops_ratio_dy_mobile(c).unwrap());
        }
    }

    #[test]
    fn dynamic_and_fixed_conv_costs_agree() {
        let dy = dy_mobile_block(24, 6).unwrap();
        let fix = BlockSpec { kind: dy.kind.with_variant(Variant::Fixed), group_size: 1, ..dy };
        for hw in [(8, 8), (32, 32)] {
            assert_eq!(block_conv_macs(&dy, hw).unwrap(), block_conv_macs(&fix, hw).unwrap());
        }
        // overhead does not depend on resolution
        let small: u64 = block_flops(&dy, (8, 8)).unwrap().iter().filter(|e| e.cost != Cost::Conv).map(|e| e.macs).sum();
        let large: u64 = block_flops(&dy, (64, 64)).unwrap().iter().filter(|e| e.cost != Cost::Conv).map(|e| e.macs).sum();
        assert_eq!(small, large);
    }

    #[test]
    fn report_total_is_sum_of_parts() {
        let net = crate::arch::tiny_mobile(Variant::Dynamic, 6).unwrap();
        let r = count_flops(&net).unwrap();
        let parts: u64 = [Cost::Conv, Cost::Fusion, Cost::Predictor, Cost::Classifier]
            .iter()
            .map(|&c| r.total_of(c))
            .sum();
        assert_eq!(parts, r.total());
        let blocks: u64 = block_table(&net, &r).iter().map(BlockFlops::total).sum();
        assert_eq!(blocks + r.scope_total("stem") + r.scope_total("head"), r.total());
    }
}
