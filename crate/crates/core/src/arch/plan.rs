use super::spec::{BlockSpec, Family, Variant};
use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

/// One convolution of a block, followed by batch norm and optionally ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPlan {
    pub name: &'static str,
    pub geom: ConvGeometry,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub dynamic: bool,
    pub group_size: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictorPlan {
    pub in_channels: usize,
    pub hidden: Option<usize>,
    pub out_features: usize,
}

/// How the block's outputs are assembled from its convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// `main` chain plus identity skip when `residual`.
    Chain { residual: bool },
    /// `main` chain plus `shortcut` conv (or identity) and a final ReLU.
    ResNet { projection: bool },
    /// Identity left part of `left` channels, right part through `main`,
    /// concat, shuffle.
    ShuffleSplit { left: usize },
    /// Left branch through `left_dw`/`left_pw`, right through `main`, concat,
    /// shuffle.
    ShuffleDown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub spec: BlockSpec,
    pub topology: Topology,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// The main path, in execution order.
    pub main: Vec<ConvPlan>,
    /// Shortcut projection or shuffle left branch.
    pub side: Vec<ConvPlan>,
    pub predictor: Option<PredictorPlan>,
}

impl BlockPlan {
    pub fn convs(&self) -> impl Iterator<Item = &ConvPlan> {
        self.main.iter().chain(&self.side)
    }

    pub fn dynamic_layers(&self) -> impl Iterator<Item = &ConvPlan> {
        self.main.iter().filter(|c| c.dynamic)
    }

    /// Input channels seen by the main path (the right branch for the
    /// channel-split shuffle unit).
    pub fn main_in_channels(&self) -> usize {
        self.main[0].geom.in_channels
    }
}

fn require(cond: bool, spec: &BlockSpec, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} block {}->{} stride {}: {what}",
            spec.kind, spec.in_channels, spec.out_channels, spec.stride
        )))
    }
}

struct Builder {
    hw: (usize, usize),
    dynamic: bool,
    group_size: usize,
    convs: Vec<ConvPlan>,
}

impl Builder {
    fn new(hw: (usize, usize), dynamic: bool, group_size: usize) -> Self {
        Self {
            hw,
            dynamic,
            group_size,
            convs: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &'static str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Result<()> {
        let geom = ConvGeometry::new(cin, cout, k, stride, k / 2, groups)?;
        let out_hw = geom.output_hw(self.hw.0, self.hw.1)?;
        self.convs.push(ConvPlan {
            name,
            geom,
            in_hw: self.hw,
            out_hw,
            dynamic: self.dynamic,
            group_size: if self.dynamic { self.group_size } else { 1 },
            relu,
        });
        self.hw = out_hw;
        Ok(())
    }
}

/// Lay out the convolutions of one block for an `in_hw` input.
pub fn plan_block(spec: &BlockSpec, in_hw: (usize, usize)) -> Result<BlockPlan> {
    let (cin, cout, s) = (spec.in_channels, spec.out_channels, spec.stride);
    let dynamic = spec.kind.is_dynamic();
    let reduced = spec.kind.variant != Variant::Original;
    let mut main = Builder::new(in_hw, dynamic, spec.group_size);
    let mut side = Builder::new(in_hw, false, 1);
    let mut hidden = None;
    let topology = match spec.kind.family {
        Family::Mobile if reduced => {
            require(cout % 6 == 0, spec, "C_out must be a multiple of 6")?;
            main.conv("conv1", cin, cout, 1, 1, 1, true)?;
            main.conv("conv2", cout, cout, 3, s, cout / 6, true)?;
            main.conv("conv3", cout, cout, 1, 1, 1, false)?;
            Topology::Chain {
                residual: s == 1 && cin == cout,
            }
        }
        Family::Mobile => {
            let wide = 6 * cin;
            main.conv("expand", cin, wide, 1, 1, 1, true)?;
            main.conv("depthwise", wide, wide, 3, s, wide, true)?;
            main.conv("project", wide, cout, 1, 1, 1, false)?;
            Topology::Chain {
                residual: s == 1 && cin == cout,
            }
        }
        Family::Shuffle if s == 1 => {
            require(cin == cout, spec, "stride-1 shuffle units keep the width")?;
            // 3:1 split for the reduced blocks; grouping keeps the original
            // depthwise cost of (C/2) * 9 per position
            let (right, groups) = if reduced {
                require(cout % 8 == 0, spec, "C must be a multiple of 8")?;
                (cout / 4, cout / 8)
            } else {
                require(cout % 2 == 0, spec, "C must be even")?;
                (cout / 2, cout / 2)
            };
            main.conv("conv1", right, right, 1, 1, 1, true)?;
            main.conv("conv2", right, right, 3, 1, groups, false)?;
            main.conv("conv3", right, right, 1, 1, 1, true)?;
            Topology::ShuffleSplit { left: cout - right }
        }
        Family::Shuffle => {
            require(cout % 2 == 0, spec, "C_out must be even")?;
            let half = cout / 2;
            side.conv("left_dw", cin, cin, 3, s, cin, false)?;
            side.conv("left_pw", cin, half, 1, 1, 1, true)?;
            main.conv("conv1", cin, half, 1, 1, 1, true)?;
            main.conv("conv2", half, half, 3, s, half, false)?;
            main.conv("conv3", half, half, 1, 1, 1, true)?;
            Topology::ShuffleDown
        }
        Family::ResNetBasic => {
            let mid = if reduced {
                require(cout % 2 == 0, spec, "C_out must be even")?;
                cout / 2
            } else {
                cout
            };
            main.conv("conv1", cin, mid, 3, s, 1, true)?;
            main.conv("conv2", mid, cout, 3, 1, 1, false)?;
            hidden = Some((cin / 4).max(1));
            let projection = s != 1 || cin != cout;
            if projection {
                side.conv("shortcut", cin, cout, 1, s, 1, false)?;
            }
            Topology::ResNet { projection }
        }
        Family::ResNetBottleneck => {
            let mid = if reduced {
                require(cout % 8 == 0, spec, "C_out must be a multiple of 8")?;
                cout / 8
            } else {
                require(cout % 4 == 0, spec, "C_out must be a multiple of 4")?;
                cout / 4
            };
            main.conv("conv1", cin, mid, 1, 1, 1, true)?;
            main.conv("conv2", mid, mid, 3, s, 1, true)?;
            main.conv("conv3", mid, cout, 1, 1, 1, false)?;
            hidden = Some((cin / 4).max(1));
            let projection = s != 1 || cin != cout;
            if projection {
                side.conv("shortcut", cin, cout, 1, s, 1, false)?;
            }
            Topology::ResNet { projection }
        }
    };
    let predictor = dynamic.then(|| {
        let in_channels = main.convs[0].geom.in_channels;
        PredictorPlan {
            in_channels,
            hidden,
            out_features: main
                .convs
                .iter()
                .map(|c| c.geom.out_channels * c.group_size)
                .sum(),
        }
    });
    Ok(BlockPlan {
        spec: *spec,
        topology,
        in_hw,
        out_hw: main.hw,
        main: main.convs,
        side: side.convs,
        predictor,
    })
}
