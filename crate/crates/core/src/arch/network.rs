use rand::Rng;

use super::plan::{plan_block, BlockPlan, ConvPlan, Topology};
use super::spec::NetworkSpec;
use crate::dynconv::{fan_in_bound, CoefficientPredictor, DynamicConvLayer, Linear};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, ConvGeometry, Scalar, Tensor};
use crate::training::{Graph, Mode, NodeId, ParamId, ParamStore};

/// Which of the two equivalent dynamic-convolution evaluations to record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPath {
    /// Convolve with the whole bank, then mix feature maps.
    Feature,
    /// Mix kernels per sample, then convolve once.
    Kernel,
}

const SHUFFLE_GROUPS: usize = 2;

#[derive(Clone, Debug)]
struct ConvUnit {
    plan: ConvPlan,
    name: String,
    weight: ParamId,
    scale: ParamId,
    shift: ParamId,
    bn: usize,
}

#[derive(Clone, Debug)]
struct PredictorUnit {
    hidden: Option<(ParamId, ParamId)>,
    output: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct BlockUnit {
    plan: BlockPlan,
    main: Vec<ConvUnit>,
    side: Vec<ConvUnit>,
    predictor: Option<PredictorUnit>,
}

/// Nodes worth inspecting after a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `block{i}.{layer}` with the node holding that layer's coefficients.
    pub coefficients: Vec<(String, NodeId)>,
    pub block_outputs: Vec<NodeId>,
}

/// A built network: parameters, batch-norm running statistics and the
/// layer layout derived from its spec.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    bn: Vec<(String, BatchNormState<T>)>,
    stem: ConvUnit,
    blocks: Vec<BlockUnit>,
    head: (ParamId, ParamId),
}

struct Init<'a, T, R: ?Sized> {
    params: ParamStore<T>,
    bn: Vec<(String, BatchNormState<T>)>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Init<'_, T, R> {
    fn conv(&mut self, plan: ConvPlan, name: String) -> Result<ConvUnit> {
        let weight = if plan.dynamic {
            let layer = DynamicConvLayer::<T>::init(plan.geom, plan.group_size, false, self.rng)?;
            self.params.add(format!("{name}.bank"), layer.bank().clone(), true)?
        } else {
            let bound = fan_in_bound(plan.geom.kernel_len());
            let w = Tensor::rand_uniform(&plan.geom.weight_shape(), -bound, bound, self.rng);
            self.params.add(format!("{name}.weight"), w, true)?
        };
        let c = plan.geom.out_channels;
        let state = BatchNormState::new(c);
        let scale = self.params.add(format!("{name}.bn.scale"), state.scale.clone(), false)?;
        let shift = self.params.add(format!("{name}.bn.shift"), state.shift.clone(), false)?;
        self.bn.push((format!("{name}.bn"), state));
        Ok(ConvUnit {
            plan,
            name,
            weight,
            scale,
            shift,
            bn: self.bn.len() - 1,
        })
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<(ParamId, ParamId)> {
        let l = Linear::<T>::init(fin, fout, self.rng);
        Ok((
            self.params.add(format!("{name}.weight"), l.weight, true)?,
            self.params.add(format!("{name}.bias"), l.bias, false)?,
        ))
    }
}

impl<T: Scalar> Network<T> {
    /// Build and randomly initialize every layer of `spec`.
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut init = Init {
            params: ParamStore::new(),
            bn: Vec::new(),
            rng,
        };
        let (c, h, w) = spec.input;
        let stem_geom =
            ConvGeometry::same(c, spec.stem.out_channels, spec.stem.kernel_size, spec.stem.stride, 1)?;
        let mut hw = stem_geom.output_hw(h, w)?;
        let stem_plan = ConvPlan {
            name: "stem",
            geom: stem_geom,
            in_hw: (h, w),
            out_hw: hw,
            dynamic: false,
            group_size: 1,
            relu: true,
        };
        let stem = init.conv(stem_plan, "stem".into())?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, b) in spec.blocks.iter().enumerate() {
            let plan = plan_block(b, hw)?;
            hw = plan.out_hw;
            let prefix = format!("block{i}");
            let main = plan
                .main
                .iter()
                .map(|p| init.conv(p.clone(), format!("{prefix}.{}", p.name)))
                .collect::<Result<Vec<_>>>()?;
            let side = plan
                .side
                .iter()
                .map(|p| init.conv(p.clone(), format!("{prefix}.{}", p.name)))
                .collect::<Result<Vec<_>>>()?;
            let predictor = match &plan.predictor {
                Some(p) => {
                    let hidden = p
                        .hidden
                        .map(|h| init.linear(&format!("{prefix}.predictor.hidden"), p.in_channels, h))
                        .transpose()?;
                    let fin = p.hidden.unwrap_or(p.in_channels);
                    let output =
                        init.linear(&format!("{prefix}.predictor.output"), fin, p.out_features)?;
                    Some(PredictorUnit { hidden, output })
                }
                None => None,
            };
            blocks.push(BlockUnit {
                plan,
                main,
                side,
                predictor,
            });
        }
        let head = init.linear("head", spec.feature_channels(), spec.classes)?;
        Ok(Self {
            spec: spec.clone(),
            params: init.params,
            bn: init.bn,
            stem,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn block_plans(&self) -> impl Iterator<Item = &BlockPlan> {
        self.blocks.iter().map(|b| &b.plan)
    }

    /// Batch-norm running statistics keyed by layer name.
    pub fn batch_norms(&self) -> &[(String, BatchNormState<T>)] {
        &self.bn
    }

    /// Every tensor that defines the model: parameters in registration order
    /// followed by running means and variances.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), &p.value))
            .collect();
        for (name, st) in &self.bn {
            out.push((format!("{name}.running_mean"), &st.running_mean));
            out.push((format!("{name}.running_var"), &st.running_var));
        }
        out
    }

    /// Replace a tensor by name; shapes must match. Loading running
    /// statistics marks that batch norm as initialized.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mismatch = |expected: &[usize], got: &[usize]| Error::Tensor {
            name: name.to_string(),
            message: format!("shape {got:?} does not match the spec's {expected:?}"),
        };
        if let Some(id) = self.params.find(name) {
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(mismatch(p.value.shape(), value.shape()));
            }
            p.value = value;
            return Ok(());
        }
        for (bn_name, st) in &mut self.bn {
            let slot = match name.strip_prefix(bn_name.as_str()) {
                Some(".running_mean") => &mut st.running_mean,
                Some(".running_var") => &mut st.running_var,
                _ => continue,
            };
            if slot.shape() != value.shape() {
                return Err(mismatch(slot.shape(), value.shape()));
            }
            *slot = value;
            st.initialized = true;
            return Ok(());
        }
        Err(Error::Tensor {
            name: name.to_string(),
            message: "no such tensor in this network".into(),
        })
    }

    /// The dynamic layer `layer` of block `block` as a standalone layer.
    pub fn dynamic_layer(&self, block: usize, layer: &str) -> Result<DynamicConvLayer<T>> {
        let unit = self
            .blocks
            .get(block)
            .and_then(|b| b.main.iter().find(|u| u.plan.name == layer && u.plan.dynamic))
            .ok_or_else(|| Error::invalid(format!("block {block} has no dynamic layer {layer:?}")))?;
        DynamicConvLayer::new(
            unit.plan.geom,
            unit.plan.group_size,
            self.params.value(unit.weight).clone(),
            None,
        )
    }

    /// The coefficient predictor of block `block`, if it is dynamic.
    pub fn predictor(&self, block: usize) -> Result<Option<CoefficientPredictor<T>>> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::invalid(format!("no block {block}")))?;
        let Some(p) = &b.predictor else { return Ok(None) };
        let lin = |(w, b): (ParamId, ParamId)| Linear {
            weight: self.params.value(w).clone(),
            bias: self.params.value(b).clone(),
        };
        let layers: Vec<(String, usize)> = b
            .plan
            .dynamic_layers()
            .map(|c| (c.name.to_string(), c.geom.out_channels * c.group_size))
            .collect();
        CoefficientPredictor::new(p.hidden.map(lin), lin(p.output), &layers).map(Some)
    }

    /// Record the forward pass of a batch `x` and return the logits node.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        path: FusionPath,
    ) -> Result<NodeId> {
        self.forward_traced(g, x, mode, path, None)
    }

    pub fn forward_traced(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        path: FusionPath,
        mut trace: Option<&mut Trace>,
    ) -> Result<NodeId> {
        let (c, _, _) = self.spec.input;
        let xc = g.value(x)?.dims4()?.1;
        if xc != c {
            return Err(Error::shape(format!(
                "network expects {c} input channels, batch has {xc}"
            )));
        }
        let mut ctx = Ctx {
            params: &self.params,
            bn: &mut self.bn,
            g,
            mode,
            path,
        };
        let mut h = ctx.conv(&self.stem, x, None)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = ctx.block(b, h, i, trace.as_deref_mut())?;
            if let Some(t) = trace.as_deref_mut() {
                t.block_outputs.push(h);
            }
        }
        let pooled = ctx.g.global_avg_pool(h)?;
        let (w, b) = (ctx.leaf(self.head.0), ctx.leaf(self.head.1));
        ctx.g.linear(pooled, w, b)
    }

    /// Eval-mode logits for a batch, without keeping the graph.
    pub fn predict(&mut self, x: &Tensor<T>, path: FusionPath) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let input = g.input(x.clone());
        let out = self.forward(&mut g, input, Mode::Eval, path)?;
        Ok(g.value(out)?.clone())
    }
}

struct Ctx<'a, T> {
    params: &'a ParamStore<T>,
    bn: &'a mut [(String, BatchNormState<T>)],
    g: &'a mut Graph<T>,
    mode: Mode,
    path: FusionPath,
}

impl<T: Scalar> Ctx<'_, T> {
    fn leaf(&mut self, id: ParamId) -> NodeId {
        self.g.param(id, self.params.value(id).clone())
    }

    fn conv(&mut self, u: &ConvUnit, x: NodeId, eta: Option<NodeId>) -> Result<NodeId> {
        let w = self.leaf(u.weight);
        let y = match (u.plan.dynamic, eta) {
            (false, _) => self.g.conv2d(x, w, None, u.plan.geom)?,
            (true, Some(eta)) => match self.path {
                FusionPath::Feature => {
                    let bank_geom = u
                        .plan
                        .geom
                        .with_out_channels(u.plan.geom.out_channels * u.plan.group_size)?;
                    let maps = self.g.conv2d(x, w, None, bank_geom)?;
                    self.g.feature_fusion(maps, eta, u.plan.group_size)?
                }
                FusionPath::Kernel => {
                    self.g
                        .kernel_fusion_conv(x, w, eta, None, u.plan.geom, u.plan.group_size)?
                }
            },
            (true, None) => {
                return Err(Error::Graph(format!(
                    "dynamic layer {} evaluated without coefficients",
                    u.name
                )))
            }
        };
        let (s, b) = (self.leaf(u.scale), self.leaf(u.shift));
        let y = self.g.batch_norm(y, s, b, &mut self.bn[u.bn].1, self.mode)?;
        if u.plan.relu {
            self.g.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Coefficient nodes for each dynamic layer of the main path, in order.
    fn coefficients(
        &mut self,
        b: &BlockUnit,
        x: NodeId,
        index: usize,
        trace: Option<&mut Trace>,
    ) -> Result<Vec<Option<NodeId>>> {
        let Some(p) = &b.predictor else {
            return Ok(vec![None; b.main.len()]);
        };
        let mut h = self.g.global_avg_pool(x)?;
        if let Some((w, bias)) = p.hidden {
            let (w, bias) = (self.leaf(w), self.leaf(bias));
            h = self.g.linear(h, w, bias)?;
            h = self.g.relu(h)?;
        }
        let (w, bias) = (self.leaf(p.output.0), self.leaf(p.output.1));
        let logits = self.g.linear(h, w, bias)?;
        let eta = self.g.sigmoid(logits)?;
        let mut out = Vec::with_capacity(b.main.len());
        let mut offset = 0;
        let mut names = Vec::new();
        for u in &b.main {
            if u.plan.dynamic {
                let len = u.plan.geom.out_channels * u.plan.group_size;
                let seg = self.g.slice_cols(eta, offset, len)?;
                offset += len;
                names.push((format!("block{index}.{}", u.plan.name), seg));
                out.push(Some(seg));
            } else {
                out.push(None);
            }
        }
        if let Some(t) = trace {
            t.coefficients.extend(names);
        }
        Ok(out)
    }

    fn chain(&mut self, units: &[ConvUnit], x: NodeId, eta: &[Option<NodeId>]) -> Result<NodeId> {
        let mut h = x;
        for (u, e) in units.iter().zip(eta) {
            h = self.conv(u, h, *e)?;
        }
        Ok(h)
    }

    fn block(
        &mut self,
        b: &BlockUnit,
        x: NodeId,
        index: usize,
        trace: Option<&mut Trace>,
    ) -> Result<NodeId> {
        match b.plan.topology {
            Topology::Chain { residual } => {
                let eta = self.coefficients(b, x, index, trace)?;
                let y = self.chain(&b.main, x, &eta)?;
                if residual {
                    self.g.add(x, y)
                } else {
                    Ok(y)
                }
            }
            Topology::ResNet { projection } => {
                let eta = self.coefficients(b, x, index, trace)?;
                let y = self.chain(&b.main, x, &eta)?;
                let skip = if projection {
                    self.conv(&b.side[0], x, None)?
                } else {
                    x
                };
                let sum = self.g.add(y, skip)?;
                self.g.relu(sum)
            }
            Topology::ShuffleSplit { left } => {
                let c = b.plan.spec.in_channels;
                let l = self.g.slice_channels(x, 0, left)?;
                let r = self.g.slice_channels(x, left, c - left)?;
                let eta = self.coefficients(b, r, index, trace)?;
                let r = self.chain(&b.main, r, &eta)?;
                let cat = self.g.concat_channels(&[l, r])?;
                self.g.channel_shuffle(cat, SHUFFLE_GROUPS)
            }
            Topology::ShuffleDown => {
                let l = self.chain(&b.side, x, &[None, None])?;
                let eta = self.coefficients(b, x, index, trace)?;
                let r = self.chain(&b.main, x, &eta)?;
                let cat = self.g.concat_channels(&[l, r])?;
                self.g.channel_shuffle(cat, SHUFFLE_GROUPS)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::{tiny_mobile, BlockKind, BlockSpec, StemSpec, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_block(kind: &str, c: usize, stride: usize) -> NetworkSpec {
        NetworkSpec {
            name: kind.into(),
            input: (3, 8, 8),
            classes: 4,
            stem: StemSpec {
                out_channels: c,
                kernel_size: 3,
                stride: 1,
            },
            blocks: vec![BlockSpec::new(kind.parse::<BlockKind>().unwrap(), c, c, stride, 2).unwrap()],
        }
    }

    #[test]
    fn every_family_runs_forward_on_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [
            "dy-mobile", "fix-mobile", "mobilenet-v2", "dy-shuffle", "fix-shuffle", "shufflenet-v2",
            "dy-resnet-basic", "fix-resnet-basic", "resnet-basic", "dy-resnet-bottleneck",
            "fix-resnet-bottleneck", "resnet-bottleneck",
        ] {
            for stride in [1, 2] {
                let spec = one_block(kind, 16 + 8 * usize::from(kind.contains("mobile")), stride);
                let mut net = Network::<f64>::new(&spec, &mut rng).unwrap();
                let x = Tensor::rand_normal(&[2, 3, 8, 8], 1.0, &mut rng);
                let mut g = Graph::new();
                let xi = g.input(x.clone());
                let a = net.forward(&mut g, xi, Mode::Train, FusionPath::Feature).unwrap();
                assert_eq!(g.value(a).unwrap().shape(), &[2, 4], "{kind}");
                let ya = net.predict(&x, FusionPath::Feature).unwrap();
                let yb = net.predict(&x, FusionPath::Kernel).unwrap();
                assert!(ya.max_abs_diff(&yb).unwrap() < 1e-10, "{kind}");
            }
        }
    }

    #[test]
    fn fixed_network_has_no_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::<f32>::new(&tiny_mobile(Variant::Fixed, 1).unwrap(), &mut rng).unwrap();
        assert!(net.params().iter().all(|(_, p)| !p.name.contains("predictor")));
        assert!((0..4).all(|i| net.predictor(i).unwrap().is_none()));
    }

    #[test]
    fn set_tensor_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::<f64>::new(&tiny_mobile(Variant::Dynamic, 6).unwrap(), &mut rng).unwrap();
        assert!(net.set_tensor("head.bias", Tensor::zeros(&[10])).is_ok());
        assert!(matches!(
            net.set_tensor("head.bias", Tensor::zeros(&[11])),
            Err(Error::Tensor { .. })
        ));
        assert!(net.set_tensor("nope", Tensor::zeros(&[1])).is_err());
        assert!(net
            .set_tensor("block0.conv1.bn.running_var", Tensor::full(&[12], 2.0))
            .is_ok());
    }
}
