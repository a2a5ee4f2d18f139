//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op method evaluates its output immediately and records the node;
//! [`Graph::backward`] then walks the recorded nodes in reverse creation order,
//! which is a valid reverse topological order because a node can only consume
//! nodes created before it.

use std::sync::atomic::{AtomicU64, Ordering};

use super::loss::{smoothed_cross_entropy, smoothed_cross_entropy_grad};
use super::params::ParamId;
use crate::dynconv::{feature_fusion, fuse_bank};
use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d,
    conv2d_backward, fully_connected, gemm, global_avg_pool, relu, sigmoid, BatchNormCache,
    BatchNormState, ConvGeometry, Scalar, Tensor, BN_EPS,
};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    GlobalAvgPool(usize),
    BatchNormTrain {
        input: usize,
        scale: usize,
        shift: usize,
        cache: BatchNormCache<T>,
    },
    BatchNormEval {
        input: usize,
        scale: usize,
        shift: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Reshape(usize),
    FeatureFusion {
        maps: usize,
        coeffs: usize,
        group_size: usize,
    },
    KernelFusionConv {
        input: usize,
        bank: usize,
        coeffs: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
        group_size: usize,
    },
    SliceCols {
        input: usize,
        offset: usize,
    },
    SliceChannels {
        input: usize,
        start: usize,
    },
    ConcatChannels(Vec<usize>),
    ChannelShuffle {
        input: usize,
        groups: usize,
    },
    SmoothedCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        eps: f64,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A recorded forward computation.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not belong to this graph; was its forward pass recorded here?",
                id.index
            )));
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad, None)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> NodeId {
        self.grads = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// Leaf whose gradient is tracked but which is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, true, None)
    }

    /// Leaf bound to parameter `id`; its gradient is reported by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, true, Some(id))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(id)?].value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let out = conv2d(
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
            &geom,
        )?;
        let mut deps = vec![i, w];
        deps.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            &deps,
        ))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let out = fully_connected(
            &self.nodes[i].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        Ok(self.push(
            out,
            Op::Linear {
                input: i,
                weight: w,
                bias: b,
            },
            &[i, w, b],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let out = relu(&self.nodes[i].value);
        Ok(self.push(out, Op::Relu(i), &[i]))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let out = sigmoid(&self.nodes[i].value);
        Ok(self.push(out, Op::Sigmoid(i), &[i]))
    }

    /// `N,C,H,W -> N,C` plane means.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let (n, c, _, _) = self.nodes[i].value.dims4()?;
        let out = global_avg_pool(&self.nodes[i].value)?.reshape(&[n, c])?;
        Ok(self.push(out, Op::GlobalAvgPool(i), &[i]))
    }

    /// Batch norm with `scale`/`shift` taken from graph nodes; `state`
    /// supplies (and in train mode receives) the running statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<NodeId> {
        let (i, s, b) = (self.idx(input)?, self.idx(scale)?, self.idx(shift)?);
        state.scale = self.nodes[s].value.clone();
        state.shift = self.nodes[b].value.clone();
        match mode {
            Mode::Train => {
                let (out, cache) = batch_norm_train(&self.nodes[i].value, state)?;
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        input: i,
                        scale: s,
                        shift: b,
                        cache,
                    },
                    &[i, s, b],
                ))
            }
            Mode::Eval => {
                let out = batch_norm_eval(&self.nodes[i].value, state)?;
                let eps = T::lit(BN_EPS);
                let inv_std = state
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        input: i,
                        scale: s,
                        shift: b,
                        mean: state.running_mean.data().to_vec(),
                        inv_std,
                    },
                    &[i, s, b],
                ))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[i].value.add(&self.nodes[j].value)?;
        Ok(self.push(out, Op::Add(i, j), &[i, j]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[i].value.zip_map(&self.nodes[j].value, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(i, j), &[i, j]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let i = self.idx(input)?;
        let out = Tensor::scalar(self.nodes[i].value.sum());
        Ok(self.push(out, Op::Sum(i), &[i]))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(i), &[i]))
    }

    /// Combine bank output maps `[N, C*g, H, W]` with coefficients `[N, C*g]`.
    pub fn feature_fusion(
        &mut self,
        maps: NodeId,
        coeffs: NodeId,
        group_size: usize,
    ) -> Result<NodeId> {
        let (m, c) = (self.idx(maps)?, self.idx(coeffs)?);
        let out = feature_fusion(&self.nodes[m].value, &self.nodes[c].value, group_size)?;
        Ok(self.push(
            out,
            Op::FeatureFusion {
                maps: m,
                coeffs: c,
                group_size,
            },
            &[m, c],
        ))
    }

    /// Per-sample kernel fusion followed by convolution. `geom` describes
    /// the fused (not the bank) convolution.
    pub fn kernel_fusion_conv(
        &mut self,
        input: NodeId,
        bank: NodeId,
        coeffs: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
        group_size: usize,
    ) -> Result<NodeId> {
        let (i, k, c) = (self.idx(input)?, self.idx(bank)?, self.idx(coeffs)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let x = &self.nodes[i].value;
        let (n, _, _, _) = x.dims4()?;
        let eta = &self.nodes[c].value;
        let (cn, clen) = eta.dims2()?;
        if cn != n || clen != geom.out_channels * group_size {
            return Err(Error::shape(format!(
                "coefficients {:?} do not match batch {n} x C_out*g_t {}",
                eta.shape(),
                geom.out_channels * group_size
            )));
        }
        let mut outs = Vec::with_capacity(n);
        for s in 0..n {
            let fused = fuse_bank(
                &self.nodes[k].value,
                &geom,
                group_size,
                &eta.data()[s * clen..][..clen],
            )?;
            outs.push(conv2d(
                &x.sample(s)?,
                &fused,
                b.map(|b| &self.nodes[b].value),
                &geom,
            )?);
        }
        let (_, oc, oh, ow) = outs[0].dims4()?;
        let data = outs.into_iter().flat_map(Tensor::into_data).collect();
        let out = Tensor::new(&[n, oc, oh, ow], data)?;
        let mut deps = vec![i, k, c];
        deps.extend(b);
        Ok(self.push(
            out,
            Op::KernelFusionConv {
                input: i,
                bank: k,
                coeffs: c,
                bias: b,
                geom,
                group_size,
            },
            &deps,
        ))
    }

    /// Columns `[offset, offset+len)` of an `N x F` node.
    pub fn slice_cols(&mut self, input: NodeId, offset: usize, len: usize) -> Result<NodeId> {
        let i = self.idx(input)?;
        let (n, f) = self.nodes[i].value.dims2()?;
        if len == 0 || offset + len > f {
            return Err(Error::shape(format!(
                "column slice [{offset}, {}) out of range for width {f}",
                offset + len
            )));
        }
        let src = self.nodes[i].value.data();
        let data = (0..n)
            .flat_map(|r| src[r * f + offset..r * f + offset + len].iter().copied())
            .collect();
        let out = Tensor::new(&[n, len], data)?;
        Ok(self.push(out, Op::SliceCols { input: i, offset }, &[i]))
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let i = self.idx(input)?;
        let out = self.nodes[i].value.slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { input: i, start }, &[i]))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::concat_channels(&refs)?;
        Ok(self.push(out, Op::ConcatChannels(idx.clone()), &idx))
    }

    /// Reshape channels to `(groups, C/groups)`, transpose, flatten.
    pub fn channel_shuffle(&mut self, input: NodeId, groups: usize) -> Result<NodeId> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let (n, c, h, w) = x.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!(
                "cannot shuffle {c} channels in {groups} groups"
            )));
        }
        let out = shuffle_channels(x, n, c, h * w, groups, false)?;
        Ok(self.push(out, Op::ChannelShuffle { input: i, groups }, &[i]))
    }

    /// Mean label-smoothed cross entropy of `N x K` logits.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        eps: f64,
    ) -> Result<NodeId> {
        let i = self.idx(logits)?;
        let (loss, probs) = smoothed_cross_entropy(&self.nodes[i].value, labels, eps)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                eps,
                probs,
            },
            &[i],
        ))
    }

    /// Populate gradients of `loss` (a one-element node) with respect to
    /// every node that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.idx(loss).map_err(|_| {
            Error::Graph("backward called before the forward pass recorded the loss".into())
        })?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        for i in (0..=root).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (j, g) in self.vjp(i, &gy)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.axpy(T::one(), &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gy);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Result<Option<&Tensor<T>>> {
        let i = self.idx(id)?;
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Graph("no gradients: call backward first".into()))?;
        Ok(grads[i].as_ref())
    }

    /// Gradients of every parameter leaf, summed per parameter, ordered by
    /// parameter id. Parameters unreachable from the loss get zeros.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Graph("no gradients: call backward first".into()))?;
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (node, g) in self.nodes.iter().zip(grads) {
            let Some(pid) = node.param else { continue };
            let g = g
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.axpy(T::one(), &g)?,
                None => out.push((pid, g)),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        Ok(out)
    }

    fn vjp(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        Ok(match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = conv2d_backward(val(*input), val(*weight), gy, geom, needs(*input))?;
                let mut out = vec![(*weight, g.weight)];
                if let Some(dx) = g.input {
                    out.push((*input, dx));
                }
                if let Some(b) = bias {
                    out.push((*b, g.bias));
                }
                out
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, f_out) = gy.dims2()?;
                let f_in = val(*input).shape()[1];
                let mut dx = vec![T::zero(); n * f_in];
                gemm(n, f_out, f_in, gy.data(), false, val(*weight).data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); f_out * f_in];
                gemm(f_out, n, f_in, gy.data(), true, val(*input).data(), false, &mut dw, false);
                let mut db = vec![T::zero(); f_out];
                for row in gy.data().chunks_exact(f_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*input, Tensor::new(&[n, f_in], dx)?),
                    (*weight, Tensor::new(&[f_out, f_in], dw)?),
                    (*bias, Tensor::new(&[f_out], db)?),
                ]
            }
            Op::Relu(x) => vec![(
                *x,
                val(*x).zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })?,
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                self.nodes[i]
                    .value
                    .zip_map(gy, |s, g| g * s * (T::one() - s))?,
            )],
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let plane = h * w;
                let inv = T::one() / T::of_usize(plane);
                let mut dx = Vec::with_capacity(n * c * plane);
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, plane));
                }
                vec![(*x, Tensor::new(&[n, c, h, w], dx)?)]
            }
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                cache,
            } => {
                let (dx, ds, db) = batch_norm_backward(gy, cache, val(*scale))?;
                vec![(*input, dx), (*scale, ds), (*shift, db)]
            }
            Op::BatchNormEval {
                input,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = gy.dims4()?;
                let plane = h * w;
                let (x, s) = (val(*input).data(), val(*scale).data());
                let mut dx = vec![T::zero(); gy.numel()];
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for k in base..base + plane {
                            let g = gy.data()[k];
                            dx[k] = g * s[ch] * inv_std[ch];
                            ds[ch] += g * (x[k] - mean[ch]) * inv_std[ch];
                            db[ch] += g;
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(gy.shape(), dx)?),
                    (*scale, Tensor::new(&[c], ds)?),
                    (*shift, Tensor::new(&[c], db)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Mul(a, b) => vec![
                (*a, gy.zip_map(val(*b), |g, v| g * v)?),
                (*b, gy.zip_map(val(*a), |g, v| g * v)?),
            ],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gy.data()[0]))],
            Op::Reshape(x) => vec![(*x, gy.clone().reshape(val(*x).shape())?)],
            Op::FeatureFusion {
                maps,
                coeffs,
                group_size,
            } => {
                let (n, cg, h, w) = val(*maps).dims4()?;
                let plane = h * w;
                let c_out = cg / group_size;
                let (m, eta) = (val(*maps).data(), val(*coeffs).data());
                let mut dm = vec![T::zero(); m.len()];
                let mut de = vec![T::zero(); eta.len()];
                for s in 0..n {
                    for t in 0..c_out {
                        let g = &gy.data()[(s * c_out + t) * plane..][..plane];
                        for k in t * group_size..(t + 1) * group_size {
                            let e = eta[s * cg + k];
                            let base = (s * cg + k) * plane;
                            let mut dot = T::zero();
                            for p in 0..plane {
                                dm[base + p] = e * g[p];
                                dot += g[p] * m[base + p];
                            }
                            de[s * cg + k] = dot;
                        }
                    }
                }
                vec![
                    (*maps, Tensor::new(val(*maps).shape(), dm)?),
                    (*coeffs, Tensor::new(val(*coeffs).shape(), de)?),
                ]
            }
            Op::KernelFusionConv {
                input,
                bank,
                coeffs,
                bias,
                geom,
                group_size,
            } => self.kernel_fusion_vjp(*input, *bank, *coeffs, *bias, geom, *group_size, gy)?,
            Op::SliceCols { input, offset } => {
                let (n, f) = val(*input).dims2()?;
                let len = gy.shape()[1];
                let mut dx = vec![T::zero(); n * f];
                for r in 0..n {
                    dx[r * f + offset..r * f + offset + len]
                        .copy_from_slice(&gy.data()[r * len..][..len]);
                }
                vec![(*input, Tensor::new(&[n, f], dx)?)]
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = val(*input).dims4()?;
                let len = gy.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    dx[(s * c + start) * plane..][..len * plane]
                        .copy_from_slice(&gy.data()[s * len * plane..][..len * plane]);
                }
                vec![(*input, Tensor::new(&[n, c, h, w], dx)?)]
            }
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).shape()[1];
                    out.push((p, gy.slice_channels(start, c)?));
                    start += c;
                }
                out
            }
            Op::ChannelShuffle { input, groups } => {
                let (n, c, h, w) = gy.dims4()?;
                vec![(*input, shuffle_channels(gy, n, c, h * w, *groups, true)?)]
            }
            Op::SmoothedCrossEntropy {
                logits,
                labels,
                eps,
                probs,
            } => {
                let d = smoothed_cross_entropy_grad(probs, labels, *eps)?;
                vec![(*logits, d.scale(gy.data()[0]))]
            }
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn kernel_fusion_vjp(
        &self,
        input: usize,
        bank: usize,
        coeffs: usize,
        bias: Option<usize>,
        geom: &ConvGeometry,
        group_size: usize,
        gy: &Tensor<T>,
    ) -> Result<Vec<(usize, Tensor<T>)>> {
        let x = &self.nodes[input].value;
        let w = &self.nodes[bank].value;
        let eta = &self.nodes[coeffs].value;
        let (n, c, h, wd) = x.dims4()?;
        let clen = eta.shape()[1];
        let klen = geom.kernel_len();
        let want_input = self.nodes[input].requires_grad;
        let mut dx = Vec::with_capacity(if want_input { n * c * h * wd } else { 0 });
        let mut dbank = vec![T::zero(); w.numel()];
        let mut deta = vec![T::zero(); eta.numel()];
        let mut dbias = vec![T::zero(); geom.out_channels];
        for s in 0..n {
            let row = &eta.data()[s * clen..][..clen];
            let fused = fuse_bank(w, geom, group_size, row)?;
            let g = conv2d_backward(&x.sample(s)?, &fused, &gy.sample(s)?, geom, want_input)?;
            if let Some(d) = g.input {
                dx.extend_from_slice(d.data());
            }
            for (acc, &v) in dbias.iter_mut().zip(g.bias.data()) {
                *acc += v;
            }
            let dfused = g.weight.data();
            for t in 0..geom.out_channels {
                let df = &dfused[t * klen..][..klen];
                for i in 0..group_size {
                    let k = t * group_size + i;
                    let member = &w.data()[k * klen..][..klen];
                    let e = row[k];
                    let mut dot = T::zero();
                    for (j, (&d, &m)) in df.iter().zip(member).enumerate() {
                        dbank[k * klen + j] += e * d;
                        dot += d * m;
                    }
                    deta[s * clen + k] = dot;
                }
            }
        }
        let mut out = vec![
            (bank, Tensor::new(w.shape(), dbank)?),
            (coeffs, Tensor::new(eta.shape(), deta)?),
        ];
        if want_input {
            out.push((input, Tensor::new(x.shape(), dx)?));
        }
        if let Some(b) = bias {
            out.push((b, Tensor::new(&[geom.out_channels], dbias)?));
        }
        Ok(out)
    }
}

/// Channel shuffle and its inverse. Forward maps input channel
/// `g * (C/groups) + j` to output channel `j * groups + g`.
fn shuffle_channels<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    inverse: bool,
) -> Result<Tensor<T>> {
    let per = c / groups;
    let mut out = vec![T::zero(); x.numel()];
    for s in 0..n {
        for g in 0..groups {
            for j in 0..per {
                let (src, dst) = (g * per + j, j * groups + g);
                let (from, to) = if inverse { (dst, src) } else { (src, dst) };
                out[(s * c + to) * plane..][..plane]
                    .copy_from_slice(&x.data()[(s * c + from) * plane..][..plane]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_gradient_is_the_other_operand() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let w = g.variable(Tensor::new(&[2, 2], vec![0.3, 0.1, -0.7, 2.0]).unwrap());
        let xi = g.input(x.clone());
        let p = g.mul(w, xi).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().unwrap(), &x);
        assert!(g.grad(xi).unwrap().is_none());
    }

    #[test]
    fn backward_rejects_foreign_nodes_and_non_scalars() {
        let mut a = Graph::<f64>::new();
        let mut b = Graph::<f64>::new();
        let v = a.variable(Tensor::full(&[1], 1.0));
        assert!(b.backward(v).is_err());
        let w = a.variable(Tensor::full(&[3], 1.0));
        assert!(a.backward(w).is_err());
        assert!(a.grad(v).is_err());
    }

    #[test]
    fn shuffle_inverse_round_trips() {
        let x = Tensor::<f64>::from_fn(&[2, 6, 1, 2], |i| i as f64);
        let y = shuffle_channels(&x, 2, 6, 2, 2, false).unwrap();
        // channel order 0,3,1,4,2,5
        assert_eq!(&y.data()[..4], &[0.0, 1.0, 6.0, 7.0]);
        let back = shuffle_channels(&y, 2, 6, 2, 2, true).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let a = g.param(ParamId(0), Tensor::full(&[2], 3.0));
        let b = g.param(ParamId(0), Tensor::full(&[2], 3.0));
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads().unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
    }
}
