//! Dynamic convolution: coefficient prediction, kernel fusion and the two
//! equivalent execution paths.
//!
//! A layer with `C_out` outputs and group size `g_t` owns a bank of
//! `C_out * g_t` fixed kernels laid out so that bank row `t * g_t + i` is
//! member `i` of output channel `t`. Coefficients use the same flat layout.
//!
//! * [`forward_infer`] fuses the bank into one kernel per output channel for
//!   each sample, `w_t = sum_i eta[t, i] * w[t, i]`, then runs one ordinary
//!   convolution.
//! * [`forward_train`] convolves the whole batch with the full bank once and
//!   combines each `g_t`-slice of output maps with the same coefficients.
//!
//! Convolution is linear in the kernel, so both paths agree up to rounding.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, fully_connected, global_avg_pool, relu, sigmoid, ConvGeometry, Scalar, Tensor,
};

/// A convolution whose kernels are fused per input from a fixed bank.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConvLayer<T> {
    geom: ConvGeometry,
    group_size: usize,
    bank: Tensor<T>,
    bias: Option<Tensor<T>>,
}

/// Uniform bound for fan-in scaled initialization of a ReLU-fed kernel.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> DynamicConvLayer<T> {
    pub fn new(
        geom: ConvGeometry,
        group_size: usize,
        bank: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        geom.validate()?;
        if group_size == 0 {
            return Err(Error::invalid("group size g_t must be >= 1"));
        }
        let bank_geom = geom.with_out_channels(geom.out_channels * group_size)?;
        if bank.shape() != bank_geom.weight_shape() {
            return Err(Error::shape(format!(
                "kernel bank has shape {:?}, expected {:?} (C_out * g_t = {} * {group_size})",
                bank.shape(),
                bank_geom.weight_shape(),
                geom.out_channels
            )));
        }
        if let Some(b) = &bias {
            if b.numel() != geom.out_channels {
                return Err(Error::shape(format!(
                    "bias has {} elements, expected C_out={}",
                    b.numel(),
                    geom.out_channels
                )));
            }
        }
        Ok(Self {
            geom,
            group_size,
            bank,
            bias,
        })
    }

    /// Every bank member drawn independently from a fan-in scaled uniform.
    pub fn init<R: Rng + ?Sized>(
        geom: ConvGeometry,
        group_size: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group size g_t must be >= 1"));
        }
        let bank_geom = geom.with_out_channels(geom.out_channels * group_size)?;
        let bound = fan_in_bound(geom.kernel_len());
        let bank = Tensor::rand_uniform(&bank_geom.weight_shape(), -bound, bound, rng);
        let bias = with_bias.then(|| Tensor::zeros(&[geom.out_channels]));
        Self::new(geom, group_size, bank, bias)
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bank(&self) -> &Tensor<T> {
        &self.bank
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    /// Geometry of a convolution with the entire bank as its weight.
    pub fn bank_geometry(&self) -> ConvGeometry {
        self.geom
            .with_out_channels(self.geom.out_channels * self.group_size)
            .expect("validated at construction")
    }

    /// Number of coefficients one sample needs: `C_out * g_t`.
    pub fn coeff_len(&self) -> usize {
        self.geom.out_channels * self.group_size
    }
}

/// Fusion coefficients, one row of `C_out * g_t` (or several layers' worth)
/// per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients<T> {
    values: Tensor<T>,
}

impl<T: Scalar> Coefficients<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("coefficient rows differ in length"));
        }
        Self::new(Tensor::new(
            &[rows.len(), len],
            rows.iter().flatten().copied().collect(),
        )?)
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, n: usize) -> &[T] {
        let len = self.row_len();
        &self.values.data()[n * len..][..len]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    /// Columns `[offset, offset + len)` of every row.
    pub fn segment(&self, offset: usize, len: usize) -> Result<Self> {
        if len == 0 || offset + len > self.row_len() {
            return Err(Error::shape(format!(
                "segment [{offset}, {}) outside rows of length {}",
                offset + len,
                self.row_len()
            )));
        }
        let data = (0..self.batch())
            .flat_map(|n| self.row(n)[offset..offset + len].iter().copied())
            .collect();
        Self::new(Tensor::new(&[self.batch(), len], data)?)
    }
}

/// Affine map `x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform in `+-1/sqrt(fan_in)` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[out_features, in_features], -bound, bound, rng),
            bias: Tensor::rand_uniform(&[out_features], -bound, bound, rng),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        fully_connected(x, &self.weight, &self.bias)
    }
}

/// Slice of the predictor output owned by one dynamic layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub layer: String,
    pub offset: usize,
    pub len: usize,
}

/// Pool -> linear (-> ReLU -> linear) -> sigmoid head that serves every
/// dynamic layer of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientPredictor<T> {
    hidden: Option<Linear<T>>,
    output: Linear<T>,
    segments: Vec<Segment>,
}

impl<T: Scalar> CoefficientPredictor<T> {
    /// `segments` lists `(layer name, coefficient count)` in layer order;
    /// offsets are assigned contiguously.
    pub fn new(
        hidden: Option<Linear<T>>,
        output: Linear<T>,
        layers: &[(String, usize)],
    ) -> Result<Self> {
        let segments = Self::layout(layers)?;
        let total: usize = layers.iter().map(|(_, n)| n).sum();
        if output.out_features() != total {
            return Err(Error::shape(format!(
                "predictor emits {} coefficients but served layers need {total}",
                output.out_features()
            )));
        }
        if let Some(h) = &hidden {
            if h.out_features() != output.in_features() {
                return Err(Error::shape(format!(
                    "hidden layer width {} does not feed output layer expecting {}",
                    h.out_features(),
                    output.in_features()
                )));
            }
        }
        Ok(Self {
            hidden,
            output,
            segments,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        hidden_width: Option<usize>,
        layers: &[(String, usize)],
        rng: &mut R,
    ) -> Result<Self> {
        let total = layers.iter().map(|(_, n)| n).sum();
        let hidden = hidden_width.map(|h| Linear::init(in_channels, h, rng));
        let out_in = hidden_width.unwrap_or(in_channels);
        Self::new(hidden, Linear::init(out_in, total, rng), layers)
    }

    fn layout(layers: &[(String, usize)]) -> Result<Vec<Segment>> {
        if layers.is_empty() {
            return Err(Error::invalid("predictor must serve at least one layer"));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(layers.len());
        for (name, len) in layers {
            if *len == 0 {
                return Err(Error::invalid(format!("layer `{name}` needs zero coefficients")));
            }
            out.push(Segment {
                layer: name.clone(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Ok(out)
    }

    pub fn in_channels(&self) -> usize {
        self.hidden
            .as_ref()
            .map_or(self.output.in_features(), Linear::in_features)
    }

    pub fn total_coeffs(&self) -> usize {
        self.output.out_features()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn hidden(&self) -> Option<&Linear<T>> {
        self.hidden.as_ref()
    }

    pub fn output(&self) -> &Linear<T> {
        &self.output
    }

    /// Coefficients for every served layer, one row per sample.
    pub fn predict(&self, block_input: &Tensor<T>) -> Result<Coefficients<T>> {
        let (n, c, _, _) = block_input.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "predictor expects {} input channels, block input has {c}",
                self.in_channels()
            )));
        }
        let mut z = global_avg_pool(block_input)?.reshape(&[n, c])?;
        if let Some(h) = &self.hidden {
            z = relu(&h.forward(&z)?);
        }
        Coefficients::new(sigmoid(&self.output.forward(&z)?))
    }

    /// The coefficients belonging to served layer `index`.
    pub fn segment(&self, coeffs: &Coefficients<T>, index: usize) -> Result<Coefficients<T>> {
        let seg = self
            .segments
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no segment {index}")))?;
        coeffs.segment(seg.offset, seg.len)
    }
}

/// Free-function form of [`CoefficientPredictor::predict`].
pub fn predict_coefficients<T: Scalar>(
    predictor: &CoefficientPredictor<T>,
    block_input: &Tensor<T>,
) -> Result<Coefficients<T>> {
    predictor.predict(block_input)
}

/// Fuse the bank into one kernel per output channel using one sample's
/// coefficient row.
pub fn fuse_kernels<T: Scalar>(layer: &DynamicConvLayer<T>, coeffs: &[T]) -> Result<Tensor<T>> {
    fuse_bank(layer.bank(), layer.geometry(), layer.group_size(), coeffs)
}

pub(crate) fn fuse_bank<T: Scalar>(
    bank: &Tensor<T>,
    geom: &ConvGeometry,
    group_size: usize,
    coeffs: &[T],
) -> Result<Tensor<T>> {
    let c_out = geom.out_channels;
    if coeffs.len() != c_out * group_size {
        return Err(Error::shape(format!(
            "coefficient segment has length {}, expected C_out * g_t = {}",
            coeffs.len(),
            c_out * group_size
        )));
    }
    let klen = geom.kernel_len();
    let src = bank.data();
    let mut fused = vec![T::zero(); c_out * klen];
    for (t, dst) in fused.chunks_exact_mut(klen).enumerate() {
        for i in 0..group_size {
            let eta = coeffs[t * group_size + i];
            let member = &src[(t * group_size + i) * klen..][..klen];
            for (d, &w) in dst.iter_mut().zip(member) {
                *d += eta * w;
            }
        }
    }
    Tensor::new(&geom.weight_shape(), fused)
}

fn check_coeffs<T: Scalar>(
    layer: &DynamicConvLayer<T>,
    coeffs: &Coefficients<T>,
    input: &Tensor<T>,
) -> Result<usize> {
    let (n, _, _, _) = input.dims4()?;
    if coeffs.batch() != n {
        return Err(Error::shape(format!(
            "{} coefficient rows for a batch of {n}",
            coeffs.batch()
        )));
    }
    if coeffs.row_len() != layer.coeff_len() {
        return Err(Error::shape(format!(
            "coefficient rows have length {}, expected C_out * g_t = {}",
            coeffs.row_len(),
            layer.coeff_len()
        )));
    }
    Ok(n)
}

/// Kernel-fusion path: fuse per sample, then one convolution per distinct
/// coefficient row. Samples whose rows are bitwise equal share a kernel and
/// are convolved as one sub-batch.
pub fn forward_infer<T: Scalar>(
    layer: &DynamicConvLayer<T>,
    coeffs: &Coefficients<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = check_coeffs(layer, coeffs, input)?;
    let (_, c, h, w) = input.dims4()?;
    let geom = layer.geometry();
    let (oh, ow) = geom.output_hw(h, w)?;

    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for s in 0..n {
        let key: Vec<u64> = coeffs.row(s).iter().map(|v| v.as_f64().to_bits()).collect();
        match seen.get(&key) {
            Some(&slot) => order[slot].push(s),
            None => {
                seen.insert(key, order.len());
                order.push(vec![s]);
            }
        }
    }

    if order.len() == 1 {
        let fused = fuse_kernels(layer, coeffs.row(0))?;
        return conv2d(input, &fused, layer.bias(), geom);
    }
    let in_per = c * h * w;
    let out_per = geom.out_channels * oh * ow;
    let mut out = vec![T::zero(); n * out_per];
    for samples in &order {
        let fused = fuse_kernels(layer, coeffs.row(samples[0]))?;
        let mut data = Vec::with_capacity(samples.len() * in_per);
        for &s in samples {
            data.extend_from_slice(&input.data()[s * in_per..][..in_per]);
        }
        let sub = Tensor::new(&[samples.len(), c, h, w], data)?;
        let y = conv2d(&sub, &fused, layer.bias(), geom)?;
        for (j, &s) in samples.iter().enumerate() {
            out[s * out_per..][..out_per].copy_from_slice(&y.data()[j * out_per..][..out_per]);
        }
    }
    Tensor::new(&[n, geom.out_channels, oh, ow], out)
}

/// Feature-fusion path: one convolution with the full bank for the whole
/// batch, then a per-sample weighted sum over each `g_t`-slice of maps.
pub fn forward_train<T: Scalar>(
    layer: &DynamicConvLayer<T>,
    coeffs: &Coefficients<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_coeffs(layer, coeffs, input)?;
    let maps = conv2d(input, layer.bank(), None, &layer.bank_geometry())?;
    let mut out = feature_fusion(&maps, coeffs.values(), layer.group_size())?;
    if let Some(b) = layer.bias() {
        let (n, c, h, w) = out.dims4()?;
        crate::tensor::add_channel_bias(out.data_mut(), b.data(), n, c, h * w);
    }
    Ok(out)
}

/// `out[n, t] = sum_i coeffs[n, t*g + i] * maps[n, t*g + i]`.
pub fn feature_fusion<T: Scalar>(
    maps: &Tensor<T>,
    coeffs: &Tensor<T>,
    group_size: usize,
) -> Result<Tensor<T>> {
    let (n, cg, h, w) = maps.dims4()?;
    let (cn, clen) = coeffs.dims2()?;
    if group_size == 0 || cg % group_size != 0 {
        return Err(Error::shape(format!(
            "{cg} bank maps cannot be grouped by g_t={group_size}"
        )));
    }
    if cn != n || clen != cg {
        return Err(Error::shape(format!(
            "coefficients {:?} do not match {n} samples x {cg} bank maps",
            coeffs.shape()
        )));
    }
    let c_out = cg / group_size;
    let plane = h * w;
    let src = maps.data();
    let eta = coeffs.data();
    let mut out = vec![T::zero(); n * c_out * plane];
    for s in 0..n {
        for t in 0..c_out {
            let dst = &mut out[(s * c_out + t) * plane..][..plane];
            for i in 0..group_size {
                let k = t * group_size + i;
                let e = eta[s * cg + k];
                let m = &src[(s * cg + k) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(m) {
                    *d += e * v;
                }
            }
        }
    }
    Tensor::new(&[n, c_out, h, w], out)
}
