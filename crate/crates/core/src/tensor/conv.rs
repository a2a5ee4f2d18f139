use serde::{Deserialize, Serialize};

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Static shape parameters of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let g = Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    /// `k x k` convolution with "same" padding for odd `k`.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            kernel_size,
            stride,
            kernel_size / 2,
            groups,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(format!(
                "conv extents must be positive: {self:?}"
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if self.groups == 0 {
            return Err(Error::invalid("conv groups must be >= 1"));
        }
        if !self.in_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Length of one flattened kernel: `C_in/groups * k * k`.
    pub fn kernel_len(&self) -> usize {
        self.in_per_group() * self.kernel_size * self.kernel_size
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    /// Same geometry with a different number of output channels.
    pub fn with_out_channels(&self, out_channels: usize) -> Result<Self> {
        Self::new(
            self.in_channels,
            out_channels,
            self.kernel_size,
            self.stride,
            self.padding,
            self.groups,
        )
    }

    /// `H' = floor((H + 2 pad - k) / stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |x: usize, axis: &str| -> Result<usize> {
            let padded = x + 2 * self.padding;
            if padded < self.kernel_size {
                return Err(Error::shape(format!(
                    "{axis}: padded extent {padded} smaller than kernel {}",
                    self.kernel_size
                )));
            }
            Ok((padded - self.kernel_size) / self.stride + 1)
        };
        Ok((span(h, "input height")?, span(w, "input width")?))
    }

    /// Multiply-accumulates for one sample at the given output resolution.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.kernel_len() * self.out_channels * out_h * out_w) as u64
    }

    fn check_operands<T: Scalar>(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "input channel dimension is {c}, geometry expects C_in={}",
                self.in_channels
            )));
        }
        let expected = self.weight_shape();
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "weight must be rank 4, got shape {:?}",
                weight.shape()
            )));
        }
        const AXES: [&str; 4] = ["C_out", "C_in/groups", "kernel height", "kernel width"];
        for (axis, (&got, &want)) in weight.shape().iter().zip(&expected).enumerate() {
            if got != want {
                return Err(Error::shape(format!(
                    "weight {} dimension is {got}, expected {want}",
                    AXES[axis]
                )));
            }
        }
        if let Some(b) = bias {
            if b.numel() != self.out_channels {
                return Err(Error::shape(format!(
                    "bias has {} elements, expected C_out={}",
                    b.numel(),
                    self.out_channels
                )));
            }
        }
        Ok((n, h, w))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvBackend {
    /// Plain loop nest; the reference implementation.
    Direct,
    /// Unfold to columns and multiply; the fast path.
    #[default]
    Im2col,
}

/// Cross-correlation (no kernel flip) over `N,C_in,H,W` input.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    conv2d_with(ConvBackend::Im2col, input, weight, bias, geom)
}

pub fn conv2d_with<T: Scalar>(
    backend: ConvBackend,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, h, w) = geom.check_operands(input, weight, bias)?;
    let (oh, ow) = geom.output_hw(h, w)?;
    let mut out = vec![T::zero(); n * geom.out_channels * oh * ow];
    match backend {
        ConvBackend::Direct => direct_forward(input.data(), weight.data(), geom, n, h, w, oh, ow, &mut out),
        ConvBackend::Im2col => im2col_forward(input.data(), weight.data(), geom, n, h, w, oh, ow, &mut out),
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), n, geom.out_channels, oh * ow);
    }
    Tensor::new(&[n, geom.out_channels, oh, ow], out)
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * plane;
            out[base..base + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    geom: &ConvGeometry,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = geom.kernel_size;
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let c_in = geom.in_channels;
    let pad = geom.padding as isize;
    for s in 0..n {
        for oc in 0..geom.out_channels {
            let g = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..ipg {
                        let xc = &x[((s * c_in) + g * ipg + ic) * h * w..][..h * w];
                        let wk = &wt[(oc * ipg + ic) * k * k..][..k * k];
                        for ky in 0..k {
                            let iy = (oy * geom.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * geom.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xc[iy as usize * w + ix as usize] * wk[ky * k + kx];
                            }
                        }
                    }
                    out[((s * geom.out_channels + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

fn is_pointwise(geom: &ConvGeometry) -> bool {
    geom.kernel_size == 1 && geom.stride == 1 && geom.padding == 0
}

/// Unfold one group of one sample (`C_in/groups` planes of `h x w`) into a
/// `kernel_len x (oh*ow)` column matrix.
fn im2col<T: Scalar>(
    x: &[T],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = geom.kernel_size;
    let pad = geom.padding as isize;
    let plane = oh * ow;
    for ic in 0..geom.in_per_group() {
        let xc = &x[ic * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ic * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    let dst = &mut row[oy * ow..][..ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the input planes.
fn col2im<T: Scalar>(
    cols: &[T],
    geom: &ConvGeometry,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let k = geom.kernel_size;
    let pad = geom.padding as isize;
    let plane = oh * ow;
    for ic in 0..geom.in_per_group() {
        let xc = &mut dx[ic * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ic * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    geom: &ConvGeometry,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let (ipg, opg, klen) = (geom.in_per_group(), geom.out_per_group(), geom.kernel_len());
    let plane = oh * ow;
    let pointwise = is_pointwise(geom);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); klen * plane]
    };
    for s in 0..n {
        for g in 0..geom.groups {
            let xg = &x[(s * geom.in_channels + g * ipg) * h * w..][..ipg * h * w];
            let wg = &wt[g * opg * klen..][..opg * klen];
            let og = &mut out[(s * geom.out_channels + g * opg) * plane..][..opg * plane];
            let b = if pointwise {
                xg
            } else {
                im2col(xg, geom, h, w, oh, ow, &mut cols);
                &cols[..]
            };
            gemm(opg, klen, plane, wg, false, b, false, og, false);
        }
    }
}

/// Gradients of a convolution with respect to its operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`.
/// The input gradient is skipped when `want_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, h, w) = geom.check_operands(input, weight, None)?;
    let (oh, ow) = geom.output_hw(h, w)?;
    let expected = [n, geom.out_channels, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "output gradient has shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (ipg, opg, klen) = (geom.in_per_group(), geom.out_per_group(), geom.kernel_len());
    let plane = oh * ow;
    let pointwise = is_pointwise(geom);
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();

    let mut dw = vec![T::zero(); weight.numel()];
    let mut dx = if want_input {
        vec![T::zero(); input.numel()]
    } else {
        Vec::new()
    };
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); klen * plane]
    };
    let mut dcols = if want_input && !pointwise {
        vec![T::zero(); klen * plane]
    } else {
        Vec::new()
    };

    for s in 0..n {
        for g in 0..geom.groups {
            let x_off = (s * geom.in_channels + g * ipg) * h * w;
            let xg = &x[x_off..][..ipg * h * w];
            let wg = &wt[g * opg * klen..][..opg * klen];
            let dyg = &dy[(s * geom.out_channels + g * opg) * plane..][..opg * plane];
            let b = if pointwise {
                xg
            } else {
                im2col(xg, geom, h, w, oh, ow, &mut cols);
                &cols[..]
            };
            gemm(
                opg,
                plane,
                klen,
                dyg,
                false,
                b,
                true,
                &mut dw[g * opg * klen..][..opg * klen],
                true,
            );
            if want_input {
                if pointwise {
                    gemm(klen, opg, plane, wg, true, dyg, false, &mut dx[x_off..][..ipg * h * w], true);
                } else {
                    gemm(klen, opg, plane, wg, true, dyg, false, &mut dcols, false);
                    col2im(&dcols, geom, h, w, oh, ow, &mut dx[x_off..][..ipg * h * w]);
                }
            }
        }
    }

    let mut db = vec![T::zero(); geom.out_channels];
    for s in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += dy[(s * geom.out_channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        input: if want_input {
            Some(Tensor::new(input.shape(), dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[geom.out_channels], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_product() {
        let g = ConvGeometry::new(1, 1, 1, 1, 0, 1).unwrap();
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv2d(&x, &w, None, &g).unwrap().data(), &[6.0]);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let g = ConvGeometry::new(1, 1, 3, 1, 0, 1).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        for backend in [ConvBackend::Direct, ConvBackend::Im2col] {
            let y = conv2d_with(backend, &x, &w, None, &g).unwrap();
            assert_eq!(y.shape(), &[1, 1, 1, 1]);
            assert_eq!(y.data(), &[45.0]);
        }
    }

    #[test]
    fn geometry_rejects_indivisible_groups() {
        assert!(ConvGeometry::new(6, 4, 3, 1, 1, 4).is_err());
        assert!(ConvGeometry::new(4, 6, 3, 1, 1, 4).is_err());
        assert!(ConvGeometry::new(4, 4, 3, 0, 1, 1).is_err());
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let g = ConvGeometry::new(2, 4, 3, 1, 1, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &g).unwrap_err().to_string();
        assert!(err.contains("input channel"), "{err}");

        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[4, 2, 3, 2]);
        let err = conv2d(&x, &w, None, &g).unwrap_err().to_string();
        assert!(err.contains("kernel width"), "{err}");

        let w = Tensor::zeros(&[5, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &g).unwrap_err().to_string();
        assert!(err.contains("C_out"), "{err}");
    }

    #[test]
    fn output_size_floors() {
        let g = ConvGeometry::new(1, 1, 3, 2, 1, 1).unwrap();
        assert_eq!(g.output_hw(32, 31).unwrap(), (16, 16));
        let g = ConvGeometry::new(1, 1, 5, 1, 0, 1).unwrap();
        assert!(g.output_hw(4, 4).is_err());
    }

    #[test]
    fn backends_agree_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, k, stride, groups, hw) in &[
            (3, 8, 3, 1, 1, 9),
            (6, 12, 3, 2, 3, 10),
            (8, 8, 3, 1, 8, 7),
            (5, 7, 1, 1, 1, 6),
            (4, 6, 1, 2, 2, 5),
        ] {
            let g = ConvGeometry::same(c_in, c_out, k, stride, groups).unwrap();
            let x = Tensor::<f32>::rand_uniform(&[2, c_in, hw, hw], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(&g.weight_shape(), -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[c_out], -1.0, 1.0, &mut rng);
            let d = conv2d_with(ConvBackend::Direct, &x, &w, Some(&b), &g).unwrap();
            let f = conv2d_with(ConvBackend::Im2col, &x, &w, Some(&b), &g).unwrap();
            assert!(d.max_abs_diff(&f).unwrap() < 1e-5);
        }
    }

    #[test]
    fn bias_gradient_is_plane_sum() {
        let g = ConvGeometry::new(1, 2, 1, 1, 0, 1).unwrap();
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 1.0);
        let w = Tensor::full(&[2, 1, 1, 1], 1.0);
        let dy = Tensor::full(&[2, 2, 2, 2], 0.5);
        let grads = conv2d_backward(&x, &w, &dy, &g, true).unwrap();
        assert_eq!(grads.bias.data(), &[4.0, 4.0]);
        assert_eq!(grads.weight.data(), &[4.0, 4.0]);
        assert_eq!(grads.input.unwrap().data(), &[1.0; 8]);
    }
}
