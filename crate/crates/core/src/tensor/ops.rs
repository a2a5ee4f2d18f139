use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean of each `H x W` plane; output is `N,C,1,1`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::of_usize(plane);
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c, 1, 1], data)
}

/// `y = x W^T + b` for `x: N x F_in`, `W: F_out x F_in`, `b: F_out`.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, f_in) = input.dims2()?;
    let (f_out, w_in) = weight.dims2()?;
    if w_in != f_in {
        return Err(Error::shape(format!(
            "input has {f_in} features but weight expects {w_in}"
        )));
    }
    if bias.numel() != f_out {
        return Err(Error::shape(format!(
            "bias has {} elements, expected {f_out}",
            bias.numel()
        )));
    }
    let mut out = vec![T::zero(); n * f_out];
    gemm(n, f_in, f_out, input.data(), false, weight.data(), true, &mut out, false);
    for row in out.chunks_exact_mut(f_out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new(&[n, f_out], out)
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where it rounds to an endpoint.
#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Branch on sign so exp never overflows.
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}
