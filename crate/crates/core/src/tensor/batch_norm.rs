use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Weight given to the previous running statistic on each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// False until a train-mode update or an explicit initialization.
    pub initialized: bool,
}

impl<T: Scalar> BatchNormState<T> {
    /// Scale 1, shift 0, running statistics not yet available.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            initialized: false,
        }
    }

    /// State whose running statistics are usable immediately.
    pub fn with_running_stats(mean: Tensor<T>, var: Tensor<T>) -> Result<Self> {
        if mean.shape() != var.shape() || mean.rank() != 1 {
            return Err(Error::shape("running mean/var must be equal-length vectors"));
        }
        let c = mean.numel();
        Ok(Self {
            scale: Tensor::full(&[c], T::one()),
            shift: Tensor::zeros(&[c]),
            running_mean: mean,
            running_var: var,
            initialized: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Values saved by the train-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalize with batch statistics and fold them into the running averages.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    state.check(c)?;
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            acc += x[(s * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        mean[ch] = acc / T::of_usize(count);
        let mut sq = T::zero();
        for s in 0..n {
            for &v in &x[(s * c + ch) * plane..][..plane] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / T::of_usize(count);
    }

    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (scale, shift) = (state.scale.data(), state.shift.data());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = xh * scale[ch] + shift[ch];
            }
        }
    }

    let m = T::lit(BN_MOMENTUM);
    let unbias = if count > 1 {
        T::of_usize(count) / T::of_usize(count - 1)
    } else {
        T::one()
    };
    for ch in 0..c {
        let rm = &mut state.running_mean.data_mut()[ch];
        *rm = m * *rm + (T::one() - m) * mean[ch];
        let rv = &mut state.running_var.data_mut()[ch];
        *rv = m * *rv + (T::one() - m) * var[ch] * unbias;
    }
    state.initialized = true;

    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
        },
    ))
}

/// Normalize with the running statistics.
pub fn batch_norm_eval<T: Scalar>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    state.check(c)?;
    if !state.initialized {
        return Err(Error::invalid(
            "batch norm evaluated before any train-mode update; initialize running statistics first",
        ));
    }
    let plane = h * w;
    let eps = T::lit(BN_EPS);
    let mut out = input.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let inv = T::one() / (state.running_var.data()[ch] + eps).sqrt();
            let a = state.scale.data()[ch] * inv;
            let b = state.shift.data()[ch] - state.running_mean.data()[ch] * a;
            out[(s * c + ch) * plane..][..plane]
                .iter_mut()
                .for_each(|v| *v = *v * a + b);
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradients of train-mode batch norm: `(d_input, d_scale, d_shift)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if cache.normalized.shape() != grad_out.shape() || scale.numel() != c {
        return Err(Error::shape("batch norm backward operands disagree"));
    }
    let plane = h * w;
    let count = T::of_usize(n * plane);
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dshift[ch] += dy[i];
                dscale[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let k = scale.data()[ch] * cache.inv_std[ch] / count;
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = k * (count * dy[i] - dshift[ch] - xh[i] * dscale[ch]);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dscale)?,
        Tensor::new(&[c], dshift)?,
    ))
}
