use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Target distribution for one sample: `1 - eps + eps/K` on the true class,
/// `eps/K` elsewhere.
pub fn smoothed_target(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let off = eps / classes as f64;
    let mut t = vec![off; classes];
    t[label] += 1.0 - eps;
    t
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::invalid(format!(
            "label {l} at position {i} is out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean over the batch of `-sum_k q_k log softmax(z)_k` with smoothed
/// targets `q`. Also returns the softmax probabilities.
pub fn smoothed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    check_labels(n, k, labels)?;
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("smoothing rate {eps} outside [0, 1]")));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        let target = smoothed_target(label, k, eps);
        for (v, q) in row.iter().zip(&target) {
            let logp = v.as_f64() - lse;
            total -= q * logp;
            probs.push(T::lit(logp.exp()));
        }
    }
    Ok((T::lit(total / n as f64), Tensor::new(&[n, k], probs)?))
}

/// Gradient of the mean smoothed cross entropy: `(p - q) / N`.
pub fn smoothed_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2()?;
    check_labels(n, k, labels)?;
    let inv_n = 1.0 / n as f64;
    let mut d = Vec::with_capacity(n * k);
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        let target = smoothed_target(label, k, eps);
        d.extend(
            row.iter()
                .zip(&target)
                .map(|(p, q)| T::lit((p.as_f64() - q) * inv_n)),
        );
    }
    Tensor::new(&[n, k], d)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}
