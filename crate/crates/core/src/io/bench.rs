//! Latency of the two dynamic-convolution paths on a 1x1 layer.
//!
//! Both paths include coefficient prediction from the layer input. Each
//! configuration is timed as the median of `runs` measurements taken after
//! `warmup` discarded ones, with the two paths alternating.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynconv::{forward_infer, forward_train, CoefficientPredictor, DynamicConvLayer};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

pub const MIN_RUNS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub group_size: usize,
    pub channels: Vec<usize>,
    pub input_sizes: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            group_size: 6,
            channels: vec![64, 128],
            input_sizes: vec![56, 112, 224],
            batch: 1,
            warmup: 3,
            runs: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub channels: usize,
    pub input_size: usize,
    /// Median seconds of the kernel-fusion path.
    pub fused: f64,
    /// Median seconds of the feature-fusion path.
    pub unfused: f64,
}

impl BenchRow {
    /// `1 - fused / unfused`, as a fraction.
    pub fn latency_reduced(&self) -> f64 {
        1.0 - self.fused / self.unfused
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub group_size: usize,
    pub runs: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# g_t={} median of {} runs; times in milliseconds\nchannels input fused_ms unfused_ms latency_reduced_pct\n",
            self.group_size, self.runs
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{} {} {:.3} {:.3} {:.2}\n",
                r.channels,
                r.input_size,
                r.fused * 1e3,
                r.unfused * 1e3,
                100.0 * r.latency_reduced()
            ));
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Medians of two closures timed in alternation, so slow drift in machine
/// state lands on both.
fn time_medians(
    warmup: usize,
    runs: usize,
    mut a: impl FnMut() -> Result<()>,
    mut b: impl FnMut() -> Result<()>,
) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        a()?;
        b()?;
    }
    let (mut ta, mut tb) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    for _ in 0..runs {
        let start = Instant::now();
        a()?;
        ta.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        b()?;
        tb.push(start.elapsed().as_secs_f64());
    }
    Ok((median(&mut ta), median(&mut tb)))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.runs < MIN_RUNS || cfg.warmup < MIN_WARMUP {
        return Err(Error::invalid(format!(
            "need at least {MIN_RUNS} runs after {MIN_WARMUP} warmups"
        )));
    }
    if cfg.batch == 0 || cfg.channels.is_empty() || cfg.input_sizes.is_empty() {
        return Err(Error::invalid("empty benchmark configuration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &c in &cfg.channels {
        let geom = ConvGeometry::new(c, c, 1, 1, 0, 1)?;
        let layer = DynamicConvLayer::<f32>::init(geom, cfg.group_size, false, &mut rng)?;
        let predictor = CoefficientPredictor::<f32>::init(
            c,
            None,
            &[("conv".to_string(), layer.coeff_len())],
            &mut rng,
        )?;
        for &size in &cfg.input_sizes {
            let x = Tensor::<f32>::rand_normal(&[cfg.batch, c, size, size], 1.0, &mut rng);
            let (fused, unfused) = time_medians(
                cfg.warmup,
                cfg.runs,
                || {
                    let eta = predictor.predict(&x)?;
                    std::hint::black_box(forward_infer(&layer, &eta, &x)?);
                    Ok(())
                },
                || {
                    let eta = predictor.predict(&x)?;
                    std::hint::black_box(forward_train(&layer, &eta, &x)?);
                    Ok(())
                },
            )?;
            rows.push(BenchRow {
                channels: c,
                input_size: size,
                fused,
                unfused,
            });
        }
    }
    Ok(BenchReport {
        group_size: cfg.group_size,
        runs: cfg.runs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_too_few_runs() {
        let cfg = BenchConfig {
            runs: 4,
            ..BenchConfig::default()
        };
        assert!(run_bench(&cfg).is_err());
    }
}
