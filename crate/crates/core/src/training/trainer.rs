use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mode};
use super::loss::argmax_rows;
use super::optim::{sgd_step, CosineSchedule, OptimizerState};
use crate::arch::{FusionPath, Network};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::tensor::{Scalar, Tensor};

/// Training hyperparameters, readable from TOML. Missing keys take the
/// defaults below: batch 128 at lr 0.05 is the large-batch recipe scaled
/// down linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Random crops after zero padding by this many pixels; 0 disables.
    pub crop_padding: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 128,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            label_smoothing: 0.1,
            seed: 0,
            flip: false,
            crop_padding: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.batch_size
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Training-batch top-1 accuracy in percent.
    pub top1: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6e} {:.6} {:.2}", self.step, self.lr, self.loss, self.top1)
    }
}

fn augment<T: Scalar>(x: &mut Tensor<T>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    if !cfg.flip && cfg.crop_padding == 0 {
        return Ok(());
    }
    let (n, c, h, w) = x.dims4()?;
    let pad = cfg.crop_padding as i64;
    let data = x.data_mut();
    let mut plane = vec![T::zero(); h * w];
    for s in 0..n {
        let flip = cfg.flip && rng.random::<bool>();
        let (dy, dx) = if pad > 0 {
            (rng.random_range(-pad..=pad) as isize, rng.random_range(-pad..=pad) as isize)
        } else {
            (0, 0)
        };
        for ch in 0..c {
            let src = &mut data[(s * c + ch) * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = xx as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    plane[y * w + xx] = if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        src[sy as usize * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
            src.copy_from_slice(&plane);
        }
    }
    Ok(())
}

/// Train `net` in place with feature-fusion forward passes, calling
/// `on_step` after every optimizer step.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<()> {
    if cfg.batch_size == 0 || data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch size {} needs 1..={} samples",
            cfg.batch_size,
            data.len()
        )));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let mut opt = OptimizerState::new(CosineSchedule {
        base_lr: cfg.base_lr,
        total_steps: per_epoch * cfg.epochs,
    });
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.label_smoothing = cfg.label_smoothing;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let (mut x, labels) = data.batch::<T>(chunk)?;
            augment(&mut x, cfg, &mut rng)?;
            let mut g = Graph::new();
            let input = g.input(x);
            let logits = net.forward(&mut g, input, Mode::Train, FusionPath::Feature)?;
            let loss = g.smoothed_cross_entropy(logits, &labels, opt.label_smoothing)?;
            g.backward(loss)?;
            let grads = g.param_grads()?;
            let lr = opt.schedule.lr(step);
            sgd_step(net.params_mut(), &grads, &mut opt, step)?;
            let hits = argmax_rows(g.value(logits)?)?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            on_step(&StepLog {
                step,
                lr,
                loss: g.value(loss)?.data()[0].as_f64(),
                top1: 100.0 * hits as f64 / labels.len() as f64,
            });
            step += 1;
        }
    }
    Ok(())
}

/// Top-1 accuracy in percent with eval-mode batch norm.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    batch_size: usize,
    path: FusionPath,
) -> Result<f64> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluation needs samples and a positive batch size"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let logits = net.predict(&x, path)?;
        hits += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::from_toml("epochs = 7\nflip = true\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert!(c.flip);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.base_lr, 0.05);
        assert!(TrainConfig::from_toml("epoch = 7").is_err());
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn flip_mirrors_rows() {
        let cfg = TrainConfig {
            flip: true,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = Tensor::<f64>::from_fn(&[16, 1, 1, 3], |i| (i % 3) as f64);
        let mut x = orig.clone();
        augment(&mut x, &cfg, &mut rng).unwrap();
        let flipped = x.data().chunks(3).filter(|r| r == &[2.0, 1.0, 0.0]).count();
        let kept = x.data().chunks(3).filter(|r| r == &[0.0, 1.0, 2.0]).count();
        assert_eq!(flipped + kept, 16);
        assert!(flipped > 0 && kept > 0);
    }
}
