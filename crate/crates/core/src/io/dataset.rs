//! In-memory labelled image sets and their binary file form.
//!
//! Layout: `b"DYDS"`, then little-endian `u32` N, C, H, W, K (class count),
//! then N*C*H*W little-endian `f32` pixels in NCHW order, then N label bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"DYDS";
pub const DATASET_HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(C, H, W)` of one image.
    pub image_shape: (usize, usize, usize),
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        image_shape: (usize, usize, usize),
        classes: usize,
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let (c, h, w) = image_shape;
        if c * h * w == 0 || classes == 0 || classes > 256 {
            return Err(Error::invalid(format!(
                "image shape {image_shape:?} and class count {classes} must be positive (classes <= 256)"
            )));
        }
        if images.len() != labels.len() * c * h * w {
            return Err(Error::shape(format!(
                "{} pixels do not hold {} images of {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            image_shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    /// Images at `indices` as an `N,C,H,W` tensor plus their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range for {}", self.len())));
            }
            data.extend(self.images[i * per..][..per].iter().map(|&v| T::lit(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let (c, h, w) = self.image_shape;
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.image_shape;
        let mut out = Vec::with_capacity(DATASET_HEADER_LEN + self.images.len() * 4 + self.len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), c, h, w, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &p in &self.images {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_HEADER_LEN {
            return Err(Error::Truncated {
                expected: DATASET_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::format(0, "missing DYDS magic"));
        }
        let field = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (n, c, h, w, k) = (field(0), field(1), field(2), field(3), field(4));
        let pixels = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::format(4, "sample count times image size overflows"))?;
        let expected = DATASET_HEADER_LEN + pixels * 4 + n;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let images = bytes[DATASET_HEADER_LEN..DATASET_HEADER_LEN + pixels * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let label_start = DATASET_HEADER_LEN + pixels * 4;
        let labels = bytes[label_start..].to_vec();
        if let Some(pos) = labels.iter().position(|&l| l as usize >= k) {
            return Err(Error::format(
                label_start + pos,
                format!("label {} out of range for {k} classes", labels[pos]),
            ));
        }
        Self::new((c, h, w), k, images, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
