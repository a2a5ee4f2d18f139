//! Model files: a text header followed by a little-endian payload.
//!
//! ```text
//! DYCONV-MODEL 1
//! dtype f32
//! spec 5
//! <5 lines of network spec text>
//! tensors 2
//! tensor stem.weight 0 12x3x3x3
//! tensor head.bias 1296 10
//! payload 1336 <sha256 of payload, hex>
//! end
//! <payload bytes>
//! ```
//!
//! Tensor offsets are byte positions inside the payload. Tensors are looked
//! up by name, so the order of the `tensor` lines does not matter as long as
//! the regions tile the payload exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::arch::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MODEL_MAGIC: &str = "DYCONV-MODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile<T> {
    pub spec: NetworkSpec,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelFile<T> {
    pub fn from_network(net: &Network<T>) -> Self {
        Self {
            spec: net.spec().clone(),
            tensors: net
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Build the network of `spec` and load every one of its tensors.
    pub fn into_network(self) -> Result<Network<T>> {
        // initial values are all overwritten below
        let mut net = Network::new(&self.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let wanted: Vec<String> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in &wanted {
            if self.get(name).is_none() {
                return Err(Error::Tensor {
                    name: name.clone(),
                    message: "required by the spec but missing from the file".into(),
                });
            }
        }
        for (name, t) in self.tensors {
            if !wanted.contains(&name) {
                return Err(Error::Tensor {
                    name,
                    message: "present in the file but not part of the spec".into(),
                });
            }
            net.set_tensor(&name, t)?;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut table = String::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            table.push_str(&format!("tensor {name} {} {}\n", payload.len(), dims.join("x")));
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let spec = self.spec.to_text();
        let mut out = format!(
            "{MODEL_MAGIC} {MODEL_VERSION}\ndtype {}\nspec {}\n{spec}tensors {}\n{table}payload {} {}\nend\n",
            T::DTYPE,
            spec.lines().count(),
            self.tensors.len(),
            payload.len(),
            hex::encode(Sha256::digest(&payload)),
        )
        .into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::format(
                header.dtype_offset,
                format!("file stores {} but {} was requested", header.dtype, T::DTYPE),
            ));
        }
        let payload = &bytes[header.len..];
        if payload.len() != header.payload_len {
            return Err(Error::Truncated {
                expected: header.payload_len,
                actual: payload.len(),
            });
        }
        let actual = hex::encode(Sha256::digest(payload));
        if actual != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                actual,
            });
        }
        let size = T::DTYPE.size();
        let mut regions: Vec<(usize, usize, usize)> = header
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.offset, e.shape.iter().product::<usize>() * size, i))
            .collect();
        regions.sort_unstable();
        let mut end = 0;
        for &(offset, len, i) in &regions {
            if offset != end {
                return Err(Error::format(
                    header.entries[i].line_offset,
                    format!(
                        "tensor {} starts at payload byte {offset}, expected {end}",
                        header.entries[i].name
                    ),
                ));
            }
            end += len;
        }
        if end != payload.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: payload.len(),
            });
        }
        let tensors = header
            .entries
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = payload[e.offset..e.offset + n * size]
                    .chunks_exact(size)
                    .map(T::read_le)
                    .collect();
                let t = Tensor::new(&e.shape, data).map_err(|err| Error::Tensor {
                    name: e.name.clone(),
                    message: err.to_string(),
                })?;
                Ok((e.name, t))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: header.spec,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Element type recorded in a model file, without decoding the payload.
pub fn model_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(Header::parse(bytes)?.dtype)
}

struct Entry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    line_offset: usize,
}

struct Header {
    dtype: DType,
    dtype_offset: usize,
    spec: NetworkSpec,
    entries: Vec<Entry>,
    payload_len: usize,
    checksum: String,
    len: usize,
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line and the byte offset where it starts.
    fn next(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let nl = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start, "header ends without a newline"))?;
        self.pos = start + nl + 1;
        let line = std::str::from_utf8(&self.bytes[start..start + nl])
            .map_err(|_| Error::format(start, "header line is not UTF-8"))?;
        Ok((start, line))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (at, line) = self.next()?;
        let mut words = line.split(' ');
        if words.next() != Some(key) {
            return Err(Error::format(at, format!("expected `{key}` line, found {line:?}")));
        }
        Ok((at, words.collect()))
    }
}

fn number(at: usize, s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(at, format!("{what} {s:?} is not a number")))
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut lines = Lines { bytes, pos: 0 };
        let (at, words) = lines.keyed(MODEL_MAGIC).map_err(|e| match e {
            Error::Format { .. } => Error::format(0, format!("missing {MODEL_MAGIC} magic")),
            other => other,
        })?;
        let version = words
            .first()
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::format(at, "missing format version"))?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let (dtype_offset, words) = lines.keyed("dtype")?;
        let dtype = words
            .first()
            .and_then(|d| DType::parse(d))
            .ok_or_else(|| Error::format(dtype_offset, "unknown dtype"))?;
        let (at, words) = lines.keyed("spec")?;
        let count = number(at, words.first().copied().unwrap_or(""), "spec line count")?;
        let spec_start = lines.pos;
        let mut spec_text = String::new();
        for _ in 0..count {
            let (_, l) = lines.next()?;
            spec_text.push_str(l);
            spec_text.push('\n');
        }
        let spec = NetworkSpec::parse(&spec_text).map_err(|e| match e {
            Error::Spec { line, message } => {
                let offset = spec_text
                    .split_inclusive('\n')
                    .take(line.saturating_sub(1))
                    .map(str::len)
                    .sum::<usize>();
                Error::format(spec_start + offset, format!("embedded spec: {message}"))
            }
            other => Error::format(spec_start, format!("embedded spec: {other}")),
        })?;
        let (at, words) = lines.keyed("tensors")?;
        let count = number(at, words.first().copied().unwrap_or(""), "tensor count")?;
        let mut entries: Vec<Entry> = Vec::with_capacity(count);
        for _ in 0..count {
            let (at, words) = lines.keyed("tensor")?;
            let [name, offset, dims] = words[..] else {
                return Err(Error::format(at, "tensor line needs name, offset and shape"));
            };
            if entries.iter().any(|e| e.name == name) {
                return Err(Error::format(at, format!("tensor {name} listed twice")));
            }
            let shape = dims
                .split('x')
                .map(|d| number(at, d, "extent"))
                .collect::<Result<Vec<_>>>()?;
            entries.push(Entry {
                name: name.to_string(),
                offset: number(at, offset, "offset")?,
                shape,
                line_offset: at,
            });
        }
        let (at, words) = lines.keyed("payload")?;
        let [len, checksum] = words[..] else {
            return Err(Error::format(at, "payload line needs length and checksum"));
        };
        let payload_len = number(at, len, "payload length")?;
        lines.keyed("end")?;
        Ok(Self {
            dtype,
            dtype_offset,
            spec,
            entries,
            payload_len,
            checksum: checksum.to_string(),
            len: lines.pos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{tiny_mobile, Variant};

    fn model() -> ModelFile<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        ModelFile::from_network(&Network::new(&tiny_mobile(Variant::Dynamic, 6).unwrap(), &mut rng).unwrap())
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let back = ModelFile::<f32>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let net = back.into_network().unwrap();
        assert_eq!(ModelFile::from_network(&net), m);
    }

    #[test]
    fn wrong_dtype_is_reported() {
        let bytes = model().to_bytes();
        assert!(matches!(ModelFile::<f64>::from_bytes(&bytes), Err(Error::Format { .. })));
        assert_eq!(model_dtype(&bytes).unwrap(), DType::F32);
    }
}
