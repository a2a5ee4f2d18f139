use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const HISTOGRAM_BINS: usize = 20;

/// Upper bounds on |r| for the none, weak and middle bands; anything at or
/// above the last is strong.
pub const BAND_THRESHOLDS: [f64; 3] = [0.2, 0.4, 0.6];

/// Pearson correlation of two equal-length samples, computed in two passes.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs two samples of equal length >= 2, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::Degenerate("a sample has zero variance".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BandTally {
    pub none: usize,
    pub weak: usize,
    pub middle: usize,
    pub strong: usize,
}

impl BandTally {
    pub fn add(&mut self, r: f64) {
        let a = r.abs();
        let slot = if a < BAND_THRESHOLDS[0] {
            &mut self.none
        } else if a < BAND_THRESHOLDS[1] {
            &mut self.weak
        } else if a < BAND_THRESHOLDS[2] {
            &mut self.middle
        } else {
            &mut self.strong
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        self.none + self.weak + self.middle + self.strong
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationHistogram {
    /// `HISTOGRAM_BINS + 1` edges from -1 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub bands: BandTally,
    pub thresholds: [f64; 3],
    /// Channels left out because they are constant.
    pub skipped_channels: usize,
}

impl CorrelationHistogram {
    fn empty() -> Self {
        Self {
            edges: (0..=HISTOGRAM_BINS)
                .map(|i| -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64)
                .collect(),
            counts: vec![0; HISTOGRAM_BINS],
            bands: BandTally::default(),
            thresholds: BAND_THRESHOLDS,
            skipped_channels: 0,
        }
    }

    pub fn bin_of(r: f64) -> usize {
        (((r + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn add(&mut self, r: f64) {
        self.counts[Self::bin_of(r)] += 1;
        self.bands.add(r);
    }

    pub fn pairs(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_text(&self) -> String {
        let b = &self.bands;
        let mut s = format!(
            "# pairs {} skipped_channels {}\n# bands |r|<{} N {} | <{} W {} | <{} M {} | S {}\nlo hi count\n",
            self.pairs(),
            self.skipped_channels,
            self.thresholds[0],
            b.none,
            self.thresholds[1],
            b.weak,
            self.thresholds[2],
            b.middle,
            b.strong
        );
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.2} {:.2} {c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

/// Histogram of Pearson correlations between every pair of channels of an
/// `N,C,H,W` activation, each channel flattened over N, H and W.
pub fn correlation_histogram<T: Scalar>(features: &Tensor<T>) -> Result<CorrelationHistogram> {
    let (n, c, h, w) = features.dims4()?;
    if c < 2 {
        return Err(Error::invalid("need at least two channels to correlate"));
    }
    let plane = h * w;
    let channels: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            (0..n)
                .flat_map(|s| features.data()[(s * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()))
                .collect()
        })
        .collect();
    let mut hist = CorrelationHistogram::empty();
    let live: Vec<&Vec<f64>> = channels
        .iter()
        .filter(|v| v.iter().any(|&x| x != v[0]))
        .collect();
    hist.skipped_channels = c - live.len();
    for i in 0..live.len() {
        for j in i + 1..live.len() {
            hist.add(pearson(live[i], live[j])?);
        }
    }
    Ok(hist)
}
