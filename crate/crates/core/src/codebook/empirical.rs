//! Centroids from a fixed Monte-Carlo sample set of normalized weights.

use rayon::prelude::*;

use crate::dist::NormalizationMode;
use crate::error::{Error, Result};

use super::{nearest_neighbor_partition, LloydEngine, Metric};

/// Reduction chunk; fixed so sums do not depend on the thread count.
const CHUNK: usize = 1 << 15;

/// Normalized weights sorted ascending, each paired with the absolute block
/// maximum of its block. Blocks whose maximum is zero are dropped.
#[derive(Debug, Clone)]
pub struct SampleSet {
    x: Vec<f32>,
    w: Vec<f32>,
}

impl SampleSet {
    /// Normalize `weights` block by block (full precision constants).
    pub fn from_weights(weights: &[f32], block_size: usize, mode: NormalizationMode) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidInput("block size must be at least 1".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite".into()));
        }
        let mut pairs: Vec<(f32, f32)> = weights
            .par_chunks(block_size)
            .flat_map_iter(|block| {
                let mut c = 0.0f32;
                for &v in block {
                    if v.abs() > c.abs() {
                        c = v;
                    }
                }
                if mode == NormalizationMode::Absolute {
                    c = c.abs();
                }
                let scale = c as f64;
                let keep = c != 0.0;
                block
                    .iter()
                    .filter(move |_| keep)
                    .map(move |&v| ((v as f64 / scale) as f32, scale.abs() as f32))
            })
            .collect();
        pairs.par_sort_by(|a, b| a.0.total_cmp(&b.0));
        let (x, w) = pairs.into_iter().unzip();
        Ok(SampleSet { x, w })
    }

    /// Build directly from `(x, weight)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut p: Vec<(f32, f32)> = pairs.iter().map(|&(x, w)| (x as f32, w as f32)).collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (x, w) = p.into_iter().unzip();
        SampleSet { x, w }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Sorted normalized values.
    pub fn values(&self) -> &[f32] {
        &self.x
    }

    /// Block-maximum magnitudes, aligned with [`values`](Self::values).
    pub fn block_maxima(&self) -> &[f32] {
        &self.w
    }

    /// Index range of samples in `[lo, hi)`.
    fn range(&self, lo: f64, hi: f64) -> (usize, usize) {
        let i0 = self.x.partition_point(|&v| (v as f64) < lo);
        let i1 = self.x.partition_point(|&v| (v as f64) < hi);
        (i0, i1.max(i0))
    }
}

/// Parallel sum with a fixed chunking, independent of the thread count.
fn chunked_sum<F: Fn(f32, f32) -> f64 + Sync>(x: &[f32], w: &[f32], f: F) -> f64 {
    let parts: Vec<f64> = x
        .par_chunks(CHUNK)
        .zip(w.par_chunks(CHUNK))
        .map(|(xs, ws)| xs.iter().zip(ws).map(|(&a, &b)| f(a, b)).sum::<f64>())
        .collect();
    parts.iter().sum()
}

pub(crate) struct EmpiricalEngine<'a> {
    set: &'a SampleSet,
    metric: Metric,
    k: i32,
    /// Per-chunk sums of `w^k` and `w^k x` over fixed chunks of the sorted set.
    chunk_v: Vec<f64>,
    chunk_vx: Vec<f64>,
}

impl<'a> EmpiricalEngine<'a> {
    pub(crate) fn new(set: &'a SampleSet, metric: Metric, k: i32) -> Self {
        let sums: Vec<(f64, f64)> = set
            .x
            .par_chunks(CHUNK)
            .zip(set.w.par_chunks(CHUNK))
            .map(|(xs, ws)| {
                xs.iter().zip(ws).fold((0.0, 0.0), |(v, vx), (&a, &b)| {
                    let wk = (b as f64).powi(k);
                    (v + wk, vx + wk * a as f64)
                })
            })
            .collect();
        let (chunk_v, chunk_vx) = sums.into_iter().unzip();
        EmpiricalEngine { set, metric, k, chunk_v, chunk_vx }
    }

    fn weight(&self, w: f32) -> f64 {
        (w as f64).powi(self.k)
    }

    fn direct<F: Fn(f32, f32) -> f64>(&self, i0: usize, i1: usize, f: &F) -> f64 {
        self.set.x[i0..i1].iter().zip(&self.set.w[i0..i1]).map(|(&a, &b)| f(a, b)).sum()
    }

    /// Sum of `f` over `[i0, i1)`, using the precomputed chunk sums for
    /// every chunk fully inside the range.
    fn range_sum<F: Fn(f32, f32) -> f64>(&self, i0: usize, i1: usize, chunks: &[f64], f: F) -> f64 {
        let (c0, c1) = (i0.div_ceil(CHUNK), i1 / CHUNK);
        if c0 >= c1 {
            return self.direct(i0, i1, &f);
        }
        self.direct(i0, c0 * CHUNK, &f) + chunks[c0..c1].iter().sum::<f64>() + self.direct(c1 * CHUNK, i1, &f)
    }

    /// Smallest `x_k` in `[i0, i1)` whose inclusive prefix of `w^k` exceeds
    /// half of the range total.
    fn weighted_median(&self, i0: usize, i1: usize) -> f64 {
        let total = self.range_sum(i0, i1, &self.chunk_v, |_, b| self.weight(b));
        if !(total > 0.0) {
            return self.set.x[i0 + (i1 - i0 - 1) / 2] as f64;
        }
        let half = 0.5 * total;
        let mut acc = 0.0;
        let mut i = i0;
        while i < i1 {
            if i.is_multiple_of(CHUNK) && i + CHUNK <= i1 {
                let s = self.chunk_v[i / CHUNK];
                if acc + s <= half {
                    acc += s;
                    i += CHUNK;
                    continue;
                }
            }
            acc += self.weight(self.set.w[i]);
            if acc > half {
                return self.set.x[i] as f64;
            }
            i += 1;
        }
        self.set.x[i1 - 1] as f64
    }
}

impl LloydEngine for EmpiricalEngine<'_> {
    fn centroid(&self, lo: f64, hi: f64) -> Result<f64> {
        let (i0, i1) = self.set.range(lo, hi);
        if i0 == i1 {
            return Err(Error::EmptyRegion { lo, hi });
        }
        let c = match (self.metric, self.k) {
            (Metric::Mse, _) => {
                let den = self.range_sum(i0, i1, &self.chunk_v, |_, b| self.weight(b));
                if !(den > 0.0) {
                    self.direct(i0, i1, &|a, _| a as f64) / (i1 - i0) as f64
                } else {
                    self.range_sum(i0, i1, &self.chunk_vx, |a, b| self.weight(b) * a as f64) / den
                }
            }
            (Metric::Mae, 0) => self.set.x[i0 + (i1 - i0 - 1) / 2] as f64,
            (Metric::Mae, _) => self.weighted_median(i0, i1),
        };
        Ok(c)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.set.x.partition_point(|&v| (v as f64) <= x) as f64 / self.set.len() as f64
    }

    fn cdf_left(&self, x: f64) -> f64 {
        self.set.x.partition_point(|&v| (v as f64) < x) as f64 / self.set.len() as f64
    }

    fn quantile(&self, p: f64) -> f64 {
        let n = self.set.len();
        let i = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.set.x[i] as f64
    }

    fn objective(&self, levels: &[f64]) -> Result<f64> {
        let t = nearest_neighbor_partition(levels)?;
        let mut total = 0.0;
        for (j, &c) in levels.iter().enumerate() {
            let (i0, i1) = self.set.range(t[j], t[j + 1]);
            let x = &self.set.x[i0..i1];
            let w = &self.set.w[i0..i1];
            total += match self.metric {
                Metric::Mse => chunked_sum(x, w, |a, b| self.weight(b) * (a as f64 - c).powi(2)),
                Metric::Mae => chunked_sum(x, w, |a, b| self.weight(b) * (a as f64 - c).abs()),
            };
        }
        Ok(total / self.set.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::centroid::{centroid_mae_empirical, centroid_mse_empirical};

    #[test]
    fn block_maxima_normalize_to_one() {
        let w = [0.5f32, -2.0, 1.0, 0.25, 3.0, -1.0, 0.0, 0.0, 0.0];
        let abs = SampleSet::from_weights(&w, 3, NormalizationMode::Absolute).unwrap();
        assert_eq!(abs.len(), 6);
        assert_eq!(abs.values(), &[-1.0f32, -1.0 / 3.0, 0.083333336, 0.25, 0.5, 1.0][..]);
        let sgn = SampleSet::from_weights(&w, 3, NormalizationMode::Signed).unwrap();
        assert_eq!(sgn.values(), &[-0.5f32, -1.0 / 3.0, -0.25, 0.083333336, 1.0, 1.0][..]);
        assert_eq!(sgn.block_maxima(), &[2.0f32, 3.0, 2.0, 3.0, 2.0, 3.0][..]);
    }

    #[test]
    fn engine_matches_list_centroids() {
        let pairs: Vec<(f64, f64)> = (0..100_003)
            .map(|i| {
                let x = ((i * 7919) % 100_003) as f64 / 100_003.0 * 2.0 - 1.0;
                let w = 0.5 + ((i * 31) % 97) as f64 / 50.0;
                ((x as f32) as f64, (w as f32) as f64)
            })
            .collect();
        let set = SampleSet::from_pairs(&pairs);
        let mse = EmpiricalEngine::new(&set, Metric::Mse, 2).centroid(-0.3, 0.6).unwrap();
        let mae = EmpiricalEngine::new(&set, Metric::Mae, 1).centroid(-0.3, 0.6).unwrap();
        let inside: Vec<(f64, f64)> = pairs.iter().copied().filter(|&(x, _)| (-0.3..0.6).contains(&x)).collect();
        assert!((mse - centroid_mse_empirical(&inside).unwrap()).abs() < 1e-12);
        assert_eq!(mae, centroid_mae_empirical(&inside).unwrap());
    }

    #[test]
    fn empty_range_is_an_error() {
        let set = SampleSet::from_pairs(&[(0.1, 1.0), (0.2, 1.0)]);
        let e = EmpiricalEngine::new(&set, Metric::Mse, 2);
        assert!(matches!(e.centroid(0.5, 0.9), Err(Error::EmptyRegion { .. })));
        assert_eq!(e.quantile(0.5), 0.1f32 as f64);
        assert_eq!(e.cdf(0.15), 0.5);
    }
}
