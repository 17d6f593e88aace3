//! Outlier-preserving quantization.
//!
//! A weight is an outlier when its magnitude exceeds `σ_b F_M^{-1}(q)`,
//! where `σ_b` is the corrected sample standard deviation of its block and
//! `F_M^{-1}(q)` the `q`-quantile of the block maximum of unit-variance
//! weights. Outliers are zeroed before normalization and kept separately as
//! bfloat16 values with 64-bit indices.

use half::bf16;
use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::dist::{BlockMaxModel, DistributionModel, NormalizationMode};
use crate::error::{Error, Result};
use crate::quant::{quantize_tensor, BlockLayout, QuantizedTensor};

/// Default outlier quantile.
pub const DEFAULT_Q: f64 = 0.95;

/// Preserved weights: sorted flat indices and their 16-bit values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierSet {
    pub indices: Vec<u64>,
    pub values: Vec<bf16>,
    /// Quantile used for detection; not part of the serialized form.
    pub q: Option<f64>,
}

impl OutlierSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks ordering and bounds against a tensor of `element_count` values.
    pub fn validate(&self, element_count: usize) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::CorruptData("outlier indices and values differ in length".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CorruptData("outlier indices not strictly increasing".into()));
        }
        if let Some(&last) = self.indices.last() {
            if last >= element_count as u64 {
                return Err(Error::CorruptData(format!(
                    "outlier index {last} out of range for {element_count} elements"
                )));
            }
        }
        Ok(())
    }
}

/// Corrected sample standard deviation (Welford).
pub fn block_std(block: &[f32]) -> Result<f64> {
    if block.len() < 2 {
        return Err(Error::DegenerateBlock(format!(
            "standard deviation needs 2 or more values, got {}",
            block.len()
        )));
    }
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &v) in block.iter().enumerate() {
        let v = v as f64;
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    Ok((m2 / (block.len() - 1) as f64).sqrt())
}

/// `F_M^{-1}(q)` for unit-variance weights; infinite at `q = 1`.
pub fn outlier_threshold<D: DistributionModel>(model: &BlockMaxModel<D>, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("outlier quantile q = {q} outside (0, 1]")));
    }
    if q == 1.0 {
        return Ok(f64::INFINITY);
    }
    let scale = model.dist().variance().sqrt();
    Ok(model.block_max_quantile(q)? / scale)
}

/// Flat indices of all outliers, ascending. Blocks shorter than 2 or with
/// zero spread flag nothing.
pub fn detect_outliers<D: DistributionModel>(
    weights: &[f32],
    layout: &BlockLayout,
    q: f64,
    model: &BlockMaxModel<D>,
) -> Result<Vec<u64>> {
    if layout.element_count != weights.len() {
        return Err(Error::InvalidInput("layout does not match the tensor length".into()));
    }
    if layout.block_size != model.block_size() {
        return Err(Error::InvalidInput(format!(
            "block size {} does not match the model's {}",
            layout.block_size,
            model.block_size()
        )));
    }
    let t = outlier_threshold(model, q)?;
    if t.is_infinite() {
        return Ok(Vec::new());
    }
    let per_block: Vec<Vec<u64>> = weights
        .par_chunks(layout.block_size)
        .enumerate()
        .map(|(b, block)| {
            let Ok(sd) = block_std(block) else {
                return Vec::new();
            };
            if sd == 0.0 {
                return Vec::new();
            }
            let limit = sd * t;
            let base = (b * layout.block_size) as u64;
            block
                .iter()
                .enumerate()
                .filter(|(_, &v)| (v as f64).abs() > limit)
                .map(|(i, _)| base + i as u64)
                .collect()
        })
        .collect();
    Ok(per_block.concat())
}

/// Zero the outliers in a copy of `weights` and keep their rounded values.
pub fn excise_outliers(weights: &[f32], indices: &[u64]) -> Result<(Vec<f32>, OutlierSet)> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate outlier index".into()));
    }
    if let Some(&last) = sorted.last() {
        if last >= weights.len() as u64 {
            return Err(Error::InvalidInput(format!("outlier index {last} out of range")));
        }
    }
    let mut out = weights.to_vec();
    let mut values = Vec::with_capacity(sorted.len());
    for &i in &sorted {
        values.push(bf16::from_f32(weights[i as usize]));
        out[i as usize] = 0.0;
    }
    Ok((out, OutlierSet { indices: sorted, values, q: None }))
}

/// Overwrite the preserved positions with their stored values.
pub fn restore_outliers(dequantized: &mut [f32], set: &OutlierSet) -> Result<()> {
    set.validate(dequantized.len())?;
    for (&i, v) in set.indices.iter().zip(&set.values) {
        dequantized[i as usize] = v.to_f32();
    }
    Ok(())
}

/// Outlier storage (16-bit value plus 64-bit index each) relative to the
/// 4-bit codes and 16-bit constants.
pub fn memory_overhead(qt: &QuantizedTensor) -> f64 {
    overhead_for(qt.opq.as_ref().map_or(0, |s| s.len()), &qt.layout)
}

/// [`memory_overhead`] for `count` outliers in a tensor of shape `layout`.
pub fn overhead_for(count: usize, layout: &BlockLayout) -> f64 {
    let base = 4.0 * layout.element_count as f64 + 16.0 * layout.block_count() as f64;
    if count == 0 || base == 0.0 {
        return 0.0;
    }
    80.0 * count as f64 / base
}

/// Detect, excise, quantize and attach the outlier set in one step.
pub fn quantize_tensor_opq<D: DistributionModel>(
    weights: &[f32],
    codebook: &Codebook,
    mode: NormalizationMode,
    q: f64,
    model: &BlockMaxModel<D>,
) -> Result<QuantizedTensor> {
    let block_size = model.block_size();
    let layout = BlockLayout::new(weights.len(), block_size)?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite".into()));
    }
    let flagged = detect_outliers(weights, &layout, q, model)?;
    let (excised, mut set) = excise_outliers(weights, &flagged)?;
    set.q = Some(q);
    let mut qt = quantize_tensor(&excised, codebook, mode, block_size)?;
    qt.opq = Some(set);
    Ok(qt)
}
