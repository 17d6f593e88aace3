//! Block-wise absmax quantization of flat tensors to 4-bit codes.

use half::bf16;
use rayon::prelude::*;

use crate::codebook::Codebook;
use crate::dist::NormalizationMode;
use crate::error::{Error, Result};
use crate::opq::{self, OutlierSet};

/// How a flat tensor of `element_count` values is cut into blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub element_count: usize,
    pub block_size: usize,
}

impl BlockLayout {
    pub fn new(element_count: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidInput("block size must be at least 1".into()));
        }
        Ok(BlockLayout { element_count, block_size })
    }

    pub fn block_count(&self) -> usize {
        self.element_count.div_ceil(self.block_size)
    }

    /// Length of the last block when it is short, 0 when all blocks are full.
    pub fn tail_len(&self) -> usize {
        self.element_count % self.block_size
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(self.element_count)
    }
}

/// A quantized tensor: one 4-bit code per element (two per byte, low nibble
/// first), one 16-bit constant per block and the level table the codes
/// index into.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub layout: BlockLayout,
    pub mode: NormalizationMode,
    pub levels: [f32; 16],
    pub codes: Vec<u8>,
    pub constants: Vec<bf16>,
    pub opq: Option<OutlierSet>,
}

/// A rounded block constant; `degenerate` marks blocks without a usable
/// scale (all zeros, or a maximum that rounds to zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConstant {
    pub value: bf16,
    pub degenerate: bool,
}

/// `max |w|` (absolute) or the signed value of the first element of largest
/// magnitude (signed), rounded to nearest-even bfloat16.
pub fn block_constant(block: &[f32], mode: NormalizationMode) -> Result<BlockConstant> {
    if block.is_empty() {
        return Err(Error::InvalidInput("empty block".into()));
    }
    let mut c = 0.0f32;
    for &v in block {
        if v.is_nan() {
            return Err(Error::InvalidInput("NaN weight".into()));
        }
        if v.abs() > c.abs() {
            c = v;
        }
    }
    if mode == NormalizationMode::Absolute {
        c = c.abs();
    }
    let value = bf16::from_f32(c);
    if value.is_infinite() || c.is_infinite() {
        return Err(Error::InvalidInput(format!("block maximum {c} exceeds the 16-bit range")));
    }
    let degenerate = value.to_f32() == 0.0;
    Ok(BlockConstant { value: if degenerate { bf16::ZERO } else { value }, degenerate })
}

/// Code used for degenerate blocks: the level 0, or else the level of
/// smallest magnitude.
pub fn zero_code(levels: &[f32; 16]) -> u8 {
    let mut best = 0;
    for (i, l) in levels.iter().enumerate() {
        if l.abs() < levels[best].abs() {
            best = i;
        }
    }
    best as u8
}

/// Quantize `weights` block by block with `codebook`.
pub fn quantize_tensor(
    weights: &[f32],
    codebook: &Codebook,
    mode: NormalizationMode,
    block_size: usize,
) -> Result<QuantizedTensor> {
    if codebook.mode() != mode {
        return Err(Error::IncompatibleCodebooks(format!(
            "codebook '{}' is designed for {} normalization, not {mode}",
            codebook.name,
            codebook.mode()
        )));
    }
    let levels = codebook.levels_f32()?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite".into()));
    }
    let layout = BlockLayout::new(weights.len(), block_size)?;
    let inner = &codebook.thresholds[1..16];
    let zero = zero_code(&levels);

    let mut codes = vec![0u8; weights.len()];
    let constants: Vec<bf16> = weights
        .par_chunks(block_size)
        .zip(codes.par_chunks_mut(block_size))
        .map(|(block, out)| {
            let c = block_constant(block, mode)?;
            if c.degenerate {
                out.fill(zero);
            } else {
                let scale = c.value.to_f64();
                for (o, &w) in out.iter_mut().zip(block) {
                    let x = w as f64 / scale;
                    *o = inner.partition_point(|&t| t <= x) as u8;
                }
            }
            Ok(c.value)
        })
        .collect::<Result<_>>()?;

    Ok(QuantizedTensor { layout, mode, levels, codes: pack_codes(&codes)?, constants, opq: None })
}

/// Decode to 32-bit floats: `constant * level`, then restore any preserved
/// outliers.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Result<Vec<f32>> {
    let n = qt.layout.element_count;
    if qt.constants.len() != qt.layout.block_count() {
        return Err(Error::CorruptData(format!(
            "{} constants for {} blocks",
            qt.constants.len(),
            qt.layout.block_count()
        )));
    }
    let codes = unpack_codes(&qt.codes, n)?;
    let mut out = vec![0.0f32; n];
    out.par_chunks_mut(qt.layout.block_size)
        .zip(codes.par_chunks(qt.layout.block_size))
        .zip(qt.constants.par_iter())
        .try_for_each(|((o, cs), c)| {
            let scale = c.to_f32();
            for (v, &code) in o.iter_mut().zip(cs) {
                let level = qt.levels.get(code as usize).ok_or_else(|| Error::CorruptData(format!("code {code}")))?;
                *v = scale * level;
            }
            Ok::<_, Error>(())
        })?;
    if let Some(set) = &qt.opq {
        opq::restore_outliers(&mut out, set)?;
    }
    Ok(out)
}

/// Pack 4-bit indices two per byte, even elements in the low nibble.
pub fn pack_codes(indices: &[u8]) -> Result<Vec<u8>> {
    if let Some(&bad) = indices.iter().find(|&&c| c >= 16) {
        return Err(Error::Range(format!("code {bad} does not fit in 4 bits")));
    }
    Ok(indices
        .par_chunks(2)
        .map(|p| p[0] | p.get(1).map_or(0, |&h| h << 4))
        .collect())
}

/// Inverse of [`pack_codes`] for `n` elements.
pub fn unpack_codes(bytes: &[u8], n: usize) -> Result<Vec<u8>> {
    if bytes.len() != n.div_ceil(2) {
        return Err(Error::CorruptData(format!(
            "{} code bytes for {n} elements",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        out.push(b & 0x0F);
        out.push(b >> 4);
    }
    out.truncate(n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fixtures;
    use proptest::prelude::*;

    fn bof4s() -> Codebook {
        fixtures::builtin("bof4s-mse", 64).unwrap().unwrap()
    }

    fn bof4() -> Codebook {
        fixtures::builtin("bof4-mse", 64).unwrap().unwrap()
    }

    #[test]
    fn layout_counts() {
        let l = BlockLayout::new(130, 64).unwrap();
        assert_eq!((l.block_count(), l.tail_len()), (3, 2));
        assert_eq!(l.block_range(2), 128..130);
        assert_eq!(BlockLayout::new(128, 64).unwrap().tail_len(), 0);
        assert!(BlockLayout::new(5, 0).is_err());
    }

    #[test]
    fn constants_by_mode() {
        let b = [-3.0f32, 1.0, 2.0];
        assert_eq!(block_constant(&b, NormalizationMode::Absolute).unwrap().value.to_f32(), 3.0);
        assert_eq!(block_constant(&b, NormalizationMode::Signed).unwrap().value.to_f32(), -3.0);
        let z = block_constant(&[0.0, 0.0, 0.0], NormalizationMode::Signed).unwrap();
        assert!(z.degenerate && z.value.to_f32() == 0.0);
        let tie = block_constant(&[2.0, -2.0], NormalizationMode::Signed).unwrap();
        assert_eq!(tie.value.to_f32(), 2.0);
        assert!(block_constant(&[f32::MAX], NormalizationMode::Absolute).is_err());
        assert!(block_constant(&[], NormalizationMode::Absolute).is_err());
    }

    #[test]
    fn bfloat16_rounding_is_nearest_even() {
        // 1 + 2^-8 sits halfway between 1 and 1 + 2^-7
        let c = block_constant(&[1.0 + 1.0 / 256.0], NormalizationMode::Absolute).unwrap();
        assert_eq!(c.value.to_f32(), 1.0);
        let c = block_constant(&[1.0 + 3.0 / 256.0], NormalizationMode::Absolute).unwrap();
        assert_eq!(c.value.to_f32(), 1.0 + 4.0 / 256.0);
    }

    #[test]
    fn signed_block_example() {
        let qt = quantize_tensor(&[-4.0, 1.0, 2.0, 0.0], &bof4s(), NormalizationMode::Signed, 64).unwrap();
        let codes = unpack_codes(&qt.codes, 4).unwrap();
        // normalized [1, -0.25, -0.5, 0]
        assert_eq!(codes, vec![15, 4, 2, 7]);
        assert_eq!(qt.constants[0].to_f32(), -4.0);
        let out = dequantize_tensor(&qt).unwrap();
        assert_eq!(out[0], -4.0);
        assert_eq!(out[3], 0.0);
        assert!((out[1] - -4.0 * -0.291_063_82_f32).abs() < 1e-6);
    }

    #[test]
    fn degenerate_blocks_decode_to_zero() {
        let w = vec![0.0f32; 100];
        let qt = quantize_tensor(&w, &bof4(), NormalizationMode::Absolute, 64).unwrap();
        assert!(dequantize_tensor(&qt).unwrap().iter().all(|&v| v == 0.0));
        let mut levels = bof4().levels_f32().unwrap();
        assert_eq!(zero_code(&levels), 7);
        levels[7] = 0.01;
        levels[8] = -0.005;
        assert_eq!(zero_code(&levels), 8);
    }

    #[test]
    fn rejects_bad_input() {
        let cb = bof4();
        assert!(matches!(
            quantize_tensor(&[1.0, f32::NAN], &cb, NormalizationMode::Absolute, 64),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            quantize_tensor(&[1.0], &cb, NormalizationMode::Signed, 64),
            Err(Error::IncompatibleCodebooks(_))
        ));
    }

    #[test]
    fn packing_examples() {
        assert_eq!(pack_codes(&[1, 2]).unwrap(), vec![0x21]);
        assert_eq!(pack_codes(&[15]).unwrap(), vec![0x0F]);
        assert!(matches!(pack_codes(&[16]), Err(Error::Range(_))));
        assert!(matches!(unpack_codes(&[0x21], 3), Err(Error::CorruptData(_))));
        assert_eq!(unpack_codes(&[], 0).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn sign_positive_blocks_agree_across_modes() {
        let w = [0.3f32, -0.2, 0.9, 0.1];
        let abs_cb = fixtures::builtin("nf4", 4).unwrap().unwrap();
        let mut sgn_cb = abs_cb.clone();
        sgn_cb.spec.mode = NormalizationMode::Signed;
        let a = quantize_tensor(&w, &abs_cb, NormalizationMode::Absolute, 4).unwrap();
        let s = quantize_tensor(&w, &sgn_cb, NormalizationMode::Signed, 4).unwrap();
        assert_eq!(a.codes, s.codes);
        assert_eq!(a.constants, s.constants);
    }

    proptest! {
        #[test]
        fn pack_round_trip(codes in prop::collection::vec(0u8..16, 0..300)) {
            let packed = pack_codes(&codes).unwrap();
            prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
            prop_assert_eq!(unpack_codes(&packed, codes.len()).unwrap(), codes);
        }

        #[test]
        fn codes_are_nearest_levels(w in prop::collection::vec(-10.0f32..10.0, 1..200), i in 1usize..70) {
            let cb = bof4();
            let qt = quantize_tensor(&w, &cb, NormalizationMode::Absolute, i).unwrap();
            let codes = unpack_codes(&qt.codes, w.len()).unwrap();
            for (j, &code) in codes.iter().enumerate() {
                let c = qt.constants[j / i].to_f64();
                if c == 0.0 {
                    continue;
                }
                let x = w[j] as f64 / c;
                let d = (x - cb.levels[code as usize]).abs();
                prop_assert!(cb.levels.iter().all(|&l| (x - l).abs() >= d - 1e-15));
            }
        }

        #[test]
        fn scaling_by_power_of_two_scales_constants(w in prop::collection::vec(-10.0f32..10.0, 1..200), e in -4i32..4) {
            let cb = bof4();
            let c = 2f32.powi(e);
            let scaled: Vec<f32> = w.iter().map(|v| v * c).collect();
            let a = quantize_tensor(&w, &cb, NormalizationMode::Absolute, 16).unwrap();
            let b = quantize_tensor(&scaled, &cb, NormalizationMode::Absolute, 16).unwrap();
            prop_assert_eq!(&a.codes, &b.codes);
            for (x, y) in a.constants.iter().zip(&b.constants) {
                prop_assert_eq!(x.to_f32() * c, y.to_f32());
            }
        }
    }
}
