//! Serialization: raw `f32` tensors, the `BQT1` quantized container and
//! codebook JSON documents.
//!
//! `BQT1` layout, all fields little-endian:
//!
//! | field | size |
//! |---|---|
//! | magic `BQT1` | 4 |
//! | version (1) | 1 |
//! | mode (0 absolute, 1 signed) | 1 |
//! | flags (bit 0: outliers present) | 1 |
//! | reserved (0) | 1 |
//! | block size | 4 |
//! | element count `N` | 8 |
//! | levels | 16 × 4 |
//! | codes | `ceil(N / 2)` |
//! | block constants (bfloat16) | `2 B` |
//! | outlier count | 8, only with flag bit 0 |
//! | outliers (index, bfloat16) | 10 each |

use std::path::Path;

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::codebook::{CentroidMethod, Codebook, CodebookSpec, Metric, Objective, Provenance};
use crate::dist::NormalizationMode;
use crate::error::{Error, Result};
use crate::opq::OutlierSet;
use crate::quant::{BlockLayout, QuantizedTensor};

pub const MAGIC: [u8; 4] = *b"BQT1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
const FLAG_OPQ: u8 = 1;

/// Fixed-size prefix of a `BQT1` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub mode: u8,
    pub flags: u8,
    pub block_size: u32,
    pub element_count: u64,
}

impl ContainerHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5] = self.mode;
        b[6] = self.flags;
        b[7] = 0;
        b[8..12].copy_from_slice(&self.block_size.to_le_bytes());
        b[12..20].copy_from_slice(&self.element_count.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::UnsupportedFormat("missing BQT1 magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptData(format!("header truncated at {} bytes", bytes.len())));
        }
        let h = ContainerHeader {
            version: bytes[4],
            mode: bytes[5],
            flags: bytes[6],
            block_size: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            element_count: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        };
        if h.version != VERSION {
            return Err(Error::UnsupportedFormat(format!("BQT1 version {}", h.version)));
        }
        if h.mode > 1 {
            return Err(Error::CorruptData(format!("mode byte {}", h.mode)));
        }
        if h.flags & !FLAG_OPQ != 0 || bytes[7] != 0 {
            return Err(Error::CorruptData("unknown flag bits".into()));
        }
        if h.block_size == 0 {
            return Err(Error::CorruptData("block size 0".into()));
        }
        Ok(h)
    }
}

fn mode_byte(mode: NormalizationMode) -> u8 {
    match mode {
        NormalizationMode::Absolute => 0,
        NormalizationMode::Signed => 1,
    }
}

/// Serialize a quantized tensor.
pub fn write_quantized(qt: &QuantizedTensor) -> Result<Vec<u8>> {
    let n = qt.layout.element_count;
    if qt.codes.len() != n.div_ceil(2) || qt.constants.len() != qt.layout.block_count() {
        return Err(Error::InvalidInput("tensor parts do not match its layout".into()));
    }
    let block_size = u32::try_from(qt.layout.block_size)
        .map_err(|_| Error::Range(format!("block size {} exceeds 32 bits", qt.layout.block_size)))?;
    let header = ContainerHeader {
        version: VERSION,
        mode: mode_byte(qt.mode),
        flags: if qt.opq.is_some() { FLAG_OPQ } else { 0 },
        block_size,
        element_count: n as u64,
    };
    let outliers = qt.opq.as_ref().map_or(0, |s| s.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 64 + qt.codes.len() + 2 * qt.constants.len() + 8 + 10 * outliers);
    out.extend_from_slice(&header.to_bytes());
    for l in qt.levels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&qt.codes);
    for c in &qt.constants {
        out.extend_from_slice(&c.to_bits().to_le_bytes());
    }
    if let Some(set) = &qt.opq {
        set.validate(n).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.extend_from_slice(&(set.len() as u64).to_le_bytes());
        for (i, v) in set.indices.iter().zip(&set.values) {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptData(format!("truncated {what}: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a `BQT1` container.
pub fn read_quantized(bytes: &[u8]) -> Result<QuantizedTensor> {
    let h = ContainerHeader::parse(bytes)?;
    let n = usize::try_from(h.element_count).map_err(|_| Error::CorruptData("element count too large".into()))?;
    let layout = BlockLayout::new(n, h.block_size as usize)?;
    let mut r = Reader { bytes, pos: HEADER_LEN };

    let mut levels = [0.0f32; 16];
    for l in levels.iter_mut() {
        *l = f32::from_le_bytes(r.take(4, "levels")?.try_into().unwrap());
        if !l.is_finite() {
            return Err(Error::CorruptData("non-finite level".into()));
        }
    }
    let codes = r.take(n.div_ceil(2), "codes")?.to_vec();
    if n % 2 == 1 && codes[codes.len() - 1] >> 4 != 0 {
        return Err(Error::CorruptData("nonzero padding nibble".into()));
    }
    let b = layout.block_count();
    if b.checked_mul(2).is_none_or(|len| len > bytes.len()) {
        return Err(Error::CorruptData("truncated constants".into()));
    }
    let mut constants = Vec::with_capacity(b);
    for _ in 0..b {
        constants.push(bf16::from_bits(r.u16("constants")?));
    }
    let opq = if h.flags & FLAG_OPQ != 0 {
        let count = r.u64("outlier count")?;
        if count.checked_mul(10).is_none_or(|len| len > (bytes.len() - r.pos) as u64) {
            return Err(Error::CorruptData(format!("truncated outliers: {count} announced")));
        }
        let mut indices = Vec::with_capacity(count as usize);
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            indices.push(r.u64("outlier index")?);
            values.push(bf16::from_bits(r.u16("outlier value")?));
        }
        let set = OutlierSet { indices, values, q: None };
        set.validate(n)?;
        Some(set)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::CorruptData(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mode = if h.mode == 0 { NormalizationMode::Absolute } else { NormalizationMode::Signed };
    Ok(QuantizedTensor { layout, mode, levels, codes, constants, opq })
}

/// Flat little-endian `f32` values.
pub fn write_raw_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_raw_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::CorruptData(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<f32>> {
    read_raw_f32(&std::fs::read(path)?)
}

pub fn write_tensor_file(path: &Path, values: &[f32]) -> Result<()> {
    Ok(std::fs::write(path, write_raw_f32(values))?)
}

pub fn read_quantized_file(path: &Path) -> Result<QuantizedTensor> {
    read_quantized(&std::fs::read(path)?)
}

pub fn write_quantized_file(path: &Path, qt: &QuantizedTensor) -> Result<()> {
    Ok(std::fs::write(path, write_quantized(qt)?)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceDoc {
    method: String,
    seed: Option<u64>,
    sample_count: Option<u64>,
    iterations: usize,
    final_objective: Option<f64>,
    #[serde(default = "yes")]
    converged: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookDoc {
    name: String,
    num_levels: usize,
    block_size: usize,
    mode: NormalizationMode,
    metric: Metric,
    objective: Objective,
    constrained: Vec<f64>,
    levels: Vec<f64>,
    provenance: ProvenanceDoc,
}

/// Pretty-printed JSON; levels are written with the shortest decimal form
/// that reads back to the same value.
pub fn write_codebook_json(cb: &Codebook) -> Result<String> {
    let p = &cb.provenance;
    let doc = CodebookDoc {
        name: cb.name.clone(),
        num_levels: cb.num_levels(),
        block_size: cb.block_size(),
        mode: cb.mode(),
        metric: cb.spec.metric,
        objective: cb.spec.objective,
        constrained: cb.spec.constrained_levels.iter().map(|&c| c as f32 as f64).collect(),
        levels: cb.levels.clone(),
        provenance: ProvenanceDoc {
            method: p.method.clone(),
            seed: p.seed,
            sample_count: p.sample_count,
            iterations: p.iterations,
            final_objective: p.final_objective.filter(|v| v.is_finite()),
            converged: p.converged,
        },
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn read_codebook_json(text: &str) -> Result<Codebook> {
    let doc: CodebookDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if doc.levels.len() != doc.num_levels {
        return Err(Error::Schema(format!(
            "num_levels is {} but {} levels are listed",
            doc.num_levels,
            doc.levels.len()
        )));
    }
    if doc.levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Schema("levels must be strictly increasing".into()));
    }
    if doc.levels.iter().any(|&l| l as f32 as f64 != l) {
        return Err(Error::Schema("levels must be 32-bit float values".into()));
    }
    if let Some(c) = doc.constrained.iter().find(|&&c| !doc.levels.contains(&(c as f32 as f64))) {
        return Err(Error::Schema(format!("constrained level {c} is not among the levels")));
    }
    let p = doc.provenance;
    let mut spec = CodebookSpec::new(doc.mode, doc.metric, doc.block_size)
        .with_num_levels(doc.num_levels)
        .with_objective(doc.objective)
        .with_constraints(doc.constrained);
    if p.method == "empirical" {
        spec.centroid_method = CentroidMethod::Empirical;
    }
    if let Some(s) = p.sample_count {
        spec.sample_count = s as usize;
    }
    if let Some(s) = p.seed {
        spec.seed = s;
    }
    let provenance = Provenance {
        method: p.method,
        seed: p.seed,
        sample_count: p.sample_count,
        iterations: p.iterations,
        final_objective: p.final_objective,
        converged: p.converged,
    };
    Codebook::new(doc.name, &doc.levels, spec, provenance).map_err(|e| Error::Schema(e.to_string()))
}

pub fn read_codebook_file(path: &Path) -> Result<Codebook> {
    read_codebook_json(&std::fs::read_to_string(path)?)
}

pub fn write_codebook_file(path: &Path, cb: &Codebook) -> Result<()> {
    Ok(std::fs::write(path, write_codebook_json(cb)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fixtures;
    use crate::quant::quantize_tensor;
    use proptest::prelude::*;

    fn cb() -> Codebook {
        fixtures::builtin("bof4-mse", 64).unwrap().unwrap()
    }

    #[test]
    fn header_layout() {
        let qt = quantize_tensor(&[1.0, -2.0, 0.5], &cb(), NormalizationMode::Absolute, 2).unwrap();
        let bytes = write_quantized(&qt).unwrap();
        assert_eq!(&bytes[..4], b"BQT1");
        assert_eq!(bytes[4..8], [1, 0, 0, 0]);
        assert_eq!(bytes[8..12], 2u32.to_le_bytes());
        assert_eq!(bytes[12..20], 3u64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 64 + 2 + 4);
        assert_eq!(bytes[20..24], (-1.0f32).to_le_bytes());
        // first block constant 2.0 is 0x4000
        assert_eq!(bytes[86..88], [0x00, 0x40]);
    }

    #[test]
    fn empty_and_odd_tensors_round_trip() {
        for w in [vec![], vec![0.25f32]] {
            let qt = quantize_tensor(&w, &cb(), NormalizationMode::Absolute, 64).unwrap();
            let bytes = write_quantized(&qt).unwrap();
            let back = read_quantized(&bytes).unwrap();
            assert_eq!(back, qt);
            assert_eq!(write_quantized(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_damaged_containers() {
        let qt = quantize_tensor(&[1.0, 2.0, 3.0], &cb(), NormalizationMode::Absolute, 64).unwrap();
        let bytes = write_quantized(&qt).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_quantized(&bad), Err(Error::UnsupportedFormat(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_quantized(&bad), Err(Error::UnsupportedFormat(_))));
        for cut in [10, 50, bytes.len() - 1] {
            assert!(matches!(read_quantized(&bytes[..cut]), Err(Error::CorruptData(_))), "{cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_quantized(&long), Err(Error::CorruptData(_))));
        let mut huge = bytes.clone();
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_quantized(&huge), Err(Error::CorruptData(_))));
        let mut flagged = bytes.clone();
        flagged[6] = 1;
        assert!(matches!(read_quantized(&flagged), Err(Error::CorruptData(_))));
    }

    #[test]
    fn outlier_section() {
        let mut qt = quantize_tensor(&[1.0, 0.0, 3.0, -0.5, 2.0], &cb(), NormalizationMode::Absolute, 2).unwrap();
        qt.opq = Some(OutlierSet {
            indices: vec![1, 4],
            values: vec![bf16::from_f32(7.0), bf16::from_f32(-9.0)],
            q: Some(0.9),
        });
        let bytes = write_quantized(&qt).unwrap();
        assert_eq!(bytes[6], 1);
        let back = read_quantized(&bytes).unwrap();
        assert_eq!(back.opq.as_ref().unwrap().indices, vec![1, 4]);
        assert_eq!(back.opq.as_ref().unwrap().q, None);
        assert_eq!(write_quantized(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        let at = bytes.len() - 10;
        bad[at..at + 8].copy_from_slice(&99u64.to_le_bytes());
        assert!(matches!(read_quantized(&bad), Err(Error::CorruptData(_))));
    }

    #[test]
    fn raw_tensors() {
        let v = [1.5f32, -0.0, f32::MIN_POSITIVE];
        assert_eq!(read_raw_f32(&write_raw_f32(&v)).unwrap(), v.to_vec());
        assert!(matches!(read_raw_f32(&[0, 0, 0]), Err(Error::CorruptData(_))));
    }

    #[test]
    fn fixture_json_round_trip() {
        for name in fixtures::BUILTIN_NAMES {
            let c = fixtures::builtin(name, 64).unwrap().unwrap();
            let text = write_codebook_json(&c).unwrap();
            let back = read_codebook_json(&text).unwrap();
            assert_eq!(back.levels, c.levels);
            assert_eq!(back, c);
            assert_eq!(write_codebook_json(&back).unwrap(), text);
        }
    }

    #[test]
    fn json_schema_errors() {
        let text = write_codebook_json(&cb()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();

        let mut extra = v.clone();
        extra["color"] = "red".into();
        assert!(matches!(read_codebook_json(&extra.to_string()), Err(Error::Schema(_))));

        let mut missing = v.clone();
        missing.as_object_mut().unwrap().remove("metric");
        assert!(matches!(read_codebook_json(&missing.to_string()), Err(Error::Schema(_))));

        let mut swapped = v.clone();
        swapped["levels"][3] = 0.9.into();
        assert!(matches!(read_codebook_json(&swapped.to_string()), Err(Error::Schema(_))));

        v["constrained"] = serde_json::json!([-1.0, 0.5, 1.0]);
        assert!(matches!(read_codebook_json(&v.to_string()), Err(Error::Schema(_))));
    }

    fn tensor() -> impl Strategy<Value = (Vec<f32>, usize, bool, Vec<u64>)> {
        (prop::collection::vec(-50.0f32..50.0, 0..300), 1usize..80, any::<bool>())
            .prop_flat_map(|(w, i, signed)| {
                let n = w.len() as u64;
                let idx = prop::collection::btree_set(0..n.max(1), 0..=(n as usize).min(5));
                (Just(w), Just(i), Just(signed), idx.prop_map(|s| s.into_iter().collect()))
            })
    }

    proptest! {
        #[test]
        fn containers_round_trip_byte_identical((w, i, signed, idx) in tensor()) {
            let (mode, name) = if signed {
                (NormalizationMode::Signed, "bof4s-mse")
            } else {
                (NormalizationMode::Absolute, "bof4-mse")
            };
            let c = fixtures::builtin(name, 64).unwrap().unwrap();
            let mut qt = quantize_tensor(&w, &c, mode, i).unwrap();
            if !w.is_empty() {
                let (_, set) = crate::opq::excise_outliers(&w, &idx).unwrap();
                qt.opq = Some(set);
            }
            let bytes = write_quantized(&qt).unwrap();
            let back = read_quantized(&bytes).unwrap();
            prop_assert_eq!(&back, &qt);
            prop_assert_eq!(write_quantized(&back).unwrap(), bytes);
        }
    }
}
