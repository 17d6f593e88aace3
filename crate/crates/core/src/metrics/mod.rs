//! Error measurement, block-size sweeps and the constrained-level ablation.

use rayon::prelude::*;

use crate::codebook::{fixtures, lloyd_design, CentroidMethod, Codebook, CodebookSpec, DesignSource, Metric};
use crate::dist::{sample_weights, sampler_name, BlockMaxModel, DistributionModel, Gaussian, NormalizationMode};
use crate::error::{Error, Result};
use crate::opq::{excise_outliers, quantize_tensor_opq};
use crate::quant::{dequantize_tensor, quantize_tensor, BlockLayout};

/// Default number of weights in evaluation tensors.
pub const DEFAULT_EVAL_SAMPLES: usize = 1 << 22;

const SUM_CHUNK: usize = 1 << 14;

/// Neumaier-compensated sum.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean of `f(a_i - b_i)`, summed per fixed-size chunk with compensation so
/// the result does not depend on the thread count.
fn mean_of<F: Fn(f64) -> f64 + Sync>(a: &[f32], b: &[f32], f: F) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("error of an empty tensor".into()));
    }
    let partial: Vec<f64> = a
        .par_chunks(SUM_CHUNK)
        .zip(b.par_chunks(SUM_CHUNK))
        .map(|(x, y)| {
            let mut s = KahanSum::default();
            for (&u, &v) in x.iter().zip(y) {
                s.add(f(u as f64 - v as f64));
            }
            s.value()
        })
        .collect();
    let mut total = KahanSum::default();
    for p in partial {
        total.add(p);
    }
    Ok(total.value() / a.len() as f64)
}

pub fn tensor_mae(a: &[f32], b: &[f32]) -> Result<f64> {
    mean_of(a, b, f64::abs)
}

pub fn tensor_mse(a: &[f32], b: &[f32]) -> Result<f64> {
    mean_of(a, b, |d| d * d)
}

/// `n` standard Gaussian weights from `seed`.
pub fn gaussian_tensor(n: usize, seed: u64) -> Vec<f32> {
    sample_weights(&Gaussian::standard(), n, seed)
}

/// MAE and MSE of a quantize/dequantize round trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTripError {
    pub mae: f64,
    pub mse: f64,
    pub outliers: usize,
    pub memory_overhead: f64,
}

/// Quantize `weights` with `codebook` (optionally with outlier preservation
/// at quantile `q`) and measure the error of the reconstruction.
pub fn evaluate(weights: &[f32], codebook: &Codebook, block_size: usize, q: Option<f64>) -> Result<RoundTripError> {
    let mode = codebook.mode();
    let qt = match q {
        Some(q) => quantize_tensor_opq(weights, codebook, mode, q, &BlockMaxModel::gaussian(block_size)?)?,
        None => quantize_tensor(weights, codebook, mode, block_size)?,
    };
    let out = dequantize_tensor(&qt)?;
    Ok(RoundTripError {
        mae: tensor_mae(weights, &out)?,
        mse: tensor_mse(weights, &out)?,
        outliers: qt.opq.as_ref().map_or(0, |s| s.len()),
        memory_overhead: crate::opq::memory_overhead(&qt),
    })
}

/// A quantizer in a sweep.
#[derive(Debug, Clone)]
pub enum SweepSource {
    /// The same levels at every block size.
    Fixed(Codebook),
    /// A builtin name; tables where available, theoretical designs elsewhere.
    Builtin(String),
    /// A design spec, re-designed at every block size.
    Designed(CodebookSpec),
}

impl SweepSource {
    pub fn builtin(name: &str) -> Self {
        SweepSource::Builtin(name.to_string())
    }

    /// The codebook used at block size `block_size`.
    pub fn resolve(&self, block_size: usize) -> Result<Codebook> {
        match self {
            SweepSource::Fixed(cb) => Ok(cb.clone()),
            SweepSource::Builtin(name) => match fixtures::builtin(name, block_size)? {
                Some(cb) => Ok(cb),
                None => {
                    let spec = fixtures::builtin_spec(name, block_size)?.with_method(CentroidMethod::Theoretical);
                    let mut cb = lloyd_design(&spec, DesignSource::gaussian())?;
                    cb.name = name.clone();
                    Ok(cb)
                }
            },
            SweepSource::Designed(spec) => {
                let mut spec = spec.clone();
                spec.block_size = block_size;
                lloyd_design(&spec, DesignSource::gaussian())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            SweepSource::Fixed(cb) => cb.name.clone(),
            SweepSource::Builtin(name) => name.clone(),
            SweepSource::Designed(spec) => {
                let mut s = spec.clone();
                s.block_size = 0;
                s.default_name().replace("-i0", "")
            }
        }
    }
}

/// One `(quantizer, block size)` measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub mode: NormalizationMode,
    pub metric: Metric,
    pub block_size: usize,
    pub opq: bool,
    pub q: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Generator used for the evaluation tensor.
    pub sampler: String,
}

pub const SWEEP_CSV_HEADER: &str = "name,mode,metric,block_size,opq,q,mae,mse,samples,seed";

/// Nine significant digits.
fn sci(v: f64) -> String {
    format!("{v:.8e}")
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.name,
                r.mode,
                r.metric,
                r.block_size,
                r.opq,
                r.q.map(sci).unwrap_or_default(),
                sci(r.mae),
                sci(r.mse),
                r.samples,
                r.seed
            ));
        }
        s
    }

    /// The row for `name` at `block_size`.
    pub fn get(&self, name: &str, block_size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.name == name && r.block_size == block_size)
    }
}

/// Evaluate every source at every block size on one Gaussian tensor of
/// `sample_count` weights drawn from `seed`. Rows follow the order of
/// `sources`, then `block_sizes`.
pub fn run_sweep(
    sources: &[SweepSource],
    block_sizes: &[usize],
    sample_count: usize,
    seed: u64,
    opq_q: Option<f64>,
) -> Result<SweepReport> {
    let weights = gaussian_tensor(sample_count, seed);
    let configs: Vec<(&SweepSource, usize)> =
        sources.iter().flat_map(|s| block_sizes.iter().map(move |&i| (s, i))).collect();
    let rows = configs
        .par_iter()
        .map(|&(source, i)| {
            let cb = source.resolve(i)?;
            let e = evaluate(&weights, &cb, i, opq_q)?;
            Ok(SweepRow {
                name: source.name(),
                mode: cb.mode(),
                metric: cb.spec.metric,
                block_size: i,
                opq: opq_q.is_some(),
                q: opq_q,
                mae: e.mae,
                mse: e.mse,
                samples: sample_count,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows, sampler: sampler_name(&Gaussian::standard()) })
}

/// One constraint set of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub constraints: Vec<f64>,
    pub codebook: Codebook,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub block_size: usize,
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "constraints,name,block_size,mae,mse,samples,seed";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.codebook.name,
                self.block_size,
                sci(r.mae),
                sci(r.mse),
                self.samples,
                self.seed
            ));
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Whether the unconstrained design beats the `{0, ±1}` design in MSE.
    pub fn ordering_holds(&self) -> bool {
        match (self.row("none"), self.row("0;-1;1")) {
            (Some(a), Some(b)) => a.mse < b.mse,
            _ => false,
        }
    }
}

/// Constraint sets of the ablation: none, `{0}`, `{±1}` and `{0, ±1}`.
pub fn ablation_sets() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("none", vec![]),
        ("0", vec![0.0]),
        ("-1;1", vec![-1.0, 1.0]),
        ("0;-1;1", vec![-1.0, 0.0, 1.0]),
    ]
}

/// Design BOF4 (MSE, absolute) at block size `block_size` under each
/// constraint set and measure all of them on one Gaussian tensor.
pub fn constrained_ablation(block_size: usize, sample_count: usize, seed: u64) -> Result<AblationReport> {
    let weights = gaussian_tensor(sample_count, seed);
    let rows = ablation_sets()
        .into_par_iter()
        .map(|(label, constraints)| {
            let spec = CodebookSpec::bof4(Metric::Mse, block_size).with_constraints(constraints.clone());
            let cb = lloyd_design(&spec, DesignSource::gaussian())?;
            let e = evaluate(&weights, &cb, block_size, None)?;
            Ok(AblationRow { label: label.to_string(), constraints, codebook: cb, mae: e.mae, mse: e.mse })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { block_size, samples: sample_count, seed, rows })
}

/// Kolmogorov-Smirnov distance between the normalized non-maximum weights of
/// `weights` and the continuous marginal CDF of `model`. Blocks are
/// normalized by their exact absolute maximum, whose element is left out.
/// With `outliers`, those positions are zeroed before normalization and
/// left out as well.
pub fn normalized_ks_distance<D: DistributionModel>(
    weights: &[f32],
    model: &BlockMaxModel<D>,
    outliers: Option<&[u64]>,
) -> Result<f64> {
    let block_size = model.block_size();
    let layout = BlockLayout::new(weights.len(), block_size)?;
    let (work, skip) = match outliers {
        Some(idx) => {
            let (w, set) = excise_outliers(weights, idx)?;
            (w, set.indices)
        }
        None => (weights.to_vec(), Vec::new()),
    };
    let mut xs: Vec<f64> = (0..layout.block_count())
        .into_par_iter()
        .flat_map_iter(|b| {
            let r = layout.block_range(b);
            let block = &work[r.clone()];
            let (arg, c) = block
                .iter()
                .enumerate()
                .fold((0, 0.0f32), |(ai, am), (i, &v)| if v.abs() > am { (i, v.abs()) } else { (ai, am) });
            let skip = &skip;
            block.iter().enumerate().filter_map(move |(i, &v)| {
                let pos = (r.start + i) as u64;
                if c == 0.0 || i == arg || skip.binary_search(&pos).is_ok() {
                    None
                } else {
                    Some(v as f64 / c as f64)
                }
            })
        })
        .collect();
    if xs.is_empty() {
        return Err(Error::InvalidInput("no normalized weights to compare".into()));
    }
    xs.par_sort_unstable_by(f64::total_cmp);

    const GRID: usize = 4000;
    let grid: Vec<f64> = (0..=GRID).map(|j| -1.0 + 2.0 * j as f64 / GRID as f64).collect();
    let cdf: Vec<f64> = grid.par_iter().map(|&x| model.marginal_cont_cdf(x)).collect();
    let interp = |x: f64| {
        let t = ((x + 1.0) * 0.5 * GRID as f64).clamp(0.0, GRID as f64);
        let j = (t.floor() as usize).min(GRID - 1);
        let f = t - j as f64;
        cdf[j] + f * (cdf[j + 1] - cdf[j])
    };
    let n = xs.len() as f64;
    let d = xs
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = interp(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .reduce(|| 0.0, f64::max);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn error_examples() {
        assert_eq!(tensor_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(tensor_mae(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(tensor_mse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(tensor_mse(&[1.0], &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(tensor_mae(&[], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compensation_survives_cancellation() {
        // a naive f32 accumulator loses all of the small terms here
        let n = 1 << 20;
        let a: Vec<f32> = (0..n).map(|i| if i == 0 { 1e4 } else { 1e-4 }).collect();
        let b = vec![0.0f32; n];
        let want = (1e8 + (n - 1) as f64 * (1e-4f32 as f64).powi(2)) / n as f64;
        let got = tensor_mse(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-14 * want);
    }

    proptest! {
        #[test]
        fn matches_naive_sum(pairs in prop::collection::vec((-100.0f32..100.0, -100.0f32..100.0), 1..3000)) {
            let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let n = a.len() as f64;
            let mse: f64 = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
            let mae: f64 = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n;
            prop_assert!((tensor_mse(&a, &b).unwrap() - mse).abs() <= 1e-12 * mse.max(1e-300));
            prop_assert!((tensor_mae(&a, &b).unwrap() - mae).abs() <= 1e-12 * mae.max(1e-300));
        }
    }

    #[test]
    fn csv_layout() {
        let report = SweepReport {
            rows: vec![SweepRow {
                name: "nf4".into(),
                mode: NormalizationMode::Absolute,
                metric: Metric::Mse,
                block_size: 64,
                opq: true,
                q: Some(0.95),
                mae: 0.1,
                mse: 0.0123456789012,
                samples: 1024,
                seed: 3,
            }],
            sampler: "x".into(),
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "nf4,absolute,mse,64,true,9.50000000e-1,1.00000000e-1,1.23456789e-2,1024,3"
        );
    }

    #[test]
    fn sweep_is_reproducible_and_ordered() {
        let sources = [SweepSource::builtin("nf4"), SweepSource::builtin("bof4s-mse")];
        let a = run_sweep(&sources, &[32, 64], 1 << 14, 9, None).unwrap();
        let b = run_sweep(&sources, &[32, 64], 1 << 14, 9, None).unwrap();
        assert_eq!(a, b);
        let order: Vec<_> = a.rows.iter().map(|r| (r.name.as_str(), r.block_size)).collect();
        assert_eq!(order, vec![("nf4", 32), ("nf4", 64), ("bof4s-mse", 32), ("bof4s-mse", 64)]);
        assert_eq!(a.rows[2].mode, NormalizationMode::Signed);
        assert_eq!(a.sampler, "chacha8-ziggurat");
    }

    #[test]
    fn ks_of_model_samples_is_small() {
        let model = BlockMaxModel::gaussian(16).unwrap();
        let w = gaussian_tensor(1 << 16, 4);
        let d = normalized_ks_distance(&w, &model, None).unwrap();
        assert!(d < 0.01, "{d}");
        let mut spiked = w.clone();
        for j in (0..spiked.len()).step_by(100) {
            spiked[j] = 10.0;
        }
        let worse = normalized_ks_distance(&spiked, &model, None).unwrap();
        let idx: Vec<u64> = (0..spiked.len() as u64).step_by(100).collect();
        let excised = normalized_ks_distance(&spiked, &model, Some(&idx)).unwrap();
        assert!(worse > 5.0 * d && excised < worse);
    }
}
