//! Codebook design with a modified Lloyd algorithm.
//!
//! Free levels alternate between a nearest-neighbor partition and a centroid
//! update; constrained levels keep their fixed values throughout. Centroids
//! either come from numerical integration against the analytic distribution
//! of `(M, X)` or from a fixed Monte-Carlo sample set.

mod centroid;
mod empirical;
pub mod fixtures;
mod theoretical;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{BlockMaxModel, DistributionModel, Gaussian, NormalizationMode};
use crate::error::{Error, Result};

pub use centroid::{centroid_mae_empirical, centroid_mse_empirical, centroid_normalized_only};
pub use empirical::SampleSet;
pub use theoretical::{centroid_mae_theoretical, centroid_mse_theoretical, theoretical_objective};

pub const DEFAULT_NUM_LEVELS: usize = 16;
pub const DEFAULT_SAMPLE_COUNT: usize = 1 << 24;
pub const DEFAULT_CONVERGENCE_EPS: f64 = 1e-7;
pub const DEFAULT_MAX_ITER_THEORETICAL: usize = 500;
pub const DEFAULT_MAX_ITER_EMPIRICAL: usize = 500;

/// Error measure a codebook is optimized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mae,
    Mse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Mse => "mse",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Metric::Mae),
            "mse" => Ok(Metric::Mse),
            other => Err(Error::InvalidInput(format!("unknown metric '{other}'"))),
        }
    }
}

/// Whether errors are measured on the dequantized weights (scaled by the
/// block maximum) or on the normalized weights only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "end_to_end")]
    EndToEnd,
    #[serde(rename = "normalized")]
    NormalizedOnly,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::EndToEnd => "end_to_end",
            Objective::NormalizedOnly => "normalized",
        }
    }

    /// Power `k` of the block maximum weighting each normalized error.
    pub fn weight_power(self, metric: Metric) -> i32 {
        match (self, metric) {
            (Objective::NormalizedOnly, _) => 0,
            (Objective::EndToEnd, Metric::Mae) => 1,
            (Objective::EndToEnd, Metric::Mse) => 2,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "end_to_end" | "end-to-end" => Ok(Objective::EndToEnd),
            "normalized" | "normalized_only" | "normalized-only" => Ok(Objective::NormalizedOnly),
            other => Err(Error::InvalidInput(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidMethod {
    Theoretical,
    Empirical,
}

impl CentroidMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CentroidMethod::Theoretical => "theoretical",
            CentroidMethod::Empirical => "empirical",
        }
    }
}

impl std::str::FromStr for CentroidMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "theoretical" => Ok(CentroidMethod::Theoretical),
            "empirical" => Ok(CentroidMethod::Empirical),
            other => Err(Error::InvalidInput(format!("unknown centroid method '{other}'"))),
        }
    }
}

/// Design configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSpec {
    pub num_levels: usize,
    pub block_size: usize,
    pub mode: NormalizationMode,
    pub metric: Metric,
    pub objective: Objective,
    /// Levels that are fixed in advance; sorted, distinct, in `[-1, 1]`.
    pub constrained_levels: Vec<f64>,
    pub centroid_method: CentroidMethod,
    pub sample_count: usize,
    pub seed: u64,
    /// `None` selects the per-method default.
    pub max_iterations: Option<usize>,
    pub convergence_eps: f64,
}

/// `{-1, 0, 1}` for absolute normalization, `{0, 1}` for signed.
pub fn default_constraints(mode: NormalizationMode) -> Vec<f64> {
    match mode {
        NormalizationMode::Absolute => vec![-1.0, 0.0, 1.0],
        NormalizationMode::Signed => vec![0.0, 1.0],
    }
}

impl CodebookSpec {
    pub fn new(mode: NormalizationMode, metric: Metric, block_size: usize) -> Self {
        CodebookSpec {
            num_levels: DEFAULT_NUM_LEVELS,
            block_size,
            mode,
            metric,
            objective: Objective::EndToEnd,
            constrained_levels: default_constraints(mode),
            centroid_method: CentroidMethod::Theoretical,
            sample_count: DEFAULT_SAMPLE_COUNT,
            seed: 0,
            max_iterations: None,
            convergence_eps: DEFAULT_CONVERGENCE_EPS,
        }
    }

    /// Absolute normalization, constraints `{-1, 0, 1}`.
    pub fn bof4(metric: Metric, block_size: usize) -> Self {
        Self::new(NormalizationMode::Absolute, metric, block_size)
    }

    /// Signed normalization, constraints `{0, 1}`.
    pub fn bof4s(metric: Metric, block_size: usize) -> Self {
        Self::new(NormalizationMode::Signed, metric, block_size)
    }

    pub fn with_method(mut self, method: CentroidMethod) -> Self {
        self.centroid_method = method;
        self
    }

    pub fn with_constraints(mut self, levels: Vec<f64>) -> Self {
        self.constrained_levels = levels;
        self
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_samples(mut self, sample_count: usize, seed: u64) -> Self {
        self.sample_count = sample_count;
        self.seed = seed;
        self
    }

    pub fn with_num_levels(mut self, num_levels: usize) -> Self {
        self.num_levels = num_levels;
        self
    }

    pub fn effective_max_iterations(&self) -> usize {
        self.max_iterations.unwrap_or(match self.centroid_method {
            CentroidMethod::Theoretical => DEFAULT_MAX_ITER_THEORETICAL,
            CentroidMethod::Empirical => DEFAULT_MAX_ITER_EMPIRICAL,
        })
    }

    /// Checks the invariants and returns the constraints rounded to 32-bit
    /// floats, sorted ascending.
    pub fn validate(&self) -> Result<Vec<f64>> {
        if self.num_levels < 2 {
            return Err(Error::InvalidInput("a codebook needs at least 2 levels".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidInput("block size must be at least 1".into()));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::InvalidInput("convergence eps must be positive".into()));
        }
        let mut fixed = Vec::with_capacity(self.constrained_levels.len());
        for &c in &self.constrained_levels {
            if !c.is_finite() || !(-1.0..=1.0).contains(&c) {
                return Err(Error::InvalidInput(format!("constrained level {c} outside [-1, 1]")));
            }
            fixed.push(c as f32 as f64);
        }
        fixed.sort_by(f64::total_cmp);
        if fixed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("constrained levels must be distinct".into()));
        }
        if fixed.len() > self.num_levels {
            return Err(Error::InvalidInput(format!(
                "{} constrained levels exceed num_levels = {}",
                fixed.len(),
                self.num_levels
            )));
        }
        if self.centroid_method == CentroidMethod::Empirical && self.sample_count < 100 * self.num_levels {
            return Err(Error::InvalidInput(format!(
                "empirical design needs at least {} samples",
                100 * self.num_levels
            )));
        }
        Ok(fixed)
    }

    /// Conventional name such as `bof4s-mse-i64`.
    pub fn default_name(&self) -> String {
        let family = match self.mode {
            NormalizationMode::Absolute => "bof4",
            NormalizationMode::Signed => "bof4s",
        };
        let mut name = format!("{family}-{}-i{}", self.metric, self.block_size);
        if self.objective == Objective::NormalizedOnly {
            name.push_str("-normalized");
        }
        let mut fixed: Vec<f64> = self.constrained_levels.iter().map(|&c| c as f32 as f64).collect();
        fixed.sort_by(f64::total_cmp);
        if fixed != default_constraints(self.mode) {
            name.push_str("-constrained");
            for c in fixed {
                name.push_str(&format!("_{c}"));
            }
        }
        name
    }
}

/// How a codebook came to be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `theoretical`, `empirical`, `external-fixture` or `table-fixture`.
    pub method: String,
    pub seed: Option<u64>,
    pub sample_count: Option<u64>,
    pub iterations: usize,
    pub final_objective: Option<f64>,
    #[serde(default = "default_true")]
    pub converged: bool,
}

fn default_true() -> bool {
    true
}

impl Provenance {
    pub fn fixture(method: &str) -> Self {
        Provenance {
            method: method.to_string(),
            seed: None,
            sample_count: None,
            iterations: 0,
            final_objective: None,
            converged: true,
        }
    }
}

/// A scalar codebook: sorted reconstruction levels and their decision
/// thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub name: String,
    /// Strictly increasing, each exactly representable as `f32`.
    pub levels: Vec<f64>,
    /// `L + 1` entries, `-inf` and `+inf` at the ends.
    pub thresholds: Vec<f64>,
    pub spec: CodebookSpec,
    pub provenance: Provenance,
}

impl Codebook {
    /// Rounds `levels` to `f32` and checks every codebook invariant.
    pub fn new(name: impl Into<String>, levels: &[f64], spec: CodebookSpec, provenance: Provenance) -> Result<Self> {
        let levels: Vec<f64> = levels.iter().map(|&v| v as f32 as f64).collect();
        if levels.len() != spec.num_levels {
            return Err(Error::InvalidCodebook(format!(
                "expected {} levels, got {}",
                spec.num_levels,
                levels.len()
            )));
        }
        if levels.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidCodebook("levels must lie in [-1, 1]".into()));
        }
        let thresholds = nearest_neighbor_partition(&levels)?;
        for &c in &spec.constrained_levels {
            let c = c as f32 as f64;
            if !levels.contains(&c) {
                return Err(Error::InvalidCodebook(format!("constrained level {c} missing from levels")));
            }
        }
        Ok(Codebook { name: name.into(), levels, thresholds, spec, provenance })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn mode(&self) -> NormalizationMode {
        self.spec.mode
    }

    pub fn block_size(&self) -> usize {
        self.spec.block_size
    }

    /// Index of the level whose region contains `x`; threshold ties go to
    /// the higher region.
    pub fn encode(&self, x: f64) -> usize {
        let inner = &self.thresholds[1..self.thresholds.len() - 1];
        inner.partition_point(|&t| t <= x)
    }

    /// The levels as a 16-entry `f32` table, as needed by the 4-bit tensor path.
    pub fn levels_f32(&self) -> Result<[f32; 16]> {
        if self.levels.len() != 16 {
            return Err(Error::IncompatibleCodebooks(format!(
                "4-bit packing needs 16 levels, codebook '{}' has {}",
                self.name,
                self.levels.len()
            )));
        }
        let mut out = [0.0f32; 16];
        for (o, &l) in out.iter_mut().zip(&self.levels) {
            *o = l as f32;
        }
        Ok(out)
    }
}

/// Decision thresholds for sorted levels: `-inf`, the midpoints of adjacent
/// levels, `+inf`.
pub fn nearest_neighbor_partition(levels: &[f64]) -> Result<Vec<f64>> {
    if levels.len() < 2 {
        return Err(Error::InvalidCodebook("need at least 2 levels".into()));
    }
    if levels.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidCodebook("NaN level".into()));
    }
    if let Some(w) = levels.windows(2).find(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidCodebook(format!(
            "levels must be strictly increasing ({} followed by {})",
            w[0], w[1]
        )));
    }
    let mut t = Vec::with_capacity(levels.len() + 1);
    t.push(f64::NEG_INFINITY);
    t.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(f64::INFINITY);
    Ok(t)
}

/// Probability-weighted relative squared deviation between two codebooks in
/// dB: `10 log10(Σ P_l (a_l - b_l)^2 / Σ P_l a_l^2)`, with regions and
/// probabilities taken from `a`.
pub fn compare_codebooks<D: DistributionModel>(
    a: &Codebook,
    b: &Codebook,
    model: &BlockMaxModel<D>,
    mode: NormalizationMode,
) -> Result<f64> {
    if a.num_levels() != b.num_levels() {
        return Err(Error::IncompatibleCodebooks(format!(
            "{} vs {} levels",
            a.num_levels(),
            b.num_levels()
        )));
    }
    if a.block_size() != b.block_size() {
        return Err(Error::IncompatibleCodebooks(format!(
            "block sizes {} vs {}",
            a.block_size(),
            b.block_size()
        )));
    }
    let probs: Vec<f64> = a
        .thresholds
        .par_windows(2)
        .map(|t| model.region_probability(mode, t[0], t[1]))
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for ((p, &la), &lb) in probs.iter().zip(&a.levels).zip(&b.levels) {
        num += p * (la - lb) * (la - lb);
        den += p * la * la;
    }
    if !(den > 0.0) {
        return Err(Error::Numeric("reference codebook has zero energy".into()));
    }
    Ok(10.0 * (num / den).log10())
}

/// Where design data come from.
#[derive(Debug, Clone, Copy)]
pub enum DesignSource<'a> {
    /// An analytic weight distribution. Theoretical designs integrate against
    /// it, empirical designs draw `sample_count` weights from it.
    Model(&'a dyn DistributionModel),
    /// A flat tensor of real weights (empirical designs only).
    Weights(&'a [f32]),
}

static STANDARD_GAUSSIAN: Gaussian = Gaussian { sigma: 1.0 };

impl DesignSource<'static> {
    pub fn gaussian() -> Self {
        DesignSource::Model(&STANDARD_GAUSSIAN)
    }
}

/// Centroid rule plus the marginal distribution of `X` it is based on.
pub(crate) trait LloydEngine: Sync {
    /// Centroid of the region `[lo, hi)`.
    fn centroid(&self, lo: f64, hi: f64) -> Result<f64>;
    /// `P[X <= x]`.
    fn cdf(&self, x: f64) -> f64;
    /// `P[X < x]`.
    fn cdf_left(&self, x: f64) -> f64;
    /// Smallest `x` with `P[X <= x] >= p`.
    fn quantile(&self, p: f64) -> f64;
    /// Objective value of a full set of levels.
    fn objective(&self, levels: &[f64]) -> Result<f64>;
}

/// Per-iteration record of a design run.
#[derive(Debug, Clone, Default)]
pub struct LloydTrace {
    /// Objective of the levels entering each iteration, plus the final one.
    pub objectives: Vec<f64>,
    /// Largest level displacement of each iteration.
    pub displacements: Vec<f64>,
}

/// Run the modified Lloyd algorithm for `spec` on `source`.
pub fn lloyd_design(spec: &CodebookSpec, source: DesignSource<'_>) -> Result<Codebook> {
    design(spec, source, false).map(|(cb, _)| cb)
}

/// As [`lloyd_design`], also recording the objective at every iteration.
pub fn lloyd_design_traced(spec: &CodebookSpec, source: DesignSource<'_>) -> Result<(Codebook, LloydTrace)> {
    design(spec, source, true)
}

fn design(spec: &CodebookSpec, source: DesignSource<'_>, trace: bool) -> Result<(Codebook, LloydTrace)> {
    let fixed = spec.validate()?;
    let k = spec.objective.weight_power(spec.metric);
    match (spec.centroid_method, source) {
        (CentroidMethod::Theoretical, DesignSource::Model(dist)) => {
            let model = BlockMaxModel::new(dist, spec.block_size)?;
            let engine = theoretical::TheoreticalEngine::new(&model, spec.mode, spec.metric, k);
            let (levels, iterations, converged, tr) = run_lloyd(&engine, spec, &fixed, trace)?;
            let provenance = Provenance {
                method: "theoretical".into(),
                seed: None,
                sample_count: None,
                iterations,
                final_objective: None,
                converged,
            };
            finish(&engine, spec, &levels, provenance, tr)
        }
        (CentroidMethod::Theoretical, DesignSource::Weights(_)) => Err(Error::InvalidInput(
            "theoretical design needs a distribution model, not a weight tensor".into(),
        )),
        (CentroidMethod::Empirical, source) => {
            let (set, seed) = match source {
                DesignSource::Model(dist) => {
                    let w = crate::dist::sample_weights(dist, spec.sample_count, spec.seed);
                    (SampleSet::from_weights(&w, spec.block_size, spec.mode)?, Some(spec.seed))
                }
                DesignSource::Weights(w) => (SampleSet::from_weights(w, spec.block_size, spec.mode)?, None),
            };
            if set.len() < spec.num_levels {
                return Err(Error::InvalidInput("too few nonzero samples for the requested levels".into()));
            }
            let engine = empirical::EmpiricalEngine::new(&set, spec.metric, k);
            let (levels, iterations, converged, tr) = run_lloyd(&engine, spec, &fixed, trace)?;
            let provenance = Provenance {
                method: "empirical".into(),
                seed,
                sample_count: Some(set.len() as u64),
                iterations,
                final_objective: None,
                converged,
            };
            finish(&engine, spec, &levels, provenance, tr)
        }
    }
}

fn finish<E: LloydEngine>(
    engine: &E,
    spec: &CodebookSpec,
    levels: &[f64],
    mut provenance: Provenance,
    mut trace: LloydTrace,
) -> Result<(Codebook, LloydTrace)> {
    let rounded: Vec<f64> = levels.iter().map(|&v| v as f32 as f64).collect();
    if rounded.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Numeric("designed levels collapse after rounding to f32".into()));
    }
    let objective = engine.objective(&rounded)?;
    provenance.final_objective = Some(objective);
    if !trace.objectives.is_empty() {
        trace.objectives.push(objective);
    }
    let cb = Codebook::new(spec.default_name(), &rounded, spec.clone(), provenance)?;
    Ok((cb, trace))
}

type LloydOutcome = (Vec<f64>, usize, bool, LloydTrace);

fn run_lloyd<E: LloydEngine>(engine: &E, spec: &CodebookSpec, fixed: &[f64], trace: bool) -> Result<LloydOutcome> {
    let mut levels = initial_levels(engine, spec.num_levels, fixed)?;
    let is_fixed: Vec<bool> = levels.iter().map(|l| fixed.contains(l)).collect();
    let mut tr = LloydTrace::default();
    let max_iter = spec.effective_max_iterations();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        if trace {
            tr.objectives.push(engine.objective(&levels)?);
        }
        let thresholds = nearest_neighbor_partition(&levels)?;
        let next: Vec<f64> = (0..levels.len())
            .into_par_iter()
            .map(|l| {
                if is_fixed[l] {
                    return Ok(levels[l]);
                }
                let (lo, hi) = (thresholds[l], thresholds[l + 1]);
                match engine.centroid(lo, hi) {
                    Ok(c) => Ok(c),
                    Err(Error::EmptyRegion { .. }) => Ok(0.5 * (lo.max(-1.0) + hi.min(1.0))),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let shift = levels.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if trace {
            tr.displacements.push(shift);
        }
        if next.windows(2).any(|w| !(w[0] < w[1])) {
            // two levels met on a shared boundary; keep the previous iterate
            break;
        }
        levels = next;
        if shift < spec.convergence_eps {
            converged = true;
            break;
        }
    }
    Ok((levels, iterations, converged, tr))
}

/// Free levels are split between the gaps around the constrained levels in
/// proportion to each gap's probability (largest remainder, ties to the
/// right), then placed at equally spaced quantiles inside their gap.
fn initial_levels<E: LloydEngine>(engine: &E, num_levels: usize, fixed: &[f64]) -> Result<Vec<f64>> {
    let free = num_levels - fixed.len();
    let gaps = fixed.len() + 1;
    let bounds = |j: usize| -> (Option<f64>, Option<f64>) {
        let lo = if j == 0 { None } else { Some(fixed[j - 1]) };
        let hi = if j == fixed.len() { None } else { Some(fixed[j]) };
        (lo, hi)
    };
    let mut probs = Vec::with_capacity(gaps);
    for j in 0..gaps {
        let (lo, hi) = bounds(j);
        let p_lo = lo.map_or(0.0, |c| engine.cdf(c));
        let p_hi = hi.map_or(1.0, |c| engine.cdf_left(c));
        probs.push((p_lo, p_hi.max(p_lo)));
    }
    let total: f64 = probs.iter().map(|(a, b)| b - a).sum();
    if free > 0 && !(total > 0.0) {
        return Err(Error::Numeric("no probability left for free levels".into()));
    }
    let mut counts = vec![0usize; gaps];
    if free > 0 {
        let shares: Vec<f64> = probs.iter().map(|(a, b)| free as f64 * (b - a) / total).collect();
        for (c, s) in counts.iter_mut().zip(&shares) {
            *c = s.floor() as usize;
        }
        let mut order: Vec<usize> = (0..gaps).collect();
        // larger remainder first; near-equal remainders go to the right
        order.sort_by(|&i, &j| {
            let (ri, rj) = (shares[i].fract(), shares[j].fract());
            if (ri - rj).abs() < 1e-3 {
                j.cmp(&i)
            } else {
                rj.total_cmp(&ri)
            }
        });
        let left = free - counts.iter().sum::<usize>();
        for &j in order.iter().take(left) {
            counts[j] += 1;
        }
    }

    let mut levels = fixed.to_vec();
    for j in 0..gaps {
        let k = counts[j];
        if k == 0 {
            continue;
        }
        let (lo, hi) = bounds(j);
        let (p_lo, p_hi) = probs[j];
        let a = lo.unwrap_or(-1.0);
        let b = hi.unwrap_or(1.0);
        let mut placed: Vec<f64> = (1..=k)
            .map(|t| engine.quantile(p_lo + (t as f64 - 0.5) / k as f64 * (p_hi - p_lo)))
            .collect();
        let inside = |x: f64| (x > a || (lo.is_none() && x >= a)) && (x < b || (hi.is_none() && x <= b));
        let ok = placed.iter().all(|&x| inside(x)) && placed.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            placed = (1..=k).map(|t| a + t as f64 / (k + 1) as f64 * (b - a)).collect();
        }
        levels.extend(placed);
    }
    levels.sort_by(f64::total_cmp);
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Numeric("could not seed distinct initial levels".into()));
    }
    Ok(levels)
}
