//! Centroids and objectives by integration over the block maximum `M`.
//!
//! All integrals over `m` share one composite Kronrod grid. For a region
//! `[lo, hi)` of normalized weights, the continuous part of
//! `p_M(m) P[X ∈ R | m]` collapses to `cw(m) P_W(m lo < W < m hi)` with
//! `cw = p_M (I-1) / (I F_|W|)`, and the endpoint masses contribute
//! `p_M(m)` times the mass of `±1` when the region contains it.

use crate::dist::{quadrature, BlockMaxModel, DistributionModel, NormalizationMode};
use crate::error::{Error, Result};

use super::{nearest_neighbor_partition, LloydEngine, Metric, Objective};

/// Subintervals per segment between consecutive breakpoints of `M`.
const SUBDIVISIONS: usize = 12;
const ROOT_TOL: f64 = 1e-13;
const ROOT_MAX_ITER: usize = 80;

#[derive(Debug, Clone, Copy)]
struct Node {
    m: f64,
    /// quadrature weight
    wt: f64,
    /// quadrature weight times `m^k`
    wk: f64,
    pm: f64,
    cw: f64,
}

pub(crate) struct TheoreticalEngine<'a, D> {
    model: &'a BlockMaxModel<D>,
    nodes: Vec<Node>,
    metric: Metric,
    left_mass: f64,
    right_mass: f64,
}

impl<'a, D: DistributionModel> TheoreticalEngine<'a, D> {
    pub(crate) fn new(model: &'a BlockMaxModel<D>, mode: NormalizationMode, metric: Metric, k: i32) -> Self {
        let mut edges = vec![0.0];
        edges.extend(model.m_breakpoints().iter().copied().filter(|&b| b > 0.0 && b < model.upper_bound()));
        edges.push(model.upper_bound());
        let mut nodes = Vec::with_capacity((edges.len() - 1) * SUBDIVISIONS * 21);
        for seg in edges.windows(2) {
            let step = (seg[1] - seg[0]) / SUBDIVISIONS as f64;
            for s in 0..SUBDIVISIONS {
                let a = seg[0] + s as f64 * step;
                let b = if s + 1 == SUBDIVISIONS { seg[1] } else { a + step };
                for (m, wt) in quadrature::kronrod_nodes(a, b) {
                    nodes.push(Node {
                        m,
                        wt,
                        wk: wt * m.powi(k),
                        pm: model.block_max_pdf(m),
                        cw: model.continuous_weight(m),
                    });
                }
            }
        }
        let (left_mass, right_mass) = mode.endpoint_masses(model.block_size());
        TheoreticalEngine { model, nodes, metric, left_mass, right_mass }
    }

    fn dist(&self) -> &D {
        self.model.dist()
    }

    /// Clipped region plus the endpoint masses it contains.
    fn region(&self, lo: f64, hi: f64) -> (f64, f64, f64, f64) {
        let l = if lo <= -1.0 { self.left_mass } else { 0.0 };
        let r = if hi > 1.0 { self.right_mass } else { 0.0 };
        (lo.max(-1.0), hi.min(1.0), l, r)
    }

    fn centroid_mse(&self, lo: f64, hi: f64) -> Result<f64> {
        let (a, b, l, r) = self.region(lo, hi);
        let d = self.dist();
        let mut num = 0.0;
        let mut den = 0.0;
        for n in &self.nodes {
            let (p, m1) = if b > a {
                (d.interval_prob(n.m * a, n.m * b), d.partial_moment(1, n.m * a, n.m * b))
            } else {
                (0.0, 0.0)
            };
            num += n.wk * (n.cw * m1 / n.m + n.pm * (r - l));
            den += n.wk * (n.cw * p + n.pm * (l + r));
        }
        if !(den > 0.0) {
            return Err(Error::EmptyRegion { lo, hi });
        }
        Ok((num / den).clamp(a, b))
    }

    /// Root of `∫ m^k p_M (F(x|m) - F(a-|m) - ½ [F(b-|m) - F(a-|m)]) dm`.
    fn centroid_mae(&self, lo: f64, hi: f64) -> Result<f64> {
        let (a, b, l, r) = self.region(lo, hi);
        let d = self.dist();
        let total: f64 = self
            .nodes
            .iter()
            .map(|n| {
                let p = if b > a { d.interval_prob(n.m * a, n.m * b) } else { 0.0 };
                n.wk * (n.cw * p + n.pm * (l + r))
            })
            .sum();
        if !(total > 0.0) {
            return Err(Error::EmptyRegion { lo, hi });
        }
        let half = 0.5 * total;
        let below = |x: f64| -> f64 {
            self.nodes
                .iter()
                .map(|n| n.wk * (n.pm * l + n.cw * d.interval_prob(n.m * a, n.m * x)))
                .sum::<f64>()
                - half
        };
        if below(a) >= 0.0 {
            return Ok(a);
        }
        if below(b) <= 0.0 {
            return Ok(b);
        }
        let (mut x0, mut x1) = (a, b);
        for _ in 0..ROOT_MAX_ITER {
            if x1 - x0 <= ROOT_TOL {
                break;
            }
            let mid = 0.5 * (x0 + x1);
            if below(mid) < 0.0 {
                x0 = mid;
            } else {
                x1 = mid;
            }
        }
        Ok(0.5 * (x0 + x1))
    }

    fn mixed_cdf(&self, x: f64, inclusive: bool) -> f64 {
        let hit = |edge: f64| if inclusive { x >= edge } else { x > edge };
        if !hit(-1.0) {
            return 0.0;
        }
        let l = self.left_mass;
        let r = if hit(1.0) { self.right_mass } else { 0.0 };
        let xc = x.min(1.0);
        let d = self.dist();
        self.nodes
            .iter()
            .map(|n| n.wt * (n.pm * (l + r) + n.cw * d.interval_prob(-n.m, n.m * xc)))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }
}

impl<D: DistributionModel> LloydEngine for TheoreticalEngine<'_, D> {
    fn centroid(&self, lo: f64, hi: f64) -> Result<f64> {
        match self.metric {
            Metric::Mse => self.centroid_mse(lo, hi),
            Metric::Mae => self.centroid_mae(lo, hi),
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        self.mixed_cdf(x, true)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        self.mixed_cdf(x, false)
    }

    fn quantile(&self, p: f64) -> f64 {
        if p <= self.cdf(-1.0) {
            return -1.0;
        }
        if p > self.cdf_left(1.0) {
            return 1.0;
        }
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        for _ in 0..ROOT_MAX_ITER {
            if hi - lo <= ROOT_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    fn objective(&self, levels: &[f64]) -> Result<f64> {
        let t = nearest_neighbor_partition(levels)?;
        let d = self.dist();
        let mut total = 0.0;
        for (j, &c) in levels.iter().enumerate() {
            let (a, b, l, r) = self.region(t[j], t[j + 1]);
            for n in &self.nodes {
                let m = n.m;
                let cont = if b > a {
                    match self.metric {
                        Metric::Mse => {
                            let p = d.interval_prob(m * a, m * b);
                            let m1 = d.partial_moment(1, m * a, m * b) / m;
                            let m2 = d.partial_moment(2, m * a, m * b) / (m * m);
                            (m2 - 2.0 * c * m1 + c * c * p).max(0.0)
                        }
                        Metric::Mae => {
                            let s = c.clamp(a, b);
                            let pl = d.interval_prob(m * a, m * s);
                            let ml = d.partial_moment(1, m * a, m * s) / m;
                            let pr = d.interval_prob(m * s, m * b);
                            let mr = d.partial_moment(1, m * s, m * b) / m;
                            (c * pl - ml + mr - c * pr).max(0.0)
                        }
                    }
                } else {
                    0.0
                };
                let point = match self.metric {
                    Metric::Mse => l * (1.0 + c).powi(2) + r * (1.0 - c).powi(2),
                    Metric::Mae => l * (1.0 + c).abs() + r * (1.0 - c).abs(),
                };
                total += n.wk * (n.cw * cont + n.pm * point);
            }
        }
        Ok(total)
    }
}

/// MSE-optimal level for the region `[lo, hi)` of normalized weights under
/// the end-to-end objective.
pub fn centroid_mse_theoretical<D: DistributionModel>(
    region: (f64, f64),
    model: &BlockMaxModel<D>,
    mode: NormalizationMode,
) -> Result<f64> {
    let k = Objective::EndToEnd.weight_power(Metric::Mse);
    TheoreticalEngine::new(model, mode, Metric::Mse, k).centroid(region.0, region.1)
}

/// MAE-optimal level for the region `[lo, hi)` under the end-to-end objective.
pub fn centroid_mae_theoretical<D: DistributionModel>(
    region: (f64, f64),
    model: &BlockMaxModel<D>,
    mode: NormalizationMode,
) -> Result<f64> {
    let k = Objective::EndToEnd.weight_power(Metric::Mae);
    TheoreticalEngine::new(model, mode, Metric::Mae, k).centroid(region.0, region.1)
}

/// Expected error of quantizing with `levels`, by integration. For the
/// end-to-end objective this is `E[M^2 (X - Q(X))^2]` (MSE) or
/// `E[M |X - Q(X)|]` (MAE) in units of the model's weights.
pub fn theoretical_objective<D: DistributionModel>(
    levels: &[f64],
    model: &BlockMaxModel<D>,
    mode: NormalizationMode,
    metric: Metric,
    objective: Objective,
) -> Result<f64> {
    TheoreticalEngine::new(model, mode, metric, objective.weight_power(metric)).objective(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fixtures;
    use crate::dist::Gaussian;

    #[test]
    fn grid_integrates_block_max_density() {
        for i in [1, 2, 8, 64, 256, 1024, 4096] {
            let model = BlockMaxModel::gaussian(i).unwrap();
            let e = TheoreticalEngine::new(&model, NormalizationMode::Absolute, Metric::Mse, 0);
            let total: f64 = e.nodes.iter().map(|n| n.wt * n.pm).sum();
            assert!((total - 1.0).abs() < 1e-11, "I={i}: {total}");
            assert!((e.cdf(1.0) - 1.0).abs() < 1e-11);
            assert!((e.cdf(-1.0) - 0.5 / i as f64).abs() < 1e-11);
        }
    }

    #[test]
    fn grid_matches_adaptive_quadrature() {
        let model = BlockMaxModel::gaussian(64).unwrap();
        let e = TheoreticalEngine::new(&model, NormalizationMode::Absolute, Metric::Mse, 2);
        let g = Gaussian::standard();
        let f = |m: f64| m * model.continuous_weight(m) * g.partial_moment(1, 0.3 * m, 0.55 * m);
        let grid: f64 = e.nodes.iter().map(|n| n.wt * f(n.m)).sum();
        let adaptive = model.integrate_over_m(f);
        assert!((grid - adaptive).abs() < 1e-12 * adaptive.abs().max(1.0), "{grid} vs {adaptive}");
        for x in [-0.7, 0.0, 0.25, 0.9] {
            let cdf = model.marginal_mixed_cdf(NormalizationMode::Absolute, x);
            assert!((e.cdf(x) - cdf).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_region_has_zero_centroid() {
        let model = BlockMaxModel::gaussian(64).unwrap();
        for mode in [NormalizationMode::Absolute, NormalizationMode::Signed] {
            assert!(centroid_mse_theoretical((-0.2, 0.2), &model, mode).unwrap().abs() < 1e-15);
            assert!(centroid_mae_theoretical((-0.2, 0.2), &model, mode).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn reference_levels_are_fixed_points() {
        // One centroid step from the tabulated theoretical design reproduces
        // its own levels.
        let model = BlockMaxModel::gaussian(64).unwrap();
        let levels = fixtures::BOF4_MSE_64_THEORETICAL;
        let t = nearest_neighbor_partition(&levels).unwrap();
        for l in [1, 4, 8, 11, 14] {
            let c = centroid_mse_theoretical((t[l], t[l + 1]), &model, NormalizationMode::Absolute).unwrap();
            assert!((c - levels[l]).abs() < 2e-6, "level {}: {c} vs {}", l + 1, levels[l]);
        }
    }

    #[test]
    fn centroid_stays_in_region() {
        let model = BlockMaxModel::gaussian(16).unwrap();
        for (a, b) in [(-0.9, -0.6), (0.05, 0.07), (0.8, f64::INFINITY), (f64::NEG_INFINITY, -0.8)] {
            for mode in [NormalizationMode::Absolute, NormalizationMode::Signed] {
                for c in [
                    centroid_mse_theoretical((a, b), &model, mode).unwrap(),
                    centroid_mae_theoretical((a, b), &model, mode).unwrap(),
                ] {
                    assert!(c >= a.max(-1.0) && c <= b.min(1.0));
                }
            }
        }
    }

    #[test]
    fn signed_outer_region_uses_right_mass_only() {
        let model = BlockMaxModel::gaussian(64).unwrap();
        let abs = centroid_mse_theoretical((f64::NEG_INFINITY, -0.8), &model, NormalizationMode::Absolute).unwrap();
        let sgn = centroid_mse_theoretical((f64::NEG_INFINITY, -0.8), &model, NormalizationMode::Signed).unwrap();
        assert!(abs < sgn);
        let hi_abs = centroid_mse_theoretical((0.8, f64::INFINITY), &model, NormalizationMode::Absolute).unwrap();
        let hi_sgn = centroid_mse_theoretical((0.8, f64::INFINITY), &model, NormalizationMode::Signed).unwrap();
        assert!(hi_sgn > hi_abs);
    }

    #[test]
    fn empty_region_reported() {
        // region beyond +1 that does not reach the endpoint mass
        let model = BlockMaxModel::gaussian(64).unwrap();
        let r = centroid_mse_theoretical((1.0, 1.0 + 1e-9), &model, NormalizationMode::Absolute);
        assert!(r.is_ok());
        let r = centroid_mse_theoretical((-1.0 - 1e-9, -1.0), &model, NormalizationMode::Signed);
        assert!(matches!(r, Err(Error::EmptyRegion { .. })));
    }

    #[test]
    fn objective_of_trivial_codebook() {
        // levels {-1, 0, 1}: every error is computable from the folded
        // moments, check against direct adaptive integration over m and x.
        let model = BlockMaxModel::gaussian(4).unwrap();
        let levels = [-1.0, 0.0, 1.0];
        let got = theoretical_objective(&levels, &model, NormalizationMode::Absolute, Metric::Mse, Objective::NormalizedOnly).unwrap();
        let g = Gaussian::standard();
        let inner = |m: f64| {
            let pdf_x = |x: f64| m * g.pdf(m * x) / g.interval_prob(-m, m);
            let q = |x: f64| if x < -0.5 { -1.0 } else if x < 0.5 { 0.0 } else { 1.0 };
            quadrature::integrate(|x| (x - q(x)).powi(2) * pdf_x(x), -1.0, 1.0, &[-0.5, 0.5])
        };
        let want = model.integrate_over_m(|m| model.block_max_pdf(m) * 0.75 * inner(m));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}
