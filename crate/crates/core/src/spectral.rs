//! Known-competition identification of the state-specific bid distributions.
//!
//! The instrument-filtered cell matrix `J0` and the unfiltered `J` share the
//! low-side factor `L`, so `A = J0 J⁻¹` has eigenvectors proportional to the
//! columns of `L` and eigenvalues `Pr(W = 0 | k)`. Pointwise and cumulative
//! rows then give each state's segment densities up to a scale, and the two
//! scales per state are pinned by density continuity at the cutoff and unit
//! total mass.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{value_cdf_from_bid_cdf, AuctionFormat};
use crate::discretize::{CellMatrix, Discretization, WFilter};
use crate::error::{Error, Result, Stage, StageExt};
use crate::numeric::isotonic::project_cdf;
use crate::numeric::quad::{cumulative_trapezoid, interp, linspace, tail_trapezoid, trapezoid};
use crate::numeric::{permutations, sup_norm};
use crate::order_stats::os_cdf;
use crate::rank::{rank_level, KEstimate, RankSettings};
use crate::source::{JointObservables, SchemeView};

/// Imaginary parts above this are a relevance failure.
pub const IMAG_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct EigenOptions {
    /// Minimum relative gap between consecutive eigenvalues.
    pub gap_tol: f64,
    /// Maximum condition number of `J`.
    pub condition_cap: f64,
    /// Reconstruction residual allowed on population matrices.
    pub residual_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-3,
            condition_cap: 1e12,
            residual_tol: 1e-8,
        }
    }
}

/// Eigen-structure of `J0 J⁻¹`.
#[derive(Clone, Debug)]
pub struct Eigen {
    /// Ascending; estimates of `Pr(W = 0 | k)`.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, nonnegative with unit column sums.
    pub low_matrix: DMatrix<f64>,
    pub residual: f64,
    pub min_relative_gap: f64,
    /// Share of absolute eigenvector mass removed by clipping negatives.
    pub clipped: f64,
    pub condition: f64,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigendecomposition of `J0 J⁻¹` for two cell matrices of the same scheme.
pub fn eigendecompose(j0: &CellMatrix, j: &CellMatrix, opts: &EigenOptions) -> Result<Eigen> {
    let k = j.entries.nrows();
    if j.entries.ncols() != k || j0.entries.shape() != j.entries.shape() {
        return Err(Error::domain("cell matrices must be square and of equal shape"));
    }
    if j0.filter != WFilter::W0 {
        return Err(Error::domain("the first matrix must use the W = 0 filter"));
    }
    let condition = condition_number(&j.entries);
    if !condition.is_finite() || condition > opts.condition_cap {
        return Err(Error::RankDeficient(format!(
            "cell matrix condition number {condition:.3e} exceeds {:.1e}",
            opts.condition_cap
        )));
    }
    let j_inv = j
        .entries
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("cell matrix is singular".into()))?;
    let a = &j0.entries * j_inv;

    let complex = a.clone().complex_eigenvalues();
    if let Some(z) = complex.iter().find(|z| z.im.abs() > IMAG_TOL) {
        return Err(Error::Relevance(format!(
            "complex eigenvalue {:.6}{:+.6}i",
            z.re, z.im
        )));
    }
    let mut eigenvalues: Vec<f64> = complex.iter().map(|z| z.re).collect();
    eigenvalues.sort_by(f64::total_cmp);
    let mut min_gap = f64::INFINITY;
    for w in eigenvalues.windows(2) {
        let scale = w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE);
        min_gap = min_gap.min((w[1] - w[0]) / scale);
    }
    if min_gap < opts.gap_tol {
        return Err(Error::Relevance(format!(
            "eigenvalues {eigenvalues:?} have relative gap {min_gap:.2e} below {:.1e}",
            opts.gap_tol
        )));
    }

    let mut low = DMatrix::zeros(k, k);
    let mut removed = 0.0;
    let mut total = 0.0;
    for (c, &lambda) in eigenvalues.iter().enumerate() {
        let shifted = &a - DMatrix::identity(k, k) * lambda;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let idx = svd.singular_values.imin();
        let mut v: Vec<f64> = vt.row(idx).iter().copied().collect();
        if v.iter().sum::<f64>() < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        total += v.iter().map(|x| x.abs()).sum::<f64>();
        removed += v.iter().filter(|&&x| x < 0.0).map(|x| -x).sum::<f64>();
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return Err(Error::Relevance(format!(
                "eigenvector for eigenvalue {lambda:.6} has no positive mass"
            )));
        }
        for (r, x) in v.iter().enumerate() {
            low[(r, c)] = x / s;
        }
    }
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(eigenvalues.clone()));
    let residual = (&a * &low - &low * lambda).amax();
    if j.sample_size.is_none() && residual > opts.residual_tol {
        return Err(Error::numeric(format!(
            "eigen reconstruction residual {residual:.3e} exceeds {:.1e}",
            opts.residual_tol
        )));
    }
    Ok(Eigen {
        eigenvalues,
        low_matrix: low,
        residual,
        min_relative_gap: min_gap,
        clipped: if total > 0.0 { removed / total } else { 0.0 },
        condition,
    })
}

/// Linear maps turning cell rows into per-state profiles.
#[derive(Clone, Debug)]
pub struct SpectralMaps {
    /// `J⁻¹ L̃`, applied to low-side rows from the right.
    pub low: DMatrix<f64>,
    /// `L̃⁻¹`, applied to high-side columns from the left.
    pub high: DMatrix<f64>,
}

impl SpectralMaps {
    pub fn new(j: &DMatrix<f64>, low_matrix: &DMatrix<f64>) -> Result<Self> {
        let j_inv = j
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("cell matrix is singular".into()))?;
        let high = low_matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("eigenvector matrix is singular".into()))?;
        Ok(Self {
            low: j_inv * low_matrix,
            high,
        })
    }

    pub fn apply_low(&self, row: &[f64]) -> Vec<f64> {
        let v = DVector::from_row_slice(row).transpose() * &self.low;
        v.iter().copied().collect()
    }

    pub fn apply_high(&self, column: &[f64]) -> Vec<f64> {
        let v = &self.high * DVector::from_row_slice(column);
        v.iter().copied().collect()
    }
}

/// Per-state densities sampled on a segment grid.
#[derive(Clone, Debug)]
pub struct Profiles {
    pub grid: Vec<f64>,
    /// `values[k][i]` is state `k` at `grid[i]`.
    pub values: Vec<Vec<f64>>,
    /// Share of absolute profile mass removed by clipping negatives.
    pub clipped_mass: f64,
}

fn collect_profiles(grid: &[f64], rows: Vec<Vec<f64>>, k: usize) -> Profiles {
    let mut values = vec![vec![0.0; grid.len()]; k];
    let mut removed = 0.0;
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            total += v.abs();
            if v < 0.0 {
                removed -= v;
            }
            values[s][i] = v.max(0.0);
        }
    }
    Profiles {
        grid: grid.to_vec(),
        values,
        clipped_mass: if total > 0.0 { removed / total } else { 0.0 },
    }
}

/// Low-segment densities `∝ f^k_{r-1:r-1}` from pointwise rows times `J⁻¹ L̃`.
pub fn low_density_profile(view: &dyn SchemeView, maps: &SpectralMaps, grid: &[f64], filter: WFilter) -> Result<Profiles> {
    let cutoff = view.scheme().cutoff;
    let (lo, _) = view.scheme().support();
    if grid.iter().any(|&x| x < lo || x > cutoff) {
        return Err(Error::domain("low profile grid leaves the low segment"));
    }
    let rows = grid
        .par_iter()
        .map(|&x| Ok(maps.apply_low(&view.low_row(x, filter)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_profiles(grid, rows, maps.low.ncols()))
}

/// High-segment densities `∝ f^k_{1:n-r+1}` from `L̃⁻¹` times pointwise rows.
pub fn high_profile(view: &dyn SchemeView, maps: &SpectralMaps, grid: &[f64], filter: WFilter) -> Result<Profiles> {
    let cutoff = view.scheme().cutoff;
    let (_, hi) = view.scheme().support();
    if grid.iter().any(|&y| y < cutoff || y > hi) {
        return Err(Error::domain("high profile grid leaves the high segment"));
    }
    let rows = grid
        .par_iter()
        .map(|&y| Ok(maps.apply_high(&view.high_row(y, filter)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_profiles(grid, rows, maps.high.nrows()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Low,
    High,
}

/// Scaled parent density on one segment.
#[derive(Clone, Debug)]
pub struct ScaledParent {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Integral of `density` over the segment.
    pub integral: f64,
    /// Set when the profile vanishes or a boundary value had to be filled
    /// from its neighbour.
    pub degenerate: bool,
}

/// Undoes the order-statistic transform of a segment profile.
///
/// Low: `(1/(r-1)) [∫_{x̲}^x p]^{1/(r-1) - 1} p(x)`; high: the analogue with
/// the upper-tail integral and exponent `1/(n-r+1)`.
pub fn recover_scaled_parent(grid: &[f64], profile: &[f64], segment: Segment, r: u32, n: u32) -> Result<ScaledParent> {
    if grid.len() != profile.len() || grid.len() < 2 {
        return Err(Error::domain("profile and grid lengths differ or are too short"));
    }
    if r < 2 || n < r {
        return Err(Error::domain(format!("invalid rank {r} of {n}")));
    }
    if profile.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::domain("profile must be finite and nonnegative"));
    }
    let (power, cum) = match segment {
        Segment::Low => ((r - 1) as f64, cumulative_trapezoid(grid, profile)),
        Segment::High => ((n - r + 1) as f64, tail_trapezoid(grid, profile)),
    };
    let total = match segment {
        Segment::Low => *cum.last().expect("nonempty"),
        Segment::High => cum[0],
    };
    if total <= 0.0 {
        return Ok(ScaledParent {
            grid: grid.to_vec(),
            density: vec![0.0; grid.len()],
            integral: 0.0,
            degenerate: true,
        });
    }
    let exponent = 1.0 / power - 1.0;
    let mut density: Vec<Option<f64>> = cum
        .iter()
        .zip(profile)
        .map(|(&c, &p)| {
            if c > 0.0 {
                Some(c.powf(exponent) * p / power)
            } else if exponent == 0.0 {
                Some(p / power)
            } else {
                None
            }
        })
        .collect();
    let mut degenerate = false;
    // one-sided limits at points with zero accumulated mass
    let order: Vec<usize> = match segment {
        Segment::Low => (0..grid.len()).rev().collect(),
        Segment::High => (0..grid.len()).collect(),
    };
    let mut last = None;
    for &i in &order {
        match density[i] {
            Some(v) => last = Some(v),
            None => {
                degenerate = true;
                density[i] = Some(last.unwrap_or(0.0));
            }
        }
    }
    Ok(ScaledParent {
        grid: grid.to_vec(),
        density: density.into_iter().map(|d| d.expect("filled")).collect(),
        integral: total.powf(1.0 / power),
        degenerate,
    })
}

/// Solves `[a_l, -a_h; m_l, m_h] (η_l, η_h)ᵀ = (0, 1)ᵀ` where `a` are the
/// densities at the cutoff and `m` the segment integrals.
pub fn solve_scale_system(density_low: f64, mass_low: f64, density_high: f64, mass_high: f64) -> Result<(f64, f64)> {
    let det = density_low * mass_high + density_high * mass_low;
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::numeric(format!(
            "scale system determinant {det:.3e} is not positive (densities {density_low:.3e}, {density_high:.3e}; masses {mass_low:.3e}, {mass_high:.3e})"
        )));
    }
    let eta_low = density_high / det;
    let eta_high = density_low / det;
    if !(eta_low > 0.0 && eta_high > 0.0) {
        return Err(Error::numeric(format!(
            "scale system gives nonpositive scales ({eta_low:.3e}, {eta_high:.3e})"
        )));
    }
    Ok((eta_low, eta_high))
}

/// Scales that make the two segment densities meet at the cutoff and
/// integrate to one together.
pub fn pin_scales(low: &ScaledParent, high: &ScaledParent, cutoff: f64) -> Result<(f64, f64)> {
    let a_l = interp(&low.grid, &low.density, cutoff);
    let a_h = interp(&high.grid, &high.density, cutoff);
    if a_l <= 0.0 && a_h <= 0.0 {
        return Err(Error::numeric("both segment densities vanish at the cutoff"));
    }
    solve_scale_system(a_l, trapezoid(&low.grid, &low.density), a_h, trapezoid(&high.grid, &high.density))
}

/// Result of the simplex-constrained weight fit.
#[derive(Clone, Debug, Serialize)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    pub residual: f64,
    /// Condition number of the normal equations.
    pub condition: f64,
}

/// Least squares `min ‖A p − b‖²` over the probability simplex, by
/// enumerating active sets.
pub fn simplex_least_squares(design: &DMatrix<f64>, target: &DVector<f64>, condition_cap: f64) -> Result<WeightFit> {
    let k = design.ncols();
    if k == 0 || design.nrows() != target.len() {
        return Err(Error::domain("design and target sizes do not match"));
    }
    let gram = design.transpose() * design;
    let condition = condition_number(&gram);
    if k > 1 && (!condition.is_finite() || condition > condition_cap) {
        return Err(Error::NonUniqueWeights(format!(
            "normal equations condition number {condition:.3e} exceeds {condition_cap:.1e}"
        )));
    }
    let rhs = design.transpose() * target;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let s = idx.len();
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut b = DVector::zeros(s + 1);
        for (a, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                kkt[(a, c)] = gram[(i, j)];
            }
            kkt[(a, s)] = 1.0;
            kkt[(s, a)] = 1.0;
            b[a] = rhs[i];
        }
        b[s] = 1.0;
        let Some(sol) = kkt.lu().solve(&b) else { continue };
        if sol.iter().take(s).any(|&p| p < -1e-12) {
            continue;
        }
        let mut p = vec![0.0; k];
        for (a, &i) in idx.iter().enumerate() {
            p[i] = sol[a].max(0.0);
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        let r = design * DVector::from_vec(p.clone()) - target;
        let ssr = r.norm_squared();
        if best.as_ref().is_none_or(|(b, _)| ssr < *b) {
            best = Some((ssr, p));
        }
    }
    let (residual, weights) = best.ok_or_else(|| Error::numeric("no feasible simplex solution"))?;
    Ok(WeightFit {
        weights,
        residual,
        condition,
    })
}

/// State weights from the marginal CDF of `x_hi`.
///
/// `cdfs[k]` is state `k`'s parent CDF on `grid`; each is mapped to the CDF of
/// the `r`-th of `n` order statistics and the mixture is fit to the observed
/// CDF on the grid.
pub fn recover_weights(source: &dyn JointObservables, grid: &[f64], cdfs: &[Vec<f64>], n: u32, condition_cap: f64) -> Result<WeightFit> {
    let r = source.rank();
    let k = cdfs.len();
    if k == 1 {
        return Ok(WeightFit {
            weights: vec![1.0],
            residual: 0.0,
            condition: 1.0,
        });
    }
    let mut design = DMatrix::zeros(grid.len(), k);
    for (s, cdf) in cdfs.iter().enumerate() {
        if cdf.len() != grid.len() {
            return Err(Error::domain("component CDF and grid lengths differ"));
        }
        for (i, &f) in cdf.iter().enumerate() {
            design[(i, s)] = os_cdf(f.clamp(0.0, 1.0), r, n)?;
        }
    }
    let target = DVector::from_iterator(grid.len(), grid.iter().map(|&x| source.upper_cdf(x)));
    simplex_least_squares(&design, &target, condition_cap)
}

/// Rule ordering the recovered states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Ascending `Pr(W = 0 | k)`.
    #[default]
    ByInstrumentProb,
    /// Ascending mean of the recovered distribution.
    ByMean,
    /// Closest match to known true CDFs.
    FixtureTruth,
}

/// True CDF of state `k` at a point, used for fixture labeling.
pub type TruthFn = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// Estimated per-state distributions with weights and diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentEstimate {
    /// Common evaluation grid (value space for first-price data).
    pub grid: Vec<f64>,
    /// `cdfs[k][i]` is state `k` at `grid[i]`.
    pub cdfs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub prob_w0: Vec<f64>,
    pub eta_low: Vec<f64>,
    /// Absent when the upper segment is recovered by tail inversion.
    pub eta_high: Option<Vec<f64>>,
    /// Bid-space CDFs before the first-price inversion.
    pub bid_cdfs: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub continuity_residual: f64,
    pub mass_residual: f64,
    pub eigen_gap: f64,
    pub reconstruction_residual: f64,
    pub eigenvector_clipped: f64,
    pub condition_number: f64,
    pub weight_residual: f64,
    /// Largest correction applied by the monotone projection.
    pub projection_adjustment: f64,
    pub scheme: Option<serde_json::Value>,
}

impl ComponentEstimate {
    pub fn num_states(&self) -> usize {
        self.cdfs.len()
    }

    /// State `k`'s CDF at `x`, linear between grid points.
    pub fn cdf(&self, k: usize, x: f64) -> f64 {
        interp(&self.grid, &self.cdfs[k], x)
    }

    /// Reorders states so that new state `i` is old state `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) {
        fn apply<T: Clone>(v: &mut Vec<T>, perm: &[usize]) {
            *v = perm.iter().map(|&i| v[i].clone()).collect();
        }
        apply(&mut self.cdfs, perm);
        apply(&mut self.weights, perm);
        apply(&mut self.prob_w0, perm);
        apply(&mut self.eta_low, perm);
        if let Some(eh) = self.eta_high.as_mut() {
            apply(eh, perm);
        }
        if let Some((_, bc)) = self.bid_cdfs.as_mut() {
            apply(bc, perm);
        }
    }

    /// Sup-norm distance of each state to a reference CDF.
    pub fn sup_errors(&self, truth: &dyn Fn(usize, f64) -> f64) -> Vec<f64> {
        (0..self.num_states())
            .map(|k| {
                let t: Vec<f64> = self.grid.iter().map(|&x| truth(k, x)).collect();
                sup_norm(&t, &self.cdfs[k])
            })
            .collect()
    }

    /// Mean of each state's distribution, `x̲ + ∫ (1 − F)`.
    pub fn means(&self) -> Vec<f64> {
        self.cdfs
            .iter()
            .map(|c| {
                let surv: Vec<f64> = c.iter().map(|f| 1.0 - f).collect();
                self.grid[0] + trapezoid(&self.grid, &surv)
            })
            .collect()
    }

    /// Rows `state,x,F_hat` with 1-based states.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "x", "F_hat"]).map_err(csv_err)?;
        for (k, cdf) in self.cdfs.iter().enumerate() {
            for (x, f) in self.grid.iter().zip(cdf) {
                w.write_record([(k + 1).to_string(), x.to_string(), f.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "K": self.num_states(),
            "p_k": self.weights,
            "Pr_W0_k": self.prob_w0,
            "eta_l": self.eta_low,
            "eta_h": self.eta_high,
            "diagnostics": self.diagnostics,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn ensure_distinct(stat: &[f64], what: &str) -> Result<()> {
    for i in 0..stat.len() {
        for j in i + 1..stat.len() {
            if (stat[i] - stat[j]).abs() <= 1e-12 * stat[i].abs().max(stat[j].abs()).max(1.0) {
                return Err(Error::LabelingAmbiguity(format!(
                    "states {} and {} tie on {what} ({:.6})",
                    i + 1,
                    j + 1,
                    stat[i]
                )));
            }
        }
    }
    Ok(())
}

fn sort_permutation(stat: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..stat.len()).collect();
    perm.sort_by(|&a, &b| stat[a].total_cmp(&stat[b]));
    perm
}

/// Permutation that orders the states of `est` under `rule`.
pub fn label_states(est: &ComponentEstimate, rule: LabelRule, truth: Option<&TruthFn>) -> Result<Vec<usize>> {
    let k = est.num_states();
    if k == 1 {
        return Ok(vec![0]);
    }
    match rule {
        LabelRule::ByInstrumentProb => {
            ensure_distinct(&est.prob_w0, "Pr(W = 0 | k)")?;
            Ok(sort_permutation(&est.prob_w0))
        }
        LabelRule::ByMean => {
            let means = est.means();
            ensure_distinct(&means, "mean")?;
            Ok(sort_permutation(&means))
        }
        LabelRule::FixtureTruth => {
            let truth = truth.ok_or_else(|| Error::config("estimation.labeling", "fixture_truth needs true CDFs"))?;
            let true_cdfs: Vec<Vec<f64>> = (0..k)
                .map(|s| est.grid.iter().map(|&x| truth(s, x)).collect())
                .collect();
            let mut scored: Vec<(f64, Vec<usize>)> = permutations(k)
                .into_iter()
                .map(|perm| {
                    let worst = perm
                        .iter()
                        .enumerate()
                        .map(|(target, &from)| sup_norm(&true_cdfs[target], &est.cdfs[from]))
                        .fold(0.0, f64::max);
                    (worst, perm)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            if scored.len() > 1 && (scored[1].0 - scored[0].0).abs() <= 1e-12 {
                return Err(Error::LabelingAmbiguity("two labelings match the truth equally well".into()));
            }
            Ok(scored.swap_remove(0).1)
        }
    }
}

/// How segment integrals are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileIntegration {
    /// Cumulative cell frequencies mapped through the spectral maps; kernel
    /// rows are used only at the cutoff.
    #[default]
    Cumulative,
    /// Trapezoid integration of kernel profiles on a fine segment grid.
    Trapezoid,
}

#[derive(Clone)]
pub struct IdentifyOptions {
    /// Points of the output grid.
    pub grid_points: usize,
    /// Points per segment for trapezoid profiles.
    pub profile_points: usize,
    pub integration: ProfileIntegration,
    pub labeling: LabelRule,
    pub truth: Option<TruthFn>,
    pub eigen: EigenOptions,
    pub weight_condition_cap: f64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            grid_points: 101,
            profile_points: 201,
            integration: ProfileIntegration::Cumulative,
            labeling: LabelRule::ByInstrumentProb,
            truth: None,
            eigen: EigenOptions::default(),
            weight_condition_cap: 1e12,
        }
    }
}

/// Scheme used for identification with `k` states.
///
/// With one state there is nothing to decompose and the scheme is a single
/// cell split at the middle cutoff candidate. Otherwise, among the schemes
/// with `k` cells per segment whose estimated rank is `k`, the one whose
/// `k`-th singular value is most clearly separated from zero.
pub fn identification_scheme(
    source: &dyn JointObservables,
    k: usize,
    settings: &RankSettings,
    estimate: Option<&KEstimate>,
) -> Result<Discretization> {
    if k == 0 {
        return Err(Error::domain("number of states must be positive"));
    }
    if k == 1 {
        let cands = source.cutoff_candidates(settings.r1)?;
        let cutoff = cands[cands.len() / 2];
        return Discretization::from_boundaries(source.support(), cutoff, &[], &[]);
    }
    let computed;
    let level = match estimate.and_then(|e| e.levels.iter().find(|l| l.dim == k)) {
        Some(level) => level,
        None => {
            computed = rank_level(source, k, settings)?;
            &computed
        }
    };
    level
        .schemes
        .iter()
        .filter(|s| s.decision.estimated_rank == k)
        .max_by(|a, b| {
            a.decision
                .strength()
                .total_cmp(&b.decision.strength())
                .then(b.decision.scheme_id.cmp(&a.decision.scheme_id))
        })
        .map(|s| s.scheme.clone())
        .ok_or_else(|| Error::RankDeficient(format!("no scheme with {k} cells per segment reaches rank {k}")))
}

/// Segment cumulative functions of each state on the full grid, already
/// scaled: `F` below the cutoff, `1 − F` above it.
struct Assembled {
    cdfs: Vec<Vec<f64>>,
    eta_low: Vec<f64>,
    eta_high: Vec<f64>,
    continuity: f64,
    mass: f64,
}

/// Inverse of the transform `F ↦ F^{r-1}` below and `1 − F ↦ (1 − F)^m`
/// above, with the scale system solved per state.
fn assemble_cumulative(view: &dyn SchemeView, maps: &SpectralMaps, grid: &[f64], r: u32, m: u32) -> Result<Assembled> {
    let k = maps.low.ncols();
    let cutoff = view.scheme().cutoff;
    let pl = (r - 1) as f64;
    let ph = m as f64;
    let g_c = maps.apply_low(&view.low_cumulative_row(cutoff, WFilter::All)?);
    let dg_c = maps.apply_low(&view.low_row_at_cutoff(WFilter::All)?);
    let t_c = maps.apply_high(&view.high_tail_row(cutoff, WFilter::All)?);
    let dt_c = maps.apply_high(&view.high_row_at_cutoff(WFilter::All)?);
    let mut eta_low = Vec::with_capacity(k);
    let mut eta_high = Vec::with_capacity(k);
    let mut continuity: f64 = 0.0;
    let mut mass: f64 = 0.0;
    for s in 0..k {
        if !(g_c[s] > 0.0 && t_c[s] > 0.0) {
            return Err(Error::numeric(format!(
                "state {} has nonpositive segment mass ({:.3e}, {:.3e})",
                s + 1,
                g_c[s],
                t_c[s]
            )));
        }
        let a_l = g_c[s].powf(1.0 / pl - 1.0) * dg_c[s].max(0.0) / pl;
        let m_l = g_c[s].powf(1.0 / pl);
        let a_h = t_c[s].powf(1.0 / ph - 1.0) * dt_c[s].max(0.0) / ph;
        let m_h = t_c[s].powf(1.0 / ph);
        let (el, eh) = solve_scale_system(a_l, m_l, a_h, m_h).stage(Stage::Scales)?;
        continuity = continuity.max((el * a_l - eh * a_h).abs());
        mass = mass.max((el * m_l + eh * m_h - 1.0).abs());
        eta_low.push(el);
        eta_high.push(eh);
    }
    let rows = grid
        .par_iter()
        .map(|&x| {
            if x <= cutoff {
                let g = maps.apply_low(&view.low_cumulative_row(x, WFilter::All)?);
                Ok(g.iter().zip(&eta_low).map(|(&v, e)| e * v.max(0.0).powf(1.0 / pl)).collect())
            } else {
                let t = maps.apply_high(&view.high_tail_row(x, WFilter::All)?);
                Ok(t.iter().zip(&eta_high).map(|(&v, e)| 1.0 - e * v.max(0.0).powf(1.0 / ph)).collect())
            }
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let cdfs = (0..k).map(|s| rows.iter().map(|row| row[s]).collect()).collect();
    Ok(Assembled {
        cdfs,
        eta_low,
        eta_high,
        continuity,
        mass,
    })
}

fn assemble_trapezoid(view: &dyn SchemeView, maps: &SpectralMaps, grid: &[f64], r: u32, n: u32, points: usize) -> Result<Assembled> {
    let (lo, hi) = view.scheme().support();
    let cutoff = view.scheme().cutoff;
    let low_grid = linspace(lo, cutoff, points);
    let high_grid = linspace(cutoff, hi, points);
    let low = low_density_profile(view, maps, &low_grid, WFilter::All).stage(Stage::Profiles)?;
    let high = high_profile(view, maps, &high_grid, WFilter::All).stage(Stage::Profiles)?;
    let k = low.values.len();
    let mut eta_low = Vec::with_capacity(k);
    let mut eta_high = Vec::with_capacity(k);
    let mut cdfs = Vec::with_capacity(k);
    let mut continuity: f64 = 0.0;
    let mut mass: f64 = 0.0;
    for s in 0..k {
        let fl = recover_scaled_parent(&low_grid, &low.values[s], Segment::Low, r, n).stage(Stage::Profiles)?;
        let fh = recover_scaled_parent(&high_grid, &high.values[s], Segment::High, r, n).stage(Stage::Profiles)?;
        let (el, eh) = pin_scales(&fl, &fh, cutoff).stage(Stage::Scales)?;
        let a_l = interp(&fl.grid, &fl.density, cutoff);
        let a_h = interp(&fh.grid, &fh.density, cutoff);
        let m_l = trapezoid(&fl.grid, &fl.density);
        let m_h = trapezoid(&fh.grid, &fh.density);
        continuity = continuity.max((el * a_l - eh * a_h).abs());
        mass = mass.max((el * m_l + eh * m_h - 1.0).abs());
        let cum_l = cumulative_trapezoid(&fl.grid, &fl.density);
        let tail_h = tail_trapezoid(&fh.grid, &fh.density);
        cdfs.push(
            grid.iter()
                .map(|&x| {
                    if x <= cutoff {
                        el * interp(&low_grid, &cum_l, x)
                    } else {
                        1.0 - eh * interp(&high_grid, &tail_h, x)
                    }
                })
                .collect(),
        );
        eta_low.push(el);
        eta_high.push(eh);
    }
    Ok(Assembled {
        cdfs,
        eta_low,
        eta_high,
        continuity,
        mass,
    })
}

/// Renormalizes to `F(x̄) = 1` and projects onto monotone CDFs; returns the
/// largest pointwise adjustment.
pub(crate) fn finalize_cdfs(cdfs: &mut [Vec<f64>]) -> f64 {
    let mut adjust: f64 = 0.0;
    for cdf in cdfs.iter_mut() {
        let top = *cdf.last().expect("nonempty");
        if top > 0.0 {
            cdf.iter_mut().for_each(|f| *f /= top);
        }
        let projected = project_cdf(cdf);
        adjust = adjust.max(sup_norm(cdf, &projected));
        *cdf = projected;
    }
    adjust
}

/// Keeps the strictly increasing part of a bid CDF so that flat stretches
/// left by the monotone projection do not block the inversion.
fn strictly_increasing(grid: &[f64], cdf: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut fs: Vec<f64> = Vec::new();
    for (&x, &f) in grid.iter().zip(cdf) {
        if fs.last().is_none_or(|&last| f > last + 1e-12) {
            xs.push(x);
            fs.push(f);
        }
    }
    (xs, fs)
}

/// Converts bid-space CDFs to value space on a common value grid.
pub(crate) fn to_value_space(bid_grid: &[f64], bid_cdfs: &[Vec<f64>], n: u32, points: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let value_cdfs = bid_cdfs
        .iter()
        .map(|c| {
            let (xs, fs) = strictly_increasing(bid_grid, c);
            value_cdf_from_bid_cdf(&xs, &fs, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let lo = bid_grid[0];
    let hi = value_cdfs
        .iter()
        .map(|v| *v.values.last().expect("nonempty"))
        .fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(lo, hi, points);
    let mut cdfs: Vec<Vec<f64>> = value_cdfs
        .iter()
        .map(|v| grid.iter().map(|&x| if x < v.values[0] { 0.0 } else { v.eval(x) }).collect())
        .collect();
    finalize_cdfs(&mut cdfs);
    Ok((grid, cdfs))
}

/// Identifies the states' distributions when every auction has `n` bidders.
pub fn identify_known_n(
    source: &dyn JointObservables,
    n: u32,
    k: usize,
    scheme: &Discretization,
    format: AuctionFormat,
    opts: &IdentifyOptions,
) -> Result<ComponentEstimate> {
    let r = source.rank();
    if n < r {
        return Err(Error::config("estimation.n", format!("n = {n} is below the rank r = {r}")));
    }
    if scheme.dim() != k {
        return Err(Error::domain(format!(
            "scheme has {} cells per segment but {k} states were requested",
            scheme.dim()
        )));
    }
    if opts.grid_points < 3 {
        return Err(Error::config("estimation.grid_points", "must be at least 3"));
    }
    let view = source.view(scheme).stage(Stage::Discretization)?;
    let j = view.cell_matrix(WFilter::All).stage(Stage::Discretization)?;
    let j0 = view.cell_matrix(WFilter::W0).stage(Stage::Discretization)?;
    let eig = eigendecompose(&j0, &j, &opts.eigen).stage(Stage::Eigendecomposition)?;
    let maps = SpectralMaps::new(&j.entries, &eig.low_matrix).stage(Stage::Eigendecomposition)?;

    let (lo, hi) = source.support();
    let grid = linspace(lo, hi, opts.grid_points);
    let assembled = match opts.integration {
        ProfileIntegration::Cumulative => assemble_cumulative(view.as_ref(), &maps, &grid, r, n - r + 1),
        ProfileIntegration::Trapezoid => assemble_trapezoid(view.as_ref(), &maps, &grid, r, n, opts.profile_points),
    }
    .stage(Stage::Profiles)?;
    let mut cdfs = assembled.cdfs;
    let projection_adjustment = finalize_cdfs(&mut cdfs);

    let fit = recover_weights(source, &grid, &cdfs, n, opts.weight_condition_cap).stage(Stage::Weights)?;

    let (out_grid, out_cdfs, bid_cdfs) = match format {
        AuctionFormat::Ascending => (grid, cdfs, None),
        AuctionFormat::FirstPrice => {
            let (vg, vc) = to_value_space(&grid, &cdfs, n, opts.grid_points).stage(Stage::Profiles)?;
            (vg, vc, Some((grid, cdfs)))
        }
    };

    let mut est = ComponentEstimate {
        grid: out_grid,
        cdfs: out_cdfs,
        weights: fit.weights,
        prob_w0: eig.eigenvalues.iter().map(|l| l.clamp(0.0, 1.0)).collect(),
        eta_low: assembled.eta_low,
        eta_high: Some(assembled.eta_high),
        bid_cdfs,
        diagnostics: Diagnostics {
            continuity_residual: assembled.continuity,
            mass_residual: assembled.mass,
            eigen_gap: eig.min_relative_gap,
            reconstruction_residual: eig.residual,
            eigenvector_clipped: eig.clipped,
            condition_number: eig.condition,
            weight_residual: fit.residual,
            projection_adjustment,
            scheme: Some(scheme.to_json()),
        },
    };
    let perm = label_states(&est, opts.labeling, opts.truth.as_ref()).stage(Stage::Labeling)?;
    est.permute(&perm);
    Ok(est)
}
