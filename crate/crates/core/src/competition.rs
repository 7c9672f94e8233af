//! Ascending auctions with an unobserved number of bidders.
//!
//! Below the cutoff the low-side factor does not depend on `n`, so the
//! spectral step still gives each state's parent CDF up to a scale. Scales
//! and the joint weights of `(state, n)` are then fit to the marginal CDF of
//! `x_hi`, and the upper segment follows from inverting each state's tail
//! mixture `Σ_n p_n C(n, r-1) (1 − F)^{n-r+1}`, which is strictly decreasing
//! in `F`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::discretize::{Discretization, WFilter};
use crate::error::{Error, Result, Stage, StageExt};
use crate::numeric::isotonic::project_cdf;
use crate::numeric::optim::{levenberg_marquardt, OptimOptions};
use crate::numeric::quad::linspace;
use crate::numeric::roots::{bisect, brent};
use crate::numeric::softmax;
use crate::order_stats::{binom_constant, consecutive_joint_cdf_grad, os_cdf_unchecked};
use crate::source::JointObservables;
use crate::spectral::{
    eigendecompose, finalize_cdfs, label_states, ComponentEstimate, Diagnostics, IdentifyOptions, SpectralMaps,
};

/// Joint distribution of states and bidder counts.
#[derive(Clone, Debug, Serialize)]
pub struct CompetitionMixture {
    pub support: Vec<u32>,
    /// `weights[k][i]` is `Pr(state k, n = support[i])`.
    pub weights: Vec<Vec<f64>>,
    /// `F^k` at the cutoff, per state.
    pub eta: Vec<f64>,
}

impl CompetitionMixture {
    /// Marginal state weights.
    pub fn state_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().sum()).collect()
    }

    /// Marginal distribution of the number of bidders.
    pub fn competition_weights(&self) -> Vec<f64> {
        (0..self.support.len())
            .map(|i| self.weights.iter().map(|w| w[i]).sum())
            .collect()
    }

    pub fn permute(&mut self, perm: &[usize]) {
        self.weights = perm.iter().map(|&i| self.weights[i].clone()).collect();
        self.eta = perm.iter().map(|&i| self.eta[i]).collect();
    }

    /// Rows `k,n,p_kn` with 1-based states.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["k", "n", "p_kn"]).map_err(err)?;
        for (k, row) in self.weights.iter().enumerate() {
            for (n, p) in self.support.iter().zip(row) {
                w.write_record([(k + 1).to_string(), n.to_string(), p.to_string()])
                    .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_support(support: &[u32], r: u32) -> Result<()> {
    if support.is_empty() {
        return Err(Error::config("estimation.support", "competition support is empty"));
    }
    if support.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("estimation.support", "competition support must be strictly increasing"));
    }
    if support[0] < r || r < 2 {
        return Err(Error::config(
            "estimation.support",
            format!("smallest bidder count {} is below the rank r = {r}", support[0]),
        ));
    }
    Ok(())
}

fn tail_constants(support: &[u32], r: u32) -> Result<Vec<f64>> {
    support.iter().map(|&n| Ok(binom_constant(r, n)? as f64)).collect()
}

/// `Σ_n p_n C(n, r-1) (1 − F)^{n-r+1}`: the upper-tail integral of the
/// tail mixture at a point where the parent CDF equals `cdf`.
pub fn tail_mixture_value(cdf: f64, weights: &[f64], support: &[u32], r: u32) -> Result<f64> {
    check_support(support, r)?;
    let c = tail_constants(support, r)?;
    Ok(weights
        .iter()
        .zip(support)
        .zip(&c)
        .map(|((p, &n), c)| p * c * (1.0 - cdf).powi((n - r + 1) as i32))
        .sum())
}

/// Parent CDF value at which the tail mixture's upper-tail integral equals `t`.
pub fn invert_tail_mixture(t: f64, weights: &[f64], support: &[u32], r: u32) -> Result<f64> {
    check_support(support, r)?;
    if weights.len() != support.len() || weights.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::domain("tail mixture weights must lie in [0, 1], one per bidder count"));
    }
    let max = tail_mixture_value(0.0, weights, support, r)?;
    if !(0.0..=max * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::Range(format!("tail value {t:.6e} outside [0, {max:.6e}]")));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    if t >= max {
        return Ok(0.0);
    }
    bisect(
        |f| tail_mixture_value(f, weights, support, r).expect("validated") - t,
        0.0,
        1.0,
        1e-12,
    )
}

/// Quantile levels `i / (len + 1)`, `i = 1..=len`.
pub fn default_alpha_grid(len: usize) -> Vec<f64> {
    (1..=len).map(|i| i as f64 / (len + 1) as f64).collect()
}

/// Data the scales and joint weights are fitted to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompetitionObjective {
    /// CDF of `x_hi` below the cutoff only; a single state uses the
    /// root-finding solver.
    LowSegment,
    /// CDF of `x_hi` on both segments.
    #[default]
    FullSupport,
}

#[derive(Clone, Debug)]
pub struct CompetitionOptions {
    pub objective: CompetitionObjective,
    /// Number of multistarts of the joint fit.
    pub multistarts: usize,
    /// RMS misfit tolerance; `None` picks `1e-8` for population inputs and
    /// `3 / sqrt(M)` for samples.
    pub tolerance: Option<f64>,
    /// Maximal disagreement between near-optimal multistart solutions;
    /// `None` picks `1e-4` for population inputs and `1e-2` for samples.
    pub agreement: Option<f64>,
    /// Relative misfit excess over the best start that still counts as
    /// near-optimal (capped at twice the tolerance).
    pub band: f64,
    /// Candidate scales scanned by the root finder of the single-state solver.
    pub eta_scan: usize,
    pub seed: u64,
    /// Points of the low-segment fitting grid.
    pub low_points: usize,
    /// Points of the high-segment fitting grid.
    pub high_points: usize,
    /// Grid points per axis of the joint cells of `(x_lo, x_hi)` in the
    /// full-support objective; `0` leaves the joint cells out.
    pub joint_points: usize,
}

impl Default for CompetitionOptions {
    fn default() -> Self {
        Self {
            objective: CompetitionObjective::default(),
            multistarts: 20,
            tolerance: None,
            agreement: None,
            band: 1e-3,
            eta_scan: 400,
            seed: 0,
            low_points: 101,
            high_points: 101,
            joint_points: 24,
        }
    }
}

impl CompetitionOptions {
    fn agreement_for(&self, sample_size: Option<usize>) -> f64 {
        self.agreement.unwrap_or(if sample_size.is_some() { 1e-2 } else { 1e-4 })
    }

    fn tolerance_for(&self, sample_size: Option<usize>) -> f64 {
        self.tolerance.unwrap_or(match sample_size {
            None => 1e-8,
            Some(m) => 5.0 / (m as f64).sqrt(),
        })
    }
}

/// Scale and competition weights of a single-state design.
#[derive(Clone, Debug, Serialize)]
pub struct EtaSolution {
    pub eta: f64,
    pub weights: Vec<f64>,
    /// RMS misfit over the full grid.
    pub residual: f64,
    /// Every root of the weight-sum constraint that was found.
    pub roots: Vec<f64>,
}

fn rms_misfit(f_r: &[f64], f_check: &[f64], eta: f64, weights: &[f64], support: &[u32], r: u32) -> f64 {
    let ss: f64 = f_r
        .iter()
        .zip(f_check)
        .map(|(&y, &f)| {
            let u = (eta * f).clamp(0.0, 1.0);
            let fit: f64 = weights.iter().zip(support).map(|(p, &n)| p * os_cdf_unchecked(u, r, n)).sum();
            (y - fit).powi(2)
        })
        .sum();
    (ss / f_r.len() as f64).sqrt()
}

/// Solves `F_r(x) = Σ_n p_n B_{r,n}(η F̌(x))` for `η` and `p` when there is a
/// single state.
///
/// For each candidate `η`, the weights solve the square linear system at the
/// grid points where `F̌` is closest to the levels in `alpha`; `η` is a root of
/// `Σ_n p_n(η) = 1`, and every root is validated against the whole grid.
pub fn solve_eta_pn(
    f_r: &[f64],
    f_check: &[f64],
    r: u32,
    support: &[u32],
    alpha: &[f64],
    tolerance: f64,
    scan: usize,
) -> Result<EtaSolution> {
    check_support(support, r)?;
    let len = support.len();
    if f_r.len() != f_check.len() || f_r.len() < len {
        return Err(Error::domain("CDF samples have mismatched or too short grids"));
    }
    if alpha.len() != len {
        return Err(Error::domain(format!("need {len} alpha levels, got {}", alpha.len())));
    }
    let lo = f_check.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f_check.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= 0.0 {
        return Err(Error::domain("scaled parent CDF vanishes on the grid"));
    }
    if alpha.iter().any(|&a| a <= lo || a > hi) {
        return Err(Error::domain(format!("alpha levels must lie in ({lo:.4}, {hi:.4}]")));
    }
    // grid points where F̌ is closest to each level
    let mut rows: Vec<usize> = alpha
        .iter()
        .map(|&a| {
            (0..f_check.len())
                .min_by(|&i, &j| (f_check[i] - a).abs().total_cmp(&(f_check[j] - a).abs()))
                .expect("nonempty grid")
        })
        .collect();
    rows.dedup();
    if rows.len() != len {
        return Err(Error::domain("alpha levels are closer than the grid resolution"));
    }
    let levels: Vec<f64> = rows.iter().map(|&i| f_check[i]).collect();
    let targets: Vec<f64> = rows.iter().map(|&i| f_r[i]).collect();
    let b = DVector::from_vec(targets);
    let weights_at = |eta: f64| -> Option<DVector<f64>> {
        let a = DMatrix::from_fn(len, len, |i, j| os_cdf_unchecked((eta * levels[i]).min(1.0), r, support[j]));
        a.lu().solve(&b)
    };
    let excess = |eta: f64| weights_at(eta).map(|p| p.sum() - 1.0);

    let eta_max = 1.0 / hi;
    let etas: Vec<f64> = (1..=scan).map(|i| eta_max * i as f64 / scan as f64).collect();
    let values: Vec<Option<f64>> = etas.iter().map(|&e| excess(e)).collect();
    let mut roots = Vec::new();
    for i in 0..scan {
        let Some(v1) = values[i] else { continue };
        if v1.abs() < 1e-10 {
            // root on a scan point, including the bracket end
            roots.push(etas[i]);
            continue;
        }
        if i == 0 {
            continue;
        }
        let Some(v0) = values[i - 1] else { continue };
        if v0.signum() != v1.signum() && v0.abs() >= 1e-10 {
            let root = brent(|e| excess(e).unwrap_or(f64::NAN), etas[i - 1], etas[i], 1e-14)?;
            roots.push(root);
        }
    }
    if roots.is_empty() {
        return Err(Error::Identification(format!(
            "weights never sum to one for scales in (0, {eta_max:.4}]"
        )));
    }
    let mut passing: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for &eta in &roots {
        let Some(p) = weights_at(eta) else { continue };
        if p.iter().any(|&v| v < -1e-9) {
            continue;
        }
        let p: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
        let res = rms_misfit(f_r, f_check, eta, &p, support, r);
        if res <= tolerance {
            passing.push((eta, res, p));
        }
    }
    passing.sort_by(|a, b| a.1.total_cmp(&b.1));
    match passing.len() {
        0 => Err(Error::Identification(format!(
            "no root among {roots:?} fits the observed CDF within {tolerance:.2e}"
        ))),
        1 => {
            let (eta, residual, weights) = passing.remove(0);
            Ok(EtaSolution {
                eta,
                weights,
                residual,
                roots,
            })
        }
        _ => Err(Error::Ambiguity(format!(
            "scales {:?} all fit the observed CDF within {tolerance:.2e}",
            passing.iter().map(|p| p.0).collect::<Vec<_>>()
        ))),
    }
}

/// Scales and joint weights of a multi-state design.
#[derive(Clone, Debug, Serialize)]
pub struct KnSolution {
    pub eta: Vec<f64>,
    /// `weights[k][i]` for bidder count `support[i]`.
    pub weights: Vec<Vec<f64>>,
    /// RMS misfit of the best start.
    pub residual: f64,
    /// Converged starts inside the near-optimal band.
    pub near_optimal: usize,
    pub starts: usize,
}

/// Observables of the full-support objective. Low-grid values pair with the
/// scaled parent CDFs, high-grid values with the tail integrals.
#[derive(Clone, Copy, Debug)]
pub struct FullSupportData<'a> {
    /// CDF of `x_lo` on the low grid.
    pub low_lower: &'a [f64],
    /// CDF of `x_hi` on the low grid.
    pub low_upper: &'a [f64],
    /// CDF of `x_lo` on the high grid.
    pub high_lower: &'a [f64],
    /// CDF of `x_hi` on the high grid.
    pub high_upper: &'a [f64],
    /// `tails[k][i]`: state `k`'s tail integral at the `i`-th high grid point.
    pub tails: &'a [Vec<f64>],
    /// Joint CDF of `(x_lo, x_hi)` on a coarse grid.
    pub joint: Option<JointData<'a>>,
}

/// Joint CDF of `(x_lo, x_hi)` on a subset of the fitting points.
#[derive(Clone, Copy, Debug)]
pub struct JointData<'a> {
    /// Indices into the low grid followed by the high grid; the first must
    /// be the lower support end.
    pub points: &'a [usize],
    /// `cdf[i][j] = P(x_lo ≤ g_i, x_hi ≤ g_j)` over the selected points
    /// followed by the upper support end.
    pub cdf: &'a [Vec<f64>],
}

/// CDF and density of the `q`-th order statistic of `n` draws as
/// polynomials in the parent CDF value.
struct OrderPoly {
    q: i32,
    n: i32,
    binomials: Vec<f64>,
    density_constant: f64,
}

impl OrderPoly {
    fn new(q: u32, n: u32) -> Self {
        let binomials = (0..=n).map(|i| choose_f64(n, i)).collect();
        // n! / ((q-1)! (n-q)!) = q C(n, q)
        let density_constant = q as f64 * choose_f64(n, q);
        Self {
            q: q as i32,
            n: n as i32,
            binomials,
            density_constant,
        }
    }

    fn cdf(&self, u: f64) -> f64 {
        let v = 1.0 - u;
        (self.q..=self.n)
            .map(|i| self.binomials[i as usize] * u.powi(i) * v.powi(self.n - i))
            .sum::<f64>()
            .min(1.0)
    }

    fn pdf(&self, u: f64) -> f64 {
        self.density_constant * u.powi(self.q - 1) * (1.0 - u).powi(self.n - self.q)
    }
}

fn choose_f64(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Observed CDF values of one order statistic.
struct Statistic<'a> {
    polys: Vec<OrderPoly>,
    low: &'a [f64],
    high: &'a [f64],
    /// Bin frequencies standardizing binned residuals; `None` fits the CDF.
    bins: Option<Vec<f64>>,
}

/// Observed cell frequencies of `(x_lo, x_hi)` on a coarse grid.
struct JointCells {
    /// Model points forming the grid; the first is the lower support end and
    /// the upper support end is appended implicitly.
    points: Vec<usize>,
    /// `frequencies[i][j]` for the cell `(g_i, g_{i+1}] × (g_j, g_{j+1}]`,
    /// `i ≤ j`, floored.
    frequencies: Vec<Vec<f64>>,
}

impl JointCells {
    fn new(points: Vec<usize>, cdf: &[Vec<f64>], floor: f64) -> Self {
        let g = points.len();
        let frequencies = (0..g)
            .map(|i| {
                (0..g)
                    .map(|j| (cdf[i + 1][j + 1] - cdf[i][j + 1] - cdf[i + 1][j] + cdf[i][j]).max(floor))
                    .collect()
            })
            .collect();
        Self { points, frequencies }
    }

    fn cells(&self) -> usize {
        let g = self.points.len();
        g * (g + 1) / 2
    }
}

/// Least-squares model of the marginal CDFs of the observed statistics.
struct MarginalModel<'a> {
    f_checks: &'a [Vec<f64>],
    tails: Option<&'a [Vec<f64>]>,
    stats: Vec<Statistic<'a>>,
    joint: Option<JointCells>,
    support: &'a [u32],
    constants: Vec<f64>,
    exponents: Vec<i32>,
    r: u32,
}

/// Parent CDF value solving `Σ_n p_n C_n (1 − u)^{m_n} = target`, with the
/// derivative of the left side there. Newton from `u = 0` converges
/// monotonically because the left side is convex and decreasing.
fn solve_tail(target: f64, p: &[f64], constants: &[f64], exponents: &[i32]) -> (f64, f64) {
    let eval = |u: f64| {
        let mut h = 0.0;
        let mut dh = 0.0;
        for ((p, c), &m) in p.iter().zip(constants).zip(exponents) {
            let base = (1.0 - u).powi(m - 1);
            h += p * c * base * (1.0 - u);
            dh -= p * c * m as f64 * base;
        }
        (h, dh)
    };
    let (h0, dh0) = eval(0.0);
    if target >= h0 {
        return (0.0, dh0);
    }
    if target <= 0.0 {
        return (1.0, 0.0);
    }
    let mut u = 0.0;
    for _ in 0..200 {
        let (h, dh) = eval(u);
        if dh >= 0.0 {
            break;
        }
        let next = (u - (h - target) / dh).min(1.0);
        let done = (next - u).abs() < 1e-15;
        u = next;
        if done {
            break;
        }
    }
    (u, eval(u).1)
}

/// Parent CDF value of one state at one grid point with its sensitivities.
struct Point {
    u: f64,
    d_log_eta: f64,
    /// `∂u/∂p_{k,n}` for the state's own weights.
    d_weights: Vec<f64>,
}

impl<'a> MarginalModel<'a> {
    fn new(
        f_checks: &'a [Vec<f64>],
        tails: Option<&'a [Vec<f64>]>,
        stats: Vec<(u32, &'a [f64], &'a [f64], Option<f64>)>,
        support: &'a [u32],
        r: u32,
    ) -> Result<Self> {
        let stats = stats
            .into_iter()
            .map(|(q, low, high, floor)| Statistic {
                polys: support.iter().map(|&n| OrderPoly::new(q, n)).collect(),
                low,
                high,
                bins: floor.map(|f| bin_frequencies(low, high, f)),
            })
            .collect();
        Ok(Self {
            f_checks,
            tails,
            stats,
            support,
            joint: None,
            constants: tail_constants(support, r)?,
            exponents: support.iter().map(|&n| (n - r + 1) as i32).collect(),
            r,
        })
    }

    fn states(&self) -> usize {
        self.f_checks.len()
    }

    fn low_points(&self) -> usize {
        self.f_checks[0].len()
    }

    fn high_points(&self) -> usize {
        self.tails.map_or(0, |t| t[0].len())
    }

    fn rows(&self) -> usize {
        let points = self.low_points() + self.high_points();
        let marginal: usize = self.stats.iter().map(|s| points + s.bins.is_some() as usize).sum();
        marginal + self.joint.as_ref().map_or(0, JointCells::cells)
    }

    /// Parameters: `log η_k` then `K|n| − 1` logits (last fixed at 0).
    fn unpack(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let k = self.states();
        let eta: Vec<f64> = (0..k).map(|i| x[i].exp()).collect();
        let mut logits: Vec<f64> = x.iter().skip(k).copied().collect();
        logits.push(0.0);
        (eta, softmax(&logits))
    }

    fn low_point(&self, s: usize, i: usize, eta: f64) -> Point {
        let scaled = eta * self.f_checks[s][i];
        let interior = scaled > 0.0 && scaled < 1.0;
        Point {
            u: scaled.clamp(0.0, 1.0),
            d_log_eta: if interior { scaled } else { 0.0 },
            d_weights: vec![0.0; self.support.len()],
        }
    }

    fn high_point(&self, s: usize, i: usize, eta: f64, p: &[f64]) -> Point {
        let tails = self.tails.expect("high segment present");
        let target = tails[s][i].max(0.0) / eta.powi(self.r as i32 - 1);
        let (u, dh) = solve_tail(target, p, &self.constants, &self.exponents);
        if !(u > 0.0 && u < 1.0 && dh < 0.0) {
            return Point {
                u,
                d_log_eta: 0.0,
                d_weights: vec![0.0; self.support.len()],
            };
        }
        Point {
            u,
            d_log_eta: (self.r - 1) as f64 * target / -dh,
            d_weights: self
                .constants
                .iter()
                .zip(&self.exponents)
                .map(|(c, &m)| -c * (1.0 - u).powi(m) / dh)
                .collect(),
        }
    }

    fn residuals(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.states();
        let len = self.support.len();
        let (eta, p) = self.unpack(x);
        let low = self.low_points();
        let points = low + self.high_points();
        let mut out = DVector::zeros(self.rows());
        let mut out_jac = DMatrix::zeros(self.rows(), x.len());
        let mut offset = 0;
        let states: Vec<Vec<Point>> = (0..points)
            .map(|i| {
                (0..k)
                    .map(|s| {
                        if i < low {
                            self.low_point(s, i, eta[s])
                        } else {
                            self.high_point(s, i - low, eta[s], &p[s * len..(s + 1) * len])
                        }
                    })
                    .collect()
            })
            .collect();
        let mut raw_grad = vec![0.0; k * len];
        for stat in &self.stats {
            let mut res = DVector::zeros(points);
            let mut jac = DMatrix::zeros(points, x.len());
            for (i, point) in states.iter().enumerate() {
                let mut fit = 0.0;
                for (s, pt) in point.iter().enumerate() {
                    let ps = &p[s * len..(s + 1) * len];
                    let density: f64 = ps.iter().zip(&stat.polys).map(|(w, poly)| w * poly.pdf(pt.u)).sum();
                    for (j, poly) in stat.polys.iter().enumerate() {
                        let cdf = poly.cdf(pt.u);
                        fit += ps[j] * cdf;
                        raw_grad[s * len + j] = cdf + density * pt.d_weights[j];
                    }
                    jac[(i, s)] = -density * pt.d_log_eta;
                }
                // d p_c / d θ_b = p_c (δ_bc − p_b)
                let mean: f64 = p.iter().zip(&raw_grad).map(|(w, g)| w * g).sum();
                for b in 0..k * len - 1 {
                    jac[(i, k + b)] = -p[b] * (raw_grad[b] - mean);
                }
                let observed = if i < low { stat.low[i] } else { stat.high[i - low] };
                res[i] = observed - fit;
            }
            match &stat.bins {
                None => {
                    out.rows_mut(offset, points).copy_from(&res);
                    out_jac.rows_mut(offset, points).copy_from(&jac);
                    offset += points;
                }
                Some(freq) => {
                    // standardized bin residuals (obs_b − model_b) / sqrt(obs_b),
                    // bins closed by the CDF values 0 and 1
                    for b in 0..=points {
                        let scale = 1.0 / freq[b].sqrt();
                        let upper = if b < points { res[b] } else { 0.0 };
                        let lower = if b > 0 { res[b - 1] } else { 0.0 };
                        out[offset + b] = (upper - lower) * scale;
                        for c in 0..x.len() {
                            let upper = if b < points { jac[(b, c)] } else { 0.0 };
                            let lower = if b > 0 { jac[(b - 1, c)] } else { 0.0 };
                            out_jac[(offset + b, c)] = (upper - lower) * scale;
                        }
                    }
                    offset += points + 1;
                }
            }
        }
        if let Some(joint) = &self.joint {
            self.joint_residuals(joint, &states, &p, offset, &mut out, &mut out_jac);
        }
        (out, out_jac)
    }

    /// Standardized residuals of the joint cells, written from row `offset`.
    fn joint_residuals(
        &self,
        joint: &JointCells,
        states: &[Vec<Point>],
        p: &[f64],
        offset: usize,
        out: &mut DVector<f64>,
        out_jac: &mut DMatrix<f64>,
    ) {
        let k = self.states();
        let len = self.support.len();
        let d = out_jac.ncols();
        let top = Point {
            u: 1.0,
            d_log_eta: 0.0,
            d_weights: vec![0.0; len],
        };
        let g = joint.points.len() + 1;
        let at = |i: usize, s: usize| if i < g - 1 { &states[joint.points[i]][s] } else { &top };
        // model joint CDF and its gradient at grid pairs i ≤ j
        let mut cdf = vec![vec![0.0; g]; g];
        let mut grad = vec![vec![DVector::<f64>::zeros(d); g]; g];
        let mut raw_grad = vec![0.0; k * len];
        for i in 0..g {
            for j in i..g {
                let mut fit = 0.0;
                let mut row = DVector::zeros(d);
                for s in 0..k {
                    let (a, b) = (at(i, s), at(j, s));
                    let ps = &p[s * len..(s + 1) * len];
                    let terms: Vec<(f64, f64, f64)> = self
                        .support
                        .iter()
                        .map(|&n| consecutive_joint_cdf_grad(a.u, b.u, self.r, n))
                        .collect();
                    let d_lo: f64 = ps.iter().zip(&terms).map(|(w, t)| w * t.1).sum();
                    let d_hi: f64 = ps.iter().zip(&terms).map(|(w, t)| w * t.2).sum();
                    for (jn, t) in terms.iter().enumerate() {
                        fit += ps[jn] * t.0;
                        raw_grad[s * len + jn] = t.0 + d_lo * a.d_weights[jn] + d_hi * b.d_weights[jn];
                    }
                    row[s] = d_lo * a.d_log_eta + d_hi * b.d_log_eta;
                }
                let mean: f64 = p.iter().zip(&raw_grad).map(|(w, g)| w * g).sum();
                for c in 0..k * len - 1 {
                    row[k + c] = p[c] * (raw_grad[c] - mean);
                }
                cdf[i][j] = fit;
                grad[i][j] = row;
            }
        }
        let value = |i: usize, j: usize| cdf[i.min(j)][j];
        let slope = |i: usize, j: usize| &grad[i.min(j)][j];
        let mut row = offset;
        for i in 0..g - 1 {
            for j in i..g - 1 {
                let model = value(i + 1, j + 1) - value(i, j + 1) - value(i + 1, j) + value(i, j);
                let scale = 1.0 / joint.frequencies[i][j].sqrt();
                out[row] = (joint.frequencies[i][j] - model) * scale;
                let dm = slope(i + 1, j + 1) - slope(i, j + 1) - slope(i + 1, j) + slope(i, j);
                for c in 0..d {
                    out_jac[(row, c)] = -dm[c] * scale;
                }
                row += 1;
            }
        }
    }
}

fn multistart_fit(model: &MarginalModel, tolerance: f64, agreement: f64, opts: &CompetitionOptions) -> Result<KnSolution> {
    let k = model.states();
    let len = model.support.len();
    let rows = model.rows() as f64;
    let optim = OptimOptions {
        max_iter: 20_000,
        grad_tol: 1e-12,
        f_tol: 1e-15,
    };
    let starts = opts.multistarts.max(1);
    let fits: Vec<(f64, Vec<f64>, Vec<f64>, bool)> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let mut x0 = DVector::zeros(k + k * len - 1);
            for i in 0..k {
                let eta: f64 = if s == 0 { 0.5 } else { rng.random_range(0.05..0.95) };
                x0[i] = eta.ln();
            }
            if s > 0 {
                let g: Vec<f64> = (0..k * len).map(|_| Exp1.sample(&mut rng)).collect();
                let last = g[k * len - 1].max(1e-12).ln();
                for a in 0..k * len - 1 {
                    x0[k + a] = g[a].max(1e-12).ln() - last;
                }
            }
            let fit = levenberg_marquardt(|x| model.residuals(x), x0, &optim);
            let (eta, p) = model.unpack(&fit.x);
            ((fit.ssr / rows).sqrt(), eta, p, fit.converged)
        })
        .collect();
    let best = fits
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one start");
    let (residual, ref eta, ref p, _) = fits[best];
    if residual > tolerance {
        return Err(Error::Misfit(format!(
            "best RMS misfit {residual:.3e} exceeds tolerance {tolerance:.3e}"
        )));
    }
    let band = (2.0 * tolerance).min(residual * (1.0 + opts.band) + 1e-10);
    let mut near_optimal = 0;
    for (res, e, q, converged) in &fits {
        if !converged || *res > band {
            continue;
        }
        near_optimal += 1;
        let gap = e
            .iter()
            .zip(eta)
            .chain(q.iter().zip(p))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > agreement {
            return Err(Error::Uniqueness(format!(
                "near-optimal fits differ by {gap:.3e} (scales {eta:?} vs {e:?})"
            )));
        }
    }
    Ok(KnSolution {
        eta: eta.clone(),
        weights: p.chunks(len).map(|c| c.to_vec()).collect(),
        residual,
        near_optimal,
        starts,
    })
}

fn check_low_inputs(f_r: &[f64], f_checks: &[Vec<f64>], r: u32, support: &[u32]) -> Result<()> {
    check_support(support, r)?;
    if f_checks.is_empty() {
        return Err(Error::domain("need at least one state"));
    }
    if f_checks.iter().any(|c| c.len() != f_r.len()) {
        return Err(Error::domain("scaled parent CDFs and the observed CDF use different grids"));
    }
    Ok(())
}

/// Fits scales `η_k` and joint weights `p_{k,n}` to the marginal CDF of
/// `x_hi` on the low segment, with deterministic multistarts.
pub fn solve_scales_weights_kn(
    f_r: &[f64],
    f_checks: &[Vec<f64>],
    r: u32,
    support: &[u32],
    tolerance: f64,
    opts: &CompetitionOptions,
) -> Result<KnSolution> {
    check_low_inputs(f_r, f_checks, r, support)?;
    if f_checks.len() * support.len() < 2 {
        return Err(Error::domain("need at least two unknown weights"));
    }
    let model = MarginalModel::new(f_checks, None, vec![(r, f_r, &[], None)], support, r)?;
    multistart_fit(&model, tolerance, opts.agreement.unwrap_or(1e-4), opts)
}

/// Frequencies of the bins between consecutive grid points (closed by the
/// CDF values 0 and 1), floored at `floor`.
fn bin_frequencies(low: &[f64], high: &[f64], floor: f64) -> Vec<f64> {
    let cdf: Vec<f64> = std::iter::once(0.0)
        .chain(low.iter().chain(high).copied())
        .chain(std::iter::once(1.0))
        .collect();
    cdf.windows(2).map(|w| (w[1] - w[0]).max(floor)).collect()
}

/// Fits scales and joint weights to the distributions of both `x_lo` and
/// `x_hi` on both segments, by minimum chi-square over the bins between grid
/// points. Above the cutoff each state's parent CDF is implied by inverting
/// its tail mixture under the candidate scales and weights. Bin frequencies
/// are floored at `floor` (`1 / M` for samples).
#[allow(clippy::too_many_arguments)]
pub fn solve_scales_weights_full(
    f_checks: &[Vec<f64>],
    data: FullSupportData,
    r: u32,
    support: &[u32],
    tolerance: f64,
    floor: f64,
    opts: &CompetitionOptions,
) -> Result<KnSolution> {
    check_low_inputs(data.low_upper, f_checks, r, support)?;
    let high = data.high_upper.len();
    if data.low_lower.len() != data.low_upper.len()
        || data.high_lower.len() != high
        || data.tails.len() != f_checks.len()
        || data.tails.iter().any(|t| t.len() != high)
        || high == 0
    {
        return Err(Error::domain("observed CDFs and tail integrals do not match the grids or the states"));
    }
    let stats = vec![
        (r - 1, data.low_lower, data.high_lower, Some(floor)),
        (r, data.low_upper, data.high_upper, Some(floor)),
    ];
    let mut model = MarginalModel::new(f_checks, Some(data.tails), stats, support, r)?;
    if let Some(joint) = data.joint {
        let g = joint.points.len();
        let total = data.low_upper.len() + high;
        if joint.points.first() != Some(&0)
            || joint.points.windows(2).any(|w| w[1] <= w[0])
            || joint.points.last().is_some_and(|&i| i >= total)
            || joint.cdf.len() != g + 1
            || joint.cdf.iter().any(|row| row.len() != g + 1)
        {
            return Err(Error::domain("joint grid does not match the fitting points"));
        }
        model.joint = Some(JointCells::new(joint.points.to_vec(), joint.cdf, floor));
    }
    multistart_fit(&model, tolerance, opts.agreement.unwrap_or(1e-4), opts)
}

#[derive(Clone, Default)]
pub struct UnknownOptions {
    pub identify: IdentifyOptions,
    pub competition: CompetitionOptions,
}

/// Identifies state distributions and the joint distribution of states and
/// bidder counts from ascending auctions with an unobserved number of bidders.
pub fn identify_unknown_n(
    source: &dyn JointObservables,
    support: &[u32],
    k: usize,
    scheme: &Discretization,
    opts: &UnknownOptions,
) -> Result<(ComponentEstimate, CompetitionMixture)> {
    let r = source.rank();
    check_support(support, r).stage(Stage::Config)?;
    if scheme.dim() != k {
        return Err(Error::domain(format!(
            "scheme has {} cells per segment but {k} states were requested",
            scheme.dim()
        )));
    }
    let view = source.view(scheme).stage(Stage::Discretization)?;
    let j = view.cell_matrix(WFilter::All).stage(Stage::Discretization)?;
    let j0 = view.cell_matrix(WFilter::W0).stage(Stage::Discretization)?;
    let eig = eigendecompose(&j0, &j, &opts.identify.eigen).stage(Stage::Eigendecomposition)?;
    let maps = SpectralMaps::new(&j.entries, &eig.low_matrix).stage(Stage::Eigendecomposition)?;
    let cutoff = scheme.cutoff;
    let (lo, hi) = source.support();
    let pl = (r - 1) as f64;
    let copts = &CompetitionOptions {
        agreement: Some(opts.competition.agreement_for(source.sample_size())),
        ..opts.competition.clone()
    };

    // scaled parent CDFs F̌^k = F^k / F^k(c) below the cutoff
    let low_grid = linspace(lo, cutoff, copts.low_points.max(3));
    let scaled_at = |x: f64| -> Result<Vec<f64>> {
        let g = maps.apply_low(&view.low_cumulative_row(x, WFilter::All)?);
        Ok(g.iter().map(|&v| v.max(0.0).powf(1.0 / pl)).collect())
    };
    let tails_at = |y: f64| -> Result<Vec<f64>> { Ok(maps.apply_high(&view.high_tail_row(y, WFilter::All)?)) };
    let rows = low_grid
        .par_iter()
        .map(|&x| scaled_at(x))
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Profiles)?;
    let f_checks: Vec<Vec<f64>> = (0..k)
        .map(|s| project_cdf(&rows.iter().map(|row| row[s]).collect::<Vec<_>>()))
        .collect();
    let f_r: Vec<f64> = low_grid.iter().map(|&x| source.upper_cdf(x)).collect();
    let tolerance = copts.tolerance_for(source.sample_size());

    let (eta, weights, residual) = match copts.objective {
        CompetitionObjective::LowSegment if k == 1 => {
            let alpha = default_alpha_grid(support.len());
            let sol = solve_eta_pn(&f_r, &f_checks[0], r, support, &alpha, tolerance, copts.eta_scan)
                .stage(Stage::Competition)?;
            (vec![sol.eta], vec![sol.weights], sol.residual)
        }
        CompetitionObjective::LowSegment => {
            let sol = solve_scales_weights_kn(&f_r, &f_checks, r, support, tolerance, copts).stage(Stage::Competition)?;
            (sol.eta, sol.weights, sol.residual)
        }
        CompetitionObjective::FullSupport => {
            let high_grid = linspace(cutoff, hi, copts.high_points.max(3));
            let high_grid = &high_grid[1..high_grid.len() - 1];
            let rows = high_grid
                .par_iter()
                .map(|&y| tails_at(y))
                .collect::<Result<Vec<_>>>()
                .stage(Stage::Profiles)?;
            let tails: Vec<Vec<f64>> = (0..k).map(|s| rows.iter().map(|row| row[s]).collect()).collect();
            let low_lower: Vec<f64> = low_grid.iter().map(|&x| source.lower_cdf(x)).collect();
            let high_lower: Vec<f64> = high_grid.iter().map(|&y| source.lower_cdf(y)).collect();
            let high_upper: Vec<f64> = high_grid.iter().map(|&y| source.upper_cdf(y)).collect();
            let all_points: Vec<f64> = low_grid.iter().chain(high_grid).copied().collect();
            let step = (all_points.len() as f64 / copts.joint_points.max(2) as f64).max(1.0);
            let mut joint_points: Vec<usize> = (0..copts.joint_points.max(2))
                .map(|i| (i as f64 * step).round() as usize)
                .filter(|&i| i < all_points.len())
                .collect();
            joint_points.dedup();
            let joint_grid: Vec<f64> = joint_points
                .iter()
                .map(|&i| all_points[i])
                .chain(std::iter::once(hi))
                .collect();
            let joint_cdf = source.joint_cdf_grid(&joint_grid);
            let data = FullSupportData {
                low_lower: &low_lower,
                low_upper: &f_r,
                high_lower: &high_lower,
                high_upper: &high_upper,
                tails: &tails,
                joint: (copts.joint_points > 0).then_some(JointData {
                    points: &joint_points,
                    cdf: &joint_cdf,
                }),
            };
            let floor = source.sample_size().map_or(1e-12, |m| 1.0 / m as f64);
            let sol = solve_scales_weights_full(&f_checks, data, r, support, tolerance, floor, copts)
                .stage(Stage::Competition)?;
            (sol.eta, sol.weights, sol.residual)
        }
    };
    let state_weights: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();

    let grid = linspace(lo, hi, opts.identify.grid_points);
    let rows = grid
        .par_iter()
        .map(|&x| -> Result<Vec<f64>> {
            if x <= cutoff {
                Ok(scaled_at(x)?.iter().zip(&eta).map(|(f, e)| e * f).collect())
            } else {
                let t = tails_at(x)?;
                (0..k)
                    .map(|s| {
                        let q: Vec<f64> = weights[s].iter().map(|p| p / state_weights[s]).collect();
                        let target = t[s].max(0.0) / (eta[s].powf(pl) * state_weights[s]);
                        let max = tail_mixture_value(0.0, &q, support, r)?;
                        invert_tail_mixture(target.min(max), &q, support, r)
                    })
                    .collect()
            }
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Competition)?;
    let mut cdfs: Vec<Vec<f64>> = (0..k).map(|s| rows.iter().map(|row| row[s]).collect()).collect();
    let projection_adjustment = finalize_cdfs(&mut cdfs);

    let mut est = ComponentEstimate {
        grid,
        cdfs,
        weights: state_weights,
        prob_w0: eig.eigenvalues.iter().map(|l| l.clamp(0.0, 1.0)).collect(),
        eta_low: eta.clone(),
        eta_high: None,
        bid_cdfs: None,
        diagnostics: Diagnostics {
            continuity_residual: 0.0,
            mass_residual: 0.0,
            eigen_gap: eig.min_relative_gap,
            reconstruction_residual: eig.residual,
            eigenvector_clipped: eig.clipped,
            condition_number: eig.condition,
            weight_residual: residual,
            projection_adjustment,
            scheme: Some(scheme.to_json()),
        },
    };
    let mut mixture = CompetitionMixture {
        support: support.to_vec(),
        weights,
        eta,
    };
    let perm = label_states(&est, opts.identify.labeling, opts.identify.truth.as_ref()).stage(Stage::Labeling)?;
    est.permute(&perm);
    mixture.permute(&perm);
    Ok((est, mixture))
}
