//! Semiparametric maximum likelihood with Bernstein-polynomial state densities.
//!
//! Each state's value density on the unit interval is a mixture of the Beta
//! densities `Beta(l, L - l + 1)`, `l = 1..L`, with simplex coefficients. The
//! likelihood is that of the consecutive pair `(x_lo, x_hi)` and the
//! instrument, mixed over states, for a known number of bidders.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage, StageExt};
use crate::numeric::optim::{bfgs, OptimOptions};
use crate::numeric::quad::linspace;
use crate::numeric::{logit, sigmoid, softmax};
use crate::order_stats::binom_constant;
use crate::simulate::Dataset;
use crate::spectral::{label_states, simplex_least_squares, ComponentEstimate, Diagnostics, LabelRule, TruthFn};

/// Per-record log-likelihood floor.
pub const LOG_FLOOR: f64 = -745.0;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(b: &[f64], what: &str) -> Result<()> {
    if b.is_empty() {
        return Err(Error::domain(format!("{what} is empty")));
    }
    if b.iter().any(|&v| !(v >= -SIMPLEX_TOL) || !v.is_finite()) {
        return Err(Error::domain(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = b.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::domain(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Binomial probabilities `C(m, j) x^j (1 - x)^(m - j)` for `j = 0..=m`.
fn binomial_probs(m: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; m + 1];
    out[0] = 1.0;
    // Pascal recursion keeps every term nonnegative.
    for i in 1..=m {
        for j in (1..=i).rev() {
            out[j] = out[j] * (1.0 - x) + out[j - 1] * x;
        }
        out[0] *= 1.0 - x;
    }
    out
}

/// Basis densities and CDFs of `Beta(l, L - l + 1)`, `l = 1..=L`, at `x`.
fn basis(order: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let x = x.clamp(0.0, 1.0);
    let lower = binomial_probs(order - 1, x);
    let pdf: Vec<f64> = lower.iter().map(|&v| order as f64 * v).collect();
    let full = binomial_probs(order, x);
    let mut cdf = vec![0.0; order];
    let mut tail = 0.0;
    for l in (1..=order).rev() {
        tail += full[l];
        cdf[l - 1] = tail.min(1.0);
    }
    (pdf, cdf)
}

/// Density and CDF of the Bernstein mixture with coefficients `b` at `x` in `[0, 1]`.
pub fn bernstein_eval(b: &[f64], x: f64) -> Result<(f64, f64)> {
    check_simplex(b, "Bernstein coefficients")?;
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain(format!("Bernstein argument {x} outside [0, 1]")));
    }
    if x == 1.0 {
        let (pdf, _) = basis(b.len(), x);
        return Ok((dot(b, &pdf), 1.0));
    }
    let (pdf, cdf) = basis(b.len(), x);
    Ok((dot(b, &pdf), dot(b, &cdf).min(1.0)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bernstein density of a single state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernsteinDensity {
    pub coefficients: Vec<f64>,
}

impl BernsteinDensity {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        check_simplex(&coefficients, "Bernstein coefficients")?;
        Ok(Self { coefficients })
    }

    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    pub fn eval(&self, x: f64) -> Result<(f64, f64)> {
        bernstein_eval(&self.coefficients, x)
    }
}

/// Full parameter of the sieve model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SieveParams {
    pub densities: Vec<BernsteinDensity>,
    pub weights: Vec<f64>,
    pub prob_w0: Vec<f64>,
}

impl SieveParams {
    pub fn new(densities: Vec<BernsteinDensity>, weights: Vec<f64>, prob_w0: Vec<f64>) -> Result<Self> {
        let theta = Self {
            densities,
            weights,
            prob_w0,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.densities.len();
        if k == 0 || self.weights.len() != k || self.prob_w0.len() != k {
            return Err(Error::domain("densities, weights and instrument probabilities differ in length"));
        }
        let order = self.order();
        if self.densities.iter().any(|d| d.order() != order) {
            return Err(Error::domain("all states must share one Bernstein order"));
        }
        for d in &self.densities {
            check_simplex(&d.coefficients, "Bernstein coefficients")?;
        }
        check_simplex(&self.weights, "state weights")?;
        if self.prob_w0.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("instrument probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.densities.len()
    }

    pub fn order(&self) -> usize {
        self.densities[0].order()
    }

    /// Reorders states so that new state `i` is old state `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) {
        self.densities = perm.iter().map(|&i| self.densities[i].clone()).collect();
        self.weights = perm.iter().map(|&i| self.weights[i]).collect();
        self.prob_w0 = perm.iter().map(|&i| self.prob_w0[i]).collect();
    }

    /// Parameter count of the unconstrained reparametrization.
    pub fn free_parameters(k: usize, order: usize) -> usize {
        k * (order - 1) + 2 * k - 1
    }

    /// Unconstrained coordinates: per-state coefficient logits (last fixed at
    /// zero), state-weight logits (last fixed at zero), instrument logits.
    fn to_free(&self) -> DVector<f64> {
        let k = self.num_states();
        let order = self.order();
        let mut z = Vec::with_capacity(Self::free_parameters(k, order));
        let ln = |v: f64| v.max(1e-300).ln();
        for d in &self.densities {
            let last = ln(d.coefficients[order - 1]);
            z.extend(d.coefficients[..order - 1].iter().map(|&b| ln(b) - last));
        }
        let last = ln(self.weights[k - 1]);
        z.extend(self.weights[..k - 1].iter().map(|&p| ln(p) - last));
        z.extend(self.prob_w0.iter().map(|&q| logit(q.clamp(1e-12, 1.0 - 1e-12))));
        DVector::from_vec(z)
    }

    fn from_free(z: &DVector<f64>, k: usize, order: usize) -> Self {
        let mut at = 0;
        let mut take_simplex = |m: usize| {
            let mut logits: Vec<f64> = z.as_slice()[at..at + m - 1].to_vec();
            logits.push(0.0);
            at += m - 1;
            softmax(&logits)
        };
        let densities = (0..k)
            .map(|_| BernsteinDensity {
                coefficients: take_simplex(order),
            })
            .collect();
        let weights = take_simplex(k);
        let offset = k * (order - 1) + k - 1;
        let prob_w0 = (0..k).map(|i| sigmoid(z[offset + i])).collect();
        Self {
            densities,
            weights,
            prob_w0,
        }
    }
}

/// Affine map from the value scale to the unit interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMap {
    pub lower: f64,
    pub upper: f64,
}

impl DataMap {
    /// Observed range widened by `margin` times its width on both sides.
    pub fn from_range(min: f64, max: f64, margin: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::Data(format!("cannot map the degenerate range [{min}, {max}]")));
        }
        let pad = margin * (max - min);
        Ok(Self {
            lower: min - pad,
            upper: max + pad,
        })
    }

    pub fn identity() -> Self {
        Self { lower: 0.0, upper: 1.0 }
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lower) / (self.upper - self.lower)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.lower + u * (self.upper - self.lower)
    }
}

/// Records mapped to the unit interval.
#[derive(Clone, Debug)]
pub struct SieveData {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub w: Vec<u8>,
    pub map: DataMap,
}

impl SieveData {
    /// Maps by the observed min/max widened by 0.1% on each side.
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let (min, max) = dataset
            .records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.x_lo), b.max(r.x_hi)));
        Self::with_map(dataset, DataMap::from_range(min, max, 1e-3)?)
    }

    pub fn with_map(dataset: &Dataset, map: DataMap) -> Result<Self> {
        let mut out = Self {
            x_lo: Vec::with_capacity(dataset.len()),
            x_hi: Vec::with_capacity(dataset.len()),
            w: Vec::with_capacity(dataset.len()),
            map,
        };
        for rec in &dataset.records {
            let (a, b) = (map.to_unit(rec.x_lo), map.to_unit(rec.x_hi));
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                return Err(Error::Data(format!(
                    "auction {} maps outside [0, 1] under [{}, {}]",
                    rec.id, map.lower, map.upper
                )));
            }
            out.x_lo.push(a);
            out.x_hi.push(b);
            out.w.push(rec.w);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x_lo: idx.iter().map(|&i| self.x_lo[i]).collect(),
            x_hi: idx.iter().map(|&i| self.x_hi[i]).collect(),
            w: idx.iter().map(|&i| self.w[i]).collect(),
            map: self.map,
        }
    }
}

/// Log-likelihood value with the number of records that hit the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLik {
    pub value: f64,
    pub floored: usize,
}

/// Basis values at every record, computed once per order.
struct BasisCache {
    order: usize,
    /// `[pdf_lo, cdf_lo, pdf_hi, cdf_hi]`, each of length `order`, per record.
    values: Vec<[Vec<f64>; 4]>,
    w: Vec<u8>,
}

impl BasisCache {
    fn new(data: &SieveData, order: usize) -> Self {
        let values = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let (pl, cl) = basis(order, data.x_lo[i]);
                let (ph, ch) = basis(order, data.x_hi[i]);
                [pl, cl, ph, ch]
            })
            .collect();
        Self {
            order,
            values,
            w: data.w.clone(),
        }
    }
}

/// Record-level likelihood of one state: value and its gradient with respect
/// to that state's coefficients and instrument probability.
struct StateTerm {
    value: f64,
    d_coef: Vec<f64>,
    d_prob: f64,
}

fn state_term(theta: &SieveParams, s: usize, vals: &[Vec<f64>; 4], w: u8, r: u32, n: u32, constant: f64, grad: bool) -> StateTerm {
    let b = &theta.densities[s].coefficients;
    let [pl, cl, ph, ch] = vals;
    let f_lo = dot(b, pl);
    let cdf_lo = dot(b, cl).clamp(0.0, 1.0);
    let f_hi = dot(b, ph);
    let surv_hi = (1.0 - dot(b, ch)).clamp(0.0, 1.0);
    let a = (r - 2) as i32;
    let c = (n - r) as i32;
    let q = theta.prob_w0[s];
    let pw = if w == 0 { q } else { 1.0 - q };
    let value = constant * cdf_lo.powi(a) * f_lo * surv_hi.powi(c) * f_hi * pw;
    if !grad || value <= 0.0 {
        return StateTerm {
            value: value.max(0.0),
            d_coef: Vec::new(),
            d_prob: 0.0,
        };
    }
    // derivatives of log(value)
    let d_coef = (0..b.len())
        .map(|l| {
            let mut g = pl[l] / f_lo + ph[l] / f_hi;
            if a > 0 {
                g += a as f64 * cl[l] / cdf_lo;
            }
            if c > 0 {
                g -= c as f64 * ch[l] / surv_hi;
            }
            g
        })
        .collect();
    let d_prob = if w == 0 { 1.0 / q } else { -1.0 / (1.0 - q) };
    StateTerm { value, d_coef, d_prob }
}

/// Sums in sorted order so the total does not depend on state labels.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn pair_constant(r: u32, n: u32) -> Result<f64> {
    if r < 2 || n < r {
        return Err(Error::domain(format!("need 2 <= r <= n, got r = {r}, n = {n}")));
    }
    // n! / ((r-2)! (n-r)!) = C(n, r-1) (r-1) (n-r+1)
    Ok(binom_constant(r, n)? as f64 * (r - 1) as f64 * (n - r + 1) as f64)
}

const CHUNK: usize = 1024;

/// Log-likelihood and its gradient in the free coordinates.
fn loglik_free(cache: &BasisCache, theta: &SieveParams, r: u32, n: u32, constant: f64, grad: bool) -> (LogLik, Vec<f64>) {
    let k = theta.num_states();
    let order = cache.order;
    let dim = SieveParams::free_parameters(k, order);
    // chunked with ordered reduction for reproducibility
    let partial: Vec<(f64, usize, Vec<f64>)> = cache
        .values
        .par_chunks(CHUNK)
        .zip(cache.w.par_chunks(CHUNK))
        .map(|(vals, ws)| {
            let mut total = 0.0;
            let mut floored = 0;
            // gradient of log-lik wrt state coefficients, state weights (as
            // probabilities) and instrument probabilities
            let mut g_coef = vec![vec![0.0; order]; if grad { k } else { 0 }];
            let mut g_weight = vec![0.0; if grad { k } else { 0 }];
            let mut g_prob = vec![0.0; if grad { k } else { 0 }];
            let mut terms: Vec<StateTerm> = Vec::with_capacity(k);
            let mut buf = vec![0.0; k];
            for (v, &w) in vals.iter().zip(ws) {
                terms.clear();
                for s in 0..k {
                    terms.push(state_term(theta, s, v, w, r, n, constant, grad));
                }
                for s in 0..k {
                    buf[s] = theta.weights[s] * terms[s].value;
                }
                let like = ordered_sum(&mut buf);
                let ll = if like > 0.0 { like.ln() } else { f64::NEG_INFINITY };
                if ll < LOG_FLOOR {
                    total += LOG_FLOOR;
                    floored += 1;
                    continue;
                }
                total += ll;
                if grad {
                    for s in 0..k {
                        let t = &terms[s];
                        g_weight[s] += t.value / like;
                        if t.value <= 0.0 {
                            continue;
                        }
                        let post = theta.weights[s] * t.value / like;
                        for l in 0..order {
                            g_coef[s][l] += post * t.d_coef[l];
                        }
                        g_prob[s] += post * t.d_prob;
                    }
                }
            }
            let mut flat = Vec::new();
            if grad {
                flat.reserve(k * order + 2 * k);
                for row in &g_coef {
                    flat.extend_from_slice(row);
                }
                flat.extend_from_slice(&g_weight);
                flat.extend_from_slice(&g_prob);
            }
            (total, floored, flat)
        })
        .collect();
    let mut value = 0.0;
    let mut floored = 0;
    let mut raw = vec![0.0; if grad { k * order + 2 * k } else { 0 }];
    for (v, f, g) in &partial {
        value += v;
        floored += f;
        for (a, b) in raw.iter_mut().zip(g) {
            *a += b;
        }
    }
    let ll = LogLik { value, floored };
    if !grad {
        return (ll, Vec::new());
    }
    // chain rule through the softmax and sigmoid reparametrizations
    let mut out = Vec::with_capacity(dim);
    for s in 0..k {
        let b = &theta.densities[s].coefficients;
        let g = &raw[s * order..(s + 1) * order];
        let mean = dot(b, g);
        out.extend((0..order - 1).map(|j| b[j] * (g[j] - mean)));
    }
    let gw = &raw[k * order..k * order + k];
    let mean = dot(&theta.weights, gw);
    out.extend((0..k - 1).map(|j| theta.weights[j] * (gw[j] - mean)));
    let gp = &raw[k * order + k..];
    out.extend((0..k).map(|s| {
        let q = theta.prob_w0[s];
        gp[s] * q * (1.0 - q)
    }));
    (ll, out)
}

/// Sieve log-likelihood of the mapped records under `theta`, for `n` bidders
/// with the pair at ranks `r - 1` and `r`.
pub fn sieve_loglik(data: &SieveData, theta: &SieveParams, r: u32, n: u32) -> Result<LogLik> {
    theta.validate()?;
    let constant = pair_constant(r, n)?;
    let cache = BasisCache::new(data, theta.order());
    Ok(loglik_free(&cache, theta, r, n, constant, false).0)
}

/// Gradient of [`sieve_loglik`] in the unconstrained coordinates of `theta`.
pub fn sieve_loglik_gradient(data: &SieveData, theta: &SieveParams, r: u32, n: u32) -> Result<(LogLik, Vec<f64>)> {
    theta.validate()?;
    let constant = pair_constant(r, n)?;
    let cache = BasisCache::new(data, theta.order());
    Ok(loglik_free(&cache, theta, r, n, constant, true))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SieveOptions {
    pub multistarts: usize,
    pub max_iter: usize,
    /// Gradient tolerance on the per-record average log-likelihood.
    pub grad_tol: f64,
    pub labeling: LabelRule,
    /// Points of the value grid used for labeling and CDF output.
    pub grid_points: usize,
}

impl Default for SieveOptions {
    fn default() -> Self {
        Self {
            multistarts: 10,
            max_iter: 3000,
            grad_tol: 1e-6,
            labeling: LabelRule::ByInstrumentProb,
            grid_points: 101,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StartReport {
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Fitted sieve model with its data map and convergence report.
#[derive(Clone, Debug, Serialize)]
pub struct SieveFit {
    pub params: SieveParams,
    pub order: usize,
    pub map: DataMap,
    pub loglik: LogLik,
    pub converged: bool,
    pub starts: Vec<StartReport>,
}

impl SieveFit {
    /// CDF of state `k` on the value scale.
    pub fn cdf(&self, k: usize, x: f64) -> f64 {
        let u = self.map.to_unit(x);
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        bernstein_eval(&self.params.densities[k].coefficients, u).map_or(f64::NAN, |v| v.1)
    }

    /// State CDFs on an evenly spaced grid of `points` values over `support`.
    pub fn component_estimate(&self, support: (f64, f64), points: usize) -> ComponentEstimate {
        let grid = linspace(support.0, support.1, points.max(2));
        let cdfs = (0..self.params.num_states())
            .map(|k| grid.iter().map(|&x| self.cdf(k, x)).collect())
            .collect();
        ComponentEstimate {
            grid,
            cdfs,
            weights: self.params.weights.clone(),
            prob_w0: self.params.prob_w0.clone(),
            eta_low: vec![1.0; self.params.num_states()],
            eta_high: None,
            bid_cdfs: None,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("sieve fit serializes")
    }
}

fn random_start(rng: &mut ChaCha8Rng, k: usize, order: usize) -> SieveParams {
    let densities = (0..k)
        .map(|_| {
            let logits: Vec<f64> = (0..order).map(|_| rng.random_range(-1.5..1.5)).collect();
            BernsteinDensity {
                coefficients: softmax(&logits),
            }
        })
        .collect();
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    let prob_w0 = (0..k).map(|_| rng.random_range(0.1..0.9)).collect();
    SieveParams {
        densities,
        weights: softmax(&logits),
        prob_w0,
    }
}

/// Deterministic start with state `s` concentrated on the `s`-th block of
/// basis functions and spread instrument probabilities.
fn spread_start(k: usize, order: usize) -> SieveParams {
    let densities = (0..k)
        .map(|s| {
            let centre = (s as f64 + 0.5) * order as f64 / k as f64 - 0.5;
            let logits: Vec<f64> = (0..order).map(|l| -0.5 * (l as f64 - centre).powi(2) / order as f64).collect();
            BernsteinDensity {
                coefficients: softmax(&logits),
            }
        })
        .collect();
    SieveParams {
        densities,
        weights: vec![1.0 / k as f64; k],
        prob_w0: (0..k).map(|s| (s as f64 + 1.0) / (k as f64 + 1.0)).collect(),
    }
}

/// Deterministic starting points: one spread start followed by seeded random ones.
pub fn sieve_starts(k: usize, order: usize, count: usize, seed: u64) -> Vec<SieveParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![spread_start(k, order)];
    while out.len() < count.max(1) {
        out.push(random_start(&mut rng, k, order));
    }
    out
}

fn check_fit_inputs(data: &SieveData, k: usize, order: usize, r: u32, n: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("estimation.k", "number of states must be positive"));
    }
    if order < 2 {
        return Err(Error::config("sieve.order", format!("Bernstein order must be at least 2, got {order}")));
    }
    if data.is_empty() {
        return Err(Error::Data("no records to fit".into()));
    }
    pair_constant(r, n)
}

/// Maximizes the sieve likelihood from the given starting points.
pub fn fit_sieve_from(
    data: &SieveData,
    starts: &[SieveParams],
    r: u32,
    n: u32,
    opts: &SieveOptions,
    truth: Option<&TruthFn>,
) -> Result<SieveFit> {
    let first = starts.first().ok_or_else(|| Error::domain("no starting points"))?;
    let (k, order) = (first.num_states(), first.order());
    let constant = check_fit_inputs(data, k, order, r, n)?;
    let cache = BasisCache::new(data, order);
    let scale = 1.0 / data.len() as f64;
    let objective = |z: &DVector<f64>| {
        let theta = SieveParams::from_free(z, k, order);
        let (ll, g) = loglik_free(&cache, &theta, r, n, constant, true);
        (-ll.value * scale, DVector::from_iterator(g.len(), g.iter().map(|v| -v * scale)))
    };
    let optim = OptimOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        f_tol: 1e-15,
    };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|start| {
            start.validate()?;
            if start.num_states() != k || start.order() != order {
                return Err(Error::domain("starting points differ in shape"));
            }
            Ok(bfgs(objective, start.to_free(), &optim))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<StartReport> = runs
        .iter()
        .map(|run| StartReport {
            loglik: -run.f / scale,
            converged: run.converged,
            iterations: run.iterations,
            grad_norm: run.grad_norm,
        })
        .collect();
    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, run)| run.converged && run.f.is_finite())
        .min_by(|a, b| a.1.f.total_cmp(&b.1.f).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Optimization(format!("none of {} sieve starts converged", runs.len())))?;
    let mut params = SieveParams::from_free(&runs[best].x, k, order);
    let loglik = loglik_free(&cache, &params, r, n, constant, false).0;
    let mut fit = SieveFit {
        params: params.clone(),
        order,
        map: data.map,
        loglik,
        converged: true,
        starts: reports,
    };
    let support = (data.map.lower, data.map.upper);
    let est = fit.component_estimate(support, opts.grid_points);
    let perm = label_states(&est, opts.labeling, truth).stage(Stage::Labeling)?;
    params.permute(&perm);
    fit.params = params;
    Ok(fit)
}

/// Sieve maximum likelihood with `k` states of Bernstein order `order`,
/// from deterministic multistarts derived from `seed`.
pub fn fit_sieve(
    data: &SieveData,
    k: usize,
    order: usize,
    r: u32,
    n: u32,
    seed: u64,
    opts: &SieveOptions,
    truth: Option<&TruthFn>,
) -> Result<SieveFit> {
    check_fit_inputs(data, k, order, r, n)?;
    let starts = sieve_starts(k, order, opts.multistarts, seed);
    fit_sieve_from(data, &starts, r, n, opts, truth).stage(Stage::Sieve)
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderScore {
    pub order: usize,
    pub heldout_loglik: f64,
}

/// Bernstein order with the largest held-out log-likelihood.
///
/// A seeded fifth of the records is held out; each candidate is fit on the
/// rest and scored on the held-out part.
pub fn select_order(
    data: &SieveData,
    k: usize,
    orders: &[usize],
    r: u32,
    n: u32,
    seed: u64,
    opts: &SieveOptions,
) -> Result<(usize, Vec<OrderScore>)> {
    if orders.is_empty() {
        return Err(Error::config("sieve.orders", "at least one candidate order is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0bde);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for i in 0..data.len() {
        if rng.random_range(0..5) == 0 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    if held.is_empty() || train.is_empty() {
        return Err(Error::Data("too few records to hold out a validation set".into()));
    }
    let (train, held) = (data.subset(&train), data.subset(&held));
    let mut scores = Vec::new();
    for &order in orders {
        let fit = fit_sieve(&train, k, order, r, n, seed, opts, None)?;
        let ll = sieve_loglik(&held, &fit.params, r, n)?;
        scores.push(OrderScore {
            order,
            heldout_loglik: ll.value,
        });
    }
    let best = scores
        .iter()
        .max_by(|a, b| a.heldout_loglik.total_cmp(&b.heldout_loglik).then(b.order.cmp(&a.order)))
        .expect("nonempty")
        .order;
    Ok((best, scores))
}

/// Sieve parameters closest to an identified estimate: each state's CDF is
/// projected onto Bernstein CDFs of order `order` by simplex least squares on
/// the estimate's grid.
pub fn sieve_from_estimate(est: &ComponentEstimate, map: &DataMap, order: usize) -> Result<SieveParams> {
    if order < 2 {
        return Err(Error::config("sieve.order", "Bernstein order must be at least 2"));
    }
    let points: Vec<(usize, f64)> = est
        .grid
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, map.to_unit(x)))
        .filter(|(_, u)| (0.0..=1.0).contains(u))
        .collect();
    if points.len() < order {
        return Err(Error::domain("estimate grid has too few points inside the data range"));
    }
    let mut design = DMatrix::zeros(points.len(), order);
    for (row, &(_, u)) in points.iter().enumerate() {
        let (_, cdf) = basis(order, u);
        for l in 0..order {
            design[(row, l)] = cdf[l];
        }
    }
    let densities = est
        .cdfs
        .iter()
        .map(|cdf| {
            let target = DVector::from_iterator(points.len(), points.iter().map(|&(i, _)| cdf[i]));
            let fit = simplex_least_squares(&design, &target, f64::INFINITY)?;
            Ok(BernsteinDensity {
                coefficients: fit.weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = est.weights.iter().map(|w| w.max(0.0)).sum();
    let weights = est.weights.iter().map(|w| w.max(0.0) / total).collect();
    SieveParams::new(densities, weights, est.prob_w0.iter().map(|q| q.clamp(0.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::AuctionFormat;
    use crate::numeric::optim::numeric_gradient;
    use crate::numeric::special::{beta_pdf, reg_inc_beta};
    use crate::order_stats::ValueDist;
    use crate::simulate::{simulate, AuctionRecord, Competition, MixtureDGP, Orientation, StateSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_data(records: &[(f64, f64, u8)]) -> SieveData {
        SieveData {
            x_lo: records.iter().map(|r| r.0).collect(),
            x_hi: records.iter().map(|r| r.1).collect(),
            w: records.iter().map(|r| r.2).collect(),
            map: DataMap::identity(),
        }
    }

    #[test]
    fn bernstein_small_orders() {
        let (pdf, cdf) = bernstein_eval(&[1.0], 0.4).unwrap();
        assert!((pdf - 1.0).abs() < 1e-15 && (cdf - 0.4).abs() < 1e-15);
        let (pdf, _) = bernstein_eval(&[1.0, 0.0], 0.5).unwrap();
        assert!((pdf - 1.0).abs() < 1e-15);
        let (pdf, _) = bernstein_eval(&[0.5, 0.5], 0.5).unwrap();
        assert!((pdf - 1.0).abs() < 1e-15);
        assert_eq!(bernstein_eval(&[0.2, 0.3, 0.5], 0.0).unwrap().1, 0.0);
        assert_eq!(bernstein_eval(&[0.2, 0.3, 0.5], 1.0).unwrap().1, 1.0);
        assert!(bernstein_eval(&[0.7, 0.7], 0.5).is_err());
    }

    #[test]
    fn basis_matches_beta_functions() {
        for order in [1usize, 3, 8] {
            for &x in &[0.01, 0.3, 0.77, 0.99] {
                let (pdf, cdf) = basis(order, x);
                for l in 1..=order {
                    let (a, b) = (l as f64, (order - l + 1) as f64);
                    assert!((pdf[l - 1] - beta_pdf(x, a, b)).abs() < 1e-10 * (1.0 + pdf[l - 1]));
                    assert!((cdf[l - 1] - reg_inc_beta(x, a, b)).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn bernstein_cdf_is_monotone(logits in prop::collection::vec(-3.0f64..3.0, 2..10)) {
            let b = softmax(&logits);
            let mut last = 0.0;
            for i in 0..=200 {
                let (_, c) = bernstein_eval(&b, i as f64 / 200.0).unwrap();
                prop_assert!(c >= last - 1e-15);
                last = c;
            }
            prop_assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn single_record_hand_value() {
        let data = unit_data(&[(0.3, 0.6, 0)]);
        let theta = SieveParams::new(vec![BernsteinDensity::new(vec![1.0]).unwrap()], vec![1.0], vec![0.5]).unwrap();
        let ll = sieve_loglik(&data, &theta, 2, 2).unwrap();
        assert!(ll.value.abs() < 1e-14);
        assert_eq!(ll.floored, 0);
    }

    #[test]
    fn zero_weight_state_contributes_nothing() {
        let data = unit_data(&[(0.2, 0.5, 0), (0.4, 0.9, 1)]);
        let one = SieveParams::new(vec![BernsteinDensity::new(vec![0.3, 0.7]).unwrap()], vec![1.0], vec![0.4]).unwrap();
        let two = SieveParams::new(
            vec![BernsteinDensity::new(vec![0.3, 0.7]).unwrap(), BernsteinDensity::new(vec![0.9, 0.1]).unwrap()],
            vec![1.0, 0.0],
            vec![0.4, 0.8],
        )
        .unwrap();
        let a = sieve_loglik(&data, &one, 3, 4).unwrap().value;
        let b = sieve_loglik(&data, &two, 3, 4).unwrap().value;
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn record_outside_map_is_a_data_error() {
        let recs = vec![AuctionRecord {
            id: 7,
            x_lo: 0.2,
            x_hi: 1.5,
            w: 0,
            n: Some(3),
            k: None,
        }];
        let ds = Dataset::new(recs, Orientation::Canonical(2), (0.0, 2.0)).unwrap();
        let err = SieveData::with_map(&ds, DataMap::identity()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    /// Direct per-record formula, used as an independent oracle.
    fn direct_loglik(data: &SieveData, theta: &SieveParams, r: u32, n: u32) -> f64 {
        let c = (1..=n).map(f64::from).product::<f64>()
            / ((1..=r - 2).map(f64::from).product::<f64>() * (1..=n - r).map(f64::from).product::<f64>());
        (0..data.len())
            .map(|i| {
                let like: f64 = (0..theta.num_states())
                    .map(|k| {
                        let b = &theta.densities[k].coefficients;
                        let (f1, c1) = bernstein_eval(b, data.x_lo[i]).unwrap();
                        let (f2, c2) = bernstein_eval(b, data.x_hi[i]).unwrap();
                        let q = theta.prob_w0[k];
                        let pw = if data.w[i] == 0 { q } else { 1.0 - q };
                        theta.weights[k] * c * c1.powi((r - 2) as i32) * f1 * (1.0 - c2).powi((n - r) as i32) * f2 * pw
                    })
                    .sum();
                like.ln()
            })
            .sum()
    }

    fn random_data(seed: u64, m: usize) -> SieveData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<(f64, f64, u8)> = (0..m)
            .map(|_| {
                let a: f64 = rng.random_range(0.01..0.99);
                let b: f64 = rng.random_range(0.01..0.99);
                (a.min(b), a.max(b), rng.random_range(0..2))
            })
            .collect();
        unit_data(&recs)
    }

    #[test]
    fn loglik_matches_direct_formula() {
        let data = random_data(1, 50);
        for (r, n) in [(2, 2), (2, 4), (3, 4), (4, 6)] {
            for seed in 0..3 {
                let theta = sieve_starts(3, 5, 4, seed).pop().unwrap();
                let ll = sieve_loglik(&data, &theta, r, n).unwrap().value;
                let oracle = direct_loglik(&data, &theta, r, n);
                assert!((ll - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{ll} vs {oracle}");
            }
        }
    }

    #[test]
    fn loglik_is_invariant_to_state_permutation() {
        let data = random_data(2, 300);
        for seed in 0..5 {
            let theta = sieve_starts(3, 6, 2, seed).pop().unwrap();
            let base = sieve_loglik(&data, &theta, 3, 5).unwrap();
            for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
                let mut p = theta.clone();
                p.permute(&perm);
                assert_eq!(sieve_loglik(&data, &p, 3, 5).unwrap(), base);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_data(3, 200);
        for (r, n, k, order) in [(2, 3, 1, 4), (3, 4, 2, 6), (3, 5, 3, 5)] {
            for seed in 0..3 {
                let theta = sieve_starts(k, order, 2, 10 + seed).pop().unwrap();
                let (_, g) = sieve_loglik_gradient(&data, &theta, r, n).unwrap();
                let z = theta.to_free();
                let f = |z: &DVector<f64>| {
                    sieve_loglik(&data, &SieveParams::from_free(z, k, order), r, n).unwrap().value
                };
                let fd = numeric_gradient(f, &z, 1e-6);
                for i in 0..g.len() {
                    let scale = g[i].abs().max(1.0);
                    assert!((g[i] - fd[i]).abs() < 1e-5 * scale, "coordinate {i}: {} vs {}", g[i], fd[i]);
                }
            }
        }
    }

    #[test]
    fn free_coordinates_round_trip() {
        let theta = sieve_starts(2, 5, 3, 4).pop().unwrap();
        let back = SieveParams::from_free(&theta.to_free(), 2, 5);
        for (a, b) in theta.densities.iter().zip(&back.densities) {
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(theta.to_free().len(), SieveParams::free_parameters(2, 5));
    }

    fn uniform_dataset(m: usize, seed: u64) -> Dataset {
        let dgp = MixtureDGP {
            format: AuctionFormat::Ascending,
            states: vec![StateSpec {
                value_dist: ValueDist::uniform(0.0, 1.0),
                prob_w0: 0.4,
            }],
            competition: Competition::Known { n: 4, weights: vec![1.0] },
        };
        simulate(&dgp, m, seed, Orientation::Canonical(3)).unwrap()
    }

    #[test]
    fn single_state_uniform_fit() {
        let ds = uniform_dataset(20_000, 11);
        let data = SieveData::new(&ds).unwrap();
        let fit = fit_sieve(&data, 1, 4, 3, 4, 0, &SieveOptions::default(), None).unwrap();
        let sup = (0..=100)
            .map(|i| {
                let x = i as f64 / 100.0;
                (fit.cdf(0, x) - x).abs()
            })
            .fold(0.0, f64::max);
        assert!(sup <= 0.03, "sup {sup}");
        assert!((fit.params.prob_w0[0] - 0.4).abs() < 0.02);
        // local maximum: no coordinate step of 1e-3 improves
        let z = fit.params.to_free();
        let base = sieve_loglik(&data, &fit.params, 3, 4).unwrap().value;
        for i in 0..z.len() {
            for step in [-1e-3, 1e-3] {
                let mut zz = z.clone();
                zz[i] += step;
                let v = sieve_loglik(&data, &SieveParams::from_free(&zz, 1, 4), 3, 4).unwrap().value;
                assert!(v <= base + 1e-9);
            }
        }
    }

    #[test]
    fn permuted_starts_give_the_same_labeled_fit() {
        let dgp = MixtureDGP {
            format: AuctionFormat::Ascending,
            states: vec![
                StateSpec {
                    value_dist: ValueDist::beta(2.0, 5.0),
                    prob_w0: 0.25,
                },
                StateSpec {
                    value_dist: ValueDist::beta(5.0, 2.0),
                    prob_w0: 0.75,
                },
            ],
            competition: Competition::Known {
                n: 4,
                weights: vec![0.6, 0.4],
            },
        };
        let ds = simulate(&dgp, 4000, 5, Orientation::Canonical(3)).unwrap();
        let data = SieveData::new(&ds).unwrap();
        let opts = SieveOptions {
            multistarts: 3,
            ..Default::default()
        };
        let starts = sieve_starts(2, 4, 3, 9);
        let swapped: Vec<SieveParams> = starts
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.permute(&[1, 0]);
                s
            })
            .collect();
        let a = fit_sieve_from(&data, &starts, 3, 4, &opts, None).unwrap();
        let b = fit_sieve_from(&data, &swapped, 3, 4, &opts, None).unwrap();
        assert!((a.loglik.value - b.loglik.value).abs() < 1e-6 * a.loglik.value.abs());
        for k in 0..2 {
            assert!((a.params.weights[k] - b.params.weights[k]).abs() < 1e-4);
            assert!((a.params.prob_w0[k] - b.params.prob_w0[k]).abs() < 1e-4);
        }
        assert!(a.params.prob_w0[0] < a.params.prob_w0[1]);
    }

    #[test]
    fn truth_beats_perturbations() {
        // Bernstein order 2 with b = (0.5, 0.5) is the uniform density
        let ds = uniform_dataset(20_000, 21);
        let data = SieveData::with_map(&ds, DataMap::identity()).unwrap();
        let truth = SieveParams::new(vec![BernsteinDensity::new(vec![0.5, 0.5]).unwrap()], vec![1.0], vec![0.4]).unwrap();
        let base = sieve_loglik(&data, &truth, 3, 4).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            // random direction, fixed length 0.05
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let b0 = 0.5 + 0.05 * angle.cos();
            let q = 0.4 + 0.05 * angle.sin();
            let p = SieveParams::new(vec![BernsteinDensity::new(vec![b0, 1.0 - b0]).unwrap()], vec![1.0], vec![q]).unwrap();
            assert!(sieve_loglik(&data, &p, 3, 4).unwrap().value < base);
        }
    }

    #[test]
    fn estimate_conversion_reproduces_bernstein_cdfs() {
        let b = vec![0.1, 0.2, 0.4, 0.3];
        let map = DataMap::identity();
        let grid = linspace(0.0, 1.0, 51);
        let cdf: Vec<f64> = grid.iter().map(|&x| bernstein_eval(&b, x).unwrap().1).collect();
        let est = ComponentEstimate {
            grid,
            cdfs: vec![cdf],
            weights: vec![1.0],
            prob_w0: vec![0.3],
            eta_low: vec![1.0],
            eta_high: None,
            bid_cdfs: None,
            diagnostics: Diagnostics::default(),
        };
        let theta = sieve_from_estimate(&est, &map, 4).unwrap();
        for (x, y) in theta.densities[0].coefficients.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn order_selection_prefers_richer_basis_for_skewed_data() {
        let dgp = MixtureDGP {
            format: AuctionFormat::Ascending,
            states: vec![StateSpec {
                value_dist: ValueDist::beta(2.0, 5.0),
                prob_w0: 0.5,
            }],
            competition: Competition::Known { n: 4, weights: vec![1.0] },
        };
        let ds = simulate(&dgp, 5000, 3, Orientation::Canonical(3)).unwrap();
        let data = SieveData::new(&ds).unwrap();
        let opts = SieveOptions {
            multistarts: 3,
            ..Default::default()
        };
        let (order, scores) = select_order(&data, 1, &[2, 6], 3, 4, 0, &opts).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(order, 6);
    }
}
