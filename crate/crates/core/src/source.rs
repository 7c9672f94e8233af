//! Sources of the joint-distribution functionals used by identification:
//! cell probabilities, pointwise rows, cumulative rows, and marginal CDFs.
//!
//! [`EmpiricalSource`] estimates them from a dataset (frequencies and
//! Epanechnikov kernels); [`PopulationSource`] evaluates them exactly from a
//! known mixture design, which gives noise-free inputs for oracle checks.

use nalgebra::DMatrix;

use crate::discretize::{quantile_grid, CellMatrix, Discretization, WFilter};
use crate::error::{Error, Result};
use crate::numeric::roots::bisect;
use crate::order_stats::{binom_constant, consecutive_joint_cdf_grad, extreme_os_pdf, os_cdf_unchecked, Parent, Side};
use crate::simulate::{Dataset, MixtureDGP, Observation};

pub trait JointObservables: Sync {
    /// Support `[x_lo_min, x_hi_max]` of the bids.
    fn support(&self) -> (f64, f64);
    /// Canonical rank `r` of the upper statistic.
    fn rank(&self) -> u32;
    /// Number of auctions, `None` for population inputs.
    fn sample_size(&self) -> Option<usize>;
    /// Quantiles of the pooled `x_lo`/`x_hi` sample used as cutoffs.
    fn cutoff_candidates(&self, count: usize) -> Result<Vec<f64>>;
    /// Quantiles of `x_lo` below the cutoff.
    fn low_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>>;
    /// Quantiles of `x_hi` above the cutoff.
    fn high_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>>;
    /// CDF of `x_lo`.
    fn lower_cdf(&self, x: f64) -> f64;
    /// CDF of `x_hi`.
    fn upper_cdf(&self, x: f64) -> f64;
    /// `P(x_lo ≤ g_i, x_hi ≤ g_j)` for every pair of points of an increasing grid.
    fn joint_cdf_grid(&self, grid: &[f64]) -> Vec<Vec<f64>>;
    /// Scheme-specific functionals.
    fn view<'a>(&'a self, scheme: &Discretization) -> Result<Box<dyn SchemeView + 'a>>;
}

/// Functionals of the joint distribution tied to one discretization.
pub trait SchemeView: Sync {
    fn scheme(&self) -> &Discretization;
    fn cell_matrix(&self, filter: WFilter) -> Result<CellMatrix>;
    /// `(∫_{h_j} f(x, y) dy)_j` for `x` in the low segment.
    fn low_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>>;
    /// `(∫_{l_i} f(x, y) dx)_i` for `y` in the high segment.
    fn high_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>>;
    /// Low row at the cutoff, the left limit of [`SchemeView::low_row`].
    /// Empirical sources use a local-linear boundary kernel here, which avoids
    /// the first-order bias of a reflected estimate at a boundary.
    fn low_row_at_cutoff(&self, filter: WFilter) -> Result<Vec<f64>> {
        self.low_row(self.scheme().cutoff, filter)
    }
    /// High row at the cutoff, the right limit of [`SchemeView::high_row`].
    fn high_row_at_cutoff(&self, filter: WFilter) -> Result<Vec<f64>> {
        self.high_row(self.scheme().cutoff, filter)
    }
    /// `(Pr(x_lo <= x, x_hi ∈ h_j))_j` for `x` in the low segment.
    fn low_cumulative_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>>;
    /// `(Pr(x_lo ∈ l_i, x_hi >= y))_i` for `y` in the high segment.
    fn high_tail_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>>;
}

fn check_low(scheme: &Discretization, x: f64) -> Result<()> {
    let lo = scheme.low_cells[0].0;
    if !(x >= lo && x <= scheme.cutoff) {
        return Err(Error::domain(format!(
            "point {x} outside the low segment [{lo}, {}]",
            scheme.cutoff
        )));
    }
    Ok(())
}

fn check_high(scheme: &Discretization, y: f64) -> Result<()> {
    let hi = scheme.high_cells[scheme.high_cells.len() - 1].1;
    if !(y >= scheme.cutoff && y <= hi) {
        return Err(Error::domain(format!(
            "point {y} outside the high segment [{}, {hi}]",
            scheme.cutoff
        )));
    }
    Ok(())
}

/// Frequency and kernel estimates from observed auctions.
pub struct EmpiricalSource {
    obs: Vec<Observation>,
    support: (f64, f64),
    rank: u32,
    sorted_lo: Vec<f64>,
    sorted_hi: Vec<f64>,
    pooled: Vec<f64>,
}

impl EmpiricalSource {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let rank = dataset.canonical_rank()?;
        if dataset.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let obs: Vec<Observation> = dataset.observations().collect();
        let mut sorted_lo: Vec<f64> = obs.iter().map(|o| o.x_lo).collect();
        let mut sorted_hi: Vec<f64> = obs.iter().map(|o| o.x_hi).collect();
        sorted_lo.sort_by(f64::total_cmp);
        sorted_hi.sort_by(f64::total_cmp);
        let mut pooled = [sorted_lo.as_slice(), sorted_hi.as_slice()].concat();
        pooled.sort_by(f64::total_cmp);
        Ok(Self {
            obs,
            support: dataset.support,
            rank,
            sorted_lo,
            sorted_hi,
            pooled,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Concrete view, for callers that want to avoid dynamic dispatch.
    pub fn empirical_view(&self, scheme: &Discretization) -> Result<EmpiricalView> {
        let k = scheme.dim();
        let mut low_groups: Vec<Vec<f64>> = vec![Vec::new(); scheme.high_cells.len()];
        let mut low_groups_w0: Vec<Vec<f64>> = vec![Vec::new(); scheme.high_cells.len()];
        let mut high_groups: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut high_groups_w0: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut counts = DMatrix::<f64>::zeros(k, scheme.high_cells.len());
        let mut counts_w0 = counts.clone();
        let mut band_lo = Vec::new();
        let mut band_hi = Vec::new();
        for o in &self.obs {
            let li = scheme.low_cell(o.x_lo);
            let hj = scheme.high_cell(o.x_hi);
            if let Some(j) = hj {
                low_groups[j].push(o.x_lo);
                if o.w == 0 {
                    low_groups_w0[j].push(o.x_lo);
                }
                if li.is_some() {
                    band_lo.push(o.x_lo);
                }
            }
            if let Some(i) = li {
                high_groups[i].push(o.x_hi);
                if o.w == 0 {
                    high_groups_w0[i].push(o.x_hi);
                }
                if hj.is_some() {
                    band_hi.push(o.x_hi);
                }
            }
            if let (Some(i), Some(j)) = (li, hj) {
                counts[(i, j)] += 1.0;
                if o.w == 0 {
                    counts_w0[(i, j)] += 1.0;
                }
            }
        }
        for g in low_groups
            .iter_mut()
            .chain(low_groups_w0.iter_mut())
            .chain(high_groups.iter_mut())
            .chain(high_groups_w0.iter_mut())
        {
            g.sort_by(f64::total_cmp);
        }
        let width = self.support.1 - self.support.0;
        Ok(EmpiricalView {
            scheme: scheme.clone(),
            m: self.obs.len() as f64,
            counts,
            counts_w0,
            low_groups,
            low_groups_w0,
            high_groups,
            high_groups_w0,
            h_low: silverman_bandwidth(&mut band_lo, width),
            h_high: silverman_bandwidth(&mut band_hi, width),
            support: self.support,
        })
    }
}

/// Rule-of-thumb Epanechnikov bandwidth `2.34 · min(sd, IQR/1.349) · N^{-1/5}`.
/// Returns `None` when the sample cannot support a bandwidth.
fn silverman_bandwidth(sample: &mut [f64], width: f64) -> Option<f64> {
    let n = sample.len();
    if n < 2 {
        return None;
    }
    sample.sort_by(f64::total_cmp);
    let mean = sample.iter().sum::<f64>() / n as f64;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let q = |p: f64| sample[((p * n as f64) as usize).min(n - 1)];
    let iqr = (q(0.75) - q(0.25)) / 1.349;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let h = 2.34 * spread * (n as f64).powf(-0.2);
    (h > 1e-9 * width).then_some(h)
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.75 * (1.0 - u * u)
    }
}

fn window_sum(data: &[f64], c: f64, h: f64) -> f64 {
    let a = data.partition_point(|&v| v < c - h);
    let b = data.partition_point(|&v| v <= c + h);
    data[a..b].iter().map(|&v| epanechnikov((c - v) / h)).sum()
}

/// Kernel density sum of sorted `data` (all inside `[lo, hi]`) at `x`,
/// reflecting at both segment ends so no mass leaves the segment.
fn reflected_sum(data: &[f64], x: f64, h: f64, lo: f64, hi: f64) -> f64 {
    let mut s = window_sum(data, x, h);
    if x - lo < h {
        s += window_sum(data, 2.0 * lo - x, h);
    }
    if hi - x < h {
        s += window_sum(data, 2.0 * hi - x, h);
    }
    s / h
}

/// Ratio of the rule-of-thumb bandwidth of the one-sided local-linear
/// Epanechnikov kernel to that of the interior kernel, `(R(K_b) μ₂(K)² / (R(K) μ₂(K_b)²))^{1/5}`.
const BOUNDARY_BANDWIDTH_FACTOR: f64 = 1.8617;

/// Local-linear boundary kernel density sum at `c` using only the data on
/// one side of it, divided by `h`.
fn boundary_linear_sum(data: &[f64], c: f64, h: f64, left: bool) -> f64 {
    // one-sided Epanechnikov moments
    let (a0, a1, a2) = (0.5, 0.1875, 0.1);
    let det = a0 * a2 - a1 * a1;
    let (a, b) = if left {
        (data.partition_point(|&v| v < c - h), data.partition_point(|&v| v <= c))
    } else {
        (data.partition_point(|&v| v < c), data.partition_point(|&v| v <= c + h))
    };
    data[a..b]
        .iter()
        .map(|&v| {
            let u = (v - c).abs() / h;
            (a2 - a1 * u) * epanechnikov(u) / det
        })
        .sum::<f64>()
        / h
}

pub struct EmpiricalView {
    scheme: Discretization,
    m: f64,
    counts: DMatrix<f64>,
    counts_w0: DMatrix<f64>,
    low_groups: Vec<Vec<f64>>,
    low_groups_w0: Vec<Vec<f64>>,
    high_groups: Vec<Vec<f64>>,
    high_groups_w0: Vec<Vec<f64>>,
    h_low: Option<f64>,
    h_high: Option<f64>,
    support: (f64, f64),
}

impl EmpiricalView {
    fn low(&self, filter: WFilter) -> &[Vec<f64>] {
        match filter {
            WFilter::All => &self.low_groups,
            WFilter::W0 => &self.low_groups_w0,
        }
    }

    fn high(&self, filter: WFilter) -> &[Vec<f64>] {
        match filter {
            WFilter::All => &self.high_groups,
            WFilter::W0 => &self.high_groups_w0,
        }
    }

    pub fn bandwidths(&self) -> (Option<f64>, Option<f64>) {
        (self.h_low, self.h_high)
    }
}

impl SchemeView for EmpiricalView {
    fn scheme(&self) -> &Discretization {
        &self.scheme
    }

    fn cell_matrix(&self, filter: WFilter) -> Result<CellMatrix> {
        let counts = match filter {
            WFilter::All => &self.counts,
            WFilter::W0 => &self.counts_w0,
        };
        Ok(CellMatrix {
            entries: counts / self.m,
            sample_size: Some(self.m as usize),
            filter,
        })
    }

    fn low_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_low(&self.scheme, x)?;
        let h = self
            .h_low
            .ok_or_else(|| Error::numeric("kernel bandwidth for x_lo collapsed below resolution"))?;
        let (lo, c) = (self.support.0, self.scheme.cutoff);
        let h = h.min(0.5 * (c - lo));
        Ok(self
            .low(filter)
            .iter()
            .map(|g| {
                let inside = &g[..g.partition_point(|&v| v <= c)];
                reflected_sum(inside, x, h, lo, c) / self.m
            })
            .collect())
    }

    fn high_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_high(&self.scheme, y)?;
        let h = self
            .h_high
            .ok_or_else(|| Error::numeric("kernel bandwidth for x_hi collapsed below resolution"))?;
        let (c, hi) = (self.scheme.cutoff, self.support.1);
        let h = h.min(0.5 * (hi - c));
        Ok(self
            .high(filter)
            .iter()
            .map(|g| {
                let inside = &g[g.partition_point(|&v| v < c)..];
                reflected_sum(inside, y, h, c, hi) / self.m
            })
            .collect())
    }

    fn low_row_at_cutoff(&self, filter: WFilter) -> Result<Vec<f64>> {
        let h = self
            .h_low
            .ok_or_else(|| Error::numeric("kernel bandwidth for x_lo collapsed below resolution"))?;
        let c = self.scheme.cutoff;
        let h = BOUNDARY_BANDWIDTH_FACTOR * h;
        Ok(self
            .low(filter)
            .iter()
            .map(|g| boundary_linear_sum(g, c, h, true) / self.m)
            .collect())
    }

    fn high_row_at_cutoff(&self, filter: WFilter) -> Result<Vec<f64>> {
        let h = self
            .h_high
            .ok_or_else(|| Error::numeric("kernel bandwidth for x_hi collapsed below resolution"))?;
        let c = self.scheme.cutoff;
        let h = BOUNDARY_BANDWIDTH_FACTOR * h;
        Ok(self
            .high(filter)
            .iter()
            .map(|g| boundary_linear_sum(g, c, h, false) / self.m)
            .collect())
    }

    fn low_cumulative_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_low(&self.scheme, x)?;
        Ok(self
            .low(filter)
            .iter()
            .map(|g| g.partition_point(|&v| v <= x) as f64 / self.m)
            .collect())
    }

    fn high_tail_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_high(&self.scheme, y)?;
        Ok(self
            .high(filter)
            .iter()
            .map(|g| (g.len() - g.partition_point(|&v| v < y)) as f64 / self.m)
            .collect())
    }
}

impl JointObservables for EmpiricalSource {
    fn support(&self) -> (f64, f64) {
        self.support
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn sample_size(&self) -> Option<usize> {
        Some(self.obs.len())
    }

    fn cutoff_candidates(&self, count: usize) -> Result<Vec<f64>> {
        quantile_grid(&self.pooled, count)
    }

    fn low_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>> {
        let end = self.sorted_lo.partition_point(|&v| v <= cutoff);
        quantile_grid(&self.sorted_lo[..end], count)
    }

    fn high_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>> {
        let start = self.sorted_hi.partition_point(|&v| v < cutoff);
        quantile_grid(&self.sorted_hi[start..], count)
    }

    fn lower_cdf(&self, x: f64) -> f64 {
        self.sorted_lo.partition_point(|&v| v <= x) as f64 / self.sorted_lo.len() as f64
    }

    fn upper_cdf(&self, x: f64) -> f64 {
        self.sorted_hi.partition_point(|&v| v <= x) as f64 / self.sorted_hi.len() as f64
    }

    fn joint_cdf_grid(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        let g = grid.len();
        // counts by the first grid index at or above each coordinate
        let mut counts = vec![vec![0.0; g + 1]; g + 1];
        for o in &self.obs {
            let a = grid.partition_point(|&v| v < o.x_lo);
            let b = grid.partition_point(|&v| v < o.x_hi);
            counts[a][b] += 1.0;
        }
        let m = self.obs.len() as f64;
        let mut cdf = vec![vec![0.0; g]; g];
        for i in 0..g {
            for j in 0..g {
                let above = if i > 0 { cdf[i - 1][j] } else { 0.0 };
                let left = if j > 0 { cdf[i][j - 1] } else { 0.0 };
                let corner = if i > 0 && j > 0 { cdf[i - 1][j - 1] } else { 0.0 };
                cdf[i][j] = above + left - corner + counts[i][j] / m;
            }
        }
        cdf
    }

    fn view<'a>(&'a self, scheme: &Discretization) -> Result<Box<dyn SchemeView + 'a>> {
        Ok(Box::new(self.empirical_view(scheme)?))
    }
}

/// One mixture component `(state, n)` of a known design.
pub struct PopulationComponent {
    pub state: usize,
    pub n: u32,
    pub weight: f64,
    pub prob_w0: f64,
    pub parent: Box<dyn Parent>,
}

/// Exact functionals of a known mixture design.
pub struct PopulationSource {
    components: Vec<PopulationComponent>,
    rank: u32,
    support: (f64, f64),
}

impl PopulationSource {
    pub fn from_dgp(dgp: &MixtureDGP, r: u32) -> Result<Self> {
        dgp.validate()?;
        if r < 2 || dgp.competition_support().iter().any(|&n| n < r) {
            return Err(Error::config("estimation.r", format!("rank {r} incompatible with the design")));
        }
        let components = dgp
            .joint_weights()
            .into_iter()
            .map(|(k, n, w)| {
                Ok(PopulationComponent {
                    state: k,
                    n,
                    weight: w,
                    prob_w0: dgp.states[k].prob_w0,
                    parent: dgp.bid_parent(k, n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lo = components.iter().map(|c| c.parent.support().0).fold(f64::INFINITY, f64::min);
        let hi = components.iter().map(|c| c.parent.support().1).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            components,
            rank: r,
            support: (lo, hi),
        })
    }

    pub fn components(&self) -> &[PopulationComponent] {
        &self.components
    }

    fn weight(&self, c: &PopulationComponent, filter: WFilter) -> f64 {
        match filter {
            WFilter::All => c.weight,
            WFilter::W0 => c.weight * c.prob_w0,
        }
    }

    /// Constant `c_{r-1,n}` of a component.
    fn constant(&self, c: &PopulationComponent) -> f64 {
        binom_constant(self.rank, c.n).expect("validated rank") as f64
    }

    /// CDF of `x_lo`.
    fn quantile_of<F: Fn(f64) -> f64>(&self, cdf: F, p: f64) -> Result<f64> {
        let (lo, hi) = self.support;
        bisect(|x| cdf(x) - p, lo, hi, 1e-14 * (hi - lo))
    }

    /// `∫_{cell} (r-1) F^{r-2} f` in closed form.
    fn low_mass(&self, c: &PopulationComponent, a: f64, b: f64) -> f64 {
        let m = (self.rank - 1) as i32;
        c.parent.cdf(b).powi(m) - c.parent.cdf(a).powi(m)
    }

    /// `∫_{cell} m (1-F)^{m-1} f` in closed form, `m = n - r + 1`.
    fn high_mass(&self, c: &PopulationComponent, a: f64, b: f64) -> f64 {
        let m = (c.n - self.rank + 1) as i32;
        (1.0 - c.parent.cdf(a)).powi(m) - (1.0 - c.parent.cdf(b)).powi(m)
    }
}

impl JointObservables for PopulationSource {
    fn support(&self) -> (f64, f64) {
        self.support
    }

    fn rank(&self) -> u32 {
        self.rank
    }

    fn sample_size(&self) -> Option<usize> {
        None
    }

    fn cutoff_candidates(&self, count: usize) -> Result<Vec<f64>> {
        (1..=count)
            .map(|i| {
                let p = i as f64 / (count + 1) as f64;
                self.quantile_of(|x| 0.5 * (self.lower_cdf(x) + self.upper_cdf(x)), p)
            })
            .collect()
    }

    fn low_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>> {
        let total = self.lower_cdf(cutoff);
        if total <= 0.0 {
            return Err(Error::DegenerateGrid("no mass below the cutoff".into()));
        }
        (1..=count)
            .map(|i| {
                let p = i as f64 / (count + 1) as f64;
                self.quantile_of(|x| self.lower_cdf(x.min(cutoff)) / total, p)
            })
            .collect()
    }

    fn high_quantiles(&self, cutoff: f64, count: usize) -> Result<Vec<f64>> {
        let base = self.upper_cdf(cutoff);
        let total = 1.0 - base;
        if total <= 0.0 {
            return Err(Error::DegenerateGrid("no mass above the cutoff".into()));
        }
        (1..=count)
            .map(|i| {
                let p = i as f64 / (count + 1) as f64;
                self.quantile_of(|x| (self.upper_cdf(x.max(cutoff)) - base) / total, p)
            })
            .collect()
    }

    fn lower_cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * os_cdf_unchecked(c.parent.cdf(x), self.rank - 1, c.n))
            .sum()
    }

    fn upper_cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * os_cdf_unchecked(c.parent.cdf(x), self.rank, c.n))
            .sum()
    }

    fn joint_cdf_grid(&self, grid: &[f64]) -> Vec<Vec<f64>> {
        let cdfs: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| grid.iter().map(|&x| c.parent.cdf(x)).collect())
            .collect();
        (0..grid.len())
            .map(|i| {
                (0..grid.len())
                    .map(|j| {
                        self.components
                            .iter()
                            .zip(&cdfs)
                            .map(|(c, u)| {
                                let lo = u[i.min(j)];
                                c.weight * consecutive_joint_cdf_grad(lo, u[j], self.rank, c.n).0
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn view<'a>(&'a self, scheme: &Discretization) -> Result<Box<dyn SchemeView + 'a>> {
        Ok(Box::new(PopulationView {
            source: self,
            scheme: scheme.clone(),
        }))
    }
}

struct PopulationView<'a> {
    source: &'a PopulationSource,
    scheme: Discretization,
}

impl PopulationView<'_> {
    fn sum_rows<F: Fn(&PopulationComponent) -> Vec<f64>>(&self, filter: WFilter, f: F) -> Vec<f64> {
        let k = self.scheme.dim();
        let mut out = vec![0.0; k];
        for c in &self.source.components {
            let scale = self.source.weight(c, filter) * self.source.constant(c);
            for (o, v) in out.iter_mut().zip(f(c)) {
                *o += scale * v;
            }
        }
        out
    }
}

impl SchemeView for PopulationView<'_> {
    fn scheme(&self) -> &Discretization {
        &self.scheme
    }

    fn cell_matrix(&self, filter: WFilter) -> Result<CellMatrix> {
        let k = self.scheme.dim();
        let src = self.source;
        let mut entries = DMatrix::zeros(k, k);
        for c in &src.components {
            let scale = src.weight(c, filter) * src.constant(c);
            for (i, &(a, b)) in self.scheme.low_cells.iter().enumerate() {
                let low = src.low_mass(c, a, b);
                for (j, &(e, f)) in self.scheme.high_cells.iter().enumerate() {
                    entries[(i, j)] += scale * low * src.high_mass(c, e, f);
                }
            }
        }
        Ok(CellMatrix {
            entries,
            sample_size: None,
            filter,
        })
    }

    fn low_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_low(&self.scheme, x)?;
        let r = self.source.rank;
        Ok(self.sum_rows(filter, |c| {
            let dens = extreme_os_pdf(c.parent.as_ref(), x, r - 1, Side::Max).unwrap_or(0.0);
            self.scheme
                .high_cells
                .iter()
                .map(|&(e, f)| dens * self.source.high_mass(c, e, f))
                .collect()
        }))
    }

    fn high_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_high(&self.scheme, y)?;
        let r = self.source.rank;
        Ok(self.sum_rows(filter, |c| {
            let dens = extreme_os_pdf(c.parent.as_ref(), y, c.n - r + 1, Side::Min).unwrap_or(0.0);
            self.scheme
                .low_cells
                .iter()
                .map(|&(a, b)| dens * self.source.low_mass(c, a, b))
                .collect()
        }))
    }

    fn low_cumulative_row(&self, x: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_low(&self.scheme, x)?;
        let lo = self.scheme.low_cells[0].0;
        Ok(self.sum_rows(filter, |c| {
            let mass = self.source.low_mass(c, lo, x);
            self.scheme
                .high_cells
                .iter()
                .map(|&(e, f)| mass * self.source.high_mass(c, e, f))
                .collect()
        }))
    }

    fn high_tail_row(&self, y: f64, filter: WFilter) -> Result<Vec<f64>> {
        check_high(&self.scheme, y)?;
        let hi = self.scheme.high_cells[self.scheme.high_cells.len() - 1].1;
        Ok(self.sum_rows(filter, |c| {
            let tail = self.source.high_mass(c, y, hi);
            self.scheme
                .low_cells
                .iter()
                .map(|&(a, b)| self.source.low_mass(c, a, b) * tail)
                .collect()
        }))
    }
}
