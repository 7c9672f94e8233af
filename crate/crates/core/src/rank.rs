//! Rank of cell matrices and the number of latent states.
//!
//! A sample singular value `σ_{r+1}` is compared with its own sampling
//! standard deviation, obtained by the delta method from the singular
//! vectors and the multinomial variance of the cell frequencies. Rank `r` is
//! accepted at the first `r` with `σ_{r+1} / sd_{r+1} < c0 · sqrt(log M)`.
//! Population matrices use a relative numerical-rank tolerance instead.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::discretize::{enumerate_schemes, CellMatrix, Discretization, WFilter};
use crate::error::{Error, Result};
use crate::source::JointObservables;

/// Default multiplier of the `sqrt(log M)` threshold.
pub const DEFAULT_C0: f64 = 2.0;
/// Relative singular-value tolerance for population matrices.
pub const POPULATION_RANK_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct RankDecision {
    pub estimated_rank: usize,
    pub singular_values: Vec<f64>,
    /// `σ_i / sd_i` for each singular value (empty for population matrices).
    pub statistics: Vec<f64>,
    pub threshold: f64,
    pub scheme_id: Option<usize>,
    pub sample_size: Option<usize>,
    /// Set when the matrix is identically zero.
    pub degenerate: bool,
}

impl RankDecision {
    /// Statistic of the smallest retained singular value, a measure of how
    /// clearly the rank is supported.
    pub fn strength(&self) -> f64 {
        if self.estimated_rank == 0 {
            return 0.0;
        }
        let i = self.estimated_rank - 1;
        match self.statistics.get(i) {
            Some(&z) => z,
            None => self.singular_values[i] / self.singular_values[0],
        }
    }
}

fn sorted_svd(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    (sv, u, v)
}

/// Sequential rank decision for one cell matrix.
pub fn estimate_rank(cm: &CellMatrix, c0: f64) -> Result<RankDecision> {
    let dim = cm.entries.nrows().min(cm.entries.ncols());
    let (sv, u, v) = sorted_svd(&cm.entries);
    if sv.first().copied().unwrap_or(0.0) == 0.0 {
        return Ok(RankDecision {
            estimated_rank: 0,
            singular_values: sv,
            statistics: vec![],
            threshold: 0.0,
            scheme_id: None,
            sample_size: cm.sample_size,
            degenerate: true,
        });
    }
    match cm.sample_size {
        None => {
            let tol = POPULATION_RANK_TOL * sv[0];
            let rank = sv.iter().filter(|&&s| s > tol).count();
            Ok(RankDecision {
                estimated_rank: rank,
                singular_values: sv,
                statistics: vec![],
                threshold: tol,
                scheme_id: None,
                sample_size: None,
                degenerate: false,
            })
        }
        Some(m) => {
            if m < 2 {
                return Err(Error::Data("rank test needs at least two auctions".into()));
            }
            let mf = m as f64;
            let statistics: Vec<f64> = (0..dim)
                .map(|k| {
                    let mut var = 0.0;
                    for i in 0..cm.entries.nrows() {
                        for j in 0..cm.entries.ncols() {
                            let w = u[(i, k)] * v[(j, k)];
                            var += w * w * (cm.entries[(i, j)] + 1.0 / mf);
                        }
                    }
                    sv[k] / (var / mf).sqrt()
                })
                .collect();
            let threshold = c0 * mf.ln().sqrt();
            let rank = statistics.iter().position(|&z| z < threshold).unwrap_or(dim);
            Ok(RankDecision {
                estimated_rank: rank,
                singular_values: sv,
                statistics,
                threshold,
                scheme_id: None,
                sample_size: Some(m),
                degenerate: false,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct RankSettings {
    pub max_dim: usize,
    pub r1: usize,
    pub rl: usize,
    pub rh: usize,
    pub c0: f64,
    pub filter: WFilter,
}

impl Default for RankSettings {
    fn default() -> Self {
        Self {
            max_dim: 6,
            r1: 9,
            rl: 5,
            rh: 5,
            c0: DEFAULT_C0,
            filter: WFilter::All,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SchemeReport {
    pub dim: usize,
    pub scheme: Discretization,
    pub decision: RankDecision,
    pub min_count: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub dim: usize,
    pub max_rank: usize,
    pub winner: usize,
    pub schemes: Vec<SchemeReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct KEstimate {
    pub k_hat: usize,
    /// False when the rank was still growing at the largest dimension tried.
    pub saturated: bool,
    pub levels: Vec<LevelReport>,
}

impl KEstimate {
    /// Winning scheme at dimension `dim`, if that level was evaluated.
    pub fn winning_scheme(&self, dim: usize) -> Option<&SchemeReport> {
        self.levels
            .iter()
            .find(|l| l.dim == dim)
            .map(|l| &l.schemes[l.winner])
    }

    pub fn to_json(&self) -> serde_json::Value {
        let levels: Vec<serde_json::Value> = self
            .levels
            .iter()
            .map(|l| {
                serde_json::json!({
                    "dim": l.dim,
                    "max_rank": l.max_rank,
                    "winning_scheme": l.winner,
                    "schemes": l.schemes.iter().enumerate().map(|(i, s)| serde_json::json!({
                        "id": i,
                        "scheme": s.scheme.to_json(),
                        "singular_values": s.decision.singular_values,
                        "statistics": s.decision.statistics,
                        "threshold": s.decision.threshold,
                        "rank": s.decision.estimated_rank,
                        "min_count": s.min_count,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({
            "k_hat": self.k_hat,
            "saturated": self.saturated,
            "levels": levels,
        })
    }
}

/// Evaluates every scheme of dimension `dim` and returns the level report.
pub fn rank_level(source: &dyn JointObservables, dim: usize, settings: &RankSettings) -> Result<LevelReport> {
    let schemes = enumerate_schemes(source, dim, settings.r1, settings.rl, settings.rh)?;
    if schemes.is_empty() {
        return Err(Error::config(
            "estimation.grids",
            format!("no valid discretization with {dim} cells per segment"),
        ));
    }
    let reports: Vec<SchemeReport> = schemes
        .into_par_iter()
        .enumerate()
        .map(|(id, scheme)| {
            let cm = source.view(&scheme)?.cell_matrix(settings.filter)?;
            let mut decision = estimate_rank(&cm, settings.c0)?;
            decision.scheme_id = Some(id);
            Ok(SchemeReport {
                dim,
                min_count: cm.sample_size.map(|_| cm.min_count()),
                scheme,
                decision,
            })
        })
        .collect::<Result<_>>()?;
    let max_rank = reports.iter().map(|r| r.decision.estimated_rank).max().unwrap_or(0);
    // ties toward the largest minimum cell count, then the strongest statistic, then the lowest id
    let winner = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.decision.estimated_rank == max_rank)
        .max_by(|(ia, a), (ib, b)| {
            a.min_count
                .cmp(&b.min_count)
                .then(a.decision.strength().total_cmp(&b.decision.strength()))
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("at least one scheme");
    Ok(LevelReport {
        dim,
        max_rank,
        winner,
        schemes: reports,
    })
}

/// Number of latent states: the rank of the cell matrices once it stops
/// growing with the number of cells.
pub fn estimate_k(source: &dyn JointObservables, settings: &RankSettings) -> Result<KEstimate> {
    if settings.max_dim < 2 {
        return Err(Error::config("estimation.max_dim", "must be at least 2"));
    }
    let mut levels = Vec::new();
    for dim in 2..=settings.max_dim {
        let level = rank_level(source, dim, settings)?;
        let max_rank = level.max_rank;
        levels.push(level);
        if max_rank < dim {
            return Ok(KEstimate {
                k_hat: max_rank,
                saturated: true,
                levels,
            });
        }
    }
    log::warn!(
        "rank still growing at {} cells per segment; K may exceed the estimate",
        settings.max_dim
    );
    Ok(KEstimate {
        k_hat: settings.max_dim,
        saturated: false,
        levels,
    })
}
