//! Quantile cutoffs, low/high interval schemes, and cell-probability matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::combinations;
use crate::simulate::Dataset;
use crate::source::{EmpiricalSource, JointObservables};

/// Which auctions enter a count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WFilter {
    All,
    /// Only auctions with instrument value `W = 0`.
    W0,
}

impl WFilter {
    pub fn admits(self, w: u8) -> bool {
        match self {
            WFilter::All => true,
            WFilter::W0 => w == 0,
        }
    }
}

/// Left-continuous empirical quantiles at levels `i / (R + 1)`, deduplicated.
pub fn quantile_grid(sorted: &[f64], count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("quantile grid needs R >= 1"));
    }
    if sorted.len() < count + 1 {
        return Err(Error::DegenerateGrid(format!(
            "{} samples cannot support {count} quantiles",
            sorted.len()
        )));
    }
    let m = sorted.len() as f64;
    let mut out: Vec<f64> = (1..=count)
        .map(|i| {
            let p = i as f64 / (count + 1) as f64;
            // x_(ceil(pM)), guarding against p*M landing a hair above an integer
            let idx = ((p * m) - 1e-9).ceil().max(1.0) as usize;
            sorted[idx.min(sorted.len()) - 1]
        })
        .collect();
    out.dedup();
    if out.len() < count {
        return Err(Error::DegenerateGrid(format!(
            "only {} distinct quantiles out of {count}",
            out.len()
        )));
    }
    Ok(out)
}

/// A cutoff splitting the support into a low and a high segment, each cut into cells.
///
/// Cells are left-closed and right-open, except the last cell of each segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub cutoff: f64,
    pub low_cells: Vec<(f64, f64)>,
    pub high_cells: Vec<(f64, f64)>,
}

impl Discretization {
    /// Builds cells from interior boundaries of each segment.
    pub fn from_boundaries(support: (f64, f64), cutoff: f64, low_inner: &[f64], high_inner: &[f64]) -> Result<Self> {
        let (lo, hi) = support;
        if !(lo < cutoff && cutoff < hi) {
            return Err(Error::DegenerateGrid(format!(
                "cutoff {cutoff} not inside support ({lo}, {hi})"
            )));
        }
        let cells = |a: f64, inner: &[f64], b: f64| -> Result<Vec<(f64, f64)>> {
            let mut pts = vec![a];
            pts.extend_from_slice(inner);
            pts.push(b);
            if pts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::DegenerateGrid(format!("empty cell in boundaries {pts:?}")));
            }
            Ok(pts.windows(2).map(|w| (w[0], w[1])).collect())
        };
        Ok(Self {
            cutoff,
            low_cells: cells(lo, low_inner, cutoff)?,
            high_cells: cells(cutoff, high_inner, hi)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.low_cells.len()
    }

    pub fn low_cell(&self, x: f64) -> Option<usize> {
        locate(&self.low_cells, x)
    }

    pub fn high_cell(&self, y: f64) -> Option<usize> {
        locate(&self.high_cells, y)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.low_cells[0].0, self.high_cells[self.high_cells.len() - 1].1)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "cutoff": self.cutoff,
            "low_cells": self.low_cells.iter().map(|c| [c.0, c.1]).collect::<Vec<_>>(),
            "high_cells": self.high_cells.iter().map(|c| [c.0, c.1]).collect::<Vec<_>>(),
        })
    }
}

fn locate(cells: &[(f64, f64)], x: f64) -> Option<usize> {
    let last = cells.len() - 1;
    if x < cells[0].0 || x > cells[last].1 {
        return None;
    }
    let i = cells.partition_point(|c| c.1 <= x);
    Some(i.min(last))
}

/// Estimated (or population) joint probabilities over low x high cells.
#[derive(Clone, Debug)]
pub struct CellMatrix {
    pub entries: DMatrix<f64>,
    /// `None` for population matrices.
    pub sample_size: Option<usize>,
    pub filter: WFilter,
}

impl CellMatrix {
    /// Smallest cell count (population matrices report `usize::MAX`).
    pub fn min_count(&self) -> usize {
        match self.sample_size {
            Some(m) => (self.entries.min() * m as f64).round() as usize,
            None => usize::MAX,
        }
    }
}

/// All schemes with `dim` cells per segment: every cutoff among `r1` pooled
/// quantiles, combined with every `(dim-1)`-subset of `rl` low-segment and
/// `rh` high-segment quantiles. Cutoffs whose segments cannot support the
/// grids are skipped with a log message.
pub fn enumerate_schemes(
    source: &dyn JointObservables,
    dim: usize,
    r1: usize,
    rl: usize,
    rh: usize,
) -> Result<Vec<Discretization>> {
    if dim == 0 || r1 == 0 || rl + 1 < dim || rh + 1 < dim {
        return Err(Error::config(
            "estimation.grids",
            format!("need R1 >= 1 and Rl, Rh >= {} for {dim} cells", dim.saturating_sub(1)),
        ));
    }
    let support = source.support();
    let mut out = Vec::new();
    for cutoff in source.cutoff_candidates(r1)? {
        let (low, high) = match (source.low_quantiles(cutoff, rl), source.high_quantiles(cutoff, rh)) {
            (Ok(l), Ok(h)) => (l, h),
            (Err(e), _) | (_, Err(e)) => {
                log::info!("skipping cutoff {cutoff}: {e}");
                continue;
            }
        };
        let low: Vec<f64> = low.into_iter().filter(|&v| v > support.0 && v < cutoff).collect();
        let high: Vec<f64> = high.into_iter().filter(|&v| v > cutoff && v < support.1).collect();
        if low.len() + 1 < dim || high.len() + 1 < dim {
            log::info!("skipping cutoff {cutoff}: too few distinct grid points inside the segments");
            continue;
        }
        for lc in combinations(low.len(), dim - 1) {
            let li: Vec<f64> = lc.iter().map(|&i| low[i]).collect();
            for hc in combinations(high.len(), dim - 1) {
                let hi: Vec<f64> = hc.iter().map(|&i| high[i]).collect();
                match Discretization::from_boundaries(support, cutoff, &li, &hi) {
                    Ok(s) => out.push(s),
                    Err(e) => log::info!("skipping scheme: {e}"),
                }
            }
        }
    }
    Ok(out)
}

/// Frequency estimate of the cell probabilities.
pub fn cell_matrix(dataset: &Dataset, scheme: &Discretization, filter: WFilter) -> Result<CellMatrix> {
    EmpiricalSource::new(dataset)?.view(scheme)?.cell_matrix(filter)
}

/// Kernel estimate of `(∫_{h_j} f(x, y) dy)_j` at a low-segment point `x`.
pub fn cell_row_at_point(dataset: &Dataset, scheme: &Discretization, x: f64, filter: WFilter) -> Result<Vec<f64>> {
    EmpiricalSource::new(dataset)?.view(scheme)?.low_row(x, filter)
}
