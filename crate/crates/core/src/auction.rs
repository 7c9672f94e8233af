//! Equilibrium bidding in ascending and first-price IPV auctions and the
//! inverse map from bids (with their distribution) back to values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::isotonic::isotonic_increasing;
use crate::numeric::quad::{integral, interp};
use crate::order_stats::{Parent, ValueDist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuctionFormat {
    Ascending,
    FirstPrice,
}

/// Symmetric equilibrium strategy for one state and one competition level.
#[derive(Clone, Debug)]
pub struct BidStrategy {
    pub format: AuctionFormat,
    pub n: u32,
    pub value_dist: ValueDist,
}

impl BidStrategy {
    pub fn new(format: AuctionFormat, n: u32, value_dist: ValueDist) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain(format!("auctions need n >= 2 bidders, got {n}")));
        }
        value_dist.validate()?;
        Ok(Self { format, n, value_dist })
    }

    pub fn bid(&self, v: f64) -> Result<f64> {
        match self.format {
            AuctionFormat::Ascending => Ok(ascending_bid(v)),
            AuctionFormat::FirstPrice => fp_equilibrium_bid(&self.value_dist, self.n, v),
        }
    }
}

const BID_TABLE_POINTS: usize = 2049;

/// Distribution of first-price equilibrium bids, tabulated on a value grid.
///
/// The bid function is linearly interpolated between 2049 points, which keeps
/// the interpolation error far below Monte Carlo noise.
#[derive(Clone, Debug)]
pub struct BidDistribution {
    value_dist: ValueDist,
    n: u32,
    values: Vec<f64>,
    bids: Vec<f64>,
}

impl BidDistribution {
    pub fn new(value_dist: ValueDist, n: u32) -> Result<Self> {
        let (lo, hi) = value_dist.support();
        let values = crate::numeric::quad::linspace(lo, hi, BID_TABLE_POINTS);
        let bids = values
            .iter()
            .map(|&v| fp_equilibrium_bid(&value_dist, n, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { value_dist, n, values, bids })
    }

    /// Equilibrium bid at value `v` by table interpolation.
    pub fn bid(&self, v: f64) -> f64 {
        interp(&self.values, &self.bids, v)
    }

    fn value_at(&self, b: f64) -> f64 {
        interp(&self.bids, &self.values, b)
    }
}

impl Parent for BidDistribution {
    fn support(&self) -> (f64, f64) {
        (self.bids[0], self.bids[self.bids.len() - 1])
    }

    fn cdf(&self, b: f64) -> f64 {
        self.value_dist.cdf(self.value_at(b))
    }

    fn pdf(&self, b: f64) -> f64 {
        let (lo, hi) = self.support();
        if b < lo || b > hi {
            return 0.0;
        }
        let v = self.value_at(b);
        let big = self.value_dist.cdf(v);
        let phi = self.value_dist.pdf(v);
        let shade = v - b;
        if big <= 0.0 || shade <= 0.0 {
            // lower boundary: b'(v_lo) = (n-1)/n
            return phi * self.n as f64 / (self.n - 1) as f64;
        }
        let slope = (self.n - 1) as f64 * phi * shade / big;
        if slope <= 0.0 {
            return 0.0;
        }
        phi / slope
    }

    fn quantile(&self, p: f64) -> f64 {
        self.bid(self.value_dist.quantile(p))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        self.bid(self.value_dist.sample(rng))
    }
}

/// Bidding one's value is weakly dominant in an ascending auction.
pub fn ascending_bid(v: f64) -> f64 {
    v
}

/// First-price equilibrium bid `v - ∫_{v_lo}^{v} Φ(t)^{n-1} dt / Φ(v)^{n-1}`.
pub fn fp_equilibrium_bid(value_dist: &dyn Parent, n: u32, v: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain(format!("first-price bid needs n >= 2, got {n}")));
    }
    let (lo, hi) = value_dist.support();
    if v < lo || v > hi {
        return Err(Error::domain(format!("value {v} outside support [{lo}, {hi}]")));
    }
    let power = (n - 1) as i32;
    let denom = value_dist.cdf(v).powi(power);
    if denom < 1e-300 {
        return Ok(lo);
    }
    let shade = integral(|t| value_dist.cdf(t).powi(power), lo, v, 1e-13 * denom.max(1e-200))
        .map_err(|e| Error::numeric(format!("equilibrium bid at v={v}, n={n}: {e}")))?;
    Ok(v - shade / denom)
}

/// Value implied by bid `b` given the bid CDF and density at `b`.
pub fn gpv_invert(b: f64, cdf_bid: f64, pdf_bid: f64, n: u32) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain(format!("inversion needs n >= 2, got {n}")));
    }
    if pdf_bid.is_nan() || pdf_bid <= 0.0 {
        return Err(Error::DegenerateDensity(format!(
            "bid density {pdf_bid} at b={b} is not positive"
        )));
    }
    Ok(b + cdf_bid / ((n - 1) as f64 * pdf_bid))
}

/// A value CDF sampled at pseudo-values, produced by [`value_cdf_from_bid_cdf`].
#[derive(Clone, Debug)]
pub struct ValueCdf {
    pub values: Vec<f64>,
    pub cdf: Vec<f64>,
    /// Grid points whose density estimate was raised to the floor.
    pub clipped: usize,
}

impl ValueCdf {
    pub fn eval(&self, v: f64) -> f64 {
        interp(&self.values, &self.cdf, v)
    }
}

/// Maps a bid CDF sampled on `bids` to the implied value CDF.
///
/// Densities come from central differences; a density that is positive but
/// below `1e-6 / width` is raised to that floor and counted in `clipped`,
/// while an exactly flat stretch is a degenerate-density error.
pub fn value_cdf_from_bid_cdf(bids: &[f64], cdf: &[f64], n: u32) -> Result<ValueCdf> {
    let len = bids.len();
    if len < 3 || cdf.len() != len {
        return Err(Error::MalformedEstimate(format!(
            "need matching bid and CDF grids of length >= 3, got {} and {}",
            len,
            cdf.len()
        )));
    }
    if bids.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::MalformedEstimate("bid grid is not strictly increasing".into()));
    }
    for (i, w) in cdf.windows(2).enumerate() {
        if w[1] < w[0] - 1e-9 {
            return Err(Error::MalformedEstimate(format!(
                "bid CDF decreases between grid points {i} and {}",
                i + 1
            )));
        }
    }
    if cdf.iter().any(|&c| !(-1e-9..=1.0 + 1e-9).contains(&c)) {
        return Err(Error::MalformedEstimate("bid CDF leaves [0, 1]".into()));
    }
    let floor = 1e-6 / (bids[len - 1] - bids[0]);
    let mut values = Vec::with_capacity(len);
    let mut clipped = 0;
    for i in 0..len {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(len - 1));
        let mut dens = (cdf[b] - cdf[a]) / (bids[b] - bids[a]);
        if dens <= 0.0 {
            return Err(Error::DegenerateDensity(format!(
                "bid CDF is flat around b={}",
                bids[i]
            )));
        }
        if dens < floor {
            dens = floor;
            clipped += 1;
        }
        values.push(gpv_invert(bids[i], cdf[i].clamp(0.0, 1.0), dens, n)?);
    }
    let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(cdf.iter().map(|c| c.clamp(0.0, 1.0))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let cdf: Vec<f64> = isotonic_increasing(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())
        .into_iter()
        .map(|c| c.clamp(0.0, 1.0))
        .collect();
    Ok(ValueCdf { values, cdf, clipped })
}
