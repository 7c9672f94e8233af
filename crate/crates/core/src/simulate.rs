//! Synthetic auction datasets from a fully specified mixture design, dataset
//! CSV I/O, and the reflection that turns top-observed bids into the
//! ascending-index form used by the estimators.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{AuctionFormat, BidDistribution};
use crate::error::{Error, Result};
use crate::order_stats::{Parent, ValueDist};

/// One latent state: its value distribution and the instrument probability `Pr(W=0 | k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub value_dist: ValueDist,
    pub prob_w0: f64,
}

/// How many bidders each auction has.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Competition {
    /// Every auction has `n` bidders; `weights[k]` is the state probability.
    Known { n: u32, weights: Vec<f64> },
    /// `weights[k][j]` is the joint probability of state `k` with `support[j]` bidders.
    Unknown { support: Vec<u32>, weights: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureDGP {
    pub format: AuctionFormat,
    pub states: Vec<StateSpec>,
    pub competition: Competition,
}

impl MixtureDGP {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Common value support of all states.
    pub fn value_support(&self) -> (f64, f64) {
        self.states[0].value_dist.support()
    }

    pub fn competition_support(&self) -> Vec<u32> {
        match &self.competition {
            Competition::Known { n, .. } => vec![*n],
            Competition::Unknown { support, .. } => support.clone(),
        }
    }

    /// Joint weights as `(state, n, probability)`.
    pub fn joint_weights(&self) -> Vec<(usize, u32, f64)> {
        match &self.competition {
            Competition::Known { n, weights } => {
                weights.iter().enumerate().map(|(k, &p)| (k, *n, p)).collect()
            }
            Competition::Unknown { support, weights } => weights
                .iter()
                .enumerate()
                .flat_map(|(k, row)| support.iter().zip(row).map(move |(&n, &p)| (k, n, p)))
                .collect(),
        }
    }

    /// Marginal state probabilities `p_k`.
    pub fn state_weights(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.num_states()];
        for (k, _, w) in self.joint_weights() {
            p[k] += w;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states.len();
        if k == 0 {
            return Err(Error::config("dgp.states", "at least one state is required"));
        }
        for (i, s) in self.states.iter().enumerate() {
            s.value_dist
                .validate()
                .map_err(|e| Error::config(format!("dgp.states[{i}].value_dist"), e.to_string()))?;
            if !(0.0..=1.0).contains(&s.prob_w0) {
                return Err(Error::config(
                    format!("dgp.states[{i}].prob_w0"),
                    format!("must lie in [0, 1], got {}", s.prob_w0),
                ));
            }
        }
        let support = self.value_support();
        for (i, s) in self.states.iter().enumerate() {
            let si = s.value_dist.support();
            if (si.0 - support.0).abs() > 1e-12 || (si.1 - support.1).abs() > 1e-12 {
                return Err(Error::config(
                    format!("dgp.states[{i}].value_dist"),
                    "all states must share one value support",
                ));
            }
        }
        if k > 1 {
            for i in 0..k {
                for j in i + 1..k {
                    if self.states[i].prob_w0 == self.states[j].prob_w0 {
                        return Err(Error::config(
                            "dgp.states",
                            format!("states {i} and {j} have equal instrument probabilities"),
                        ));
                    }
                }
            }
        }
        let flat: Vec<f64> = match &self.competition {
            Competition::Known { n, weights } => {
                if *n < 2 {
                    return Err(Error::config("dgp.competition.n", "need at least 2 bidders"));
                }
                if weights.len() != k {
                    return Err(Error::config(
                        "dgp.competition.weights",
                        format!("expected {k} state weights, got {}", weights.len()),
                    ));
                }
                weights.clone()
            }
            Competition::Unknown { support: ns, weights } => {
                if ns.is_empty() || ns.iter().any(|&n| n < 2) || ns.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config(
                        "dgp.competition.support",
                        "support must be strictly increasing with every n >= 2",
                    ));
                }
                if self.format != AuctionFormat::Ascending {
                    return Err(Error::config(
                        "dgp.format",
                        "unknown competition is only supported for ascending auctions",
                    ));
                }
                if weights.len() != k || weights.iter().any(|row| row.len() != ns.len()) {
                    return Err(Error::config(
                        "dgp.competition.weights",
                        format!("expected a {k} x {} table", ns.len()),
                    ));
                }
                weights.iter().flatten().copied().collect()
            }
        };
        if flat.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::config("dgp.competition.weights", "weights must lie in (0, 1]"));
        }
        let total: f64 = flat.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "dgp.competition.weights",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(())
    }

    /// Bid distribution of state `k` with `n` bidders.
    pub fn bid_parent(&self, k: usize, n: u32) -> Result<Box<dyn Parent>> {
        let v = self.states[k].value_dist.clone();
        Ok(match self.format {
            AuctionFormat::Ascending => Box::new(v),
            AuctionFormat::FirstPrice => Box::new(BidDistribution::new(v, n)?),
        })
    }
}

/// Which pair of consecutive order statistics is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rank", rename_all = "snake_case")]
pub enum Orientation {
    /// `(X_{r-1:n}, X_{r:n})` counted from the bottom.
    Canonical(u32),
    /// The `(d+1)`-th and `d`-th highest bids.
    TopDepth(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub id: u64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub w: u8,
    pub n: Option<u32>,
    /// Latent state, present only in simulated fixtures.
    pub k: Option<usize>,
}

/// Estimation-facing view of a record, without latent or auxiliary fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub x_lo: f64,
    pub x_hi: f64,
    pub w: u8,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<AuctionRecord>,
    pub orientation: Orientation,
    pub n_known: bool,
    pub support: (f64, f64),
    /// Shift applied by [`reflect`] if the values are mirrored, `None` otherwise.
    pub reflection: Option<f64>,
}

impl Dataset {
    pub fn new(records: Vec<AuctionRecord>, orientation: Orientation, support: (f64, f64)) -> Result<Self> {
        let n_known = !records.is_empty() && records.iter().all(|r| r.n.is_some());
        let ds = Self {
            records,
            orientation,
            n_known,
            support,
            reflection: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let rank = match self.orientation {
            Orientation::Canonical(r) => r,
            Orientation::TopDepth(d) => d + 1,
        };
        if rank < 2 {
            return Err(Error::Data(format!("observed rank must be >= 2, got {rank}")));
        }
        for rec in &self.records {
            if !(rec.x_lo.is_finite() && rec.x_hi.is_finite()) || rec.x_lo > rec.x_hi {
                return Err(Error::Data(format!(
                    "auction {}: need finite x_lo <= x_hi, got ({}, {})",
                    rec.id, rec.x_lo, rec.x_hi
                )));
            }
            if rec.w > 1 {
                return Err(Error::Data(format!("auction {}: w must be 0 or 1", rec.id)));
            }
        }
        if self.n_known {
            let n0 = self.records[0].n;
            if self.records.iter().any(|r| r.n != n0) {
                return Err(Error::Data("known-competition data must share one n".into()));
            }
            if n0.unwrap_or(0) < rank {
                return Err(Error::Data(format!("n = {n0:?} is below the observed rank {rank}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        self.records.iter().map(|r| Observation {
            x_lo: r.x_lo,
            x_hi: r.x_hi,
            w: r.w,
        })
    }

    /// Rank `r` of `x_hi` in ascending order; errors on top-depth data.
    pub fn canonical_rank(&self) -> Result<u32> {
        match self.orientation {
            Orientation::Canonical(r) => Ok(r),
            Orientation::TopDepth(_) => Err(Error::Data(
                "dataset holds top-observed bids; canonicalize it first".into(),
            )),
        }
    }

    /// Common number of bidders, if recorded.
    pub fn known_n(&self) -> Option<u32> {
        if self.n_known {
            self.records[0].n
        } else {
            None
        }
    }

    /// Copy without the latent-state column.
    pub fn without_latent(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.k = None;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let has_n = self.records.iter().any(|r| r.n.is_some());
        let has_k = self.records.iter().any(|r| r.k.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["auction_id", "x_lo", "x_hi", "w"];
        if has_n {
            header.push("n");
        }
        if has_k {
            header.push("k");
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.id.to_string(), r.x_lo.to_string(), r.x_hi.to_string(), r.w.to_string()];
            if has_n {
                row.push(r.n.map(|n| n.to_string()).unwrap_or_default());
            }
            if has_k {
                row.push(r.k.map(|k| k.to_string()).unwrap_or_default());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads `auction_id,x_lo,x_hi,w[,n][,k]`. When `support` is `None` the
    /// observed range of the data is used.
    pub fn read_csv<R: Read>(input: R, orientation: Orientation, support: Option<(f64, f64)>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (id_c, lo_c, hi_c, w_c) = match (col("auction_id"), col("x_lo"), col("x_hi"), col("w")) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::Data(
                    "dataset header must contain auction_id, x_lo, x_hi, w".into(),
                ))
            }
        };
        let (n_c, k_c) = (col("n"), col("k"));
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(csv_err)?;
            let field = |c: usize| row.get(c).map(str::trim).unwrap_or("");
            let bad = |what: &str| Error::Data(format!("row {}: invalid {what}", line + 2));
            let optional = |c: Option<usize>| -> Option<&str> { c.map(field).filter(|s| !s.is_empty()) };
            records.push(AuctionRecord {
                id: field(id_c).parse().map_err(|_| bad("auction_id"))?,
                x_lo: field(lo_c).parse().map_err(|_| bad("x_lo"))?,
                x_hi: field(hi_c).parse().map_err(|_| bad("x_hi"))?,
                w: field(w_c).parse().map_err(|_| bad("w"))?,
                n: optional(n_c).map(|s| s.parse().map_err(|_| bad("n"))).transpose()?,
                k: optional(k_c).map(|s| s.parse().map_err(|_| bad("k"))).transpose()?,
            });
        }
        if records.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let support = support.unwrap_or_else(|| {
            let lo = records.iter().map(|r| r.x_lo).fold(f64::INFINITY, f64::min);
            let hi = records.iter().map(|r| r.x_hi).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        });
        Dataset::new(records, orientation, support)
    }

    pub fn load_csv(path: &Path, orientation: Orientation, support: Option<(f64, f64)>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), orientation, support)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Draws `m` auctions. Auction `i` uses its own ChaCha stream `i` under `seed`,
/// so results do not depend on the number of worker threads.
pub fn simulate(dgp: &MixtureDGP, m: usize, seed: u64, observed: Orientation) -> Result<Dataset> {
    dgp.validate()?;
    if m == 0 {
        return Err(Error::config("simulation.auctions", "need at least one auction"));
    }
    let ns = dgp.competition_support();
    let depth = match observed {
        Orientation::Canonical(r) => r,
        Orientation::TopDepth(d) => d + 1,
    };
    if depth < 2 {
        return Err(Error::config("estimation.r", "observed rank must be >= 2"));
    }
    if let Some(&n) = ns.iter().find(|&&n| n < depth) {
        return Err(Error::config(
            "estimation.r",
            format!("observed rank {depth} exceeds the bidder count {n}"),
        ));
    }
    let joint = dgp.joint_weights();
    let mut cumulative = Vec::with_capacity(joint.len());
    let mut acc = 0.0;
    for &(_, _, p) in &joint {
        acc += p;
        cumulative.push(acc);
    }
    let samplers: Vec<Box<dyn Parent>> = joint
        .iter()
        .map(|&(k, n, _)| dgp.bid_parent(k, n))
        .collect::<Result<_>>()?;
    let n_known = matches!(dgp.competition, Competition::Known { .. });
    let records: Vec<AuctionRecord> = (0..m as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            let u: f64 = rng.random();
            let cell = cumulative.partition_point(|&c| c <= u).min(joint.len() - 1);
            let (k, n, _) = joint[cell];
            let sampler = &samplers[cell];
            let mut bids: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
            bids.sort_by(f64::total_cmp);
            let (x_lo, x_hi) = match observed {
                Orientation::Canonical(r) => (bids[r as usize - 2], bids[r as usize - 1]),
                Orientation::TopDepth(d) => (bids[(n - d - 1) as usize], bids[(n - d) as usize]),
            };
            let w = u8::from(rng.random::<f64>() >= dgp.states[k].prob_w0);
            AuctionRecord {
                id,
                x_lo,
                x_hi,
                w,
                n: n_known.then_some(n),
                k: Some(k),
            }
        })
        .collect();
    let (lo, hi) = dgp.value_support();
    let support = match dgp.format {
        AuctionFormat::Ascending => (lo, hi),
        AuctionFormat::FirstPrice => {
            let top = samplers.iter().map(|s| s.support().1).fold(lo, f64::max);
            (lo, top)
        }
    };
    Dataset::new(records, observed, support)
}

/// Mirrors values by `b -> lo + hi - b`, swapping the pair so `x_lo <= x_hi`.
/// Top-depth `d` data become canonical with `r = d + 1` and vice versa, so
/// applying it twice restores the input.
pub fn reflect(dataset: &Dataset) -> Dataset {
    let (lo, hi) = dataset.support;
    let shift = lo + hi;
    let records = dataset
        .records
        .iter()
        .map(|r| AuctionRecord {
            x_lo: shift - r.x_hi,
            x_hi: shift - r.x_lo,
            ..r.clone()
        })
        .collect();
    let orientation = match dataset.orientation {
        Orientation::TopDepth(d) => Orientation::Canonical(d + 1),
        Orientation::Canonical(r) => Orientation::TopDepth(r - 1),
    };
    Dataset {
        records,
        orientation,
        n_known: dataset.n_known,
        support: dataset.support,
        reflection: match dataset.reflection {
            Some(_) => None,
            None => Some(shift),
        },
    }
}

/// Brings a dataset to canonical (ascending-index) form; canonical input is returned unchanged.
pub fn canonicalize(dataset: &Dataset) -> Dataset {
    match dataset.orientation {
        Orientation::Canonical(_) => dataset.clone(),
        Orientation::TopDepth(_) => reflect(dataset),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order_stats::os_cdf;

    fn single_uniform(n: u32) -> MixtureDGP {
        MixtureDGP {
            format: AuctionFormat::Ascending,
            states: vec![StateSpec {
                value_dist: ValueDist::uniform(0.0, 1.0),
                prob_w0: 0.5,
            }],
            competition: Competition::Known { n, weights: vec![1.0] },
        }
    }

    pub(crate) fn two_state(n: u32) -> MixtureDGP {
        MixtureDGP {
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
                n,
                weights: vec![0.6, 0.4],
            },
        }
    }

    fn mean_and_se(xs: impl Iterator<Item = f64>) -> (f64, f64) {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    }

    #[test]
    fn expected_maximum_of_uniforms() {
        for (n, want) in [(2u32, 2.0 / 3.0), (3, 0.75)] {
            let ds = simulate(&single_uniform(n), 1_000_000, 5, Orientation::Canonical(n)).unwrap();
            let (m, se) = mean_and_se(ds.records.iter().map(|r| r.x_hi));
            assert!((m - want).abs() < 3.0 * se, "n={n}: {m} vs {want}");
        }
    }

    #[test]
    fn instrument_frequency_matches_total_probability() {
        let dgp = two_state(4);
        let ds = simulate(&dgp, 200_000, 9, Orientation::Canonical(3)).unwrap();
        let want = 0.6 * 0.25 + 0.4 * 0.75;
        let (m, se) = mean_and_se(ds.records.iter().map(|r| f64::from(u8::from(r.w == 0))));
        assert!((m - want).abs() < 3.0 * se);
    }

    #[test]
    fn rank_above_n_is_config_error_before_sampling() {
        let err = simulate(&single_uniform(3), 10, 1, Orientation::Canonical(4)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let dgp = two_state(4);
        let a = simulate(&dgp, 5000, 42, Orientation::Canonical(3)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate(&dgp, 5000, 42, Orientation::Canonical(3)).unwrap());
        assert_eq!(a.records, b.records);
        let c = simulate(&dgp, 5000, 43, Orientation::Canonical(3)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn reflection_example_and_involution() {
        let rec = AuctionRecord {
            id: 0,
            x_lo: 0.4,
            x_hi: 0.7,
            w: 1,
            n: None,
            k: None,
        };
        let ds = Dataset::new(vec![rec.clone()], Orientation::TopDepth(2), (0.0, 1.0)).unwrap();
        let c = canonicalize(&ds);
        assert_eq!(c.orientation, Orientation::Canonical(3));
        assert!((c.records[0].x_lo - 0.3).abs() < 1e-15 && (c.records[0].x_hi - 0.6).abs() < 1e-15);
        let back = reflect(&c);
        assert_eq!(back.orientation, Orientation::TopDepth(2));
        assert_eq!(back.records[0], rec);
        assert_eq!(back.reflection, None);
        let again = canonicalize(&c);
        assert_eq!(again.records, c.records);
    }

    #[test]
    fn top_depth_reflection_matches_canonical_ranks() {
        // reflecting the top pair of n draws gives the bottom pair of the mirrored draws
        let dgp = two_state(4);
        let top = simulate(&dgp, 20_000, 3, Orientation::TopDepth(1)).unwrap();
        let canon = canonicalize(&top);
        assert_eq!(canon.orientation, Orientation::Canonical(2));
        for (a, b) in top.records.iter().zip(&canon.records) {
            assert!((b.x_lo - (1.0 - a.x_hi)).abs() < 1e-15);
            assert!(b.x_lo <= b.x_hi);
        }
    }

    #[test]
    fn latent_subsample_matches_order_statistic_cdf() {
        let dgp = two_state(4);
        let mut passes = 0;
        for rep in 0..20u64 {
            let ds = simulate(&dgp, 5000, 100 + rep, Orientation::Canonical(3)).unwrap();
            let mut ok = true;
            for k in 0..2 {
                let mut xs: Vec<f64> = ds.records.iter().filter(|r| r.k == Some(k)).map(|r| r.x_hi).collect();
                xs.sort_by(f64::total_cmp);
                let m = xs.len() as f64;
                let dist = &dgp.states[k].value_dist;
                let ks = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let f = os_cdf(dist.cdf(x), 3, 4).unwrap();
                        (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
                    })
                    .fold(0.0, f64::max);
                ok &= ks < 1.36 / m.sqrt();
            }
            passes += usize::from(ok);
        }
        assert!(passes >= 18, "{passes}/20");
    }

    #[test]
    fn csv_round_trip() {
        let ds = simulate(&two_state(4), 50, 1, Orientation::Canonical(3)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("auction_id,x_lo,x_hi,w,n,k\n"));
        let back = Dataset::read_csv(&buf[..], Orientation::Canonical(3), Some((0.0, 1.0))).unwrap();
        assert_eq!(back.records, ds.records);
        assert!(back.n_known);
        let plain = ds.without_latent();
        let mut buf2 = Vec::new();
        plain.write_csv(&mut buf2).unwrap();
        assert!(String::from_utf8(buf2).unwrap().starts_with("auction_id,x_lo,x_hi,w,n\n"));
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let text = "auction_id,x_lo,x_hi,w\n0,0.5,0.2,1\n";
        assert!(matches!(
            Dataset::read_csv(text.as_bytes(), Orientation::Canonical(2), None),
            Err(Error::Data(_))
        ));
        let text = "auction_id,x_lo,x_hi,w\n0,0.1,0.2,3\n";
        assert!(Dataset::read_csv(text.as_bytes(), Orientation::Canonical(2), None).is_err());
    }

    #[test]
    fn first_price_bids_are_shaded() {
        let mut dgp = single_uniform(2);
        dgp.format = AuctionFormat::FirstPrice;
        let ds = simulate(&dgp, 100_000, 2, Orientation::Canonical(2)).unwrap();
        // max of two bids v/2: mean 1/3
        let (m, se) = mean_and_se(ds.records.iter().map(|r| r.x_hi));
        assert!((m - 1.0 / 3.0).abs() < 3.0 * se + 1e-6);
    }

    #[test]
    fn validation_rejects_bad_designs() {
        let mut dgp = two_state(4);
        dgp.states[1].prob_w0 = 0.25;
        assert!(dgp.validate().is_err());
        let mut dgp = two_state(4);
        dgp.competition = Competition::Known {
            n: 4,
            weights: vec![0.6, 0.5],
        };
        assert!(dgp.validate().is_err());
    }
}
