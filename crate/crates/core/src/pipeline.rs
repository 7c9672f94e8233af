//! Run configuration, dataset loading, orchestration of the estimation modes
//! and result files.
//!
//! Every run writes into a staging directory inside the output directory and
//! moves the files into place only when the whole run succeeded, together
//! with a `manifest.json` listing them.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auction::AuctionFormat;
use crate::competition::{identify_unknown_n, CompetitionMixture, CompetitionObjective, UnknownOptions};
use crate::error::{Error, Result, Stage, StageExt};
use crate::order_stats::Parent;
use crate::rank::{estimate_k, KEstimate, RankSettings, DEFAULT_C0};
use crate::sieve::{fit_sieve, select_order, SieveData, SieveFit, SieveOptions};
use crate::simulate::{canonicalize, simulate, Competition, Dataset, MixtureDGP, Orientation, StateSpec};
use crate::source::{EmpiricalSource, JointObservables, PopulationSource};
use crate::spectral::{
    identification_scheme, identify_known_n, ComponentEstimate, IdentifyOptions, LabelRule, ProfileIntegration,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    EstimateK,
    Identify,
    IdentifyUnknownN,
    SieveFit,
    Montecarlo,
    OracleCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::EstimateK => "estimate_k",
            Mode::Identify => "identify",
            Mode::IdentifyUnknownN => "identify_unknown_n",
            Mode::SieveFit => "sieve_fit",
            Mode::Montecarlo => "montecarlo",
            Mode::OracleCheck => "oracle_check",
        }
    }
}

/// Design used to simulate data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub format: AuctionFormat,
    pub states: Vec<StateSpec>,
    pub competition: Competition,
    /// Number of simulated auctions.
    pub auctions: usize,
}

impl DgpConfig {
    pub fn mixture(&self) -> MixtureDGP {
        MixtureDGP {
            format: self.format,
            states: self.states.clone(),
            competition: self.competition.clone(),
        }
    }
}

/// Input dataset in the `auction_id,x_lo,x_hi,w[,n][,k]` layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// The file holds the (r)-th and (r-1)-th highest bids rather than the
    /// (r-1)-th and r-th lowest.
    #[serde(default)]
    pub top_depth: bool,
    /// Value support; the observed range when absent.
    pub support: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Rank of `x_hi` counted from the bottom.
    pub r: Option<u32>,
    /// Known number of bidders; read from the data when absent.
    pub n: Option<u32>,
    /// Candidate bidder counts when `n` is unobserved.
    pub support: Option<Vec<u32>>,
    /// Number of states; estimated when absent.
    pub k: Option<usize>,
    pub k_max: usize,
    pub r1: usize,
    pub rl: usize,
    pub rh: usize,
    pub c0: f64,
    pub grid_points: usize,
    pub labeling: LabelRule,
    pub integration: ProfileIntegration,
    pub objective: CompetitionObjective,
    pub competition_multistarts: usize,
    /// Auction format of the data; the design's format when absent.
    pub format: Option<AuctionFormat>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        let rank = RankSettings::default();
        Self {
            r: None,
            n: None,
            support: None,
            k: None,
            k_max: rank.max_dim,
            r1: rank.r1,
            rl: rank.rl,
            rh: rank.rh,
            c0: DEFAULT_C0,
            grid_points: 101,
            labeling: LabelRule::ByInstrumentProb,
            integration: ProfileIntegration::Cumulative,
            objective: CompetitionObjective::FullSupport,
            competition_multistarts: 20,
            format: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SieveConfig {
    /// Fixed Bernstein order; selected from `orders` when absent.
    pub order: Option<usize>,
    pub orders: Vec<usize>,
    pub multistarts: usize,
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self {
            order: None,
            orders: vec![4, 6, 8],
            multistarts: 10,
        }
    }
}

/// Estimator replicated in Monte Carlo mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McTarget {
    #[default]
    Identify,
    IdentifyUnknownN,
    Sieve,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub replications: usize,
    pub target: McTarget,
    /// Absolute error counted as covered in the Monte Carlo table.
    pub tolerance: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            replications: 20,
            target: McTarget::Identify,
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dgp: Option<DgpConfig>,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub sieve: SieveConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Commented configuration with every default spelled out.
pub const TEMPLATE: &str = r#"# Run configuration. Every key below shows its default unless marked required.

# simulate | estimate_k | identify | identify_unknown_n | sieve_fit | montecarlo | oracle_check
# (may be given on the command line instead)
mode = "identify"
seed = 0
out_dir = "out"

# Design used to simulate data. Required for simulate, montecarlo and
# oracle_check; other modes simulate from it when no [data] block is given.
[dgp]
format = "ascending"            # ascending | first_price
auctions = 20000                # number of simulated auctions
competition = { kind = "known", n = 4, weights = [0.6, 0.4] }
# unknown competition:
# competition = { kind = "unknown", support = [3, 4], weights = [[0.3, 0.3], [0.2, 0.2]] }

[[dgp.states]]
value_dist = { family = "beta", alpha = 2.0, beta = 5.0, lower = 0.0, upper = 1.0 }
prob_w0 = 0.25

[[dgp.states]]
value_dist = { family = "beta", alpha = 5.0, beta = 2.0, lower = 0.0, upper = 1.0 }
prob_w0 = 0.75

# Input dataset (auction_id,x_lo,x_hi,w[,n][,k]); replaces simulation when present.
# [data]
# path = "data.csv"
# top_depth = false             # true when the file holds the top bids
# support = [0.0, 1.0]          # observed range when absent

[estimation]
r = 3                           # required: rank of x_hi from the bottom (>= 2)
# n = 4                         # known bidder count; read from the data when absent
# support = [3, 4]              # candidate bidder counts for identify_unknown_n
# k = 2                         # number of states; estimated when absent
k_max = 6
r1 = 9                          # cutoff candidates
rl = 5                          # low-segment boundary candidates
rh = 5                          # high-segment boundary candidates
c0 = 2.0                        # rank test constant
grid_points = 101
labeling = "by_instrument_prob" # by_instrument_prob | by_mean | fixture_truth
integration = "cumulative"      # cumulative | trapezoid
objective = "full_support"      # full_support | low_segment
competition_multistarts = 20
# format = "ascending"          # the design's format when absent

[sieve]
# order = 8                     # fixed Bernstein order; selected from `orders` when absent
orders = [4, 6, 8]
multistarts = 10

[montecarlo]
replications = 20
target = "identify"             # identify | identify_unknown_n | sieve
tolerance = 0.05                # absolute error counted as covered
"#;

fn range_error(field: &str, msg: impl Into<String>) -> Error {
    Error::config(field, msg)
}

impl RunConfig {
    /// Parses TOML, reporting the path of the offending field on failure.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path.is_empty() || path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn mode(&self) -> Result<Mode> {
        self.mode.ok_or_else(|| Error::config("mode", "missing; set it in the file or use a subcommand"))
    }

    fn require_r(&self) -> Result<u32> {
        let r = self.estimation.r.ok_or_else(|| Error::config("estimation.r", "missing field"))?;
        if r < 2 {
            return Err(range_error("estimation.r", format!("must be at least 2, got {r}")));
        }
        Ok(r)
    }

    fn require_dgp(&self) -> Result<&DgpConfig> {
        self.dgp.as_ref().ok_or_else(|| Error::config("dgp", format!("required in {} mode", self.mode.map_or("this", Mode::name))))
    }

    /// Checks mode-specific required fields and documented ranges.
    pub fn validate(&self) -> Result<()> {
        let mode = self.mode()?;
        let est = &self.estimation;
        let r = self.require_r()?;
        if let Some(n) = est.n {
            if n < r {
                return Err(range_error("estimation.n", format!("n = {n} is below r = {r}")));
            }
        }
        if let Some(support) = &est.support {
            if support.is_empty() || support.windows(2).any(|w| w[1] <= w[0]) || support[0] < r {
                return Err(range_error("estimation.support", "must be strictly increasing with every count >= r"));
            }
        }
        if let Some(k) = est.k {
            if k == 0 || k > est.k_max {
                return Err(range_error("estimation.k", format!("must lie in 1..={}", est.k_max)));
            }
        }
        if est.k_max < 2 {
            return Err(range_error("estimation.k_max", "must be at least 2"));
        }
        for (field, v) in [("estimation.r1", est.r1), ("estimation.rl", est.rl), ("estimation.rh", est.rh)] {
            if v == 0 {
                return Err(range_error(field, "must be positive"));
            }
        }
        if !(est.c0 > 0.0 && est.c0.is_finite()) {
            return Err(range_error("estimation.c0", "must be positive"));
        }
        if est.grid_points < 3 {
            return Err(range_error("estimation.grid_points", "must be at least 3"));
        }
        if est.competition_multistarts == 0 {
            return Err(range_error("estimation.competition_multistarts", "must be positive"));
        }
        if self.sieve.orders.is_empty() {
            return Err(range_error("sieve.orders", "at least one candidate order is required"));
        }
        if self.sieve.orders.iter().chain(self.sieve.order.iter()).any(|&l| l < 2) {
            return Err(range_error("sieve.order", "Bernstein orders must be at least 2"));
        }
        if self.sieve.multistarts == 0 {
            return Err(range_error("sieve.multistarts", "must be positive"));
        }
        if self.montecarlo.replications == 0 {
            return Err(range_error("montecarlo.replications", "must be positive"));
        }
        if !(self.montecarlo.tolerance > 0.0) {
            return Err(range_error("montecarlo.tolerance", "must be positive"));
        }
        if let Some(dgp) = &self.dgp {
            if dgp.auctions == 0 {
                return Err(range_error("dgp.auctions", "must be positive"));
            }
            dgp.mixture().validate().map_err(|e| match e {
                e @ Error::Config { .. } => e,
                other => Error::config("dgp", other.to_string()),
            })?;
            if dgp.mixture().competition_support().iter().any(|&n| n < r) {
                return Err(range_error("dgp.competition", format!("every bidder count must be >= r = {r}")));
            }
        }
        match mode {
            Mode::Simulate | Mode::Montecarlo | Mode::OracleCheck => {
                self.require_dgp()?;
            }
            _ => {
                if self.dgp.is_none() && self.data.is_none() {
                    return Err(Error::config("data", "either [data] or [dgp] is required"));
                }
            }
        }
        if mode == Mode::Montecarlo && self.montecarlo.target == McTarget::IdentifyUnknownN
            || mode == Mode::IdentifyUnknownN
        {
            if self.format() == AuctionFormat::FirstPrice {
                return Err(range_error("estimation.format", "unknown competition is supported for ascending auctions only"));
            }
        }
        Ok(())
    }

    fn format(&self) -> AuctionFormat {
        self.estimation
            .format
            .or(self.dgp.as_ref().map(|d| d.format))
            .unwrap_or(AuctionFormat::Ascending)
    }

    fn rank_settings(&self) -> RankSettings {
        RankSettings {
            max_dim: self.estimation.k_max,
            r1: self.estimation.r1,
            rl: self.estimation.rl,
            rh: self.estimation.rh,
            c0: self.estimation.c0,
            ..Default::default()
        }
    }

    fn identify_options(&self) -> IdentifyOptions {
        IdentifyOptions {
            grid_points: self.estimation.grid_points,
            integration: self.estimation.integration,
            labeling: self.estimation.labeling,
            truth: self.dgp.as_ref().map(|d| truth_fn(&d.mixture())),
            ..Default::default()
        }
    }

    fn unknown_options(&self) -> UnknownOptions {
        let mut opts = UnknownOptions {
            identify: self.identify_options(),
            ..Default::default()
        };
        opts.competition.objective = self.estimation.objective;
        opts.competition.multistarts = self.estimation.competition_multistarts;
        opts.competition.seed = self.seed;
        opts
    }

    fn sieve_options(&self) -> SieveOptions {
        SieveOptions {
            multistarts: self.sieve.multistarts,
            labeling: self.estimation.labeling,
            grid_points: self.estimation.grid_points,
            ..Default::default()
        }
    }
}

fn truth_fn(dgp: &MixtureDGP) -> crate::spectral::TruthFn {
    let dists: Vec<_> = dgp.states.iter().map(|s| s.value_dist.clone()).collect();
    std::sync::Arc::new(move |k: usize, x: f64| dists[k].cdf(x))
}

/// Files written by a run and its summary.
#[derive(Clone, Debug, Serialize)]
pub struct ResultBundle {
    pub files: Vec<PathBuf>,
    pub summary: Value,
    pub exit_status: i32,
}

/// Files staged in a temporary directory next to the destination.
struct Staging {
    dir: tempfile::TempDir,
    out_dir: PathBuf,
    names: Vec<String>,
}

impl Staging {
    fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::config("out_dir", format!("cannot create {}: {e}", out_dir.display())))?;
        let dir = tempfile::Builder::new().prefix(".osmix-staging-").tempdir_in(out_dir)?;
        Ok(Self {
            dir,
            out_dir: out_dir.to_path_buf(),
            names: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let file = std::fs::File::create(self.dir.path().join(name))?;
        let mut out = std::io::BufWriter::new(file);
        body(&mut out)?;
        out.flush()?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Moves every staged file into the output directory with a manifest.
    fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut listed = self.names.clone();
        listed.push("manifest.json".into());
        let manifest = json!({ "files": listed });
        self.json("manifest.json", &manifest)?;
        let mut out = Vec::new();
        for name in &self.names {
            let dest = self.out_dir.join(name);
            std::fs::rename(self.dir.path().join(name), &dest)?;
            out.push(dest);
        }
        Ok(out)
    }
}

/// Dataset of the run: the input file when configured, otherwise a simulation
/// of the design with the given seed.
pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let r = cfg.require_r()?;
    if let Some(data) = &cfg.data {
        let orientation = if data.top_depth {
            Orientation::TopDepth(r - 1)
        } else {
            Orientation::Canonical(r)
        };
        let ds = Dataset::load_csv(&data.path, orientation, data.support.map(|s| (s[0], s[1]))).stage(Stage::Data)?;
        return Ok(canonicalize(&ds));
    }
    let dgp = cfg.require_dgp()?;
    simulate(&dgp.mixture(), dgp.auctions, seed, Orientation::Canonical(r)).stage(Stage::Simulation)
}

/// Maps an estimate of the mirrored data back to the original value scale.
fn unreflect(est: &mut ComponentEstimate, shift: Option<f64>) {
    let Some(shift) = shift else { return };
    est.grid = est.grid.iter().rev().map(|&x| shift - x).collect();
    for cdf in &mut est.cdfs {
        *cdf = cdf.iter().rev().map(|&f| 1.0 - f).collect();
    }
}

fn known_n(cfg: &RunConfig, ds: &Dataset) -> Result<u32> {
    if let Some(n) = cfg.estimation.n.or(ds.known_n()) {
        return Ok(n);
    }
    match cfg.dgp.as_ref().map(|d| &d.competition) {
        Some(Competition::Known { n, .. }) if cfg.data.is_none() => Ok(*n),
        _ => Err(Error::config("estimation.n", "missing and not recorded in the data")),
    }
}

fn competition_support(cfg: &RunConfig) -> Result<Vec<u32>> {
    if let Some(s) = &cfg.estimation.support {
        return Ok(s.clone());
    }
    match cfg.dgp.as_ref().map(|d| &d.competition) {
        Some(Competition::Unknown { support, .. }) => Ok(support.clone()),
        _ => Err(Error::config("estimation.support", "missing field")),
    }
}

/// Number of states: configured, or estimated (with its report).
fn states(cfg: &RunConfig, source: &dyn JointObservables) -> Result<(usize, Option<KEstimate>)> {
    if let Some(k) = cfg.estimation.k {
        return Ok((k, None));
    }
    let kest = estimate_k(source, &cfg.rank_settings()).stage(Stage::RankSelection)?;
    Ok((kest.k_hat, Some(kest)))
}

fn write_estimate(stage: &mut Staging, est: &ComponentEstimate) -> Result<()> {
    stage.write("estimate_components.csv", |w| est.write_csv(w))
}

fn truth_errors(cfg: &RunConfig, est: &ComponentEstimate) -> Option<Value> {
    if cfg.data.is_some() {
        return None;
    }
    let dgp = cfg.dgp.as_ref()?.mixture();
    if dgp.num_states() != est.num_states() {
        return None;
    }
    let truth = truth_fn(&dgp);
    let sup = est.sup_errors(&*truth);
    let p: Vec<f64> = est.weights.iter().zip(dgp.state_weights()).map(|(a, b)| a - b).collect();
    let q: Vec<f64> = est.prob_w0.iter().zip(&dgp.states).map(|(a, s)| a - s.prob_w0).collect();
    Some(json!({ "sup_norm": sup, "p_k_error": p, "Pr_W0_k_error": q }))
}

/// Identification with known `n`, returning the labeled estimate and the
/// rank report when `K` was estimated.
fn run_identify(cfg: &RunConfig, ds: &Dataset) -> Result<(ComponentEstimate, Option<KEstimate>)> {
    let n = known_n(cfg, ds)?;
    let source = EmpiricalSource::new(ds).stage(Stage::Data)?;
    let (k, kest) = states(cfg, &source)?;
    let scheme = identification_scheme(&source, k, &cfg.rank_settings(), kest.as_ref()).stage(Stage::Discretization)?;
    let mut est = identify_known_n(&source, n, k, &scheme, cfg.format(), &cfg.identify_options())?;
    unreflect(&mut est, ds.reflection);
    Ok((est, kest))
}

fn run_unknown(cfg: &RunConfig, ds: &Dataset) -> Result<(ComponentEstimate, CompetitionMixture, Option<KEstimate>)> {
    let support = competition_support(cfg)?;
    let source = EmpiricalSource::new(ds).stage(Stage::Data)?;
    let (k, kest) = states(cfg, &source)?;
    let scheme = identification_scheme(&source, k, &cfg.rank_settings(), kest.as_ref()).stage(Stage::Discretization)?;
    let (mut est, mix) = identify_unknown_n(&source, &support, k, &scheme, &cfg.unknown_options())?;
    unreflect(&mut est, ds.reflection);
    Ok((est, mix, kest))
}

fn run_sieve(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<(SieveFit, Value, Option<KEstimate>)> {
    let n = known_n(cfg, ds)?;
    let r = ds.canonical_rank()?;
    let (k, kest) = match cfg.estimation.k {
        Some(k) => (k, None),
        None => states(cfg, &EmpiricalSource::new(ds).stage(Stage::Data)?)?,
    };
    let data = SieveData::new(ds).stage(Stage::Data)?;
    let opts = cfg.sieve_options();
    let truth = cfg.dgp.as_ref().map(|d| truth_fn(&d.mixture()));
    let (order, scores) = match cfg.sieve.order {
        Some(order) => (order, Value::Null),
        None => {
            let (order, scores) = select_order(&data, k, &cfg.sieve.orders, r, n, seed, &opts).stage(Stage::Sieve)?;
            (order, serde_json::to_value(scores).expect("scores serialize"))
        }
    };
    let fit = fit_sieve(&data, k, order, r, n, seed, &opts, truth.as_ref())?;
    Ok((fit, scores, kest))
}

fn sieve_estimate(cfg: &RunConfig, ds: &Dataset, fit: &SieveFit) -> ComponentEstimate {
    let mut est = fit.component_estimate(ds.support, cfg.estimation.grid_points);
    unreflect(&mut est, ds.reflection);
    est
}

/// Runs one configured mode and writes its result files.
pub fn run(cfg: &RunConfig) -> Result<ResultBundle> {
    cfg.validate()?;
    let mode = cfg.mode()?;
    let mut stage = Staging::new(&cfg.out_dir).stage(Stage::Output)?;
    let mut summary = json!({ "mode": mode.name(), "seed": cfg.seed });
    let extra = match mode {
        Mode::Simulate => {
            let ds = load_dataset(cfg, cfg.seed)?;
            stage.write("dataset.csv", |w| ds.write_csv(w))?;
            json!({ "auctions": ds.len(), "rank": ds.canonical_rank()? })
        }
        Mode::EstimateK => {
            let ds = load_dataset(cfg, cfg.seed)?;
            let source = EmpiricalSource::new(&ds).stage(Stage::Data)?;
            let kest = estimate_k(&source, &cfg.rank_settings()).stage(Stage::RankSelection)?;
            stage.json("rank_report.json", &kest.to_json())?;
            json!({ "K_hat": kest.k_hat, "saturated": kest.saturated, "auctions": ds.len() })
        }
        Mode::Identify => {
            let ds = load_dataset(cfg, cfg.seed)?;
            let (est, kest) = run_identify(cfg, &ds)?;
            if let Some(kest) = &kest {
                stage.json("rank_report.json", &kest.to_json())?;
            }
            write_estimate(&mut stage, &est)?;
            json!({ "estimate": est.summary_json(), "truth_errors": truth_errors(cfg, &est), "auctions": ds.len() })
        }
        Mode::IdentifyUnknownN => {
            let ds = load_dataset(cfg, cfg.seed)?;
            let (est, mix, kest) = run_unknown(cfg, &ds)?;
            if let Some(kest) = &kest {
                stage.json("rank_report.json", &kest.to_json())?;
            }
            write_estimate(&mut stage, &est)?;
            stage.write("competition.csv", |w| mix.write_csv(w))?;
            json!({
                "estimate": est.summary_json(),
                "competition": { "support": mix.support, "p_kn": mix.weights, "eta": mix.eta },
                "truth_errors": truth_errors(cfg, &est),
                "auctions": ds.len(),
            })
        }
        Mode::SieveFit => {
            let ds = load_dataset(cfg, cfg.seed)?;
            let (fit, scores, kest) = run_sieve(cfg, &ds, cfg.seed)?;
            if let Some(kest) = &kest {
                stage.json("rank_report.json", &kest.to_json())?;
            }
            let est = sieve_estimate(cfg, &ds, &fit);
            write_estimate(&mut stage, &est)?;
            stage.json("sieve_params.json", &fit.to_json())?;
            json!({
                "order": fit.order,
                "order_scores": scores,
                "loglik": fit.loglik.value,
                "floored_records": fit.loglik.floored,
                "p_k": fit.params.weights,
                "Pr_W0_k": fit.params.prob_w0,
                "truth_errors": truth_errors(cfg, &est),
                "auctions": ds.len(),
            })
        }
        Mode::Montecarlo => {
            let (table, report) = montecarlo(cfg)?;
            stage.write("montecarlo_table.csv", |w| write_table(w, &table))?;
            report
        }
        Mode::OracleCheck => {
            let (est, mix) = oracle_check(cfg)?;
            write_estimate(&mut stage, &est)?;
            if let Some(mix) = &mix {
                stage.write("competition.csv", |w| mix.write_csv(w))?;
            }
            let truth = truth_errors(cfg, &est).expect("oracle check runs on the design");
            let sup_max = truth["sup_norm"]
                .as_array()
                .map(|v| v.iter().filter_map(Value::as_f64).fold(0.0, f64::max));
            json!({
                "estimate": est.summary_json(),
                "truth_errors": truth,
                "sup_norm_max": sup_max,
                "competition": mix.map(|m| json!({ "support": m.support, "p_kn": m.weights, "eta": m.eta })),
            })
        }
    };
    if let (Value::Object(base), Value::Object(more)) = (&mut summary, extra) {
        base.extend(more);
    }
    stage.json("summary.json", &summary)?;
    let files = stage.commit().stage(Stage::Output)?;
    Ok(ResultBundle {
        files,
        summary,
        exit_status: 0,
    })
}

/// Identification on the exact population functionals of the design.
fn oracle_check(cfg: &RunConfig) -> Result<(ComponentEstimate, Option<CompetitionMixture>)> {
    let dgp = cfg.require_dgp()?.mixture();
    let r = cfg.require_r()?;
    let source = PopulationSource::from_dgp(&dgp, r).stage(Stage::Config)?;
    let k = cfg.estimation.k.unwrap_or(dgp.num_states());
    let scheme = identification_scheme(&source, k, &cfg.rank_settings(), None).stage(Stage::Discretization)?;
    match &dgp.competition {
        Competition::Known { n, .. } => {
            let est = identify_known_n(&source, *n, k, &scheme, dgp.format, &cfg.identify_options())?;
            Ok((est, None))
        }
        Competition::Unknown { support, .. } => {
            let support = cfg.estimation.support.clone().unwrap_or(support.clone());
            let (est, mix) = identify_unknown_n(&source, &support, k, &scheme, &cfg.unknown_options())?;
            Ok((est, Some(mix)))
        }
    }
}

/// One row of the Monte Carlo table.
#[derive(Clone, Debug, Serialize)]
pub struct McRow {
    pub metric: String,
    pub state: usize,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

fn write_table(w: &mut dyn Write, rows: &[McRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(["metric", "state", "bias", "rmse", "coverage"]).map_err(err)?;
    for row in rows {
        out.write_record([
            row.metric.clone(),
            row.state.to_string(),
            row.bias.to_string(),
            row.rmse.to_string(),
            row.coverage.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

/// Signed errors of one replication, keyed by `(metric, state)`.
type RepErrors = Vec<((String, usize), f64)>;

fn replication(cfg: &RunConfig, dgp: &MixtureDGP, seed: u64) -> Result<RepErrors> {
    let ds = load_dataset(cfg, seed)?.without_latent();
    let truth = truth_fn(dgp);
    let true_p = dgp.state_weights();
    let mut out: RepErrors = Vec::new();
    let push_state = |est: &ComponentEstimate, out: &mut RepErrors| {
        let sup = est.sup_errors(&*truth);
        for (k, s) in sup.iter().enumerate() {
            out.push((("sup_cdf".into(), k + 1), *s));
            out.push((("p_k".into(), k + 1), est.weights[k] - true_p[k]));
            out.push((("prob_w0".into(), k + 1), est.prob_w0[k] - dgp.states[k].prob_w0));
        }
    };
    match cfg.montecarlo.target {
        McTarget::Identify => {
            let (est, _) = run_identify(cfg, &ds)?;
            check_states(&est, dgp)?;
            push_state(&est, &mut out);
        }
        McTarget::IdentifyUnknownN => {
            let (est, mix, _) = run_unknown(cfg, &ds)?;
            check_states(&est, dgp)?;
            push_state(&est, &mut out);
            if let Competition::Unknown { support, weights } = &dgp.competition {
                for (k, row) in weights.iter().enumerate() {
                    for (&n, &p) in support.iter().zip(row) {
                        if let Some(i) = mix.support.iter().position(|&m| m == n) {
                            out.push(((format!("p_kn[n={n}]"), k + 1), mix.weights[k][i] - p));
                        } else {
                            out.push(((format!("p_kn[n={n}]"), k + 1), -p));
                        }
                    }
                }
            }
        }
        McTarget::Sieve => {
            let (fit, _, _) = run_sieve(cfg, &ds, seed)?;
            let est = sieve_estimate(cfg, &ds, &fit);
            check_states(&est, dgp)?;
            push_state(&est, &mut out);
        }
    }
    Ok(out)
}

fn check_states(est: &ComponentEstimate, dgp: &MixtureDGP) -> Result<()> {
    if est.num_states() != dgp.num_states() {
        return Err(Error::RankDeficient(format!(
            "estimated {} states, the design has {}",
            est.num_states(),
            dgp.num_states()
        )));
    }
    Ok(())
}

/// Seed of replication `i` under the run seed.
pub fn replication_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

fn montecarlo(cfg: &RunConfig) -> Result<(Vec<McRow>, Value)> {
    let dgp = cfg.require_dgp()?.mixture();
    let reps = cfg.montecarlo.replications;
    let results: Vec<Result<RepErrors>> = (0..reps)
        .into_par_iter()
        .map(|i| replication(cfg, &dgp, replication_seed(cfg.seed, i)))
        .collect();
    let mut keys: Vec<(String, usize)> = Vec::new();
    for errs in results.iter().flatten() {
        for (key, _) in errs {
            if !keys.contains(key) {
                keys.push(key.clone());
            }
        }
    }
    let tol = cfg.montecarlo.tolerance;
    let rows: Vec<McRow> = keys
        .iter()
        .map(|key| {
            let vals: Vec<f64> = results
                .iter()
                .flatten()
                .filter_map(|errs| errs.iter().find(|(k, _)| k == key).map(|e| e.1))
                .collect();
            let m = vals.len().max(1) as f64;
            McRow {
                metric: key.0.clone(),
                state: key.1,
                bias: vals.iter().sum::<f64>() / m,
                rmse: (vals.iter().map(|v| v * v).sum::<f64>() / m).sqrt(),
                // failed replications count as not covered
                coverage: vals.iter().filter(|v| v.abs() <= tol).count() as f64 / reps as f64,
            }
        })
        .collect();
    let failures: Vec<Value> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| json!({ "replication": i, "error": e.to_string() })))
        .collect();
    let report = json!({
        "replications": reps,
        "target": cfg.montecarlo.target,
        "tolerance": tol,
        "failures": failures,
        "auctions": cfg.require_dgp()?.auctions,
    });
    Ok((rows, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_and_validates() {
        let cfg = RunConfig::from_toml(TEMPLATE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.mode, Some(Mode::Identify));
        assert_eq!(cfg.estimation.r, Some(3));
        assert_eq!(cfg.dgp.as_ref().unwrap().states.len(), 2);
        assert_eq!(cfg.sieve.orders, vec![4, 6, 8]);
    }

    #[test]
    fn missing_rank_names_the_field() {
        let text = TEMPLATE.replace("r = 3 ", "# r = 3 ");
        let cfg = RunConfig::from_toml(&text).unwrap();
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "estimation.r"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn type_errors_carry_the_path() {
        let text = TEMPLATE.replace("grid_points = 101", "grid_points = \"many\"");
        match RunConfig::from_toml(&text).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "estimation.grid_points"),
            e => panic!("unexpected {e}"),
        }
        let text = TEMPLATE.replace("prob_w0 = 0.75", "prob_w0 = 0.75\ncolour = 1");
        match RunConfig::from_toml(&text).unwrap_err() {
            Error::Config { field, .. } => assert!(field.starts_with("dgp.states"), "{field}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn range_checks() {
        let base = RunConfig::from_toml(TEMPLATE).unwrap();
        let mut cfg = base.clone();
        cfg.estimation.grid_points = 2;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = base.clone();
        cfg.dgp.as_mut().unwrap().states[0].prob_w0 = 1.5;
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "dgp.states[0].prob_w0"),
            e => panic!("unexpected {e}"),
        }
        let mut cfg = base;
        cfg.mode = Some(Mode::Simulate);
        cfg.dgp = None;
        cfg.data = Some(DataConfig {
            path: "x.csv".into(),
            top_depth: false,
            support: None,
        });
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "dgp"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn reflected_estimates_map_back() {
        let mut est = ComponentEstimate {
            grid: vec![0.0, 0.5, 1.0],
            cdfs: vec![vec![0.0, 0.25, 1.0]],
            weights: vec![1.0],
            prob_w0: vec![0.5],
            eta_low: vec![1.0],
            eta_high: None,
            bid_cdfs: None,
            diagnostics: Default::default(),
        };
        unreflect(&mut est, Some(1.0));
        assert_eq!(est.grid, vec![0.0, 0.5, 1.0]);
        assert_eq!(est.cdfs[0], vec![0.0, 0.75, 1.0]);
    }
}
