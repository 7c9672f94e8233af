//! Replicated sieve fits on the two-state ascending design, compared with the
//! spectral estimate converted to sieve form.

use osmix::auction::AuctionFormat;
use osmix::order_stats::{Parent, ValueDist};
use osmix::rank::RankSettings;
use osmix::sieve::{fit_sieve, sieve_from_estimate, sieve_loglik, SieveData, SieveOptions};
use osmix::simulate::{simulate, Competition, MixtureDGP, Orientation, StateSpec};
use osmix::source::EmpiricalSource;
use osmix::spectral::{identification_scheme, identify_known_n, IdentifyOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let reps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let order: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let dgp = MixtureDGP {
        format: AuctionFormat::Ascending,
        states: vec![
            StateSpec { value_dist: ValueDist::beta(2.0, 5.0), prob_w0: 0.25 },
            StateSpec { value_dist: ValueDist::beta(5.0, 2.0), prob_w0: 0.75 },
        ],
        competition: Competition::Known { n: 4, weights: vec![0.6, 0.4] },
    };
    let truth = |k: usize, x: f64| dgp.states[k].value_dist.cdf(x);
    for seed in 0..reps {
        let start = std::time::Instant::now();
        let ds = simulate(&dgp, m, 3000 + seed, Orientation::Canonical(3)).unwrap().without_latent();
        let data = SieveData::new(&ds).unwrap();
        let fit = fit_sieve(&data, 2, order, 3, 4, seed, &SieveOptions::default(), None).unwrap();
        let sup: Vec<f64> = (0..2)
            .map(|k| (0..=100).map(|i| i as f64 / 100.0).map(|x| (fit.cdf(k, x) - truth(k, x)).abs()).fold(0.0, f64::max))
            .collect();
        let src = EmpiricalSource::new(&ds).unwrap();
        let spectral = identification_scheme(&src, 2, &RankSettings::default(), None)
            .and_then(|s| identify_known_n(&src, 4, 2, &s, AuctionFormat::Ascending, &IdentifyOptions::default()))
            .and_then(|est| sieve_from_estimate(&est, &data.map, order))
            .and_then(|theta| sieve_loglik(&data, &theta, 3, 4));
        let conv = fit.starts.iter().filter(|s| s.converged).count();
        println!(
            "seed {seed} sup {sup:.4?} p {:.3?} q {:.3?} ll {:.1} spectral {:?} converged {conv}/{} {:.1}s",
            fit.params.weights,
            fit.params.prob_w0,
            fit.loglik.value,
            spectral.map(|l| (l.value, l.floored)),
            fit.starts.len(),
            start.elapsed().as_secs_f64()
        );
    }
}
