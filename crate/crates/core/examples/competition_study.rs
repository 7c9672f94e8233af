//! Replicated unknown-competition identification on the single-state and
//! two-state designs.

use osmix::auction::AuctionFormat;
use osmix::competition::{identify_unknown_n, UnknownOptions};
use osmix::order_stats::{Parent, ValueDist};
use osmix::rank::RankSettings;
use osmix::simulate::{simulate, Competition, MixtureDGP, Orientation, StateSpec};
use osmix::source::EmpiricalSource;
use osmix::spectral::identification_scheme;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let design: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let m: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let reps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let (dgp, support, truth_p): (MixtureDGP, Vec<u32>, Vec<Vec<f64>>) = if design == 1 {
        let p = vec![vec![0.3, 0.4, 0.3]];
        (
            MixtureDGP {
                format: AuctionFormat::Ascending,
                states: vec![StateSpec { value_dist: ValueDist::uniform(0.0, 1.0), prob_w0: 0.5 }],
                competition: Competition::Unknown { support: vec![2, 3, 4], weights: p.clone() },
            },
            vec![2, 3, 4],
            p,
        )
    } else {
        let p = vec![vec![0.3, 0.3], vec![0.2, 0.2]];
        (
            MixtureDGP {
                format: AuctionFormat::Ascending,
                states: vec![
                    StateSpec { value_dist: ValueDist::beta(2.0, 5.0), prob_w0: 0.25 },
                    StateSpec { value_dist: ValueDist::beta(5.0, 2.0), prob_w0: 0.75 },
                ],
                competition: Competition::Unknown { support: vec![3, 4], weights: p.clone() },
            },
            vec![3, 4],
            p,
        )
    };
    let k = dgp.states.len();
    let truth = |s: usize, x: f64| dgp.states[s].value_dist.cdf(x);
    let start = std::time::Instant::now();
    let mut ok = 0;
    for seed in 0..reps {
        let data = simulate(&dgp, m, 2000 + seed, Orientation::Canonical(2)).unwrap().without_latent();
        let src = EmpiricalSource::new(&data).unwrap();
        let scheme = identification_scheme(&src, k, &RankSettings::default(), None).unwrap();
        let opts = UnknownOptions::default();
        match identify_unknown_n(&src, &support, k, &scheme, &opts) {
            Ok((est, mix)) => {
                let e = est.sup_errors(&truth);
                let p_err = mix
                    .weights
                    .iter()
                    .flatten()
                    .zip(truth_p.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let sup = e.iter().cloned().fold(0.0, f64::max);
                let pass = if design == 1 { p_err <= 0.03 } else { sup <= 0.07 && p_err <= 0.05 };
                ok += pass as usize;
                println!(
                    "seed {seed} c {:.3} sup {e:.4?} eta {:.4?} p {:.3?} p_err {p_err:.4} {}",
                    scheme.cutoff,
                    mix.eta,
                    mix.weights,
                    if pass { "ok" } else { "MISS" }
                );
            }
            Err(e) => println!("seed {seed} c {:.3} fail {e}", scheme.cutoff),
        }
    }
    println!("passing {ok}/{reps}; {:.1}s", start.elapsed().as_secs_f64());
}
