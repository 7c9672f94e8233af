//! Replicated identification errors on the two-state design.

use osmix::auction::AuctionFormat;
use osmix::order_stats::{Parent, ValueDist};
use osmix::rank::RankSettings;
use osmix::simulate::{simulate, Competition, MixtureDGP, Orientation, StateSpec};
use osmix::source::EmpiricalSource;
use osmix::spectral::{identification_scheme, identify_known_n, IdentifyOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let reps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let dgp = MixtureDGP {
        format: AuctionFormat::Ascending,
        states: vec![
            StateSpec { value_dist: ValueDist::beta(2.0, 5.0), prob_w0: 0.25 },
            StateSpec { value_dist: ValueDist::beta(5.0, 2.0), prob_w0: 0.75 },
        ],
        competition: Competition::Known { n: 4, weights: vec![0.6, 0.4] },
    };
    let truth = |k: usize, x: f64| dgp.states[k].value_dist.cdf(x);
    let start = std::time::Instant::now();
    let mut errs = vec![Vec::new(), Vec::new()];
    let mut p_ok = 0;
    for seed in 0..reps {
        let data = simulate(&dgp, m, 1000 + seed, Orientation::Canonical(3)).unwrap();
        let src = EmpiricalSource::new(&data).unwrap();
        let scheme = identification_scheme(&src, 2, &RankSettings::default(), None).unwrap();
        match identify_known_n(&src, 4, 2, &scheme, AuctionFormat::Ascending, &IdentifyOptions::default()) {
            Ok(est) => {
                let e = est.sup_errors(&truth);
                println!("seed {seed} c {:.3} sup {:.4} {:.4} p {:.3}", scheme.cutoff, e[0], e[1], est.weights[0]);
                errs[0].push(e[0]);
                errs[1].push(e[1]);
                if (est.weights[0] - 0.6).abs() <= 0.05 {
                    p_ok += 1;
                }
            }
            Err(e) => {
                println!("seed {seed} fail {e}");
                errs[0].push(1.0);
                errs[1].push(1.0);
            }
        }
    }
    for e in errs.iter_mut() {
        e.sort_by(f64::total_cmp);
    }
    println!(
        "median sup {:.4} {:.4}; p within 0.05 in {p_ok}/{reps}; {:.1}s",
        errs[0][errs[0].len() / 2],
        errs[1][errs[1].len() / 2],
        start.elapsed().as_secs_f64()
    );
}
