//! Seed-sensitivity scan for the pre-determined-splitting study: prints
//! the selection success rates and average errors across master seeds.
//!
//! Run with `cargo run --release -p pbdw-cli --example seed_scan`.

use pbdw_cli::config::Test1Config;
use pbdw_cli::test1::run_test1;

fn main() {
    for seed in 0u64..12 {
        let cfg = Test1Config::at_scale(pbdw_cli::config::Scale::Desk, seed);
        let r = run_test1(&cfg).unwrap();
        println!(
            "seed {seed:2}: n*={:?} sur=({:.1}%, {:.1}%) ora=({:.1}%, {:.1}%) avg affine=({:.3e},{:.3e}) nl-ora=({:.3e},{:.3e})",
            r.n_star,
            100.0 * r.surrogate_counts[0].success_rate,
            100.0 * r.surrogate_counts[1].success_rate,
            100.0 * r.oracle_counts[0].success_rate,
            100.0 * r.oracle_counts[1].success_rate,
            r.avg_errors[0][0],
            r.avg_errors[0][1],
            r.avg_errors[1][0],
            r.avg_errors[1][1],
        );
    }
}
