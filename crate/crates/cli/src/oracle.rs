use std::fmt;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use aquant_core::analysis::{
    analytic_row_borders, brute_force_rounding_oracle, expected_ew_error, linear_grid, policy_error,
    random_weight_pair, verify_border_optimality, OptimalityReport, MAX_ORACLE_LEN, MIN_MC_SAMPLES,
};
use aquant_core::model::io::save_json;
use aquant_core::QuantParams;

use crate::OracleArgs;

const GRID_BOUND: f64 = 8.0;
const MAX_LEVEL: i64 = 8;
const MC_CASES: usize = 8;
const MC_SIGMAS: f64 = 3.0;
const DOMINANCE_TOL: f64 = 1e-12;

/// Number of oracle checks that failed.
#[derive(Debug)]
pub struct Violations(pub usize);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} oracle check(s) failed", self.0)
    }
}

impl std::error::Error for Violations {}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    mutate_sign: bool,
    zero_dw: bool,
    pairs: usize,
    grid_checked: usize,
    grid_skipped: usize,
    grid_violations: usize,
    mc_cases: usize,
    mc_violations: usize,
    mc_worst_sigma: f64,
    instances: usize,
    dominance_violations: usize,
}

fn border_fn(w: f64, dw: f64, sign: f64) -> impl Fn(f64) -> f64 {
    move |x| sign * dw / (w + dw) * x + 0.5
}

fn sweep(args: &OracleArgs, rng: &mut ChaCha8Rng, sign: f64) -> OptimalityReport {
    let grid = linear_grid(-GRID_BOUND, GRID_BOUND, args.grid);
    let mut report = OptimalityReport::default();
    for _ in 0..args.pairs {
        let (mut w, mut dw) = random_weight_pair(rng, MAX_LEVEL);
        if args.zero_dw {
            w += dw;
            dw = 0.0;
        }
        report.merge(verify_border_optimality(w, dw, &grid, border_fn(w, dw, sign)));
    }
    report
}

fn monte_carlo(args: &OracleArgs, rng: &mut ChaCha8Rng, sign: f64) -> Result<(usize, f64)> {
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for k in 0..MC_CASES {
        let (w, dw) = random_weight_pair(rng, MAX_LEVEL - 1);
        let dw = if args.zero_dw { 0.0 } else { dw };
        // keep the border inside [0, 1]
        let reach = if dw == 0.0 { GRID_BOUND } else { (0.5 * ((w + dw) / dw).abs()).min(GRID_BOUND) };
        let x = rng.gen_range(-reach..=reach);
        let est = expected_ew_error(w, dw, border_fn(w, dw, sign), x, args.mc_samples, args.seed.wrapping_add(k as u64))?;
        let dev = if est.std_error > 0.0 {
            est.mean.abs() / est.std_error
        } else if est.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(dev);
        if !est.within(0.0, MC_SIGMAS) {
            violations += 1;
        }
    }
    Ok((violations, worst))
}

fn dominance(args: &OracleArgs, rng: &mut ChaCha8Rng, sign: f64) -> Result<usize> {
    let mut violations = 0;
    for _ in 0..args.instances {
        let len = rng.gen_range(1..=args.max_len);
        let bits = rng.gen_range(2..=4);
        let act = QuantParams::new(bits, rng.gen_range(0.05..0.5), rng.gen_bool(0.5))?;
        let w: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let w_step: f64 = rng.gen_range(0.1..0.4);
        let w_hat: Vec<f64> = w.iter().map(|&v| w_step * (v / w_step).round().clamp(-2.0, 1.0)).collect();
        let (lo, hi) = (act.q_min as f64 * act.step, act.q_max as f64 * act.step);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v / act.step).collect();
        let mut analytic = analytic_row_borders(&w_hat, &w, &scaled);
        if sign < 0.0 {
            for b in &mut analytic {
                *b = 1.0 - *b;
            }
        }
        let oracle = brute_force_rounding_oracle(&w_hat, &w, &x, &act)?;
        for borders in [vec![0.5; len], analytic] {
            let e = policy_error(&w_hat, &w, &x, &act, &borders)?;
            if oracle.error.abs() > e.abs() + DOMINANCE_TOL {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

pub fn run(args: &OracleArgs) -> Result<()> {
    anyhow::ensure!(args.grid >= 2, "--grid must be at least 2");
    anyhow::ensure!(args.mc_samples >= MIN_MC_SAMPLES, "--mc-samples must be at least {MIN_MC_SAMPLES}");
    anyhow::ensure!(
        (1..=MAX_ORACLE_LEN).contains(&args.max_len),
        "--max-len must be within 1..={MAX_ORACLE_LEN}"
    );
    let sign = if args.mutate_sign { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let grid = sweep(args, &mut rng, sign);
    let (mc_violations, mc_worst) = monte_carlo(args, &mut rng, sign)?;
    let dominance_violations = dominance(args, &mut rng, sign)?;

    let summary = Summary {
        seed: args.seed,
        mutate_sign: args.mutate_sign,
        zero_dw: args.zero_dw,
        pairs: args.pairs,
        grid_checked: grid.checked,
        grid_skipped: grid.skipped,
        grid_violations: grid.violations.len(),
        mc_cases: MC_CASES,
        mc_violations,
        mc_worst_sigma: mc_worst,
        instances: args.instances,
        dominance_violations,
    };
    println!(
        "border side: pairs={} checked={} skipped={} violations={}",
        summary.pairs, summary.grid_checked, summary.grid_skipped, summary.grid_violations
    );
    println!(
        "unbiasedness: cases={} samples={} violations={} worst={:.2}sigma",
        MC_CASES, args.mc_samples, mc_violations, mc_worst
    );
    println!(
        "dominance: instances={} violations={}",
        summary.instances, summary.dominance_violations
    );
    if let Some(dir) = &args.out {
        save_json(&summary, &dir.join("oracle.json")).context("writing oracle summary")?;
    }
    let total = summary.grid_violations + mc_violations + dominance_violations;
    if total > 0 {
        return Err(Violations(total).into());
    }
    println!("all oracle checks passed");
    Ok(())
}
