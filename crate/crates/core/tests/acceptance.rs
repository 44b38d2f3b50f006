//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cmdp_lab::context_dep::{explore_ucdd, CdConfig};
use cmdp_lab::env::{generate, EpisodeSource, GenSpec};
use cmdp_lab::harness::{run, with_param, ExperimentConfig};
use cmdp_lab::mdp::{rng_from_seed, Policy};
use cmdp_lab::oracles::suboptimality_by;
use cmdp_lab::params::Algorithm;
use cmdp_lab::verify;
use cmdp_lab::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

impl From<verify::Check> for Outcome {
    fn from(c: verify::Check) -> Self {
        Self {
            passed: c.passed,
            detail: c.detail,
        }
    }
}

fn criterion(id: u8, title: &str, limit: Duration, body: impl FnOnce() -> Result<Outcome>) -> bool {
    let started = Instant::now();
    let outcome = body().unwrap_or_else(|e| Outcome {
        passed: false,
        detail: format!("error: {e}"),
    });
    let elapsed = started.elapsed();
    let ok = outcome.passed && elapsed <= limit;
    println!(
        "[{}] {id}. {title}: {} ({:.1} s, limit {} s)",
        if ok { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn config(algorithm: Algorithm) -> Result<ExperimentConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{algorithm}.json"));
    ExperimentConfig::load(&path)
}

/// The end-to-end setting: |S| = 6 over H = 3, |A| = 2, 4 to 8 contexts,
/// eps = 0.25, delta = 0.1, constant_scale <= 0.05, 25 seeds.
fn check_setting(cfg: &ExperimentConfig) -> Result<()> {
    let learner = cfg.validate()?;
    let spec = &cfg.env;
    let scale = cfg.learner["constant_scale"].as_f64().unwrap_or(1.0);
    let ok = spec.layer_sizes.iter().sum::<usize>() == 6
        && spec.layer_sizes.len() == 4
        && spec.n_actions == 2
        && (4..=8).contains(&spec.n_contexts)
        && learner.eps() == 0.25
        && learner.delta() == 0.1
        && scale <= 0.05
        && cfg.n_seeds == 25
        && cfg.thresholds.max_suboptimality.is_none()
        && cfg.thresholds.min_pass_rate >= 0.8;
    if ok {
        Ok(())
    } else {
        Err(cmdp_lab::LabError::Config(format!("{} config departs from the acceptance setting", cfg.algorithm)))
    }
}

fn end_to_end(algorithm: Algorithm) -> Result<Outcome> {
    let cfg = config(algorithm)?;
    check_setting(&cfg)?;
    let report = run(&cfg)?;
    // Reference point: how far the uniform policy is from optimal on the same instances.
    let mut uniform = 0.0;
    for s in &report.seeds {
        let env = generate(&GenSpec {
            seed: s.env_seed,
            ..cfg.env.clone()
        })?;
        let layout = env.layout().clone();
        uniform += suboptimality_by(env.cmdp(), |_| Ok(Policy::uniform(&layout)))?;
    }
    uniform /= report.seeds.len() as f64;
    let agg = &report.aggregate;
    Ok(Outcome {
        passed: report.passed && agg.pass.rate >= 0.8,
        detail: format!(
            "{algorithm}: {}/{} seeds within {} (Wilson [{:.2}, {:.2}]), mean gap {:.2e}, max {:.2e}, uniform policy {:.3}, {:.0} episodes/seed",
            agg.pass.successes,
            agg.pass.trials,
            report.threshold,
            agg.pass.lower,
            agg.pass.upper,
            agg.mean_suboptimality.unwrap_or(f64::NAN),
            agg.max_suboptimality.unwrap_or(f64::NAN),
            uniform,
            agg.mean_episodes
        ),
    })
}

const SWEEP: [f64; 3] = [0.4, 0.2, 0.1];

fn sweep_config(algorithm: Algorithm) -> Result<ExperimentConfig> {
    let mut cfg = with_param(&config(algorithm)?, "learner.constant_scale", 0.01)?;
    cfg.n_seeds = 1;
    Ok(cfg)
}

fn monotone(algorithm: Algorithm) -> Result<(bool, Vec<u64>)> {
    let base = sweep_config(algorithm)?;
    let mut episodes = Vec::new();
    for eps in SWEEP {
        let report = run(&with_param(&base, "learner.eps", eps)?)?;
        let audited = report.seeds.iter().all(|s| s.invariants.get("budget_audit") == Some(&true));
        if !audited {
            return Ok((false, episodes));
        }
        episodes.push(report.seeds[0].episodes_used);
    }
    Ok((episodes.windows(2).all(|w| w[0] < w[1]), episodes))
}

/// Recomputes every UCDD `T_h` from the resolved parameters.
fn ucdd_layer_budgets() -> Result<(bool, String)> {
    let base = sweep_config(Algorithm::Ucdd)?;
    let mut ok = true;
    let mut shown = Vec::new();
    for eps in SWEEP {
        let cfg = with_param(&base, "learner.eps", eps)?;
        let learner: CdConfig = serde_json::from_value(cfg.learner.clone())?;
        let env = generate(&cfg.env)?;
        let layout = env.layout().clone();
        let (s, h) = (layout.n_states() as f64, layout.horizon() as f64);
        let mut session = env.session();
        let model = explore_ucdd(
            &mut session,
            env.layer_reward_classes.as_ref().expect("linear rewards"),
            &env.layer_dynamics_classes,
            &learner,
            &mut rng_from_seed(cfg.master_seed),
        )?;
        let p = &model.params;
        let beta = 216.0 * eps / (20.0 * s * h);
        let delta1 = learner.delta / (8.0 * h);
        ok &= (p.beta - beta).abs() < 1e-15 && (p.gamma - beta).abs() < 1e-15 && (p.delta1 - delta1).abs() < 1e-18;
        let mut spent = 0;
        for b in &model.layer_budgets {
            let t_h = (8.0 * s / (beta * beta) * ((1.0 / delta1).ln() + 2.0 * b.n_p.max(b.n_r) as f64)).ceil() as u64;
            ok &= b.episodes == t_h;
            ok &= b.observed == t_h || (b.observed == 0 && model.good_sets.sets[b.h].is_empty());
            spent += b.agc_draws + b.observed;
            shown.push(b.episodes);
        }
        ok &= spent == session.episodes() && spent == model.episodes;
    }
    Ok((ok, format!("T_h = {shown:?}")))
}

fn determinism() -> Result<Outcome> {
    let mut identical = true;
    let mut bytes = 0;
    for algorithm in Algorithm::ALL {
        let mut cfg = sweep_config(algorithm)?;
        cfg.n_seeds = 3;
        cfg.workers = Some(2);
        let first = run(&cfg)?.without_timing().to_json()?;
        let second = run(&cfg)?.without_timing().to_json()?;
        identical &= first == second;
        bytes += first.len();
    }
    Ok(Outcome {
        passed: identical,
        detail: format!("four reruns, {bytes} report bytes, byte-identical: {identical}"),
    })
}

fn main() -> ExitCode {
    let seed = 20_240_601;
    let mut all = true;
    all &= criterion(1, "planner oracle equivalence", Duration::from_secs(10), || {
        verify::planner_equivalence(200, seed).map(Outcome::from)
    });
    all &= criterion(2, "occupancy distance bound", Duration::from_secs(5), || {
        verify::occupancy_distance(50, &[0.01, 0.1], seed).map(Outcome::from)
    });
    all &= criterion(3, "tabular dynamics guarantee", Duration::from_secs(60), || {
        verify::tabular_guarantee(100, 0.1, 0.05, 4, seed).map(Outcome::from)
    });
    all &= criterion(4, "importance-sampling unbiasedness", Duration::from_secs(60), || {
        verify::importance_sampling(5000, seed).map(Outcome::from)
    });
    all &= criterion(5, "end-to-end eps-optimality", Duration::from_secs(4 * 600), || {
        let mut passed = true;
        let mut within = 0;
        for algorithm in Algorithm::ALL {
            let started = Instant::now();
            let o = end_to_end(algorithm)?;
            let in_time = started.elapsed() <= Duration::from_secs(600);
            passed &= o.passed && in_time;
            within += u8::from(o.passed && in_time);
            println!("      {} ({:.1} s)", o.detail, started.elapsed().as_secs_f64());
        }
        Ok(Outcome {
            passed,
            detail: format!("{within}/4 algorithms reach the pass rate within 600 s each"),
        })
    });
    all &= criterion(6, "budget monotonicity in eps", Duration::from_secs(120), || {
        let mut passed = true;
        let mut parts = Vec::new();
        for algorithm in Algorithm::ALL {
            let (ok, episodes) = monotone(algorithm)?;
            passed &= ok;
            parts.push(format!("{algorithm} {episodes:?}"));
        }
        let (formula, shown) = ucdd_layer_budgets()?;
        passed &= formula;
        Ok(Outcome {
            passed,
            detail: format!("eps {SWEEP:?}: {}; ucdd {shown} match the formula: {formula}", parts.join(", ")),
        })
    });
    all &= criterion(7, "approximate dynamics stochasticity", Duration::from_secs(5), || {
        verify::acdd_stochasticity(10_000, seed).map(Outcome::from)
    });
    all &= criterion(8, "determinism", Duration::from_secs(60), determinism);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
