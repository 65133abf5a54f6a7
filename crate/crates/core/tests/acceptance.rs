//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.
//!
//! `cargo test -p lcsrl --test acceptance -- 3 5` runs only criteria 3 and 5.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lcsrl::envs::Env;
use lcsrl::policy::gaussian_log_density;
use lcsrl::rl::{ppo_gradient, ppo_loss, PpoBatch, PpoSample};
use lcsrl::trainer::{
    collect_rollouts, prediction_error, run_train, run_transfer, run_warmup, Checkpoint, ExperimentConfig, MetricsRow,
    TrainOutcome,
};

use lcsrl::lcs::{lcp_enumerate_oracle, lcp_solve, LcpInstance, LcsDims, LcsParams};
use lcsrl::learning::{loss_and_gradient, loss_over, TransitionTriple, ViolationConfig};
use lcsrl::mpc::{kkt_sensitivity, solve_mpc, CostSpec, MpcProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-r..r))
}

fn uniform_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

// ---------------------------------------------------------------------------
// 1. LCP solver against active-set enumeration.

fn lcp_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst_residual: f64 = 0.0;
    let mut mismatches = 0;
    let cases = 1000;
    for case in 0..cases {
        let n = 1 + case % 6;
        // P-matrices: positive definite plus a skew part, so the solution is
        // unique and the oracle finds exactly one point.
        let p = uniform_mat(&mut rng, n, n, 1.0);
        let skew = uniform_mat(&mut rng, n, n, 0.5);
        let m = &p * p.transpose() + DMatrix::identity(n, n) * 0.1 + (&skew - skew.transpose());
        let q = uniform_vec(&mut rng, n, 2.0);
        let inst = LcpInstance::new(m, q).unwrap();
        let sol = match lcp_solve(&inst, 1e-10) {
            Ok(s) => s,
            Err(_) => {
                mismatches += 1;
                continue;
            }
        };
        worst_residual = worst_residual.max(sol.residual());
        let oracle = lcp_enumerate_oracle(&inst, 1e-10).unwrap();
        let matched = oracle.iter().any(|o| (&o.lambda - &sol.lambda).amax() <= 1e-8);
        if oracle.len() != 1 || !matched {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && worst_residual <= 1e-8,
        format!("{cases} instances, {mismatches} mismatches, worst complementarity residual {worst_residual:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Violation-loss gradient against central finite differences.

fn random_params(rng: &mut ChaCha8Rng, dims: LcsDims) -> LcsParams {
    let mut p = LcsParams::zeros(dims);
    let (nx, nu, nl) = (dims.n_x, dims.n_u, dims.n_lambda);
    p.a = uniform_mat(rng, nx, nx, 0.5);
    p.b = uniform_mat(rng, nx, nu, 0.5);
    p.c = uniform_mat(rng, nx, nl, 0.5);
    p.d = uniform_vec(rng, nx, 0.2);
    p.gap_x = uniform_mat(rng, nl, nx, 0.5);
    p.gap_u = uniform_mat(rng, nl, nu, 0.5);
    let q = uniform_mat(rng, nl, nl, 0.3);
    p.gap_lambda = &q * q.transpose() + DMatrix::identity(nl, nl) * 0.5;
    p.gap_offset = uniform_vec(rng, nl, 0.3);
    p
}

fn envelope_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let cfg = ViolationConfig::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let instances = 100;
    for _ in 0..instances {
        let dims = LcsDims::new(rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)).unwrap();
        let params = random_params(&mut rng, dims);
        let data: Vec<TransitionTriple> = (0..3)
            .map(|_| {
                TransitionTriple::new(
                    uniform_vec(&mut rng, dims.n_x, 1.0),
                    uniform_vec(&mut rng, dims.n_u, 1.0),
                    uniform_vec(&mut rng, dims.n_x, 1.0),
                )
            })
            .collect();
        let (_, grad) = loss_and_gradient(&params, &data, &cfg).unwrap();
        let theta = params.to_vec();
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let lp = loss_over(&LcsParams::from_slice(dims, &tp).unwrap(), &data, &cfg).unwrap();
            let lm = loss_over(&LcsParams::from_slice(dims, &tm).unwrap(), &data, &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            if grad[j].abs() > 1e-6 {
                worst = worst.max((grad[j] - fd).abs() / grad[j].abs());
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{instances} instances, {checked} entries checked, worst relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. First-action sensitivity against finite differences of re-solved plans.

fn random_mpc(rng: &mut ChaCha8Rng) -> (MpcProblem, DVector<f64>) {
    let dims = LcsDims::new(rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)).unwrap();
    let mut p = random_params(rng, dims);
    // Keep the open-loop dynamics tame over the horizon.
    let rad = p.a.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    if rad > 0.95 {
        p.a *= 0.95 / rad;
    }
    let (nx, nu) = (dims.n_x, dims.n_u);
    let cost = CostSpec::new(
        DMatrix::identity(nx, nx),
        DMatrix::identity(nu, nu) * 0.1,
        DMatrix::identity(nx, nx) * 2.0,
        uniform_vec(rng, nx, 1.0),
    )
    .unwrap();
    let h = rng.random_range(1..=5);
    let prob = MpcProblem::new(
        p,
        cost,
        h,
        DVector::from_element(nu, -2.0),
        DVector::from_element(nu, 2.0),
    )
    .unwrap();
    let x0 = uniform_vec(rng, nx, 1.0);
    (prob, x0)
}

fn kkt_sensitivity_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let target = 50;
    let step = 1e-5;
    let mut accepted = 0;
    let mut attempts = 0;
    let mut skipped_invalid = 0;
    let mut skipped_failed = 0;
    let mut skipped_saturated = 0;
    let mut worst: f64 = 0.0;
    while accepted < target && attempts < 20 * target {
        attempts += 1;
        let (prob, x0) = random_mpc(&mut rng);
        let Ok(sol) = solve_mpc(&prob, &x0, None) else {
            skipped_failed += 1;
            continue;
        };
        let sens = kkt_sensitivity(&prob, &sol);
        if !sens.valid {
            skipped_invalid += 1;
            continue;
        }
        // A first action pinned on strictly active bounds has zero derivative;
        // both sides then only carry barrier and roundoff residue.
        let u0 = &sol.controls[0];
        if (0..u0.len()).all(|i| (u0[i] - prob.u_min[i]).min(prob.u_max[i] - u0[i]) <= 1e-6) {
            skipped_saturated += 1;
            continue;
        }
        let theta = prob.params.to_vec();
        let dims = prob.dims();
        let mut fd = DMatrix::zeros(dims.n_u, theta.len());
        let mut ok = true;
        for j in 0..theta.len() {
            let mut plus = prob.clone();
            let mut minus = prob.clone();
            let mut tp = theta.clone();
            tp[j] += step;
            let mut tm = theta.clone();
            tm[j] -= step;
            plus.params = LcsParams::from_slice(dims, &tp).unwrap();
            minus.params = LcsParams::from_slice(dims, &tm).unwrap();
            match (solve_mpc(&plus, &x0, None), solve_mpc(&minus, &x0, None)) {
                (Ok(a), Ok(b)) => fd.set_column(j, &((&a.controls[0] - &b.controls[0]) / (2.0 * step))),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            skipped_failed += 1;
            continue;
        }
        let rel = (&sens.jacobian - &fd).norm() / fd.norm().max(sens.jacobian.norm()).max(1e-12);
        worst = worst.max(rel);
        accepted += 1;
    }
    outcome(
        accepted == target && worst <= 1e-3,
        format!(
            "{accepted}/{target} non-degenerate instances ({attempts} drawn, {skipped_invalid} flagged degenerate, {skipped_saturated} with a fully saturated first action, {skipped_failed} solve failures), worst relative error {worst:.2e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. PPO machinery.

fn ppo_machinery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let eps = 0.2;
    let mut failures = vec![];

    // Unit ratio: the loss is the negated mean advantage.
    let n_theta = 7;
    let log_std_b = DVector::from_vec(vec![0.3f64.ln(), 0.5f64.ln()]);
    let samples: Vec<PpoSample> = (0..40)
        .map(|_| {
            let mean = uniform_vec(&mut rng, 2, 1.0);
            let raw = &mean + uniform_vec(&mut rng, 2, 0.6);
            PpoSample {
                log_prob_old: gaussian_log_density(&mean, &log_std_b, &raw),
                raw_action: raw,
                behavior_mean: mean,
                jacobian: Some(uniform_mat(&mut rng, 2, n_theta, 1.0)),
                advantage: rng.random_range(-2.0..2.0),
            }
        })
        .collect();
    let olds: Vec<f64> = samples.iter().map(|s| s.log_prob_old).collect();
    let unit = ppo_loss(&samples, &olds, eps).unwrap();
    let neg_mean = -samples.iter().map(|s| s.advantage).sum::<f64>() / samples.len() as f64;
    if unit != neg_mean {
        failures.push(format!("unit-ratio loss {unit} != {neg_mean}"));
    }

    // Hand-computed clip arithmetic.
    let single = |adv: f64, h: f64| {
        let s = PpoSample {
            raw_action: DVector::zeros(1),
            behavior_mean: DVector::zeros(1),
            jacobian: None,
            log_prob_old: 0.0,
            advantage: adv,
        };
        ppo_loss(&[s], &[h.ln()], eps).unwrap()
    };
    for (adv, h, want) in [(2.0, 1.5, -2.4), (-1.0, 0.5, 0.8), (2.0, 0.5, -1.0), (-1.0, 1.5, 1.5)] {
        let got = single(adv, h);
        if (got - want).abs() > 1e-12 {
            failures.push(format!("A={adv}, h={h}: loss {got}, expected {want}"));
        }
    }

    // Noise-level path against central differences.
    let theta_b: Vec<f64> = (0..n_theta).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = PpoBatch {
        samples: samples.clone(),
        theta_behavior: theta_b.clone(),
    };
    let log_std = &log_std_b + DVector::from_vec(vec![0.07, -0.05]);
    let loss_at = |ls: &DVector<f64>| {
        let lps: Vec<f64> = samples.iter().map(|s| gaussian_log_density(&s.behavior_mean, ls, &s.raw_action)).collect();
        ppo_loss(&samples, &lps, eps).unwrap()
    };
    let g = ppo_gradient(&batch, &theta_b, &log_std, eps).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..log_std.len() {
        let mut plus = log_std.clone();
        plus[j] += h;
        let mut minus = log_std.clone();
        minus[j] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        worst = worst.max((g.gradient[n_theta + j] - fd).abs());
    }
    if worst > 1e-5 {
        failures.push(format!("log_std gradient error {worst:.2e}"));
    }
    if g.clipped_fraction <= 0.0 || g.clipped_fraction >= 1.0 {
        failures.push(format!("noise-level check should mix clipped and unclipped samples, got {}", g.clipped_fraction));
    }

    // Every sample on the clipped side of its trust region.
    let clipped: Vec<PpoSample> = samples
        .iter()
        .map(|s| {
            let new = gaussian_log_density(&s.behavior_mean, &log_std, &s.raw_action);
            let (adv, ratio) = if s.advantage < 0.0 { (s.advantage, 0.5f64) } else { (s.advantage, 1.5f64) };
            PpoSample {
                log_prob_old: new - ratio.ln(),
                advantage: adv,
                ..s.clone()
            }
        })
        .collect();
    let zero = ppo_gradient(
        &PpoBatch {
            samples: clipped,
            theta_behavior: theta_b.clone(),
        },
        &theta_b,
        &log_std,
        eps,
    )
    .unwrap();
    if zero.gradient.iter().any(|&v| v != 0.0) || zero.clipped_fraction != 1.0 {
        failures.push("clipped-side batch has a nonzero gradient".into());
    }
    if g.gradient[..n_theta].iter().all(|&v| v == 0.0) {
        failures.push("mixed batch has a zero parameter gradient".into());
    }

    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            format!(
                "unit ratio exact, 4 clip examples, log_std error {worst:.1e}, clipped-side gradient exactly zero"
            )
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// 5. Warm-up on the realizable synthetic plant.

fn synthetic_identification() -> Outcome {
    let cfg = ExperimentConfig::parse("plant = synthetic_lcs\nwarmup.iterations = 50\neval.goals = 0\n").unwrap();
    let env = cfg.build_env().unwrap();
    let out = run_warmup(&cfg).unwrap();
    let initial = out.iterations[0].loss_before;
    let reached = out.iterations.iter().find(|it| it.loss_after < 0.01 * initial).map(|it| it.iteration);
    let final_loss = out.iterations.last().unwrap().loss_after;
    let policy = out.checkpoint.policy(&env).unwrap();
    // Episode streams beyond anything the warm-up used.
    let held = collect_rollouts(&env, &policy, 20, cfg.seed, 1 << 40, false, cfg.max_retries).unwrap();
    let err = prediction_error(&out.checkpoint.params, &held.transitions());
    let pass = reached.is_some() && err < 1e-3;
    outcome(
        pass,
        format!(
            "loss {initial:.3e} -> {final_loss:.3e} (below 1% at iteration {}), held-out one-step error {err:.3e} on {} transitions (limit 1e-3)",
            reached.map(|k| k.to_string()).unwrap_or_else(|| "never".into()),
            held.env_steps
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. PPO after warm-up against warm-up alone at equal env steps.

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Trained cart_wall checkpoints, shared with the transfer criterion.
static CART_RUNS: Mutex<BTreeMap<u64, Checkpoint>> = Mutex::new(BTreeMap::new());

fn config_for(plant: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("plant = {plant}\nseed = {seed}\n")).unwrap()
}

fn train_cart(seed: u64) -> (Checkpoint, TrainOutcome) {
    let out = run_train(&config_for("cart_wall", seed)).unwrap();
    let ckpt = out.main.checkpoint.clone();
    CART_RUNS.lock().unwrap().insert(seed, ckpt.clone());
    (ckpt, out)
}

fn final_success(rows: &[MetricsRow]) -> f64 {
    rows.iter().rev().find_map(|r| r.eval_success).unwrap_or(f64::NAN)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn ppo_vs_warmup_only() -> Outcome {
    let (mut ppo, mut only, mut transition) = (vec![], vec![], vec![]);
    let mut budgets = vec![];
    for seed in SEEDS {
        let (_, out) = train_cart(seed);
        let steps = out.main.checkpoint.counters.env_steps;
        transition.push(out.main.metrics[0].eval_success.unwrap_or(f64::NAN));
        ppo.push(final_success(&out.main.metrics));

        // Warm-up alone, extended to the same number of env steps.
        let mut cfg = config_for("cart_wall", seed);
        let per_iter = (cfg.warmup.rollouts * cfg.build_env().unwrap().spec.episode_steps) as u64;
        cfg.warmup.iterations = (steps / per_iter).saturating_sub(1) as usize;
        let alone = run_warmup(&cfg).unwrap();
        budgets.push((steps, alone.checkpoint.counters.env_steps));
        only.push(final_success(&alone.metrics));
    }
    let (m_ppo, m_only, m_tr) = (median(&ppo), median(&only), median(&transition));
    let pass = m_ppo >= m_only && m_ppo >= m_tr;
    outcome(
        pass,
        format!(
            "median final success warm-up+PPO {m_ppo:.3} vs warm-up only {m_only:.3}, at transition {m_tr:.3}; per seed PPO {ppo:?}, warm-up only {only:?}, transition {transition:?}, env steps {budgets:?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Transfer to the pusher against training from scratch.

fn steps_to_reach(rows: &[MetricsRow], level: f64) -> Option<u64> {
    rows.iter().find(|r| r.eval_success.is_some_and(|s| s >= level)).map(|r| r.env_steps)
}

fn transfer_vs_scratch() -> Outcome {
    let target = Env::pusher_slider();
    let (mut transfer_steps, mut scratch_steps, mut levels) = (vec![], vec![], vec![]);
    for seed in SEEDS {
        let cached = CART_RUNS.lock().unwrap().get(&seed).cloned();
        let source = cached.unwrap_or_else(|| train_cart(seed).0);

        let scratch = run_train(&config_for("pusher_slider", seed)).unwrap();
        let rows: Vec<MetricsRow> = scratch.warmup.metrics.iter().chain(&scratch.main.metrics).cloned().collect();
        let level = 0.5 * final_success(&scratch.main.metrics);
        let budget = scratch.main.checkpoint.counters.env_steps;

        let mut cfg = config_for("pusher_slider", seed);
        cfg.transfer.state_map = vec![0, 3];
        cfg.transfer.action_map = vec![0];
        let per_iter = (cfg.main.rollouts * target.spec.episode_steps) as u64;
        cfg.main.iterations = budget.div_ceil(per_iter) as usize;
        let transferred = run_transfer(&cfg, &source, &target).unwrap();

        levels.push(level);
        scratch_steps.push(steps_to_reach(&rows, level).map_or(f64::INFINITY, |s| s as f64));
        transfer_steps.push(steps_to_reach(&transferred.metrics, level).map_or(f64::INFINITY, |s| s as f64));
    }
    let (m_t, m_s) = (median(&transfer_steps), median(&scratch_steps));
    // A zero level is met by the first evaluation of either arm.
    let trivial = levels.iter().filter(|&&l| l == 0.0).count();
    outcome(
        m_t <= m_s,
        format!(
            "median env steps to half the scratch final success: transfer {m_t} vs scratch {m_s}; levels {levels:?} ({trivial} of {} zero), transfer {transfer_steps:?}, scratch {scratch_steps:?}",
            levels.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Reproducibility of the train command.

fn reproducible_train() -> Outcome {
    let text = "plant = cart_wall\nseed = 3\nwarmup.iterations = 4\nmain.iterations = 4\neval.every = 2\n";
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.out_dir = Some(d.path().to_path_buf());
        run_train(&cfg).unwrap();
    }
    let mut compared = vec![];
    let mut differing = vec![];
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") && !n.contains("timing"))
        .collect();
    names.sort();
    for name in &names {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap_or_default();
        if a != b {
            differing.push(name.clone());
        }
        compared.push(name.clone());
    }
    let pass = differing.is_empty() && compared.len() >= 3;
    outcome(
        pass,
        if differing.is_empty() {
            format!("byte-identical: {}", compared.join(", "))
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

/// Id, name, runtime limit in seconds, check.
type Criterion = (u32, &'static str, f64, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "LCP oracle equivalence", 10.0, lcp_oracle_equivalence),
    (2, "envelope gradient vs finite differences", 60.0, envelope_gradient),
    (3, "KKT sensitivity vs finite differences", 300.0, kkt_sensitivity_fd),
    (4, "PPO machinery exactness", 10.0, ppo_machinery),
    (5, "system identification on the synthetic plant", 600.0, synthetic_identification),
    (6, "warm-up+PPO vs warm-up only on cart_wall", 3600.0, ppo_vs_warmup_only),
    (7, "transfer cart_wall -> pusher_slider vs scratch", 5400.0, transfer_vs_scratch),
    (8, "byte-identical metrics across train runs", f64::INFINITY, reproducible_train),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for &(id, name, limit, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut out = run();
        let elapsed: Duration = start.elapsed();
        if elapsed.as_secs_f64() > limit {
            out.pass = false;
            out.detail = format!("{} (over the {limit:.0}s limit)", out.detail);
        }
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {name}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
