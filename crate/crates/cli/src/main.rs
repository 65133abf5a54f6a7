use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcsrl::envs::{Env, PlantKind};
use lcsrl::lcs::{lcp_enumerate_oracle, lcp_solve, LcpInstance, LcsDims, LcsParams};
use lcsrl::learning::{init_params, loss_and_gradient, loss_over, TransitionTriple, ViolationConfig};
use lcsrl::mpc::{kkt_sensitivity, solve_mpc, CostSpec, MpcProblem};
use lcsrl::rl::{ppo_loss, PpoSample};
use lcsrl::trainer::{
    evaluate_checkpoint, run_train, run_transfer, run_warmup, stream, Checkpoint, ExperimentConfig, TrainError,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "lcsrl", version, about = "Contact-model learning with an MPC policy: warm-up and PPO training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (`key = value` lines); defaults are used if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config plant.
    #[arg(long)]
    plant: Option<PlantKind>,
    /// Overrides the evaluation goal count.
    #[arg(long)]
    goals: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Violation-loss warm-up from a fresh model.
    Warmup(RunArgs),
    /// Warm-up followed by the PPO phase.
    Train(RunArgs),
    /// Evaluates a checkpoint with the mean policy on a fixed goal set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PPO phase on the configured plant starting from a checkpoint trained
    /// on another plant.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Open-loop simulation with uniformly random actions, as CSV.
    Sim {
        #[command(flatten)]
        run: RunArgs,
        /// Number of steps (default: the episode length).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Quick oracle comparisons of the solvers and gradients.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig, TrainError> {
    let mut cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(p) = run.plant {
        cfg.plant = p;
    }
    if let Some(g) = run.goals {
        cfg.eval_goals = g;
    }
    if run.out.is_some() {
        cfg.out_dir = run.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn last_success(rows: &[lcsrl::trainer::MetricsRow]) -> String {
    rows.iter()
        .rev()
        .find_map(|r| r.eval_success)
        .map(|s| format!("{s:.3}"))
        .unwrap_or_else(|| "n/a".into())
}

/// `Ok(false)` when a self-test check fails.
fn run(cli: Cli) -> Result<bool, TrainError> {
    match cli.command {
        Command::Warmup(run) => {
            let cfg = load_config(&run)?;
            let out = run_warmup(&cfg)?;
            let c = out.checkpoint.counters;
            println!(
                "warmup done: {} iterations, {} env steps, final violation loss {:.4e}, eval success {}",
                c.warmup_iterations,
                c.env_steps,
                out.iterations.last().map(|i| i.loss_after).unwrap_or(f64::NAN),
                last_success(&out.metrics)
            );
        }
        Command::Train(run) => {
            let cfg = load_config(&run)?;
            let out = run_train(&cfg)?;
            let c = out.main.checkpoint.counters;
            println!(
                "train done: {} warm-up + {} main iterations, {} env steps, eval success {} -> {}",
                c.warmup_iterations,
                c.main_iterations,
                c.env_steps,
                last_success(&out.warmup.metrics),
                last_success(&out.main.metrics)
            );
        }
        Command::Eval { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let env = cfg.build_env()?;
            let goals = cfg.eval_goals.max(1);
            let res = evaluate_checkpoint(&ckpt, &env, goals, cfg.eval_seed)?;
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                res.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join("eval.csv"))?))?;
            }
            println!("eval: {} goals on {}, success rate {:.4}", goals, env.kind, res.success_rate);
        }
        Command::Transfer { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let source = Checkpoint::load(&checkpoint)?;
            let target = cfg.build_env()?;
            let out = run_transfer(&cfg, &source, &target)?;
            println!(
                "transfer done: {} main iterations on {}, {} env steps, eval success {}",
                out.checkpoint.counters.main_iterations,
                target.kind,
                out.checkpoint.counters.env_steps,
                last_success(&out.metrics)
            );
        }
        Command::Sim { run, steps } => {
            let cfg = load_config(&run)?;
            let env = cfg.build_env()?;
            let steps = steps.unwrap_or(env.spec.episode_steps);
            let text = simulate(&env, cfg.seed, steps);
            match &cfg.out_dir {
                Some(p) => std::fs::write(p, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::Selftest { seed } => {
            return Ok(selftest(seed));
        }
    }
    Ok(true)
}

fn simulate(env: &Env, seed: u64, steps: usize) -> String {
    let mut rng = stream(seed, 0x5349_4d, 0);
    let mut state = env.reset(&mut rng);
    let (nx, nu) = (env.spec.n_x, env.spec.n_u);
    let mut cols = vec!["step".to_string()];
    cols.extend((0..nx).map(|i| format!("x{i}")));
    cols.extend((0..nu).map(|i| format!("u{i}")));
    cols.push("reward".into());
    let mut out = cols.join(",") + "\n";
    for t in 0..steps {
        let u = DVector::from_fn(nu, |i, _| rng.random_range(env.spec.u_min[i]..=env.spec.u_max[i]));
        let res = env.step(&state, &u);
        let mut row = vec![t.to_string()];
        row.extend(state.x.iter().map(|v| format!("{v:e}")));
        row.extend(u.iter().map(|v| format!("{v:e}")));
        row.push(format!("{:e}", res.reward));
        out += &(row.join(",") + "\n");
        state = res.state;
        if res.terminal && t + 1 < steps {
            state = env.reset_to(state.x.clone(), state.goal.clone());
        }
    }
    out
}

fn report(name: &str, pass: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
    pass
}

fn selftest(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = true;

    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for k in 0..200 {
        let n = 1 + k % 6;
        let p = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &p * p.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let inst = LcpInstance::new(m, q).expect("square instance");
        match lcp_solve(&inst, 1e-10) {
            Ok(sol) => {
                worst = worst.max(sol.residual());
                let oracle = lcp_enumerate_oracle(&inst, 1e-10).unwrap_or_default();
                if !oracle.iter().any(|o| (&o.lambda - &sol.lambda).amax() <= 1e-8) {
                    bad += 1;
                }
            }
            Err(_) => bad += 1,
        }
    }
    all &= report("lcp vs enumeration", bad == 0 && worst <= 1e-8, format!("200 instances, {bad} mismatches, residual {worst:.1e}"));

    let cfg = ViolationConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let dims = LcsDims::new(2, 1, 2).expect("valid dims");
        let mut params = init_params(dims, &mut rng);
        params.gap_lambda += DMatrix::identity(2, 2);
        let data: Vec<TransitionTriple> = (0..3)
            .map(|_| {
                let v = |rng: &mut ChaCha8Rng, n| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                TransitionTriple::new(v(&mut rng, 2), v(&mut rng, 1), v(&mut rng, 2))
            })
            .collect();
        let Ok((_, grad)) = loss_and_gradient(&params, &data, &cfg) else {
            worst = f64::INFINITY;
            continue;
        };
        let theta = params.to_vec();
        for j in 0..theta.len() {
            let at = |d: f64| {
                let mut t = theta.clone();
                t[j] += d;
                loss_over(&LcsParams::from_slice(dims, &t).expect("same length"), &data, &cfg).unwrap_or(f64::NAN)
            };
            let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
            if grad[j].abs() > 1e-6 {
                worst = worst.max((grad[j] - fd).abs() / grad[j].abs());
            }
        }
    }
    all &= report("violation gradient vs finite differences", worst <= 1e-4, format!("worst relative error {worst:.1e}"));

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..10 {
        let dims = LcsDims::new(2, 1, 1).expect("valid dims");
        let mut params = init_params(dims, &mut rng);
        params.gap_lambda += DMatrix::identity(1, 1);
        params.a *= 0.5;
        let cost = CostSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1) * 0.1,
            DMatrix::identity(2, 2) * 2.0,
            DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
        )
        .expect("valid cost");
        let prob = MpcProblem::new(params, cost, 3, DVector::from_element(1, -5.0), DVector::from_element(1, 5.0))
            .expect("valid problem");
        let x0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let Ok(sol) = solve_mpc(&prob, &x0, None) else { continue };
        let sens = kkt_sensitivity(&prob, &sol);
        if !sens.valid {
            continue;
        }
        let theta = prob.params.to_vec();
        let mut fd = DMatrix::zeros(1, theta.len());
        let mut ok = true;
        for j in 0..theta.len() {
            let at = |d: f64| {
                let mut p = prob.clone();
                let mut t = theta.clone();
                t[j] += d;
                p.params = LcsParams::from_slice(dims, &t).expect("same length");
                solve_mpc(&p, &x0, None).map(|s| s.controls[0][0])
            };
            match (at(1e-5), at(-1e-5)) {
                (Ok(a), Ok(b)) => fd[(0, j)] = (a - b) / 2e-5,
                _ => ok = false,
            }
        }
        if ok {
            checked += 1;
            worst = worst.max((&sens.jacobian - &fd).norm() / fd.norm().max(sens.jacobian.norm()).max(1e-12));
        }
    }
    all &= report(
        "planner sensitivity vs finite differences",
        checked > 0 && worst <= 1e-3,
        format!("{checked} instances, worst relative error {worst:.1e}"),
    );

    let advantages = [1.5, -0.5, 0.25];
    let samples: Vec<PpoSample> = advantages
        .iter()
        .map(|&a| PpoSample {
            raw_action: DVector::zeros(1),
            behavior_mean: DVector::zeros(1),
            jacobian: None,
            log_prob_old: -1.0,
            advantage: a,
        })
        .collect();
    let loss = ppo_loss(&samples, &[-1.0; 3], 0.2).unwrap_or(f64::NAN);
    let expected = -advantages.iter().sum::<f64>() / 3.0;
    all &= report("clipped loss at the behavior policy", loss == expected, format!("{loss} vs {expected}"));
    all
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
