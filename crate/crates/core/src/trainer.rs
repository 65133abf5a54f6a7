//! Experiment orchestration: rollout collection, the warm-up (violation loss)
//! and main (PPO) phases, evaluation over fixed goal sets, transfer between
//! plants, checkpoints and metrics logs.
//!
//! Randomness is split into independent ChaCha streams keyed by
//! `(seed, domain, index)`. Every training episode draws from its own stream
//! indexed by the global episode counter, and evaluation goal `i` from stream
//! `i` of the evaluation seed, so a run is fully determined by its config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::{Env, EnvError, EnvState, PlantKind};
use crate::lcs::{lcs_step, LcsDims, LcsError, LcsParams, LEARNED_TOL};
use crate::learning::{init_params, loss_and_gradient, loss_over, DataBuffer, LearnError, TransitionTriple, ViolationConfig};
use crate::mpc::{MpcError, MpcProblem, MpcSolution};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::GaussianMpcPolicy;
use crate::rl::{
    combined_gradient, compute_advantages, discounted_returns, fit_value_function, mean_std, observation_len, ppo_gradient, PpoBatch, PpoConfig, RlError,
    Trajectory, UpdateMetrics, ValueFunction,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("rollout failed after {attempts} attempts: {reason}")]
    Rollout { attempts: usize, reason: String },
    #[error("model learning failed: {0}")]
    Learn(#[from] LearnError),
    #[error("planner setup failed: {0}")]
    Planner(#[from] MpcError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Lcs(#[from] LcsError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Process exit code: 2 for configuration problems, 3 for solver or
    /// rollout aborts, 4 for checkpoint version mismatches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Env(_) | Self::DimensionMismatch(_) => 2,
            Self::Rollout { .. } | Self::Learn(_) | Self::Planner(_) | Self::Lcs(_) | Self::Rl(_) => 3,
            Self::Checkpoint(CheckpointError::Version(_)) => 4,
            Self::Checkpoint(CheckpointError::Io(_)) | Self::Io(_) => 1,
            Self::Checkpoint(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupConfig {
    /// `M`: number of update iterations; `M + 1` collections are made.
    pub iterations: usize,
    /// `N`: rollouts per collection.
    pub rollouts: usize,
    /// `N_p`: gradient steps per iteration.
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Zero means unbounded.
    pub buffer_capacity: usize,
    pub violation: ViolationConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            iterations: 17,
            rollouts: 10,
            steps: 50,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            buffer_capacity: 0,
            violation: ViolationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainConfig {
    /// `K`: PPO iterations.
    pub iterations: usize,
    /// `N̄`: rollouts per iteration.
    pub rollouts: usize,
    /// `N̄_p`, `η̄`, `β`, `ε`, `γ` and the update optimizer.
    pub ppo: PpoConfig,
    pub value_epochs: usize,
    pub value_lr: f64,
    /// Epochs of regression on discounted Monte-Carlo returns of the first
    /// batch, run before its advantages are computed. 0 disables.
    pub value_init_epochs: usize,
}

impl Default for MainConfig {
    fn default() -> Self {
        Self {
            iterations: 72,
            rollouts: 10,
            ppo: PpoConfig {
                learning_rate: 1e-4,
                ..PpoConfig::default()
            },
            value_epochs: 300,
            value_lr: 3e-3,
            value_init_epochs: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferConfig {
    /// Reinitialize the value network instead of copying it.
    pub reset_value: bool,
    /// Copy the exploration noise level from the source.
    pub copy_log_std: bool,
    /// Target state index for each source state; leading indices if empty.
    pub state_map: Vec<usize>,
    /// Target action index for each source action; leading indices if empty.
    pub action_map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvOverrides {
    pub episode_steps: Option<usize>,
    pub planner_horizon: Option<usize>,
    pub sparse_penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    /// Seed of the ground-truth plant (synthetic plant only).
    pub plant_seed: u64,
    pub env: EnvOverrides,
    /// Contact dimension of the learned model; free of any plant truth.
    pub model_n_lambda: usize,
    pub warmup: WarmupConfig,
    pub main: MainConfig,
    pub transfer: TransferConfig,
    pub eval_goals: usize,
    /// Evaluate every this many iterations (0: only at phase ends).
    pub eval_every: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub max_retries: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantKind::CartWall,
            plant_seed: 0,
            env: EnvOverrides::default(),
            model_n_lambda: 2,
            warmup: WarmupConfig::default(),
            main: MainConfig::default(),
            transfer: TransferConfig::default(),
            eval_goals: 20,
            eval_every: 5,
            eval_seed: 1_000_003,
            seed: 0,
            max_retries: 3,
            out_dir: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| TrainError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_index_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "plant" => self.plant = v.parse()?,
            "plant_seed" => self.plant_seed = parse_value(key, v)?,
            "env.episode_steps" => self.env.episode_steps = Some(parse_value(key, v)?),
            "env.planner_horizon" => self.env.planner_horizon = Some(parse_value(key, v)?),
            "env.sparse_penalty" => self.env.sparse_penalty = Some(parse_value(key, v)?),
            "model.n_lambda" => self.model_n_lambda = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "max_retries" => self.max_retries = parse_value(key, v)?,
            "eval.goals" => self.eval_goals = parse_value(key, v)?,
            "eval.every" => self.eval_every = parse_value(key, v)?,
            "eval.seed" => self.eval_seed = parse_value(key, v)?,
            "warmup.iterations" => self.warmup.iterations = parse_value(key, v)?,
            "warmup.rollouts" => self.warmup.rollouts = parse_value(key, v)?,
            "warmup.steps" => self.warmup.steps = parse_value(key, v)?,
            "warmup.lr" => self.warmup.lr = parse_value(key, v)?,
            "warmup.optimizer" => self.warmup.optimizer = v.parse().map_err(TrainError::Config)?,
            "warmup.buffer_capacity" => self.warmup.buffer_capacity = parse_value(key, v)?,
            "violation.xi" => self.warmup.violation.xi = parse_value(key, v)?,
            "violation.gamma" => self.warmup.violation.gamma = parse_value(key, v)?,
            "violation.inner_tol" => self.warmup.violation.inner_tol = parse_value(key, v)?,
            "violation.inner_max_iters" => self.warmup.violation.inner_max_iters = parse_value(key, v)?,
            "violation.project" => self.warmup.violation.project = parse_value(key, v)?,
            "main.iterations" => self.main.iterations = parse_value(key, v)?,
            "main.rollouts" => self.main.rollouts = parse_value(key, v)?,
            "main.epochs" => self.main.ppo.epochs = parse_value(key, v)?,
            "main.lr" => self.main.ppo.learning_rate = parse_value(key, v)?,
            "main.optimizer" => self.main.ppo.optimizer = v.parse().map_err(TrainError::Config)?,
            "main.beta" => self.main.ppo.beta = parse_value(key, v)?,
            "main.epsilon" => self.main.ppo.epsilon = parse_value(key, v)?,
            "main.gamma" => self.main.ppo.gamma = parse_value(key, v)?,
            "main.normalize_advantages" => self.main.ppo.normalize_advantages = parse_value(key, v)?,
            "main.value_epochs" => self.main.value_epochs = parse_value(key, v)?,
            "main.value_lr" => self.main.value_lr = parse_value(key, v)?,
            "main.value_init_epochs" => self.main.value_init_epochs = parse_value(key, v)?,
            "transfer.reset_value" => self.transfer.reset_value = parse_value(key, v)?,
            "transfer.copy_log_std" => self.transfer.copy_log_std = parse_value(key, v)?,
            "transfer.state_map" => self.transfer.state_map = parse_index_list(key, v)?,
            "transfer.action_map" => self.transfer.action_map = parse_index_list(key, v)?,
            other => return Err(TrainError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.model_n_lambda == 0 {
            return bad("model.n_lambda must be at least 1".into());
        }
        if self.warmup.rollouts == 0 || self.main.rollouts == 0 {
            return bad("rollout counts must be at least 1".into());
        }
        if !(self.warmup.lr > 0.0) || !(self.main.value_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.warmup.violation.xi > 0.0 && self.warmup.violation.gamma > 0.0) {
            return bad("violation.xi and violation.gamma must be positive".into());
        }
        self.main.ppo.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.env.episode_steps == Some(0) || self.env.planner_horizon == Some(0) {
            return bad("episode length and planner horizon must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical `key = value` listing; parsing it gives back this config.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("plant", self.plant.to_string()),
            ("plant_seed", self.plant_seed.to_string()),
            ("model.n_lambda", self.model_n_lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("max_retries", self.max_retries.to_string()),
            ("eval.goals", self.eval_goals.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("warmup.iterations", self.warmup.iterations.to_string()),
            ("warmup.rollouts", self.warmup.rollouts.to_string()),
            ("warmup.steps", self.warmup.steps.to_string()),
            ("warmup.lr", format!("{:?}", self.warmup.lr)),
            ("warmup.optimizer", self.warmup.optimizer.to_string()),
            ("warmup.buffer_capacity", self.warmup.buffer_capacity.to_string()),
            ("violation.xi", format!("{:?}", self.warmup.violation.xi)),
            ("violation.gamma", format!("{:?}", self.warmup.violation.gamma)),
            ("violation.inner_tol", format!("{:?}", self.warmup.violation.inner_tol)),
            ("violation.inner_max_iters", self.warmup.violation.inner_max_iters.to_string()),
            ("violation.project", self.warmup.violation.project.to_string()),
            ("main.iterations", self.main.iterations.to_string()),
            ("main.rollouts", self.main.rollouts.to_string()),
            ("main.epochs", self.main.ppo.epochs.to_string()),
            ("main.lr", format!("{:?}", self.main.ppo.learning_rate)),
            ("main.optimizer", self.main.ppo.optimizer.to_string()),
            ("main.beta", format!("{:?}", self.main.ppo.beta)),
            ("main.epsilon", format!("{:?}", self.main.ppo.epsilon)),
            ("main.gamma", format!("{:?}", self.main.ppo.gamma)),
            ("main.normalize_advantages", self.main.ppo.normalize_advantages.to_string()),
            ("main.value_epochs", self.main.value_epochs.to_string()),
            ("main.value_lr", format!("{:?}", self.main.value_lr)),
            ("main.value_init_epochs", self.main.value_init_epochs.to_string()),
            ("transfer.reset_value", self.transfer.reset_value.to_string()),
            ("transfer.copy_log_std", self.transfer.copy_log_std.to_string()),
            ("transfer.state_map", join_indices(&self.transfer.state_map)),
            ("transfer.action_map", join_indices(&self.transfer.action_map)),
        ];
        if let Some(v) = self.env.episode_steps {
            kv.push(("env.episode_steps", v.to_string()));
        }
        if let Some(v) = self.env.planner_horizon {
            kv.push(("env.planner_horizon", v.to_string()));
        }
        if let Some(v) = self.env.sparse_penalty {
            kv.push(("env.sparse_penalty", format!("{v:?}")));
        }
        if let Some(p) = &self.out_dir {
            kv.push(("out_dir", p.display().to_string()));
        }
        let sorted: BTreeMap<&str, String> = kv.into_iter().collect();
        sorted.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical listing without the output directory.
    pub fn hash(&self) -> String {
        let cfg = Self {
            out_dir: None,
            ..self.clone()
        };
        hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
    }

    /// The configured plant with overrides applied.
    pub fn build_env(&self) -> Result<Env> {
        let mut env = Env::by_name(&self.plant.to_string(), self.plant_seed)?;
        if let Some(t) = self.env.episode_steps {
            env.spec.episode_steps = t;
        }
        if let Some(h) = self.env.planner_horizon {
            env.spec.planner_horizon = h;
        }
        if let Some(p) = self.env.sparse_penalty {
            env.spec.sparse_penalty = p;
        }
        env.spec.validate()?;
        Ok(env)
    }

    pub fn model_dims(&self, env: &Env) -> Result<LcsDims> {
        Ok(LcsDims::new(env.spec.n_x, env.spec.n_u, self.model_n_lambda)?)
    }
}

// ---------------------------------------------------------------------------
// Random streams

const DOMAIN_INIT: u64 = 0x494e_4954;
const DOMAIN_TRAIN: u64 = 0x5452_4149;
const DOMAIN_EVAL: u64 = 0x4556_414c;

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.rotate_left(32));
    rng.set_stream(index);
    rng
}

/// Stream of training episode `episode`.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    stream(seed, DOMAIN_TRAIN, episode)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_HEADER: &str = "LCSRL-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version line '{0}'")]
    Version(String),
    #[error("malformed checkpoint at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub warmup_iterations: u64,
    pub main_iterations: u64,
    /// Episodes collected for training, discarded ones included.
    pub episodes: u64,
    pub env_steps: u64,
}

/// Everything needed to resume or evaluate a policy. The random state is
/// `seed` plus `counters.episodes`, the index of the next episode stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LcsParams,
    pub log_std: DVector<f64>,
    pub value: ValueFunction,
    pub counters: Counters,
    pub seed: u64,
    pub config_hash: String,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_block(out: &mut String, label: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "block {label} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> std::result::Result<&'a str, CheckpointError> {
        match self.it.next() {
            Some((n, l)) => {
                self.line = n + 1;
                Ok(l)
            }
            None => Err(CheckpointError::Format {
                line: self.line + 1,
                msg: "unexpected end of file".into(),
            }),
        }
    }

    fn err(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> std::result::Result<Vec<&'a str>, CheckpointError> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected '{key}'")));
        }
        Ok(parts.collect())
    }

    fn num<T: FromStr>(&self, s: &str) -> std::result::Result<T, CheckpointError> {
        s.parse().map_err(|_| self.err(format!("bad number '{s}'")))
    }

    fn block(&mut self, label: &str, rows: usize, cols: usize) -> std::result::Result<DMatrix<f64>, CheckpointError> {
        let head = self.keyed("block")?;
        if head.len() != 3 || head[0] != label {
            return Err(self.err(format!("expected block {label}")));
        }
        let (r, c): (usize, usize) = (self.num(head[1])?, self.num(head[2])?);
        if (r, c) != (rows, cols) {
            return Err(self.err(format!("block {label} is {r}x{c}, expected {rows}x{cols}")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let l = self.next()?;
            let vals: Vec<&str> = l.split_whitespace().collect();
            if vals.len() != cols {
                return Err(self.err(format!("row of block {label} has {} entries, expected {cols}", vals.len())));
            }
            for (j, v) in vals.iter().enumerate() {
                m[(i, j)] = self.num(v)?;
            }
        }
        Ok(m)
    }
}

fn row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

impl Checkpoint {
    pub fn dims(&self) -> LcsDims {
        self.params.dims()
    }

    /// Text form: header, dims, provenance and counters, then labeled blocks
    /// in row-major order with 17 significant digits.
    pub fn to_text(&self) -> String {
        let d = self.dims();
        let c = &self.counters;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "dims {} {} {}", d.n_x, d.n_u, d.n_lambda);
        let _ = writeln!(out, "config_hash {}", if self.config_hash.is_empty() { "-" } else { &self.config_hash });
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(
            out,
            "counters {} {} {} {}",
            c.warmup_iterations, c.main_iterations, c.episodes, c.env_steps
        );
        let theta = self.params.to_vec();
        for b in d.blocks() {
            let m = DMatrix::from_row_slice(b.rows, b.cols, &theta[b.offset..b.offset + b.len()]);
            write_block(&mut out, b.label, &m);
        }
        write_block(&mut out, "log_std", &row(&self.log_std));
        let v = &self.value;
        let _ = writeln!(out, "value {} {}", v.n_in, u8::from(v.normalized));
        write_block(&mut out, "value.weights", &row(&DVector::from_column_slice(&v.weights)));
        write_block(&mut out, "value.input_mean", &row(&v.input_mean));
        write_block(&mut out, "value.input_std", &row(&v.input_std));
        write_block(&mut out, "value.output", &DMatrix::from_row_slice(1, 2, &[v.output_mean, v.output_std]));
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, CheckpointError> {
        let mut ls = Lines {
            it: text.lines().enumerate(),
            line: 0,
        };
        let head = ls.next()?;
        if head != CHECKPOINT_HEADER {
            if head.starts_with("LCSRL-CKPT ") {
                return Err(CheckpointError::Version(head.to_string()));
            }
            return Err(ls.err("not a checkpoint"));
        }
        let dims = ls.keyed("dims")?;
        if dims.len() != 3 {
            return Err(ls.err("dims needs three entries"));
        }
        let dims = LcsDims::new(ls.num(dims[0])?, ls.num(dims[1])?, ls.num(dims[2])?).map_err(|e| ls.err(e.to_string()))?;
        let hash = ls.keyed("config_hash")?;
        let config_hash = match hash.as_slice() {
            ["-"] => String::new(),
            [h] => h.to_string(),
            _ => return Err(ls.err("config_hash needs one entry")),
        };
        let seed = ls.keyed("seed")?;
        let seed: u64 = ls.num(seed.first().ok_or_else(|| ls.err("missing seed"))?)?;
        let c = ls.keyed("counters")?;
        if c.len() != 4 {
            return Err(ls.err("counters needs four entries"));
        }
        let counters = Counters {
            warmup_iterations: ls.num(c[0])?,
            main_iterations: ls.num(c[1])?,
            episodes: ls.num(c[2])?,
            env_steps: ls.num(c[3])?,
        };
        let mut theta = Vec::with_capacity(dims.param_count());
        for b in dims.blocks() {
            let m = ls.block(b.label, b.rows, b.cols)?;
            for i in 0..b.rows {
                for j in 0..b.cols {
                    theta.push(m[(i, j)]);
                }
            }
        }
        let params = LcsParams::from_slice(dims, &theta).map_err(|e| ls.err(e.to_string()))?;
        let log_std = ls.block("log_std", 1, dims.n_u)?.row(0).transpose();
        let v = ls.keyed("value")?;
        if v.len() != 2 {
            return Err(ls.err("value needs two entries"));
        }
        let n_in: usize = ls.num(v[0])?;
        let normalized = match v[1] {
            "0" => false,
            "1" => true,
            _ => return Err(ls.err("value normalization flag must be 0 or 1")),
        };
        let n_w = ValueFunction::weight_count(n_in);
        let weights = ls.block("value.weights", 1, n_w)?.as_slice().to_vec();
        let input_mean = ls.block("value.input_mean", 1, n_in)?.row(0).transpose();
        let input_std = ls.block("value.input_std", 1, n_in)?.row(0).transpose();
        let out = ls.block("value.output", 1, 2)?;
        if ls.next()? != "end" {
            return Err(ls.err("expected 'end'"));
        }
        Ok(Self {
            params,
            log_std,
            value: ValueFunction {
                n_in,
                weights,
                input_mean,
                input_std,
                output_mean: out[(0, 0)],
                output_std: out[(0, 1)],
                normalized,
            },
            counters,
            seed,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CheckpointError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Policy for `env` using these parameters.
    pub fn policy(&self, env: &Env) -> Result<GaussianMpcPolicy> {
        let mut policy = fresh_policy(&self.params, env, self.seed)?;
        let mut v = self.params.to_vec();
        v.extend(self.log_std.iter());
        policy.set_params_vec(&v)?;
        Ok(policy)
    }

    fn update_from(&mut self, policy: &GaussianMpcPolicy) {
        self.params = policy.mpc.params.clone();
        self.log_std = policy.log_std.clone();
    }
}

/// Planner policy with the initial noise level.
fn fresh_policy(params: &LcsParams, env: &Env, seed: u64) -> Result<GaussianMpcPolicy> {
    let d = params.dims();
    if d.n_x != env.spec.n_x || d.n_u != env.spec.n_u {
        return Err(TrainError::DimensionMismatch(format!(
            "model is {}x{}, plant {} is {}x{}",
            d.n_x, d.n_u, env.kind, env.spec.n_x, env.spec.n_u
        )));
    }
    let mpc = MpcProblem::new(
        params.clone(),
        env.spec.cost.clone(),
        env.spec.planner_horizon,
        env.spec.u_min.clone(),
        env.spec.u_max.clone(),
    )?;
    Ok(GaussianMpcPolicy::new(mpc, seed))
}

/// Fresh model, initial noise level and value network for `env`.
pub fn initial_checkpoint(cfg: &ExperimentConfig, env: &Env) -> Result<Checkpoint> {
    let dims = cfg.model_dims(env)?;
    let mut rng = stream(cfg.seed, DOMAIN_INIT, 0);
    let params = init_params(dims, &mut rng);
    let value = ValueFunction::new(observation_len(env.spec.n_x), &mut rng);
    let log_std = fresh_policy(&params, env, cfg.seed)?.log_std;
    Ok(Checkpoint {
        params,
        log_std,
        value,
        counters: Counters::default(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

// ---------------------------------------------------------------------------
// Rollouts

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Episodes consumed, discarded ones included.
    pub episodes: u64,
    pub env_steps: u64,
    pub discarded: usize,
    pub fallbacks: usize,
    pub invalid_sensitivities: usize,
}

impl RolloutBatch {
    pub fn transitions(&self) -> Vec<TransitionTriple> {
        self.trajectories.iter().flat_map(trajectory_transitions).collect()
    }

    pub fn mean_return(&self) -> f64 {
        mean_std(self.trajectories.iter().map(Trajectory::total_reward)).0
    }
}

pub fn trajectory_transitions(t: &Trajectory) -> Vec<TransitionTriple> {
    (0..t.len())
        .map(|k| TransitionTriple::new(t.states[k].clone(), t.actions[k].clone(), t.states[k + 1].clone()))
        .collect()
}

/// One episode with the stochastic policy. Planner solutions warm-start the
/// next step within the episode. With `with_sensitivity` the first-action
/// Jacobian is recorded for every converged plan.
pub fn run_episode(env: &Env, policy: &GaussianMpcPolicy, rng: &mut ChaCha8Rng, with_sensitivity: bool) -> Trajectory {
    let mut state = env.reset(rng);
    let t_max = env.spec.episode_steps;
    let mut traj = Trajectory {
        states: vec![state.x.clone()],
        actions: Vec::with_capacity(t_max),
        raw_actions: Vec::with_capacity(t_max),
        rewards: Vec::with_capacity(t_max),
        log_probs_old: Vec::with_capacity(t_max),
        means: Vec::with_capacity(t_max),
        jacobians: Vec::with_capacity(t_max),
        goal: state.goal_state.clone(),
        horizon: t_max,
        done: false,
        success: false,
        fallbacks: 0,
        invalid_sensitivities: 0,
    };
    let mut warm: Option<MpcSolution> = None;
    for _ in 0..t_max {
        let plan = policy.act_mean(&state.x, &state.goal_state, warm.as_ref());
        if plan.fallback {
            traj.fallbacks += 1;
        }
        let jac = if with_sensitivity {
            let sens = plan.solution.as_ref().map(|sol| policy.sensitivity(&state.goal_state, sol));
            match sens {
                Some(s) if s.valid => Some(s.jacobian),
                _ => {
                    traj.invalid_sensitivities += 1;
                    None
                }
            }
        } else {
            None
        };
        let sample = policy.sample_around(&plan.action, rng);
        let res = env.step(&state, &sample.action);
        traj.actions.push(sample.action);
        traj.raw_actions.push(sample.raw);
        traj.rewards.push(res.reward);
        traj.log_probs_old.push(sample.log_prob);
        traj.means.push(sample.mean);
        traj.jacobians.push(jac);
        traj.states.push(res.state.x.clone());
        warm = plan.solution.map(|s| s.shifted());
        state = res.state;
        if res.terminal {
            traj.success = res.success;
            break;
        }
    }
    traj.done = true;
    traj
}

fn episode_problem(t: &Trajectory) -> Option<String> {
    if t.states.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Some("non-finite state".into());
    }
    if t.rewards.iter().chain(&t.log_probs_old).any(|v| !v.is_finite()) {
        return Some("non-finite reward or log-probability".into());
    }
    None
}

/// Collects `count` episodes starting at episode index `first_episode`. A
/// failed episode is discarded and replaced by the next stream, at most
/// `max_retries` times per slot.
pub fn collect_rollouts(
    env: &Env,
    policy: &GaussianMpcPolicy,
    count: usize,
    seed: u64,
    first_episode: u64,
    with_sensitivity: bool,
    max_retries: usize,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch {
        trajectories: Vec::with_capacity(count),
        episodes: 0,
        env_steps: 0,
        discarded: 0,
        fallbacks: 0,
        invalid_sensitivities: 0,
    };
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            let mut rng = episode_rng(seed, first_episode + batch.episodes);
            let traj = run_episode(env, policy, &mut rng, with_sensitivity);
            attempts += 1;
            batch.episodes += 1;
            batch.env_steps += traj.len() as u64;
            match episode_problem(&traj) {
                None => {
                    batch.fallbacks += traj.fallbacks;
                    batch.invalid_sensitivities += traj.invalid_sensitivities;
                    batch.trajectories.push(traj);
                    break;
                }
                Some(reason) => {
                    log::warn!("episode {} discarded: {reason}", first_episode + batch.episodes - 1);
                    batch.discarded += 1;
                    if attempts > max_retries {
                        return Err(TrainError::Rollout { attempts, reason });
                    }
                }
            }
        }
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct GoalRecord {
    pub index: usize,
    pub goal: DVector<f64>,
    pub final_state: DVector<f64>,
    pub success: bool,
    pub total_reward: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub records: Vec<GoalRecord>,
}

impl EvalResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "goal_index,success,total_reward,fallbacks,goal,final_state")?;
        let join = |v: &DVector<f64>| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:e},{},{},{}",
                r.index,
                u8::from(r.success),
                r.total_reward,
                r.fallbacks,
                join(&r.goal),
                join(&r.final_state)
            )?;
        }
        Ok(())
    }
}

/// Rolls out the mean policy (no exploration noise) once per goal. Goal `i`
/// and its initial state come from stream `i` of `eval_seed`, so the goal set
/// does not depend on training progress.
pub fn evaluate(env: &Env, policy: &GaussianMpcPolicy, goal_count: usize, eval_seed: u64) -> EvalResult {
    let mut records = Vec::with_capacity(goal_count);
    for i in 0..goal_count {
        let mut rng = stream(eval_seed, DOMAIN_EVAL, i as u64);
        let mut state: EnvState = env.reset(&mut rng);
        let goal = state.goal.clone();
        let mut warm: Option<MpcSolution> = None;
        let mut total = 0.0;
        let mut fallbacks = 0;
        let mut success = false;
        for _ in 0..env.spec.episode_steps {
            let plan = policy.act_mean(&state.x, &state.goal_state, warm.as_ref());
            fallbacks += usize::from(plan.fallback);
            let res = env.step(&state, &plan.action);
            total += res.reward;
            warm = plan.solution.map(|s| s.shifted());
            state = res.state;
            if res.terminal {
                success = res.success;
                break;
            }
        }
        records.push(GoalRecord {
            index: i,
            goal,
            final_state: state.x,
            success,
            total_reward: total,
            fallbacks,
        });
    }
    let successes = records.iter().filter(|r| r.success).count();
    EvalResult {
        success_rate: if goal_count == 0 { 0.0 } else { successes as f64 / goal_count as f64 },
        records,
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, env: &Env, goal_count: usize, eval_seed: u64) -> Result<EvalResult> {
    Ok(evaluate(env, &ckpt.policy(env)?, goal_count, eval_seed))
}

/// Mean one-step prediction error `‖x̂' − x'‖` of a model on transitions;
/// infinite if some contact problem has no solution.
pub fn prediction_error(params: &LcsParams, data: &[TransitionTriple]) -> f64 {
    let mut total = 0.0;
    for t in data {
        match lcs_step(params, &t.x, &t.u, LEARNED_TOL) {
            Ok((x, _)) => total += (x - &t.x_next).norm(),
            Err(_) => return f64::INFINITY,
        }
    }
    total / data.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub phase: &'static str,
    pub iteration: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub data_minutes: f64,
    pub violation_loss: f64,
    pub mean_return: f64,
    pub eval_success: Option<f64>,
    pub fallbacks: usize,
    pub invalid_sensitivities: usize,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "phase,iteration,episodes,env_steps,data_minutes,violation_loss,mean_return,eval_success,fallbacks,invalid_sensitivities";

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{},{},{}",
            self.phase,
            self.iteration,
            self.episodes,
            self.env_steps,
            self.data_minutes,
            self.violation_loss,
            self.mean_return,
            self.eval_success.map(|s| format!("{s:e}")).unwrap_or_default(),
            self.fallbacks,
            self.invalid_sensitivities
        )
    }
}

/// Append-only CSV file with a fixed header, flushed after every row.
pub struct CsvLog {
    out: Option<BufWriter<File>>,
}

impl CsvLog {
    pub fn create(path: Option<PathBuf>, header: &str) -> std::io::Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{header}")?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn append(&mut self, line: &str) -> std::io::Result<()> {
        if let Some(w) = &mut self.out {
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Per-iteration rows of one phase, kept in memory and mirrored to
/// `<phase>_metrics.csv`. Wall-clock times go to `<phase>_timing.csv` so the
/// metrics file is reproducible byte for byte.
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    csv: CsvLog,
    timing: CsvLog,
}

impl MetricsLog {
    pub fn create(out_dir: Option<&Path>, phase: &str) -> std::io::Result<Self> {
        Ok(Self {
            rows: vec![],
            csv: CsvLog::create(out_dir.map(|d| d.join(format!("{phase}_metrics.csv"))), MetricsRow::CSV_HEADER)?,
            timing: CsvLog::create(out_dir.map(|d| d.join(format!("{phase}_timing.csv"))), "phase,iteration,wall_seconds")?,
        })
    }

    pub fn push(&mut self, row: MetricsRow, wall_seconds: f64) -> std::io::Result<()> {
        self.csv.append(&row.csv())?;
        self.timing.append(&format!("{},{},{:.3}", row.phase, row.iteration, wall_seconds))?;
        self.rows.push(row);
        Ok(())
    }
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Option<PathBuf> {
    cfg.out_dir.as_ref().map(|d| d.join(name))
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    if let Some(d) = &cfg.out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("config.txt"), cfg.to_text())?;
    }
    Ok(())
}

fn eval_due(cfg: &ExperimentConfig, iteration: usize, last: bool) -> bool {
    cfg.eval_goals > 0 && (last || (cfg.eval_every > 0 && iteration % cfg.eval_every == 0))
}

// ---------------------------------------------------------------------------
// Warm-up phase

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupIteration {
    pub iteration: usize,
    /// Loss on the buffer after this iteration's data was added.
    pub loss_before: f64,
    /// Loss after this iteration's updates (equal to `loss_before` on the
    /// final collection, which has no update).
    pub loss_after: f64,
}

pub struct WarmupOutcome {
    pub checkpoint: Checkpoint,
    pub buffer: DataBuffer,
    pub iterations: Vec<WarmupIteration>,
    pub metrics: Vec<MetricsRow>,
}

/// Violation-loss training. For `k = 0..=M`: collect `N` rollouts with the
/// current policy into the buffer, then (for `k < M`) take `N_p` gradient
/// steps on the loss over the whole buffer.
pub fn warmup_phase(
    cfg: &ExperimentConfig,
    env: &Env,
    ckpt: &mut Checkpoint,
    buffer: &mut DataBuffer,
    log: &mut MetricsLog,
) -> Result<Vec<WarmupIteration>> {
    let w = &cfg.warmup;
    let mut policy = ckpt.policy(env)?;
    let n_theta = policy.n_theta();
    let mut opt = Optimizer::new(w.optimizer, w.lr, n_theta);
    let mut out = Vec::with_capacity(w.iterations + 1);
    for k in 0..=w.iterations {
        let start = Instant::now();
        let batch = collect_rollouts(env, &policy, w.rollouts, cfg.seed, ckpt.counters.episodes, false, cfg.max_retries)?;
        ckpt.counters.episodes += batch.episodes;
        ckpt.counters.env_steps += batch.env_steps;
        buffer.extend(batch.transitions());
        w.violation.validate(&policy.mpc.params);
        let loss_before = loss_over(&policy.mpc.params, buffer.transitions(), &w.violation)?;
        let mut loss_after = loss_before;
        if k < w.iterations {
            let mut theta = policy.theta();
            for _ in 0..w.steps {
                let (_, grad) = loss_and_gradient(&policy.mpc.params, buffer.transitions(), &w.violation)?;
                opt.step(&mut theta, &grad);
                policy.set_theta(&theta)?;
                if w.violation.project {
                    let mut params = policy.mpc.params.clone();
                    if w.violation.project_gamma(&mut params) {
                        theta = params.to_vec();
                        policy.set_theta(&theta)?;
                    }
                }
            }
            loss_after = loss_over(&policy.mpc.params, buffer.transitions(), &w.violation)?;
            ckpt.counters.warmup_iterations += 1;
        }
        ckpt.update_from(&policy);
        let eval = eval_due(cfg, k, k == w.iterations).then(|| evaluate(env, &policy, cfg.eval_goals, cfg.eval_seed).success_rate);
        log::info!(
            "warmup {k}: loss {loss_before:.4e} -> {loss_after:.4e}, buffer {}, return {:.3}{}",
            buffer.len(),
            batch.mean_return(),
            eval.map(|s| format!(", success {s:.3}")).unwrap_or_default()
        );
        log.push(
            MetricsRow {
                phase: "warmup",
                iteration: k as u64,
                episodes: ckpt.counters.episodes,
                env_steps: ckpt.counters.env_steps,
                data_minutes: env.spec.data_minutes(ckpt.counters.env_steps as usize),
                violation_loss: loss_after,
                mean_return: batch.mean_return(),
                eval_success: eval,
                fallbacks: batch.fallbacks,
                invalid_sensitivities: 0,
            },
            start.elapsed().as_secs_f64(),
        )?;
        out.push(WarmupIteration {
            iteration: k,
            loss_before,
            loss_after,
        });
    }
    Ok(out)
}

/// Warm-up from a fresh initialization; writes `warmup_metrics.csv` and
/// `warmup.ckpt` when an output directory is configured.
pub fn run_warmup(cfg: &ExperimentConfig) -> Result<WarmupOutcome> {
    cfg.validate()?;
    prepare_out_dir(cfg)?;
    let env = cfg.build_env()?;
    let mut ckpt = initial_checkpoint(cfg, &env)?;
    let mut buffer = if cfg.warmup.buffer_capacity > 0 {
        DataBuffer::with_capacity(cfg.warmup.buffer_capacity)
    } else {
        DataBuffer::new()
    };
    let mut log = MetricsLog::create(cfg.out_dir.as_deref(), "warmup")?;
    let iterations = warmup_phase(cfg, &env, &mut ckpt, &mut buffer, &mut log)?;
    if let Some(p) = out_path(cfg, "warmup.ckpt") {
        ckpt.save(&p)?;
    }
    Ok(WarmupOutcome {
        checkpoint: ckpt,
        buffer,
        iterations,
        metrics: log.rows,
    })
}

// ---------------------------------------------------------------------------
// Main phase

pub struct MainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub updates: Vec<UpdateMetrics>,
}

/// PPO phase. Row 0 evaluates the starting parameters; each iteration then
/// empties the batch, collects `N̄` rollouts with sensitivities, computes
/// one-step advantages, takes `N̄_p` combined-gradient steps and refits the
/// value network. The violation term (`β < 1`) uses the handed-over buffer
/// plus the iteration's data.
pub fn main_phase(
    cfg: &ExperimentConfig,
    env: &Env,
    ckpt: &mut Checkpoint,
    retained: Option<&DataBuffer>,
    log: &mut MetricsLog,
    updates: &mut CsvLog,
) -> Result<Vec<UpdateMetrics>> {
    let m = &cfg.main;
    let mut policy = ckpt.policy(env)?;
    let n_theta = policy.n_theta();
    let mut opt = Optimizer::new(m.ppo.optimizer, m.ppo.learning_rate, policy.param_count());
    let mut update_rows = vec![];
    let ckpt_path = out_path(cfg, "main.ckpt");

    let start = Instant::now();
    let eval = (cfg.eval_goals > 0).then(|| evaluate(env, &policy, cfg.eval_goals, cfg.eval_seed).success_rate);
    log.push(
        MetricsRow {
            phase: "main",
            iteration: 0,
            episodes: ckpt.counters.episodes,
            env_steps: ckpt.counters.env_steps,
            data_minutes: env.spec.data_minutes(ckpt.counters.env_steps as usize),
            violation_loss: f64::NAN,
            mean_return: f64::NAN,
            eval_success: eval,
            fallbacks: 0,
            invalid_sensitivities: 0,
        },
        start.elapsed().as_secs_f64(),
    )?;

    for k in 1..=m.iterations {
        let start = Instant::now();
        let batch = collect_rollouts(env, &policy, m.rollouts, cfg.seed, ckpt.counters.episodes, true, cfg.max_retries)?;
        ckpt.counters.episodes += batch.episodes;
        ckpt.counters.env_steps += batch.env_steps;

        let states: Vec<DVector<f64>> = batch
            .trajectories
            .iter()
            .flat_map(|t| (0..t.len()).map(move |i| t.observation(i)))
            .collect();
        if k == 1 && m.value_init_epochs > 0 {
            let mc: Vec<f64> = batch.trajectories.iter().flat_map(|t| discounted_returns(t, m.ppo.gamma)).collect();
            let (vf, hist) = fit_value_function(&ckpt.value, &states, &mc, m.value_init_epochs, m.value_lr)?;
            log::debug!("value pre-fit: mse {:.3e} -> {:.3e}", hist[0], hist.last().unwrap_or(&f64::NAN));
            ckpt.value = vf;
        }

        let advs: Vec<_> = batch
            .trajectories
            .iter()
            .map(|t| compute_advantages(t, &ckpt.value, m.ppo.gamma))
            .collect();
        let raw_adv = mean_std(advs.iter().flat_map(|a| a.advantages.iter().copied()));
        let ppo_batch = PpoBatch::from_trajectories(&batch.trajectories, &advs, policy.theta(), m.ppo.normalize_advantages)?;

        let mut vio_data: Vec<TransitionTriple> = vec![];
        if m.ppo.beta < 1.0 {
            if let Some(b) = retained {
                vio_data.extend_from_slice(b.transitions());
            }
            vio_data.extend(batch.transitions());
        }

        let mut params = policy.params_vec();
        let mut first_norm = None;
        let mut clipped = 0.0;
        for _ in 0..m.ppo.epochs {
            let g = ppo_gradient(&ppo_batch, &params[..n_theta], &policy.log_std, m.ppo.epsilon)?;
            clipped = g.clipped_fraction;
            let grad = if m.ppo.beta < 1.0 {
                let (_, vio) = loss_and_gradient(&policy.mpc.params, &vio_data, &cfg.warmup.violation)?;
                combined_gradient(&g.gradient, &vio, m.ppo.beta)?
            } else {
                g.gradient
            };
            first_norm.get_or_insert(grad.iter().map(|v| v * v).sum::<f64>().sqrt());
            opt.step(&mut params, &grad);
            policy.set_params_vec(&params)?;
            if m.ppo.beta < 1.0 && cfg.warmup.violation.project {
                let mut model = policy.mpc.params.clone();
                if cfg.warmup.violation.project_gamma(&mut model) {
                    policy.set_theta(&model.to_vec())?;
                }
            }
            params = policy.params_vec();
        }

        let returns: Vec<f64> = advs.iter().flat_map(|a| a.returns.iter().copied()).collect();
        let (vf, hist) = fit_value_function(&ckpt.value, &states, &returns, m.value_epochs, m.value_lr)?;
        ckpt.value = vf;
        ckpt.update_from(&policy);
        ckpt.counters.main_iterations += 1;

        let vio_loss = loss_over(&policy.mpc.params, &batch.transitions(), &cfg.warmup.violation).unwrap_or(f64::NAN);
        let eval = eval_due(cfg, k, k == m.iterations).then(|| evaluate(env, &policy, cfg.eval_goals, cfg.eval_seed).success_rate);
        let upd = UpdateMetrics {
            iteration: k,
            advantage_mean: raw_adv.0,
            advantage_std: raw_adv.1,
            clipped_fraction: clipped,
            gradient_norm: first_norm.unwrap_or(0.0),
            value_loss: *hist.last().unwrap_or(&f64::NAN),
            invalid_sensitivities: batch.invalid_sensitivities,
        };
        let mut line = Vec::new();
        upd.write_row(&mut line)?;
        updates.append(String::from_utf8_lossy(&line).trim_end())?;
        log::info!(
            "main {k}: return {:.3}, clipped {:.2}, |g| {:.3e}, invalid {}{}",
            batch.mean_return(),
            clipped,
            upd.gradient_norm,
            batch.invalid_sensitivities,
            eval.map(|s| format!(", success {s:.3}")).unwrap_or_default()
        );
        log.push(
            MetricsRow {
                phase: "main",
                iteration: k as u64,
                episodes: ckpt.counters.episodes,
                env_steps: ckpt.counters.env_steps,
                data_minutes: env.spec.data_minutes(ckpt.counters.env_steps as usize),
                violation_loss: vio_loss,
                mean_return: batch.mean_return(),
                eval_success: eval,
                fallbacks: batch.fallbacks,
                invalid_sensitivities: batch.invalid_sensitivities,
            },
            start.elapsed().as_secs_f64(),
        )?;
        update_rows.push(upd);
        if let Some(p) = &ckpt_path {
            ckpt.save(p)?;
        }
    }
    Ok(update_rows)
}

/// Main phase from `start`. The warm-up buffer is only used when `β < 1`.
pub fn run_main(cfg: &ExperimentConfig, start: Checkpoint, buffer: Option<&DataBuffer>) -> Result<MainOutcome> {
    cfg.validate()?;
    prepare_out_dir(cfg)?;
    let env = cfg.build_env()?;
    run_main_on(cfg, &env, start, buffer)
}

fn run_main_on(cfg: &ExperimentConfig, env: &Env, start: Checkpoint, buffer: Option<&DataBuffer>) -> Result<MainOutcome> {
    let mut ckpt = start;
    let mut log = MetricsLog::create(cfg.out_dir.as_deref(), "main")?;
    let mut updates = CsvLog::create(out_path(cfg, "main_updates.csv"), UpdateMetrics::CSV_HEADER)?;
    let retained = if cfg.main.ppo.beta < 1.0 { buffer } else { None };
    let rows = main_phase(cfg, env, &mut ckpt, retained, &mut log, &mut updates)?;
    if let Some(p) = out_path(cfg, "main.ckpt") {
        ckpt.save(&p)?;
    }
    Ok(MainOutcome {
        checkpoint: ckpt,
        metrics: log.rows,
        updates: rows,
    })
}

pub struct TrainOutcome {
    pub warmup: WarmupOutcome,
    pub main: MainOutcome,
}

/// Warm-up followed by the main phase.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let warmup = run_warmup(cfg)?;
    let main = run_main(cfg, warmup.checkpoint.clone(), Some(&warmup.buffer))?;
    Ok(TrainOutcome { warmup, main })
}

// ---------------------------------------------------------------------------
// Transfer

fn index_map(given: &[usize], source: usize, target: usize, what: &str) -> Result<Vec<usize>> {
    let map: Vec<usize> = if given.is_empty() { (0..source).collect() } else { given.to_vec() };
    if map.len() != source {
        return Err(TrainError::DimensionMismatch(format!(
            "{what} map has {} entries for {source} source dimensions",
            map.len()
        )));
    }
    let mut seen = vec![false; target];
    for &i in &map {
        if i >= target || std::mem::replace(&mut seen[i], true) {
            return Err(TrainError::DimensionMismatch(format!(
                "{what} map {map:?} does not inject into {target} target dimensions"
            )));
        }
    }
    Ok(map)
}

/// Writes every source block into the corresponding rows and columns of
/// `base` under the state/action maps; contacts map to leading indices.
/// Entries with no source counterpart keep their `base` values.
pub fn embed_params(source: &LcsParams, base: &LcsParams, state_map: &[usize], action_map: &[usize]) -> Result<LcsParams> {
    let (s, t) = (source.dims(), base.dims());
    if s.n_lambda > t.n_lambda {
        return Err(TrainError::DimensionMismatch(format!(
            "source has {} contacts, target model {}",
            s.n_lambda, t.n_lambda
        )));
    }
    let xm = index_map(state_map, s.n_x, t.n_x, "state")?;
    let um = index_map(action_map, s.n_u, t.n_u, "action")?;
    let lm: Vec<usize> = (0..s.n_lambda).collect();
    let one = vec![0usize];
    let mut out = base.clone();
    let put = |dst: &mut DMatrix<f64>, src: &DMatrix<f64>, rows: &[usize], cols: &[usize]| {
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &cj) in cols.iter().enumerate() {
                dst[(ri, cj)] = src[(i, j)];
            }
        }
    };
    put(&mut out.a, &source.a, &xm, &xm);
    put(&mut out.b, &source.b, &xm, &um);
    put(&mut out.c, &source.c, &xm, &lm);
    put(&mut out.gap_x, &source.gap_x, &lm, &xm);
    put(&mut out.gap_u, &source.gap_u, &lm, &um);
    put(&mut out.gap_lambda, &source.gap_lambda, &lm, &lm);
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let mut d = col(&out.d);
    put(&mut d, &col(&source.d), &xm, &one);
    out.d = d.column(0).into_owned();
    let mut c = col(&out.gap_offset);
    put(&mut c, &col(&source.gap_offset), &lm, &one);
    out.gap_offset = c.column(0).into_owned();
    Ok(out)
}

/// Starting point on the target plant: a fresh initialization with the
/// source model embedded, the source noise level if requested, and the source
/// value network unless reset is requested or its input size differs.
pub fn transfer_checkpoint(cfg: &ExperimentConfig, source: &Checkpoint, target: &Env) -> Result<Checkpoint> {
    let mut ckpt = initial_checkpoint(cfg, target)?;
    let tr = &cfg.transfer;
    ckpt.params = embed_params(&source.params, &ckpt.params, &tr.state_map, &tr.action_map)?;
    if tr.copy_log_std {
        let um = index_map(&tr.action_map, source.dims().n_u, target.spec.n_u, "action")?;
        for (i, &j) in um.iter().enumerate() {
            ckpt.log_std[j] = source.log_std[i];
        }
    }
    if !tr.reset_value && source.value.n_in == ckpt.value.n_in {
        ckpt.value = source.value.clone();
    }
    // Re-apply the noise floor.
    ckpt.log_std = ckpt.policy(target)?.log_std;
    Ok(ckpt)
}

/// Main phase on `target` starting from a model trained elsewhere.
pub fn run_transfer(cfg: &ExperimentConfig, source: &Checkpoint, target: &Env) -> Result<MainOutcome> {
    cfg.validate()?;
    prepare_out_dir(cfg)?;
    let start = transfer_checkpoint(cfg, source, target)?;
    run_main_on(cfg, target, start, None)
}
