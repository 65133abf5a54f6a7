//! PPO machinery: one-step bootstrapped advantages, the clipped surrogate and
//! its gradient through the planner sensitivities, and a small value network.
//!
//! Sensitivities are computed once per sample at collection time. During the
//! update epochs the mean under new parameters is taken to first order,
//! `μ(Θ) ≈ μ_b + J (Θ − Θ_b)`, so the surrogate and its gradient are exact
//! functions of `[Θ, log_std]` without re-solving the planner.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{gaussian_log_density, param_gradient};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("length mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no data")]
    EmptyData,
    #[error("invalid PPO configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, RlError>;

/// One on-policy episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states.
    pub states: Vec<DVector<f64>>,
    /// Clamped actions applied to the plant.
    pub actions: Vec<DVector<f64>>,
    /// Unclamped samples; the stored log-probabilities refer to these.
    pub raw_actions: Vec<DVector<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs_old: Vec<f64>,
    /// Planner mean at collection time.
    pub means: Vec<DVector<f64>>,
    /// `dμ/dΘ` at collection time, `None` when invalid or the planner fell back.
    pub jacobians: Vec<Option<DMatrix<f64>>>,
    /// Goal as a target state.
    pub goal: DVector<f64>,
    /// Episode length limit `T`.
    pub horizon: usize,
    pub done: bool,
    pub success: bool,
    pub fallbacks: usize,
    pub invalid_sensitivities: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Value-function input at step `t`.
    pub fn observation(&self, t: usize) -> DVector<f64> {
        observation(&self.states[t], &self.goal, t as f64 / self.horizon.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        let ok = self.states.len() == t + 1
            && self.raw_actions.len() == t
            && self.rewards.len() == t
            && self.log_probs_old.len() == t
            && self.means.len() == t
            && self.jacobians.len() == t;
        if !ok {
            return Err(RlError::DimensionMismatch("trajectory fields have inconsistent lengths".into()));
        }
        if self.log_probs_old.iter().any(|l| !l.is_finite()) {
            return Err(RlError::DimensionMismatch("non-finite behavior log-probability".into()));
        }
        Ok(())
    }
}

/// `[x; goal_state; t/T]`. Goals change between episodes and the return to
/// go of a fixed-length episode depends on the elapsed fraction, so the
/// baseline sees both alongside the state.
pub fn observation(x: &DVector<f64>, goal_state: &DVector<f64>, elapsed: f64) -> DVector<f64> {
    let n = x.len() + goal_state.len();
    let mut v = DVector::zeros(n + 1);
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), goal_state.len()).copy_from(goal_state);
    v[n] = elapsed;
    v
}

/// Length of [`observation`] for a plant with `n_x` states.
pub fn observation_len(n_x: usize) -> usize {
    2 * n_x + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRecord {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// `R_t = r_t + γ V(x_{t+1})`, `A_t = R_t − V(x_t)`. The last step bootstraps
/// from `V(x_T)` whether or not the episode finished. `V` is evaluated on
/// [`observation`]s.
pub fn compute_advantages(traj: &Trajectory, vf: &ValueFunction, gamma: f64) -> AdvantageRecord {
    let values: Vec<f64> = (0..traj.states.len()).map(|t| vf.evaluate(&traj.observation(t))).collect();
    let mut returns = Vec::with_capacity(traj.len());
    let mut advantages = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let r = traj.rewards[t] + gamma * values[t + 1];
        returns.push(r);
        advantages.push(r - values[t]);
    }
    AdvantageRecord { returns, advantages }
}

/// `G_t = Σ_{s≥t} γ^{s−t} r_s` to the end of the recorded episode.
pub fn discounted_returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for t in (0..traj.len()).rev() {
        acc = traj.rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub normalize_advantages: bool,
    pub optimizer: OptimizerKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            gamma: 0.99,
            beta: 1.0,
            epochs: 10,
            learning_rate: 1e-3,
            normalize_advantages: true,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(RlError::InvalidConfig(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RlError::InvalidConfig(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(RlError::InvalidConfig(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RlError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One transition as seen by the surrogate loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub raw_action: DVector<f64>,
    pub behavior_mean: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub log_prob_old: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub samples: Vec<PpoSample>,
    /// `Θ` the samples were collected with.
    pub theta_behavior: Vec<f64>,
}

impl PpoBatch {
    /// Flattens trajectories and their advantages. With `normalize` the
    /// advantages are shifted and scaled once here, before any clipping case
    /// is evaluated.
    pub fn from_trajectories(
        trajs: &[Trajectory],
        advs: &[AdvantageRecord],
        theta_behavior: Vec<f64>,
        normalize: bool,
    ) -> Result<Self> {
        if trajs.len() != advs.len() {
            return Err(RlError::DimensionMismatch("one advantage record per trajectory".into()));
        }
        let mut samples = Vec::new();
        for (tr, ad) in trajs.iter().zip(advs) {
            tr.validate()?;
            if ad.advantages.len() != tr.len() {
                return Err(RlError::DimensionMismatch("advantage count differs from trajectory length".into()));
            }
            for t in 0..tr.len() {
                samples.push(PpoSample {
                    raw_action: tr.raw_actions[t].clone(),
                    behavior_mean: tr.means[t].clone(),
                    jacobian: tr.jacobians[t].clone(),
                    log_prob_old: tr.log_probs_old[t],
                    advantage: ad.advantages[t],
                });
            }
        }
        if samples.is_empty() {
            return Err(RlError::EmptyData);
        }
        if normalize {
            let (mean, std) = mean_std(samples.iter().map(|s| s.advantage));
            for s in &mut samples {
                s.advantage = (s.advantage - mean) / (std + 1e-8);
            }
        }
        Ok(Self { samples, theta_behavior })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of a sample under `Θ`, to first order around the behavior `Θ`.
    pub fn mean_at(&self, sample: &PpoSample, theta: &[f64]) -> DVector<f64> {
        match &sample.jacobian {
            Some(j) => {
                let delta = DVector::from_fn(theta.len(), |i, _| theta[i] - self.theta_behavior[i]);
                &sample.behavior_mean + j * delta
            }
            None => sample.behavior_mean.clone(),
        }
    }

    pub fn new_log_probs(&self, theta: &[f64], log_std: &DVector<f64>) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| gaussian_log_density(&self.mean_at(s, theta), log_std, &s.raw_action))
            .collect()
    }
}

/// Population mean and standard deviation.
pub fn mean_std<I: IntoIterator<Item = f64>>(values: I) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `min(h, 1+ε)·A` for `A ≥ 0`, `max(h, 1−ε)·A` for `A < 0`.
pub fn clipped_term(h: f64, advantage: f64, epsilon: f64) -> f64 {
    if advantage >= 0.0 {
        h.min(1.0 + epsilon) * advantage
    } else {
        h.max(1.0 - epsilon) * advantage
    }
}

/// True when the clipped term does not depend on `h` locally.
pub fn is_zero_gradient_case(h: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage < 0.0 && h < 1.0 - epsilon) || (advantage >= 0.0 && h > 1.0 + epsilon)
}

/// Negative mean of the clipped terms.
pub fn ppo_loss(samples: &[PpoSample], new_log_probs: &[f64], epsilon: f64) -> Result<f64> {
    if samples.len() != new_log_probs.len() {
        return Err(RlError::DimensionMismatch("one log-probability per sample".into()));
    }
    if samples.is_empty() {
        return Err(RlError::EmptyData);
    }
    let total: f64 = samples
        .iter()
        .zip(new_log_probs)
        .map(|(s, lp)| clipped_term((lp - s.log_prob_old).exp(), s.advantage, epsilon))
        .sum();
    Ok(-total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoGradient {
    /// Descent direction of [`ppo_loss`] over `[Θ, log_std]`.
    pub gradient: Vec<f64>,
    pub loss: f64,
    /// Fraction of samples in a zero-gradient clipping case.
    pub clipped_fraction: f64,
    /// Samples whose `Θ` contribution was dropped for lack of a sensitivity.
    pub invalid_sensitivities: usize,
}

/// Gradient of [`ppo_loss`] at `[theta, log_std]`: samples in a clipped case
/// contribute nothing, the rest contribute `−A h ∇ log π / N`.
pub fn ppo_gradient(batch: &PpoBatch, theta: &[f64], log_std: &DVector<f64>, epsilon: f64) -> Result<PpoGradient> {
    if batch.is_empty() {
        return Err(RlError::EmptyData);
    }
    if theta.len() != batch.theta_behavior.len() {
        return Err(RlError::DimensionMismatch("parameter vector does not match the batch".into()));
    }
    let n_theta = theta.len();
    let n = batch.len() as f64;
    let mut gradient = vec![0.0; n_theta + log_std.len()];
    let mut total = 0.0;
    let mut clipped = 0usize;
    let mut invalid = 0usize;
    for s in &batch.samples {
        let mean = batch.mean_at(s, theta);
        let lp = gaussian_log_density(&mean, log_std, &s.raw_action);
        let h = (lp - s.log_prob_old).exp();
        total += clipped_term(h, s.advantage, epsilon);
        if s.jacobian.is_none() {
            invalid += 1;
        }
        if is_zero_gradient_case(h, s.advantage, epsilon) {
            clipped += 1;
            continue;
        }
        let g = param_gradient(&mean, log_std, &s.raw_action, s.jacobian.as_ref(), n_theta);
        let w = -s.advantage * h / n;
        for (acc, gi) in gradient.iter_mut().zip(&g.gradient) {
            *acc += w * gi;
        }
    }
    Ok(PpoGradient {
        gradient,
        loss: -total / n,
        clipped_fraction: clipped as f64 / n,
        invalid_sensitivities: invalid,
    })
}

/// `β ∇L_PPO + (1 − β) ∇L_vio`; the violation gradient may omit the trailing
/// `log_std` block, which is then taken as zero.
pub fn combined_gradient(ppo_grad: &[f64], vio_grad: &[f64], beta: f64) -> Result<Vec<f64>> {
    if vio_grad.len() > ppo_grad.len() {
        return Err(RlError::DimensionMismatch(format!(
            "violation gradient has {} entries, PPO gradient {}",
            vio_grad.len(),
            ppo_grad.len()
        )));
    }
    Ok(ppo_grad
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let v = vio_grad.get(i).copied().unwrap_or(0.0);
            beta * p + (1.0 - beta) * v
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Value function

pub const VALUE_HIDDEN: usize = 64;

/// Two tanh hidden layers and a linear output, with inputs standardized and
/// the output rescaled by statistics fixed at the first fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub n_in: usize,
    /// `W1 (64×n), b1, W2 (64×64), b2, w3 (64), b3`, row-major.
    pub weights: Vec<f64>,
    pub input_mean: DVector<f64>,
    pub input_std: DVector<f64>,
    pub output_mean: f64,
    pub output_std: f64,
    /// Whether the normalization statistics have been set from data.
    pub normalized: bool,
}

struct Forward {
    input: DVector<f64>,
    h1: DVector<f64>,
    h2: DVector<f64>,
    out: f64,
}

impl ValueFunction {
    pub fn weight_count(n_in: usize) -> usize {
        let h = VALUE_HIDDEN;
        h * n_in + h + h * h + h + h + 1
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(n_in: usize, rng: &mut R) -> Self {
        let h = VALUE_HIDDEN;
        let mut weights = Vec::with_capacity(Self::weight_count(n_in));
        let mut layer = |rows: usize, cols: usize, w: &mut Vec<f64>| {
            let lim = (6.0 / (rows + cols) as f64).sqrt();
            for _ in 0..rows * cols {
                w.push(rng.random_range(-lim..lim));
            }
            w.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(h, n_in, &mut weights);
        layer(h, h, &mut weights);
        layer(1, h, &mut weights);
        Self {
            n_in,
            weights,
            input_mean: DVector::zeros(n_in),
            input_std: DVector::from_element(n_in, 1.0),
            output_mean: 0.0,
            output_std: 1.0,
            normalized: false,
        }
    }

    fn views(&self, w: &[f64]) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
        let (h, n) = (VALUE_HIDDEN, self.n_in);
        let mut o = 0;
        let mut take = |len: usize| {
            let s = &w[o..o + len];
            o += len;
            s
        };
        let w1 = DMatrix::from_row_slice(h, n, take(h * n));
        let b1 = DVector::from_column_slice(take(h));
        let w2 = DMatrix::from_row_slice(h, h, take(h * h));
        let b2 = DVector::from_column_slice(take(h));
        let w3 = DVector::from_column_slice(take(h));
        let b3 = take(1)[0];
        (w1, b1, w2, b2, w3, b3)
    }

    fn forward(&self, w: &[f64], x: &DVector<f64>) -> Forward {
        let (w1, b1, w2, b2, w3, b3) = self.views(w);
        let input = (x - &self.input_mean).component_div(&self.input_std);
        let h1 = (w1 * &input + b1).map(f64::tanh);
        let h2 = (w2 * &h1 + b2).map(f64::tanh);
        let out = w3.dot(&h2) + b3;
        Forward { input, h1, h2, out }
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        self.output_mean + self.output_std * self.forward(&self.weights, x).out
    }

    /// Mean squared error on `(x, target)` pairs.
    pub fn mse(&self, xs: &[DVector<f64>], targets: &[f64]) -> f64 {
        Self::mse_with(self, &self.weights, xs, targets)
    }

    fn mse_with(&self, w: &[f64], xs: &[DVector<f64>], targets: &[f64]) -> f64 {
        let n = xs.len().max(1) as f64;
        xs.iter()
            .zip(targets)
            .map(|(x, t)| {
                let e = self.output_mean + self.output_std * self.forward(w, x).out - t;
                e * e
            })
            .sum::<f64>()
            / n
    }

    /// Gradient of the normalized-output MSE `mean((f(x) − (t − m)/s)²)`
    /// with respect to the weights.
    fn normalized_gradient(&self, xs: &[DVector<f64>], targets: &[f64]) -> Vec<f64> {
        let (h, n_in) = (VALUE_HIDDEN, self.n_in);
        let (_, _, w2, _, w3, _) = self.views(&self.weights);
        let mut g = vec![0.0; self.weights.len()];
        let n = xs.len() as f64;
        let o_w1 = 0;
        let o_b1 = h * n_in;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h * h;
        let o_w3 = o_b2 + h;
        let o_b3 = o_w3 + h;
        for (x, t) in xs.iter().zip(targets) {
            let f = self.forward(&self.weights, x);
            let target = (t - self.output_mean) / self.output_std;
            let d_out = 2.0 * (f.out - target) / n;
            g[o_b3] += d_out;
            for i in 0..h {
                g[o_w3 + i] += d_out * f.h2[i];
            }
            let d_h2 = DVector::from_fn(h, |i, _| d_out * w3[i] * (1.0 - f.h2[i] * f.h2[i]));
            for i in 0..h {
                g[o_b2 + i] += d_h2[i];
                for j in 0..h {
                    g[o_w2 + i * h + j] += d_h2[i] * f.h1[j];
                }
            }
            let back = w2.tr_mul(&d_h2);
            let d_h1 = DVector::from_fn(h, |i, _| back[i] * (1.0 - f.h1[i] * f.h1[i]));
            for i in 0..h {
                g[o_b1 + i] += d_h1[i];
                for j in 0..n_in {
                    g[o_w1 + i * n_in + j] += d_h1[i] * f.input[j];
                }
            }
        }
        g
    }

    fn set_normalization(&mut self, xs: &[DVector<f64>], targets: &[f64]) {
        let n = xs.len() as f64;
        let mut mean = DVector::zeros(self.n_in);
        for x in xs {
            mean += x;
        }
        mean /= n;
        let mut var = DVector::zeros(self.n_in);
        for x in xs {
            let d = x - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        self.input_mean = mean;
        self.input_std = var.map(|v| v.sqrt().max(1e-6));
        let (m, s) = mean_std(targets.iter().copied());
        self.output_mean = m;
        self.output_std = s.max(1.0);
        self.normalized = true;
    }
}

/// Full-batch regression of `vf` onto `(x_t, R_t)` with Adam directions. A
/// step that would increase the training error is halved until it does not
/// (up to 30 times, then skipped), so the error never increases. Returns the
/// fitted network and the training error after every epoch (entry 0 is the
/// starting error).
pub fn fit_value_function(
    vf: &ValueFunction,
    states: &[DVector<f64>],
    returns: &[f64],
    epochs: usize,
    lr: f64,
) -> Result<(ValueFunction, Vec<f64>)> {
    if states.len() != returns.len() {
        return Err(RlError::DimensionMismatch("one return per state".into()));
    }
    if states.is_empty() {
        return Err(RlError::EmptyData);
    }
    let mut vf = vf.clone();
    if epochs == 0 {
        let e = vf.mse(states, returns);
        return Ok((vf, vec![e]));
    }
    if !vf.normalized {
        vf.set_normalization(states, returns);
    }
    let mut history = vec![vf.mse(states, returns)];
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, vf.weights.len());
    let mut current = history[0];
    for _ in 0..epochs {
        let g = vf.normalized_gradient(states, returns);
        let mut proposal = vf.weights.clone();
        opt.step(&mut proposal, &g);
        let dir: Vec<f64> = proposal.iter().zip(&vf.weights).map(|(p, w)| p - w).collect();
        let mut scale = 1.0;
        for _ in 0..30 {
            let cand: Vec<f64> = vf.weights.iter().zip(&dir).map(|(w, d)| w + scale * d).collect();
            let e = vf.mse_with(&cand, states, returns);
            if e <= current {
                vf.weights = cand;
                current = e;
                break;
            }
            scale *= 0.5;
        }
        history.push(current);
    }
    Ok((vf, history))
}

// ---------------------------------------------------------------------------
// Per-update metrics

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub iteration: usize,
    pub advantage_mean: f64,
    pub advantage_std: f64,
    pub clipped_fraction: f64,
    pub gradient_norm: f64,
    pub value_loss: f64,
    pub invalid_sensitivities: usize,
}

impl UpdateMetrics {
    pub const CSV_HEADER: &'static str =
        "iteration,advantage_mean,advantage_std,clipped_fraction,gradient_norm,value_loss,invalid_sensitivities";

    pub fn write_row<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.iteration,
            self.advantage_mean,
            self.advantage_std,
            self.clipped_fraction,
            self.gradient_norm,
            self.value_loss,
            self.invalid_sensitivities
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj_from(states: Vec<f64>, rewards: Vec<f64>) -> Trajectory {
        let t = rewards.len();
        Trajectory {
            states: states.into_iter().map(|s| dvector![s]).collect(),
            actions: vec![dvector![0.0]; t],
            raw_actions: vec![dvector![0.0]; t],
            rewards,
            log_probs_old: vec![0.0; t],
            means: vec![dvector![0.0]; t],
            jacobians: vec![None; t],
            goal: dvector![0.0],
            horizon: t,
            done: true,
            success: false,
            fallbacks: 0,
            invalid_sensitivities: 0,
        }
    }

    fn zero_vf(n: usize) -> ValueFunction {
        let mut vf = ValueFunction::new(n, &mut ChaCha8Rng::seed_from_u64(0));
        vf.weights.iter_mut().for_each(|w| *w = 0.0);
        vf
    }

    #[test]
    fn advantages_bootstrap_one_step() {
        let tr = traj_from(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -2.0, 0.5]);
        let rec = compute_advantages(&tr, &zero_vf(3), 0.9);
        assert_eq!(rec.advantages, vec![1.0, -2.0, 0.5]);
        assert_eq!(rec.returns, rec.advantages);

        let vf = ValueFunction::new(3, &mut ChaCha8Rng::seed_from_u64(2));
        let rec = compute_advantages(&tr, &vf, 0.0);
        for t in 0..3 {
            assert_eq!(rec.advantages[t], tr.rewards[t] - vf.evaluate(&dvector![tr.states[t][0], 0.0, t as f64 / 3.0]));
        }
        let gamma = 0.97;
        let v = |i: usize| vf.evaluate(&dvector![tr.states[i][0], 0.0, i as f64 / 3.0]);
        let rec = compute_advantages(&tr, &vf, gamma);
        for t in 0..3 {
            let r = tr.rewards[t] + gamma * v(t + 1);
            assert!((rec.returns[t] - r).abs() <= 1e-15);
            assert!((rec.advantages[t] - (r - v(t))).abs() <= 1e-15);
        }
        let mut truncated = tr.clone();
        truncated.done = false;
        assert_eq!(compute_advantages(&truncated, &vf, gamma), rec);
    }

    #[test]
    fn discounted_returns_accumulate_backwards() {
        let tr = traj_from(vec![0.0; 4], vec![1.0, 2.0, 4.0]);
        assert_eq!(discounted_returns(&tr, 0.5), vec![1.0 + 0.5 * 2.0 + 0.25 * 4.0, 2.0 + 0.5 * 4.0, 4.0]);
    }

    fn sample(adv: f64, old: f64) -> PpoSample {
        PpoSample {
            raw_action: dvector![0.0],
            behavior_mean: dvector![0.0],
            jacobian: None,
            log_prob_old: old,
            advantage: adv,
        }
    }

    #[test]
    fn surrogate_arithmetic() {
        let s = vec![sample(2.0, 0.0)];
        assert!((ppo_loss(&s, &[1.5f64.ln()], 0.2).unwrap() + 2.4).abs() < 1e-12);
        let s = vec![sample(-1.0, 0.0)];
        assert!((ppo_loss(&s, &[0.5f64.ln()], 0.2).unwrap() - 0.8).abs() < 1e-12);
        let s: Vec<PpoSample> = [1.0, -3.0, 0.5].iter().map(|&a| sample(a, -0.3)).collect();
        let loss = ppo_loss(&s, &[-0.3; 3], 0.2).unwrap();
        assert_eq!(loss, -(1.0 - 3.0 + 0.5) / 3.0);
    }

    #[test]
    fn clipped_term_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let h: f64 = rng.random_range(0.0..3.0);
            let a: f64 = rng.random_range(-2.0..2.0);
            let e = 0.2;
            let v = clipped_term(h, a, e);
            let other = if a >= 0.0 { (1.0 + e) * a } else { (1.0 - e) * a };
            assert!(v >= (h * a).min(other) - 1e-15 && v <= (h * a).max(other) + 1e-15);
        }
    }

    fn batch_with_jacobian(rng: &mut ChaCha8Rng, n_theta: usize, n: usize) -> PpoBatch {
        let samples = (0..n)
            .map(|_| {
                let mean = dvector![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let raw = &mean + dvector![rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                PpoSample {
                    log_prob_old: gaussian_log_density(&mean, &dvector![-1.0, -1.2], &raw),
                    raw_action: raw,
                    behavior_mean: mean,
                    jacobian: Some(DMatrix::from_fn(2, n_theta, |_, _| rng.random_range(-1.0..1.0))),
                    advantage: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        PpoBatch {
            samples,
            theta_behavior: (0..n_theta).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn loss_at(batch: &PpoBatch, v: &[f64], n_theta: usize) -> f64 {
        let ls = DVector::from_column_slice(&v[n_theta..]);
        ppo_loss(&batch.samples, &batch.new_log_probs(&v[..n_theta], &ls), 0.2).unwrap()
    }

    #[test]
    fn gradient_matches_fd_of_the_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_theta = 5;
        let batch = batch_with_jacobian(&mut rng, n_theta, 6);
        // Move away from the behavior point so that some ratios differ from 1
        // but stay inside the trust region.
        let mut v: Vec<f64> = batch.theta_behavior.iter().map(|t| t + 0.01).collect();
        v.extend([-0.98, -1.21]);
        let ls = DVector::from_column_slice(&v[n_theta..]);
        let g = ppo_gradient(&batch, &v[..n_theta], &ls, 0.2).unwrap();
        assert!((g.loss - loss_at(&batch, &v, n_theta)).abs() < 1e-15);
        let h = 1e-6;
        for j in 0..v.len() {
            let mut p = v.clone();
            p[j] += h;
            let mut m = v.clone();
            m[j] -= h;
            let fd = (loss_at(&batch, &p, n_theta) - loss_at(&batch, &m, n_theta)) / (2.0 * h);
            assert!((fd - g.gradient[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "{j}: {fd} vs {}", g.gradient[j]);
        }
    }

    #[test]
    fn clipped_side_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_theta = 3;
        let mut batch = batch_with_jacobian(&mut rng, n_theta, 4);
        let ls = dvector![-1.0, -1.2];
        // Pick old log-probabilities so that every ratio sits beyond the clip
        // on the side matching its advantage sign.
        let theta = batch.theta_behavior.clone();
        let lps = batch.new_log_probs(&theta, &ls);
        for (s, lp) in batch.samples.iter_mut().zip(lps) {
            s.log_prob_old = if s.advantage >= 0.0 { lp - 0.5 } else { lp + 0.5 };
        }
        let g = ppo_gradient(&batch, &theta, &ls, 0.2).unwrap();
        assert!(g.gradient.iter().all(|&v| v == 0.0));
        assert_eq!(g.clipped_fraction, 1.0);
    }

    #[test]
    fn combined_gradient_weights() {
        let p = [1.0, 2.0, 3.0];
        let v = [5.0, -1.0];
        assert_eq!(combined_gradient(&p, &v, 1.0).unwrap(), p.to_vec());
        assert_eq!(combined_gradient(&p, &v, 0.0).unwrap(), vec![5.0, -1.0, 0.0]);
        assert_eq!(combined_gradient(&p, &v, 0.5).unwrap(), vec![3.0, 0.5, 1.5]);
        assert!(combined_gradient(&v, &p, 0.5).is_err());
    }

    #[test]
    fn normalization_happens_before_case_selection() {
        let tr = traj_from(vec![0.0; 4], vec![1.0, 2.0, 3.0]);
        let adv = AdvantageRecord {
            returns: vec![0.0; 3],
            advantages: vec![1.0, 2.0, 3.0],
        };
        let b = PpoBatch::from_trajectories(&[tr], &[adv], vec![], true).unwrap();
        let a: Vec<f64> = b.samples.iter().map(|s| s.advantage).collect();
        assert!(a[0] < 0.0 && a[1].abs() < 1e-12 && a[2] > 0.0);
    }

    #[test]
    fn value_fit_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<DVector<f64>> = (0..40).map(|_| dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let vf = ValueFunction::new(2, &mut rng);

        let (same, _) = fit_value_function(&vf, &xs, &vec![5.0; 40], 0, 1e-3).unwrap();
        assert_eq!(same, vf);

        let (fit, hist) = fit_value_function(&vf, &xs, &vec![5.0; 40], 300, 1e-3).unwrap();
        assert!(xs.iter().all(|x| (fit.evaluate(x) - 5.0).abs() < 0.1));
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));

        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x[0] - x[1] * x[1] - 20.0).collect();
        let (fit, hist) = fit_value_function(&vf, &xs, &ys, 300, 1e-3).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
        assert!(hist.last().unwrap() < &(0.05 * hist[0]));
        assert!(fit.mse(&xs, &ys) == *hist.last().unwrap());

        let xs2: Vec<DVector<f64>> = xs.iter().chain(xs.iter()).cloned().collect();
        let ys2: Vec<f64> = ys.iter().chain(ys.iter()).copied().collect();
        let (fit2, _) = fit_value_function(&vf, &xs2, &ys2, 50, 1e-3).unwrap();
        let (fit1, _) = fit_value_function(&vf, &xs, &ys, 50, 1e-3).unwrap();
        for x in &xs {
            assert!((fit1.evaluate(x) - fit2.evaluate(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn metrics_row_has_header_arity() {
        let m = UpdateMetrics {
            iteration: 3,
            advantage_mean: 0.0,
            advantage_std: 1.0,
            clipped_fraction: 0.25,
            gradient_norm: 2.0,
            value_loss: 0.5,
            invalid_sensitivities: 1,
        };
        let mut buf = Vec::new();
        m.write_row(&mut buf).unwrap();
        let row = String::from_utf8(buf).unwrap();
        assert_eq!(row.trim().split(',').count(), UpdateMetrics::CSV_HEADER.split(',').count());
    }
}
