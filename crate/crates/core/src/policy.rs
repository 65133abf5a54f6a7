//! Stochastic policy built around the contact-implicit planner.
//!
//! The mean of the action distribution is the planner's first action under
//! the current model parameters `Θ`; exploration noise is a diagonal Gaussian
//! whose log standard deviations are learned alongside `Θ`. The joint
//! parameter vector is laid out as `[Θ, log_std]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::lcs::{LcsDims, LcsError, LcsParams};
use crate::mpc::{kkt_sensitivity, mpc_first_action, FirstAction, MpcProblem, MpcSolution, SensitivityResult};

/// Initial standard deviation as a fraction of the action half-range.
pub const INITIAL_STD_FRACTION: f64 = 0.3;
/// Lower bound on the standard deviation as a fraction of the half-range.
pub const STD_FLOOR_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMpcPolicy {
    /// Planner template. `mpc.params` holds `Θ`; the goal of `mpc.cost` is
    /// replaced per query.
    pub mpc: MpcProblem,
    pub log_std: DVector<f64>,
    pub log_std_floor: DVector<f64>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Sample clamped into the action bounds.
    pub action: DVector<f64>,
    /// Sample before clamping; `log_prob` refers to this vector.
    pub raw: DVector<f64>,
    pub mean: DVector<f64>,
    pub log_prob: f64,
    pub mpc_converged: bool,
}

/// Gradient of `log π(u | x)` over `[Θ, log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub gradient: Vec<f64>,
    /// False when the sensitivity was invalid and the `Θ` block was zeroed.
    pub theta_valid: bool,
}

/// `log N(u; μ, diag(exp(2 log_std)))`.
pub fn gaussian_log_density(mean: &DVector<f64>, log_std: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let n = mean.len() as f64;
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for i in 0..mean.len() {
        let z = (u[i] - mean[i]) * (-log_std[i]).exp();
        quad += z * z;
        log_det += log_std[i];
    }
    -0.5 * quad - log_det - 0.5 * n * (2.0 * PI).ln()
}

/// `∂ log π / ∂μ = (u − μ) / σ²`.
pub fn log_density_mean_gradient(mean: &DVector<f64>, log_std: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mean.len(), |i, _| (u[i] - mean[i]) * (-2.0 * log_std[i]).exp())
}

/// `∂ log π / ∂ log σ_i = ((u_i − μ_i) / σ_i)² − 1`.
pub fn log_density_log_std_gradient(mean: &DVector<f64>, log_std: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mean.len(), |i, _| {
        let z = (u[i] - mean[i]) * (-log_std[i]).exp();
        z * z - 1.0
    })
}

impl GaussianMpcPolicy {
    /// Standard deviation starts at 30% of the action half-range with a floor
    /// at 1%.
    pub fn new(mpc: MpcProblem, rng_seed: u64) -> Self {
        let half = (&mpc.u_max - &mpc.u_min) * 0.5;
        let log_std = half.map(|h| (INITIAL_STD_FRACTION * h.max(f64::MIN_POSITIVE)).ln());
        let log_std_floor = half.map(|h| (STD_FLOOR_FRACTION * h.max(f64::MIN_POSITIVE)).ln());
        Self {
            mpc,
            log_std,
            log_std_floor,
            rng_seed,
        }
    }

    pub fn dims(&self) -> LcsDims {
        self.mpc.dims()
    }

    pub fn n_theta(&self) -> usize {
        self.dims().param_count()
    }

    /// Length of `[Θ, log_std]`.
    pub fn param_count(&self) -> usize {
        self.n_theta() + self.log_std.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.mpc.params.to_vec()
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), LcsError> {
        self.mpc.params = LcsParams::from_slice(self.dims(), theta)?;
        Ok(())
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_std.map(f64::exp)
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = self.theta();
        v.extend(self.log_std.iter());
        v
    }

    /// Sets `[Θ, log_std]`, raising `log_std` to its floor where needed.
    pub fn set_params_vec(&mut self, v: &[f64]) -> Result<(), LcsError> {
        let n = self.n_theta();
        if v.len() != self.param_count() {
            return Err(LcsError::DimensionMismatch {
                what: "policy parameter vector",
                expected: self.param_count(),
                found: v.len(),
            });
        }
        self.set_theta(&v[..n])?;
        for i in 0..self.log_std.len() {
            self.log_std[i] = v[n + i].max(self.log_std_floor[i]);
        }
        Ok(())
    }

    /// Planner problem for a particular goal state.
    pub fn problem(&self, goal_state: &DVector<f64>) -> MpcProblem {
        let mut p = self.mpc.clone();
        p.cost = p.cost.with_goal(goal_state.clone());
        p
    }

    pub fn act_mean(&self, x: &DVector<f64>, goal_state: &DVector<f64>, warm_start: Option<&MpcSolution>) -> FirstAction {
        mpc_first_action(&self.problem(goal_state), x, warm_start)
    }

    /// Draws `mean + σ ∘ ε`, records the density of that raw sample, then
    /// clamps it into the action bounds.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        goal_state: &DVector<f64>,
        warm_start: Option<&MpcSolution>,
        rng: &mut R,
    ) -> (ActionSample, FirstAction) {
        let plan = self.act_mean(x, goal_state, warm_start);
        let sample = self.sample_around(&plan.action, rng);
        let sample = ActionSample {
            mpc_converged: !plan.fallback,
            ..sample
        };
        (sample, plan)
    }

    /// Noise and clamping around a known mean.
    pub fn sample_around<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> ActionSample {
        let std = self.std();
        let raw = DVector::from_fn(mean.len(), |i, _| {
            let e: f64 = rng.sample(StandardNormal);
            mean[i] + std[i] * e
        });
        let log_prob = gaussian_log_density(mean, &self.log_std, &raw);
        let action = DVector::from_fn(raw.len(), |i, _| raw[i].clamp(self.mpc.u_min[i], self.mpc.u_max[i]));
        ActionSample {
            action,
            raw,
            mean: mean.clone(),
            log_prob,
            mpc_converged: true,
        }
    }

    /// Log-density of `u` at state `x`; the planner is re-solved unless the
    /// mean is supplied.
    pub fn log_density(
        &self,
        x: &DVector<f64>,
        goal_state: &DVector<f64>,
        u: &DVector<f64>,
        cached_mean: Option<&DVector<f64>>,
    ) -> f64 {
        match cached_mean {
            Some(m) => gaussian_log_density(m, &self.log_std, u),
            None => gaussian_log_density(&self.act_mean(x, goal_state, None).action, &self.log_std, u),
        }
    }

    /// Sensitivity of the first action for a converged plan at `goal_state`.
    pub fn sensitivity(&self, goal_state: &DVector<f64>, sol: &MpcSolution) -> SensitivityResult {
        kkt_sensitivity(&self.problem(goal_state), sol)
    }

    /// Gradient of `log π(u | x)` over `[Θ, log_std]` at the given mean. The
    /// `Θ` block is `(∂ log π/∂μ)ᵀ dμ/dΘ`, zero when the sensitivity is invalid.
    pub fn policy_param_gradient(&self, mean: &DVector<f64>, u: &DVector<f64>, sens: &SensitivityResult) -> PolicyGradient {
        param_gradient(mean, &self.log_std, u, Some(&sens.jacobian).filter(|_| sens.valid), self.n_theta())
    }
}

/// Shared by the policy and the surrogate loss: gradient of the Gaussian
/// log-density over `[Θ, log_std]` given an optional `dμ/dΘ`.
pub fn param_gradient(
    mean: &DVector<f64>,
    log_std: &DVector<f64>,
    u: &DVector<f64>,
    jacobian: Option<&DMatrix<f64>>,
    n_theta: usize,
) -> PolicyGradient {
    let mut gradient = vec![0.0; n_theta + log_std.len()];
    if let Some(j) = jacobian {
        let g_mu = log_density_mean_gradient(mean, log_std, u);
        let g_theta = j.tr_mul(&g_mu);
        gradient[..n_theta].copy_from_slice(g_theta.as_slice());
    }
    let g_ls = log_density_log_std_gradient(mean, log_std, u);
    gradient[n_theta..].copy_from_slice(g_ls.as_slice());
    PolicyGradient {
        gradient,
        theta_valid: jacobian.is_some(),
    }
}
