//! Desk-scale contact environments.
//!
//! Three plants share one episode structure (fixed step count, dense reward
//! equal to the negated planner stage cost, sparse penalty on failure at the
//! last step):
//!
//! * `synthetic_lcs`: a random ground-truth LCS, exactly representable by the
//!   learned model class.
//! * `cart_wall`: a point mass on a line with an inelastic wall at the origin,
//!   integrated event-by-event within each control period.
//! * `pusher_slider`: a point pusher moving a square slider quasi-statically
//!   with an ellipsoidal limit surface and a stick/slip contact.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lcs::{lcs_step, LcsDims, LcsParams, SIM_TOL};
use crate::mpc::CostSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown plant '{0}' (expected synthetic_lcs, cart_wall or pusher_slider)")]
    UnknownPlant(String),
    #[error("invalid environment: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Per-step action limit of the pushing plant, also used to scale the action
/// weights of the others.
pub const ACTION_LIMIT: f64 = 0.015;
pub const DEFAULT_EPISODE_STEPS: usize = 20;
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_SPARSE_PENALTY: f64 = 10.0;

/// Success requires `‖x[indices] − goal_state[indices]‖ ≤ tol` for every
/// entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerance {
    pub indices: Vec<usize>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub episode_steps: usize,
    /// Seconds per step.
    pub dt: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Box the goal parameters are drawn from.
    pub goal_low: DVector<f64>,
    pub goal_high: DVector<f64>,
    /// Box the initial state is drawn from; equal bounds give a fixed start.
    pub init_low: DVector<f64>,
    pub init_high: DVector<f64>,
    pub tolerances: Vec<Tolerance>,
    /// Planner and reward cost; its goal is replaced per episode.
    pub cost: CostSpec,
    pub sparse_penalty: f64,
    pub planner_horizon: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnvError::Invalid(m.to_string()));
        if self.episode_steps == 0 {
            return bad("episode length must be at least one step");
        }
        if !(self.dt > 0.0) {
            return bad("control period must be positive");
        }
        if self.u_min.len() != self.n_u || self.u_max.len() != self.n_u {
            return bad("action bounds have the wrong length");
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(l, h)| !(l <= h)) {
            return bad("action lower bound exceeds upper bound");
        }
        if self.goal_low.len() != self.goal_high.len() || self.goal_low.iter().zip(self.goal_high.iter()).any(|(l, h)| !(l <= h)) {
            return bad("goal range is inconsistent");
        }
        if self.init_low.len() != self.n_x || self.init_high.len() != self.n_x {
            return bad("initial-state box has the wrong length");
        }
        if self.tolerances.is_empty() || self.tolerances.iter().any(|t| !(t.tol > 0.0) || t.indices.iter().any(|&i| i >= self.n_x)) {
            return bad("success tolerances must be positive and index the state");
        }
        if self.cost.n_x() != self.n_x || self.cost.n_u() != self.n_u {
            return bad("cost dimensions differ from the plant");
        }
        if self.planner_horizon == 0 {
            return bad("planner horizon must be at least one");
        }
        Ok(())
    }

    /// Control time covered by `steps` environment steps, in minutes.
    pub fn data_minutes(&self, steps: usize) -> f64 {
        steps as f64 * self.dt / 60.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub x: DVector<f64>,
    /// Goal parameters as sampled.
    pub goal: DVector<f64>,
    /// Goal expressed as a target state for the cost.
    pub goal_state: DVector<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub terminal: bool,
    /// Success at the new state; only meaningful for scoring when terminal.
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    SyntheticLcs,
    CartWall,
    PusherSlider,
}

impl FromStr for PlantKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "synthetic_lcs" => Ok(Self::SyntheticLcs),
            "cart_wall" => Ok(Self::CartWall),
            "pusher_slider" => Ok(Self::PusherSlider),
            other => Err(EnvError::UnknownPlant(other.to_string())),
        }
    }
}

impl std::fmt::Display for PlantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SyntheticLcs => "synthetic_lcs",
            Self::CartWall => "cart_wall",
            Self::PusherSlider => "pusher_slider",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    Lcs(LcsParams),
    CartWall(CartWall),
    PusherSlider(PusherSlider),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub kind: PlantKind,
    pub spec: EnvSpec,
    pub plant: Plant,
}

impl Env {
    /// Builds a plant by name. `seed` only affects `synthetic_lcs`.
    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        Ok(match name.parse::<PlantKind>()? {
            PlantKind::SyntheticLcs => Self::synthetic_lcs(seed, LcsDims::new(2, 2, 2).expect("valid dims")),
            PlantKind::CartWall => Self::cart_wall(),
            PlantKind::PusherSlider => Self::pusher_slider(),
        })
    }

    /// Random stable LCS with `n_u == n_x` so every goal in the box is
    /// reachable. `A` is rescaled to spectral radius at most 0.95 and
    /// `F = P Pᵀ + 0.5 I`.
    pub fn synthetic_lcs(seed: u64, dims: LcsDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nx, nu, nl) = (dims.n_x, dims.n_u, dims.n_lambda);
        let mut m = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
        let mut p = LcsParams::zeros(dims);
        p.a = m(nx, nx, 0.6);
        p.b = DMatrix::identity(nx, nu) + m(nx, nu, 0.1);
        p.c = m(nx, nl, 0.5);
        p.d = m(nx, 1, 0.05).column(0).into_owned();
        p.gap_x = m(nl, nx, 1.0);
        p.gap_u = m(nl, nu, 0.5);
        let q = m(nl, nl, 0.5);
        p.gap_lambda = &q * q.transpose() + DMatrix::identity(nl, nl) * 0.5;
        p.gap_offset = m(nl, 1, 0.2).column(0).into_owned();
        let rad = p.a.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        if rad > 0.95 {
            p.a *= 0.95 / rad;
        }
        let cost = CostSpec::new(
            DMatrix::identity(nx, nx) * 10.0,
            DMatrix::identity(nu, nu) * 0.1,
            DMatrix::identity(nx, nx) * 20.0,
            DVector::zeros(nx),
        )
        .expect("diagonal weights are valid");
        let spec = EnvSpec {
            n_x: nx,
            n_u: nu,
            episode_steps: DEFAULT_EPISODE_STEPS,
            dt: DEFAULT_DT,
            u_min: DVector::from_element(nu, -1.0),
            u_max: DVector::from_element(nu, 1.0),
            goal_low: DVector::from_element(nx, -0.5),
            goal_high: DVector::from_element(nx, 0.5),
            init_low: DVector::from_element(nx, -0.5),
            init_high: DVector::from_element(nx, 0.5),
            tolerances: vec![Tolerance {
                indices: (0..nx).collect(),
                tol: 0.05,
            }],
            cost,
            sparse_penalty: DEFAULT_SPARSE_PENALTY,
            planner_horizon: 5,
        };
        Self {
            kind: PlantKind::SyntheticLcs,
            spec,
            plant: Plant::Lcs(p),
        }
    }

    /// State `(p, v)`, action an acceleration in `[-1, 1]`, wall at `p = 0`.
    /// Start at rest at `p = 0.5`; goal position uniform in `[0, 0.4]`.
    pub fn cart_wall() -> Self {
        let u_max = 1.0;
        // Cube-task weights: position 200, angle 0.3 and 1.5 reused for
        // velocity, action weight rescaled to this action range.
        let r = 200.0 * (ACTION_LIMIT / u_max).powi(2);
        let cost = CostSpec::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![200.0, 0.3])),
            DMatrix::from_element(1, 1, r),
            DMatrix::from_diagonal(&DVector::from_vec(vec![200.0, 1.5])),
            DVector::zeros(2),
        )
        .expect("diagonal weights are valid");
        let spec = EnvSpec {
            n_x: 2,
            n_u: 1,
            episode_steps: DEFAULT_EPISODE_STEPS,
            dt: DEFAULT_DT,
            u_min: DVector::from_element(1, -u_max),
            u_max: DVector::from_element(1, u_max),
            goal_low: DVector::from_element(1, 0.0),
            goal_high: DVector::from_element(1, 0.4),
            init_low: DVector::from_vec(vec![0.5, 0.0]),
            init_high: DVector::from_vec(vec![0.5, 0.0]),
            tolerances: vec![
                Tolerance { indices: vec![0], tol: 0.02 },
                Tolerance { indices: vec![1], tol: 0.2 },
            ],
            cost,
            sparse_penalty: DEFAULT_SPARSE_PENALTY,
            planner_horizon: 5,
        };
        Self {
            kind: PlantKind::CartWall,
            spec,
            plant: Plant::CartWall(CartWall),
        }
    }

    /// State `[s_x, s_y, θ, p_x, p_y, gap]`: slider pose, pusher position and
    /// the pusher's distance to the slider boundary. Actions are pusher
    /// displacements limited to `±0.015` per step.
    pub fn pusher_slider() -> Self {
        let ps = PusherSlider::default();
        // Proximity 10‖p − s‖² enters through the cross terms; the goal state
        // places the pusher on the goal position so that the term is exact.
        let weights = |prox: f64, pos: f64, ang: f64| {
            let mut q = DMatrix::zeros(6, 6);
            for k in 0..2 {
                let (s, p) = (k, 3 + k);
                q[(s, s)] += pos + prox;
                q[(p, p)] += prox;
                q[(s, p)] -= prox;
                q[(p, s)] -= prox;
            }
            q[(2, 2)] = ang;
            q
        };
        let cost = CostSpec::new(
            weights(10.0, 200.0, 0.3),
            DMatrix::identity(2, 2) * 200.0,
            weights(6.0, 200.0, 1.5),
            DVector::zeros(6),
        )
        .expect("weights are positive semidefinite");
        let x0 = ps.state_from(&Vector2::zeros(), 0.0, &Vector2::new(-ps.half_side - 0.005, 0.0));
        let spec = EnvSpec {
            n_x: 6,
            n_u: 2,
            episode_steps: DEFAULT_EPISODE_STEPS,
            dt: DEFAULT_DT,
            u_min: DVector::from_element(2, -ACTION_LIMIT),
            u_max: DVector::from_element(2, ACTION_LIMIT),
            goal_low: DVector::from_vec(vec![-0.06, -0.06, -0.5]),
            goal_high: DVector::from_vec(vec![0.06, 0.06, 0.5]),
            init_low: x0.clone(),
            init_high: x0,
            tolerances: vec![
                Tolerance { indices: vec![0, 1], tol: 0.02 },
                Tolerance { indices: vec![2], tol: 0.2 },
            ],
            cost,
            sparse_penalty: DEFAULT_SPARSE_PENALTY,
            planner_horizon: 5,
        };
        Self {
            kind: PlantKind::PusherSlider,
            spec,
            plant: Plant::PusherSlider(ps),
        }
    }

    /// Maps goal parameters to the target state used by the cost.
    pub fn goal_state(&self, goal: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            PlantKind::SyntheticLcs => goal.clone(),
            PlantKind::CartWall => DVector::from_vec(vec![goal[0], 0.0]),
            PlantKind::PusherSlider => DVector::from_vec(vec![goal[0], goal[1], goal[2], goal[0], goal[1], 0.0]),
        }
    }

    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        uniform_in(&self.spec.goal_low, &self.spec.goal_high, rng)
    }

    /// Draws a goal, then the initial state.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let goal = self.sample_goal(rng);
        let x = uniform_in(&self.spec.init_low, &self.spec.init_high, rng);
        self.reset_to(x, goal)
    }

    pub fn reset_to(&self, x: DVector<f64>, goal: DVector<f64>) -> EnvState {
        EnvState {
            goal_state: self.goal_state(&goal),
            x,
            goal,
            step: 0,
        }
    }

    /// One control period of the plant, with the action clamped into bounds.
    pub fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let u = self.clamp_action(u);
        match &self.plant {
            Plant::Lcs(p) => lcs_step(p, x, &u, SIM_TOL).expect("ground-truth LCS has a P-matrix F").0,
            Plant::CartWall(c) => c.step(x, u[0], self.spec.dt),
            Plant::PusherSlider(ps) => ps.step(x, &u),
        }
    }

    pub fn clamp_action(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.spec.n_u, |i, _| u[i].clamp(self.spec.u_min[i], self.spec.u_max[i]))
    }

    /// Dense reward is `−C(x_t, u_t)`; the last step also adds
    /// `−P (1 − success)` judged at the final state.
    pub fn step(&self, state: &EnvState, action: &DVector<f64>) -> StepResult {
        let u = self.clamp_action(action);
        let cost = self.spec.cost.with_goal(state.goal_state.clone());
        let mut reward = -cost.stage_cost(&state.x, &u);
        let x = self.transition(&state.x, &u);
        let step = (state.step + 1).min(self.spec.episode_steps);
        let terminal = step == self.spec.episode_steps;
        let success = self.is_success(&x, &state.goal_state);
        if terminal && !success {
            reward -= self.spec.sparse_penalty;
        }
        StepResult {
            state: EnvState {
                x,
                goal: state.goal.clone(),
                goal_state: state.goal_state.clone(),
                step,
            },
            reward,
            terminal,
            success,
        }
    }

    /// Every tolerance group within bounds (inclusive).
    pub fn is_success(&self, x: &DVector<f64>, goal_state: &DVector<f64>) -> bool {
        self.spec.tolerances.iter().all(|t| {
            let err2: f64 = t.indices.iter().map(|&i| (x[i] - goal_state[i]).powi(2)).sum();
            err2.sqrt() <= t.tol
        })
    }
}

fn uniform_in<R: Rng + ?Sized>(lo: &DVector<f64>, hi: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(lo.len(), |i, _| if lo[i] < hi[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] })
}

// ---------------------------------------------------------------------------
// Cart against a wall

/// Unit point mass with an inelastic wall at `p = 0`. Free flight under a
/// constant acceleration is integrated in closed form; at impact the
/// velocity is zeroed and the mass either rests on the wall or leaves it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartWall;

impl CartWall {
    pub fn step(&self, x: &DVector<f64>, u: f64, dt: f64) -> DVector<f64> {
        let (mut p, mut v) = (x[0].max(0.0), x[1]);
        let mut t = dt;
        if p == 0.0 && v <= 0.0 && u <= 0.0 {
            return DVector::from_vec(vec![0.0, 0.0]);
        }
        if let Some(tau) = Self::impact_time(p, v, u, t) {
            // Travel to the wall, stop there.
            t -= tau;
            p = 0.0;
            v = 0.0;
            if u <= 0.0 {
                return DVector::from_vec(vec![0.0, 0.0]);
            }
        }
        let p_next = p + v * t + 0.5 * u * t * t;
        DVector::from_vec(vec![p_next.max(0.0), v + u * t])
    }

    /// First `τ ∈ (0, t]` with `p + v τ + u τ²/2 = 0` and the mass moving
    /// into the wall.
    fn impact_time(p: f64, v: f64, u: f64, t: f64) -> Option<f64> {
        let end = p + v * t + 0.5 * u * t * t;
        let a = 0.5 * u;
        let roots: Vec<f64> = if a.abs() < 1e-300 {
            if v < 0.0 {
                vec![-p / v]
            } else {
                vec![]
            }
        } else {
            let disc = v * v - 4.0 * a * p;
            if disc < 0.0 {
                vec![]
            } else {
                let s = disc.sqrt();
                // Stable quadratic roots.
                let q = -0.5 * (v + v.signum() * s);
                let mut r = vec![];
                if q != 0.0 {
                    r.push(q / a);
                    r.push(p / q);
                } else {
                    r.push((-v + s) / (2.0 * a));
                    r.push((-v - s) / (2.0 * a));
                }
                r
            }
        };
        let hit = roots.into_iter().filter(|&r| r >= 0.0 && r <= t).fold(f64::INFINITY, f64::min);
        if hit.is_finite() && (v + u * hit <= 0.0 || p == 0.0) {
            return Some(hit);
        }
        // Grazing or roundoff: the closed form dips below the wall anyway.
        if end < 0.0 {
            let tau = if hit.is_finite() { hit } else { t };
            return Some(tau);
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Quasi-static pusher and square slider

#[derive(Debug, Clone, PartialEq)]
pub struct PusherSlider {
    /// Half the slider side length (m).
    pub half_side: f64,
    /// Ratio of maximum friction torque to maximum friction force of the
    /// ellipsoidal limit surface (m).
    pub limit_surface_c: f64,
    /// Pusher/slider friction coefficient.
    pub mu: f64,
    /// Integration substeps per control period.
    pub substeps: usize,
}

impl Default for PusherSlider {
    fn default() -> Self {
        Self {
            half_side: 0.03,
            // Uniform pressure on a square: c ≈ 0.38 · side.
            limit_surface_c: 0.38 * 0.06,
            mu: 0.3,
            substeps: 10,
        }
    }
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

impl PusherSlider {
    pub fn state_from(&self, s: &Vector2<f64>, theta: f64, p: &Vector2<f64>) -> DVector<f64> {
        let gap = self.gap(s, theta, p);
        DVector::from_vec(vec![s[0], s[1], theta, p[0], p[1], gap])
    }

    /// Distance from the pusher to the slider boundary (zero on contact).
    pub fn gap(&self, s: &Vector2<f64>, theta: f64, p: &Vector2<f64>) -> f64 {
        let q = rot(theta).transpose() * (p - s);
        let ox = (q[0].abs() - self.half_side).max(0.0);
        let oy = (q[1].abs() - self.half_side).max(0.0);
        (ox * ox + oy * oy).sqrt()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut s = Vector2::new(x[0], x[1]);
        let mut theta = x[2];
        let mut p = Vector2::new(x[3], x[4]);
        let delta = Vector2::new(u[0], u[1]) / self.substeps as f64;
        for _ in 0..self.substeps {
            p += delta;
            let r = rot(theta);
            let q = r.transpose() * (p - s);
            if let Some((inward, depth)) = self.penetration(&q) {
                let tangent = Vector2::new(-inward[1], inward[0]);
                let motion = r.transpose() * delta;
                let contact = Vector2::new(-self.half_side, q.dot(&tangent).clamp(-self.half_side, self.half_side));
                let push = Vector2::new(depth, motion.dot(&tangent));
                let (v, omega) = self.slider_twist(&contact, &push);
                let v_local = inward * v[0] + tangent * v[1];
                s += r * v_local;
                theta += omega;
            }
            // The pusher cannot end up inside the slider.
            let r = rot(theta);
            let q = r.transpose() * (p - s);
            if let Some((inward, depth)) = self.penetration(&q) {
                p -= r * (inward * depth);
            }
        }
        self.state_from(&s, theta, &p)
    }

    /// For a point strictly inside the square: inward normal of the nearest
    /// face and the depth below it.
    fn penetration(&self, q: &Vector2<f64>) -> Option<(Vector2<f64>, f64)> {
        let a = self.half_side;
        if q[0].abs() >= a || q[1].abs() >= a {
            return None;
        }
        let faces = [
            (Vector2::new(1.0, 0.0), a + q[0]),
            (Vector2::new(-1.0, 0.0), a - q[0]),
            (Vector2::new(0.0, 1.0), a + q[1]),
            (Vector2::new(0.0, -1.0), a - q[1]),
        ];
        faces.into_iter().min_by(|x, y| x.1.total_cmp(&y.1))
    }

    /// Slider twist in the face frame (push along `+x` on the face
    /// `x = −a`). The pusher velocity is kept when inside the motion cone
    /// and projected onto the violated cone edge otherwise.
    fn slider_twist(&self, contact: &Vector2<f64>, push: &Vector2<f64>) -> (Vector2<f64>, f64) {
        let (px, py) = (contact[0], contact[1]);
        let (c2, mu) = (self.limit_surface_c.powi(2), self.mu);
        let gamma_top = (mu * c2 - px * py + mu * px * px) / (c2 + py * py + mu * px * py);
        let gamma_bottom = (-mu * c2 - px * py - mu * px * px) / (c2 + py * py - mu * px * py);
        let (vn, vt) = (push[0], push[1]);
        let vt = if vt > gamma_top * vn {
            gamma_top * vn
        } else if vt < gamma_bottom * vn {
            gamma_bottom * vn
        } else {
            vt
        };
        let den = c2 + px * px + py * py;
        let vx = ((c2 + px * px) * vn + px * py * vt) / den;
        let vy = (px * py * vn + (c2 + py * py) * vt) / den;
        let omega = (px * vy - py * vx) / c2;
        (Vector2::new(vx, vy), omega)
    }
}
