//! Contact-implicit model predictive control.
//!
//! The finite-horizon problem is transcribed with states, actions, contact
//! forces and gap slacks as decision variables. Complementarity is relaxed to
//! `λ ≥ 0, s ≥ 0, λ ∘ s ≤ ρ` and `ρ` is driven down a schedule; each relaxed
//! problem is solved by a primal-dual interior-point method whose converged
//! multipliers also feed [`kkt_sensitivity`].

pub mod linalg;
mod sensitivity;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lcs::{lcs_step, LcsDims, LcsParams, LEARNED_TOL};
use linalg::{bandwidth, BandLdl};

pub use sensitivity::{kkt_sensitivity, SensitivityResult};

#[derive(Debug, Error, Clone)]
pub enum MpcError {
    #[error("invalid MPC problem: {0}")]
    InvalidProblem(String),
    #[error("MPC solve failed after {iterations} iterations (KKT residual {residual:.3e})")]
    SolveFailed {
        residual: f64,
        iterations: usize,
        iterate: Box<MpcSolution>,
    },
}

pub type Result<T> = std::result::Result<T, MpcError>;

/// Quadratic tracking cost
/// `C(x, u) = (x − g)ᵀ Q (x − g) + (u − u_ref)ᵀ R (u − u_ref)` with terminal
/// `C_f(x) = (x − g)ᵀ Q_f (x − g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub state_weight: DMatrix<f64>,
    pub action_weight: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
    pub goal_state: DVector<f64>,
    pub action_ref: DVector<f64>,
}

impl CostSpec {
    pub fn new(
        state_weight: DMatrix<f64>,
        action_weight: DMatrix<f64>,
        terminal_weight: DMatrix<f64>,
        goal_state: DVector<f64>,
    ) -> Result<Self> {
        let n_u = action_weight.nrows();
        let spec = Self {
            state_weight,
            action_weight,
            terminal_weight,
            goal_state,
            action_ref: DVector::zeros(n_u),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_x(&self) -> usize {
        self.state_weight.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.action_weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n_x = self.state_weight.nrows();
        let n_u = self.action_weight.nrows();
        let square = |m: &DMatrix<f64>, n: usize| m.nrows() == n && m.ncols() == n;
        if !square(&self.state_weight, n_x)
            || !square(&self.terminal_weight, n_x)
            || !square(&self.action_weight, n_u)
            || self.goal_state.len() != n_x
            || self.action_ref.len() != n_u
        {
            return Err(MpcError::InvalidProblem("cost weight dimensions are inconsistent".into()));
        }
        for (name, m, strict) in [
            ("state", &self.state_weight, false),
            ("terminal", &self.terminal_weight, false),
            ("action", &self.action_weight, true),
        ] {
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(MpcError::InvalidProblem(format!("{name} weight is not symmetric")));
            }
            let min_eig = m.clone().symmetric_eigenvalues().min();
            let floor = if strict { 0.0 } else { -1e-12 * (1.0 + m.amax()) };
            if min_eig < floor || (strict && min_eig <= 0.0) {
                return Err(MpcError::InvalidProblem(format!(
                    "{name} weight has eigenvalue {min_eig:.3e}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_goal(&self, goal_state: DVector<f64>) -> Self {
        Self {
            goal_state,
            ..self.clone()
        }
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.goal_state;
        let a = u - &self.action_ref;
        e.dot(&(&self.state_weight * &e)) + a.dot(&(&self.action_weight * &a))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.goal_state;
        e.dot(&(&self.terminal_weight * &e))
    }

    /// Total cost of a state/action sequence (`states.len() == controls.len() + 1`).
    pub fn trajectory_cost(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for (x, u) in states.iter().zip(controls) {
            total += self.stage_cost(x, u);
        }
        total + self.terminal_cost(&states[controls.len()])
    }
}

/// Interior-point tolerances and schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSettings {
    /// Target for the scaled KKT error of the final barrier subproblem.
    pub tol: f64,
    pub mu_init: f64,
    pub mu_final: f64,
    /// Barrier parameter used when starting from a warm start.
    pub mu_warm: f64,
    pub max_iters: usize,
    /// When set, every solve appends its trajectory to this CSV file.
    pub dump_path: Option<PathBuf>,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            mu_init: 1e-1,
            mu_final: 1e-10,
            mu_warm: 1e-6,
            max_iters: 400,
            dump_path: None,
        }
    }
}

/// Default relaxation schedule: 1e-1 down to 1e-6, a factor of ten per stage.
pub fn default_relaxation() -> Vec<f64> {
    (1..=6).map(|k| 10f64.powi(-k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub params: LcsParams,
    pub cost: CostSpec,
    pub horizon: usize,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Decreasing relaxation levels; the last one is the target problem.
    pub relaxation: Vec<f64>,
    pub settings: MpcSettings,
}

impl MpcProblem {
    pub fn new(
        params: LcsParams,
        cost: CostSpec,
        horizon: usize,
        u_min: DVector<f64>,
        u_max: DVector<f64>,
    ) -> Result<Self> {
        let prob = Self {
            params,
            cost,
            horizon,
            u_min,
            u_max,
            relaxation: default_relaxation(),
            settings: MpcSettings::default(),
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn dims(&self) -> LcsDims {
        self.params.dims()
    }

    pub fn rho_final(&self) -> f64 {
        *self.relaxation.last().expect("validated nonempty")
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.params.dims();
        self.params
            .validate()
            .map_err(|e| MpcError::InvalidProblem(e.to_string()))?;
        self.cost.validate()?;
        if self.horizon == 0 {
            return Err(MpcError::InvalidProblem("horizon must be at least 1".into()));
        }
        if self.cost.n_x() != dims.n_x || self.cost.n_u() != dims.n_u {
            return Err(MpcError::InvalidProblem(format!(
                "cost is sized for n_x={}, n_u={} but the model has n_x={}, n_u={}",
                self.cost.n_x(),
                self.cost.n_u(),
                dims.n_x,
                dims.n_u
            )));
        }
        if self.u_min.len() != dims.n_u || self.u_max.len() != dims.n_u {
            return Err(MpcError::InvalidProblem("action bounds have the wrong length".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo <= hi)) {
            return Err(MpcError::InvalidProblem("action bounds must satisfy u_min <= u_max".into()));
        }
        if self.relaxation.is_empty()
            || self.relaxation.iter().any(|&r| !(r > 0.0))
            || self.relaxation.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(MpcError::InvalidProblem(
                "relaxation schedule must be positive and strictly decreasing".into(),
            ));
        }
        Ok(())
    }
}

/// Primal-dual iterate of the transcribed problem, kept so that warm starts
/// and the sensitivity computation see exactly what the solver converged to.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    /// One entry per equality row: dynamics, gap definitions, pinned actions.
    pub equality: DVector<f64>,
    /// One entry per inequality, see [`MpcSolution`] for the ordering.
    pub inequality: DVector<f64>,
    /// Slack of each inequality (`g(z) = slack` at convergence).
    pub inequality_slack: DVector<f64>,
}

/// Result of a planner solve.
///
/// Per stage the inequalities are ordered as `λ ≥ 0`, `s ≥ 0`, `ρ − λ∘s ≥ 0`
/// for every contact, then `u ≥ u_min`, `u ≤ u_max` for every free action.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub forces: Vec<DVector<f64>>,
    /// Complementarity slacks `s_k = D x_k + E u_k + F λ_k + c`.
    pub gaps: Vec<DVector<f64>>,
    pub multipliers: Multipliers,
    pub kkt_residual: f64,
    pub converged: bool,
    pub objective: f64,
    /// Objective after each relaxation stage that was solved.
    pub stage_objectives: Vec<f64>,
    pub iterations: usize,
    /// Barrier parameter of the returned iterate.
    pub mu: f64,
}

impl MpcSolution {
    /// Receding-horizon warm start: drop the first stage, repeat the last.
    pub fn shifted(&self) -> Self {
        fn shift<T: Clone>(v: &[T]) -> Vec<T> {
            let mut out: Vec<T> = v[1.min(v.len())..].to_vec();
            if let Some(last) = v.last() {
                out.push(last.clone());
            }
            out
        }
        let h = self.controls.len();
        let shift_blocks = |v: &DVector<f64>| {
            if h == 0 || v.len() % h != 0 {
                return v.clone();
            }
            let per = v.len() / h;
            let mut out = DVector::zeros(v.len());
            for k in 0..h {
                let src = (k + 1).min(h - 1);
                out.rows_mut(k * per, per).copy_from(&v.rows(src * per, per));
            }
            out
        };
        Self {
            controls: shift(&self.controls),
            states: shift(&self.states),
            forces: shift(&self.forces),
            gaps: shift(&self.gaps),
            multipliers: Multipliers {
                equality: shift_blocks(&self.multipliers.equality),
                inequality: shift_blocks(&self.multipliers.inequality),
                inequality_slack: shift_blocks(&self.multipliers.inequality_slack),
            },
            kkt_residual: f64::INFINITY,
            converged: false,
            objective: f64::NAN,
            stage_objectives: Vec::new(),
            iterations: 0,
            mu: self.mu,
        }
    }

    /// Writes `k, kind, index, value` rows for states, controls and forces.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stage,kind,index,value")?;
        let mut emit = |kind: &str, seq: &[DVector<f64>]| -> std::io::Result<()> {
            for (k, v) in seq.iter().enumerate() {
                for (i, val) in v.iter().enumerate() {
                    writeln!(w, "{k},{kind},{i},{val:.17e}")?;
                }
            }
            Ok(())
        };
        emit("state", &self.states)?;
        emit("control", &self.controls)?;
        emit("force", &self.forces)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transcription

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ineq {
    /// `z[var] − bound ≥ 0`.
    Lower { var: usize, bound: f64 },
    /// `bound − z[var] ≥ 0`.
    Upper { var: usize, bound: f64 },
    /// `ρ − z[force] z[gap] ≥ 0`.
    Comp { force: usize, gap: usize },
}

/// Index bookkeeping for the stage-wise variable layout
/// `[u_k, λ_k, s_k, x_{k+1}]` and equality rows `[dynamics, gap, pinned]`.
#[derive(Debug, Clone)]
struct Layout {
    n_x: usize,
    n_u: usize,
    m: usize,
    h: usize,
    pinned: Vec<usize>,
    stage_z: usize,
    stage_y: usize,
}

impl Layout {
    fn new(prob: &MpcProblem) -> Self {
        let dims = prob.dims();
        let pinned: Vec<usize> = (0..dims.n_u).filter(|&j| prob.u_min[j] == prob.u_max[j]).collect();
        let stage_z = dims.n_u + 2 * dims.n_lambda + dims.n_x;
        let stage_y = dims.n_x + dims.n_lambda + pinned.len();
        Self {
            n_x: dims.n_x,
            n_u: dims.n_u,
            m: dims.n_lambda,
            h: prob.horizon,
            pinned,
            stage_z,
            stage_y,
        }
    }

    fn n_z(&self) -> usize {
        self.h * self.stage_z
    }

    fn n_y(&self) -> usize {
        self.h * self.stage_y
    }

    fn u(&self, k: usize) -> usize {
        k * self.stage_z
    }

    fn lam(&self, k: usize) -> usize {
        k * self.stage_z + self.n_u
    }

    fn gap(&self, k: usize) -> usize {
        k * self.stage_z + self.n_u + self.m
    }

    /// Offset of `x_j` for `j ≥ 1`.
    fn x(&self, j: usize) -> usize {
        debug_assert!(j >= 1);
        (j - 1) * self.stage_z + self.n_u + 2 * self.m
    }

    fn dyn_row(&self, k: usize) -> usize {
        k * self.stage_y
    }

    fn gap_row(&self, k: usize) -> usize {
        k * self.stage_y + self.n_x
    }

    fn kkt_z(&self, i: usize) -> usize {
        let k = i / self.stage_z;
        k * (self.stage_z + self.stage_y) + i % self.stage_z
    }

    fn kkt_y(&self, r: usize) -> usize {
        let k = r / self.stage_y;
        k * (self.stage_z + self.stage_y) + self.stage_z + r % self.stage_y
    }

    fn free_actions(&self) -> usize {
        self.n_u - self.pinned.len()
    }

    fn ineq_per_stage(&self) -> usize {
        3 * self.m + 2 * self.free_actions()
    }
}

/// A sparse linear equality row `Σ a_i z_i + e = 0`.
#[derive(Debug, Clone)]
struct EqRow {
    terms: Vec<(usize, f64)>,
    offset: f64,
}

struct Transcription<'a> {
    prob: &'a MpcProblem,
    lay: Layout,
    x0: DVector<f64>,
    rows: Vec<EqRow>,
    ineqs: Vec<Ineq>,
}

impl<'a> Transcription<'a> {
    fn new(prob: &'a MpcProblem, x0: &DVector<f64>) -> Self {
        let lay = Layout::new(prob);
        let p = &prob.params;
        let (n_x, n_u, m) = (lay.n_x, lay.n_u, lay.m);
        let mut rows = Vec::with_capacity(lay.n_y());
        let mut ineqs = Vec::with_capacity(lay.h * lay.ineq_per_stage());
        for k in 0..lay.h {
            // x_{k+1} − A x_k − B u_k − C λ_k − d = 0
            for a in 0..n_x {
                let mut terms = vec![(lay.x(k + 1) + a, 1.0)];
                let mut offset = -p.d[a];
                for b in 0..n_x {
                    if k == 0 {
                        offset -= p.a[(a, b)] * x0[b];
                    } else {
                        terms.push((lay.x(k) + b, -p.a[(a, b)]));
                    }
                }
                for b in 0..n_u {
                    terms.push((lay.u(k) + b, -p.b[(a, b)]));
                }
                for b in 0..m {
                    terms.push((lay.lam(k) + b, -p.c[(a, b)]));
                }
                rows.push(EqRow { terms, offset });
            }
            // s_k − D x_k − E u_k − F λ_k − c = 0
            for a in 0..m {
                let mut terms = vec![(lay.gap(k) + a, 1.0)];
                let mut offset = -p.gap_offset[a];
                for b in 0..n_x {
                    if k == 0 {
                        offset -= p.gap_x[(a, b)] * x0[b];
                    } else {
                        terms.push((lay.x(k) + b, -p.gap_x[(a, b)]));
                    }
                }
                for b in 0..n_u {
                    terms.push((lay.u(k) + b, -p.gap_u[(a, b)]));
                }
                for b in 0..m {
                    terms.push((lay.lam(k) + b, -p.gap_lambda[(a, b)]));
                }
                rows.push(EqRow { terms, offset });
            }
            for &j in &lay.pinned {
                rows.push(EqRow {
                    terms: vec![(lay.u(k) + j, 1.0)],
                    offset: -prob.u_min[j],
                });
            }
            for i in 0..m {
                ineqs.push(Ineq::Lower { var: lay.lam(k) + i, bound: 0.0 });
                ineqs.push(Ineq::Lower { var: lay.gap(k) + i, bound: 0.0 });
                ineqs.push(Ineq::Comp {
                    force: lay.lam(k) + i,
                    gap: lay.gap(k) + i,
                });
            }
            for j in 0..n_u {
                if lay.pinned.contains(&j) {
                    continue;
                }
                ineqs.push(Ineq::Lower {
                    var: lay.u(k) + j,
                    bound: prob.u_min[j],
                });
                ineqs.push(Ineq::Upper {
                    var: lay.u(k) + j,
                    bound: prob.u_max[j],
                });
            }
        }
        Self {
            prob,
            lay,
            x0: x0.clone(),
            rows,
            ineqs,
        }
    }

    fn state(&self, z: &DVector<f64>, j: usize) -> DVector<f64> {
        if j == 0 {
            self.x0.clone()
        } else {
            z.rows(self.lay.x(j), self.lay.n_x).into_owned()
        }
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let lay = &self.lay;
        let cost = &self.prob.cost;
        let mut total = 0.0;
        for k in 0..lay.h {
            let u = z.rows(lay.u(k), lay.n_u).into_owned();
            total += cost.stage_cost(&self.state(z, k), &u);
        }
        total + cost.terminal_cost(&self.state(z, lay.h))
    }

    fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let lay = &self.lay;
        let cost = &self.prob.cost;
        let mut g = DVector::zeros(lay.n_z());
        for k in 0..lay.h {
            let u = z.rows(lay.u(k), lay.n_u);
            let gu = 2.0 * &cost.action_weight * (u - &cost.action_ref);
            g.rows_mut(lay.u(k), lay.n_u).copy_from(&gu);
            let j = k + 1;
            let e = z.rows(lay.x(j), lay.n_x) - &cost.goal_state;
            let w = if j == lay.h { &cost.terminal_weight } else { &cost.state_weight };
            g.rows_mut(lay.x(j), lay.n_x).copy_from(&(2.0 * w * e));
        }
        g
    }

    fn eq_residual(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|r| r.terms.iter().map(|&(i, a)| a * z[i]).sum::<f64>() + r.offset),
        )
    }

    fn ineq_values(&self, z: &DVector<f64>, rho: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.ineqs.len(),
            self.ineqs.iter().map(|q| match *q {
                Ineq::Lower { var, bound } => z[var] - bound,
                Ineq::Upper { var, bound } => bound - z[var],
                Ineq::Comp { force, gap } => rho - z[force] * z[gap],
            }),
        )
    }

    /// Nonzeros of `∇g_j(z)`.
    fn ineq_gradient(&self, j: usize, z: &DVector<f64>) -> [(usize, f64); 2] {
        match self.ineqs[j] {
            Ineq::Lower { var, .. } => [(var, 1.0), (usize::MAX, 0.0)],
            Ineq::Upper { var, .. } => [(var, -1.0), (usize::MAX, 0.0)],
            Ineq::Comp { force, gap } => [(force, -z[gap]), (gap, -z[force])],
        }
    }

    /// `∇f + J_cᵀ y − J_gᵀ ν`.
    fn stationarity(&self, z: &DVector<f64>, y: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
        let mut r = self.objective_gradient(z);
        for (row, &yr) in self.rows.iter().zip(y.iter()) {
            for &(i, a) in &row.terms {
                r[i] += a * yr;
            }
        }
        for j in 0..self.ineqs.len() {
            for (i, gi) in self.ineq_gradient(j, z) {
                if i != usize::MAX {
                    r[i] -= gi * nu[j];
                }
            }
        }
        r
    }

    /// Condensed Newton matrix
    /// `[W + J_gᵀ Σ J_g + δ_w I, J_cᵀ; J_c, −δ_c I]` in interleaved ordering.
    fn kkt_matrix(
        &self,
        z: &DVector<f64>,
        t: &DVector<f64>,
        nu: &DVector<f64>,
        delta_w: f64,
        delta_c: f64,
    ) -> DMatrix<f64> {
        let lay = &self.lay;
        let n = lay.n_z() + lay.n_y();
        let cost = &self.prob.cost;
        let mut k = DMatrix::zeros(n, n);
        let add = |k: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
            k[(i, j)] += v;
        };
        for s in 0..lay.h {
            for a in 0..lay.n_u {
                for b in 0..lay.n_u {
                    let v = 2.0 * cost.action_weight[(a, b)];
                    if v != 0.0 {
                        add(&mut k, lay.kkt_z(lay.u(s) + a), lay.kkt_z(lay.u(s) + b), v);
                    }
                }
            }
            let j = s + 1;
            let w = if j == lay.h { &cost.terminal_weight } else { &cost.state_weight };
            for a in 0..lay.n_x {
                for b in 0..lay.n_x {
                    let v = 2.0 * w[(a, b)];
                    if v != 0.0 {
                        add(&mut k, lay.kkt_z(lay.x(j) + a), lay.kkt_z(lay.x(j) + b), v);
                    }
                }
            }
        }
        for i in 0..lay.n_z() {
            add(&mut k, lay.kkt_z(i), lay.kkt_z(i), delta_w);
        }
        for j in 0..self.ineqs.len() {
            let sigma = nu[j] / t[j];
            let grad = self.ineq_gradient(j, z);
            for &(a, ga) in &grad {
                if a == usize::MAX {
                    continue;
                }
                for &(b, gb) in &grad {
                    if b == usize::MAX {
                        continue;
                    }
                    add(&mut k, lay.kkt_z(a), lay.kkt_z(b), sigma * ga * gb);
                }
            }
            if let Ineq::Comp { force, gap } = self.ineqs[j] {
                add(&mut k, lay.kkt_z(force), lay.kkt_z(gap), nu[j]);
                add(&mut k, lay.kkt_z(gap), lay.kkt_z(force), nu[j]);
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            let kr = lay.kkt_y(r);
            for &(i, a) in &row.terms {
                let ki = lay.kkt_z(i);
                k[(kr, ki)] += a;
                k[(ki, kr)] += a;
            }
            k[(kr, kr)] -= delta_c;
        }
        k
    }

    fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let lay = &self.lay;
        let dz = DVector::from_fn(lay.n_z(), |i, _| v[lay.kkt_z(i)]);
        let dy = DVector::from_fn(lay.n_y(), |r, _| v[lay.kkt_y(r)]);
        (dz, dy)
    }

    fn join(&self, vz: &DVector<f64>, vy: &DVector<f64>) -> DVector<f64> {
        let lay = &self.lay;
        let mut out = DVector::zeros(lay.n_z() + lay.n_y());
        for i in 0..lay.n_z() {
            out[lay.kkt_z(i)] = vz[i];
        }
        for r in 0..lay.n_y() {
            out[lay.kkt_y(r)] = vy[r];
        }
        out
    }

    /// Initial primal point: actions at the box midpoint clipped towards
    /// zero, states and forces from simulating the model itself.
    fn cold_start(&self) -> DVector<f64> {
        let lay = &self.lay;
        let p = &self.prob.params;
        let mut z = DVector::zeros(lay.n_z());
        let u0 = DVector::from_fn(lay.n_u, |j, _| 0.0f64.clamp(self.prob.u_min[j], self.prob.u_max[j]));
        let mut x = self.x0.clone();
        for k in 0..lay.h {
            z.rows_mut(lay.u(k), lay.n_u).copy_from(&u0);
            let (x_next, lam) = match lcs_step(p, &x, &u0, LEARNED_TOL) {
                Ok(v) => v,
                Err(_) => {
                    let lam = DVector::zeros(lay.m);
                    (p.next_state(&x, &u0, &lam), lam)
                }
            };
            let gap = &p.gap_x * &x + &p.gap_u * &u0 + &p.gap_lambda * &lam + &p.gap_offset;
            z.rows_mut(lay.lam(k), lay.m).copy_from(&lam);
            z.rows_mut(lay.gap(k), lay.m).copy_from(&gap);
            z.rows_mut(lay.x(k + 1), lay.n_x).copy_from(&x_next);
            x = x_next;
        }
        z
    }

    fn pack(&self, sol: &MpcSolution) -> DVector<f64> {
        let lay = &self.lay;
        let mut z = DVector::zeros(lay.n_z());
        for k in 0..lay.h {
            z.rows_mut(lay.u(k), lay.n_u).copy_from(&sol.controls[k]);
            z.rows_mut(lay.lam(k), lay.m).copy_from(&sol.forces[k]);
            z.rows_mut(lay.gap(k), lay.m).copy_from(&sol.gaps[k]);
            z.rows_mut(lay.x(k + 1), lay.n_x).copy_from(&sol.states[k + 1]);
        }
        z
    }

    fn compatible(&self, sol: &MpcSolution) -> bool {
        let lay = &self.lay;
        sol.controls.len() == lay.h
            && sol.states.len() == lay.h + 1
            && sol.forces.len() == lay.h
            && sol.gaps.len() == lay.h
            && sol.controls.iter().all(|u| u.len() == lay.n_u)
            && sol.states.iter().all(|x| x.len() == lay.n_x)
            && sol.forces.iter().all(|l| l.len() == lay.m)
            && sol.gaps.iter().all(|l| l.len() == lay.m)
            && sol.multipliers.equality.len() == lay.n_y()
            && sol.multipliers.inequality.len() == self.ineqs.len()
            && sol.multipliers.inequality_slack.len() == self.ineqs.len()
    }
}

// ---------------------------------------------------------------------------
// Interior-point iteration

#[derive(Debug, Clone)]
struct Iterate {
    z: DVector<f64>,
    y: DVector<f64>,
    t: DVector<f64>,
    nu: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
struct KktError {
    stationarity: f64,
    feasibility: f64,
    complementarity: f64,
    scaled: f64,
}

struct Ipm<'t, 'a> {
    tr: &'t Transcription<'a>,
    rho: f64,
    mu: f64,
    penalty: f64,
    last_delta_w: f64,
    iterations: usize,
}

const KAPPA_EPS: f64 = 10.0;

impl<'t, 'a> Ipm<'t, 'a> {
    fn kkt_error(&self, it: &Iterate, mu: f64) -> KktError {
        let tr = self.tr;
        let rd = tr.stationarity(&it.z, &it.y, &it.nu);
        let c = tr.eq_residual(&it.z);
        let g = tr.ineq_values(&it.z, self.rho);
        let stationarity = rd.amax();
        let feasibility = c.amax().max((&g - &it.t).amax());
        let complementarity = it
            .t
            .iter()
            .zip(it.nu.iter())
            .map(|(t, n)| (t * n - mu).abs())
            .fold(0.0, f64::max);
        let n_mult = (it.y.len() + it.nu.len()).max(1) as f64;
        let s_d = ((it.y.lp_norm(1) + it.nu.lp_norm(1)) / n_mult / 100.0).max(1.0);
        let s_c = (it.nu.lp_norm(1) / it.nu.len().max(1) as f64 / 100.0).max(1.0);
        KktError {
            stationarity,
            feasibility,
            complementarity,
            scaled: (stationarity / s_d).max(feasibility).max(complementarity / s_c),
        }
    }

    fn merit(&self, z: &DVector<f64>, t: &DVector<f64>) -> f64 {
        let tr = self.tr;
        let barrier: f64 = t.iter().map(|v| v.ln()).sum();
        let infeas = tr.eq_residual(z).lp_norm(1) + (tr.ineq_values(z, self.rho) - t).lp_norm(1);
        tr.objective(z) - self.mu * barrier + self.penalty * infeas
    }

    /// Factors the Newton matrix, adding primal (and if needed dual)
    /// regularization until the inertia is `(n_z, n_y, 0)`.
    fn factor(&mut self, it: &Iterate) -> Option<BandLdl> {
        let lay = &self.tr.lay;
        let (n_z, n_y) = (lay.n_z(), lay.n_y());
        let mut delta_w = 0.0;
        let mut delta_c = 0.0;
        for _ in 0..60 {
            let k = self.tr.kkt_matrix(&it.z, &it.t, &it.nu, delta_w, delta_c);
            let f = BandLdl::factor(&k, bandwidth(&k), 1e-14);
            let inertia = f.inertia();
            if inertia.zero == 0 && inertia.positive == n_z && inertia.negative == n_y {
                if delta_w > 0.0 {
                    self.last_delta_w = delta_w;
                }
                return Some(f);
            }
            if inertia.zero > 0 && delta_c == 0.0 {
                delta_c = 1e-8 * self.mu.powf(0.25);
            }
            delta_w = if delta_w == 0.0 {
                if self.last_delta_w == 0.0 {
                    1e-4
                } else {
                    (self.last_delta_w / 3.0).max(1e-20)
                }
            } else if self.last_delta_w == 0.0 {
                delta_w * 100.0
            } else {
                delta_w * 8.0
            };
            if delta_w > 1e40 {
                break;
            }
        }
        None
    }

    /// Where the true constraint value is positive it replaces the slack, so
    /// that curvature of the complementarity constraints never shows up as
    /// artificial infeasibility in the merit function.
    fn reset_slacks(t: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(t.len(), |j, _| if g[j] > 0.0 { g[j] } else { t[j] })
    }

    fn fraction_to_boundary(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for (x, d) in v.iter().zip(dv.iter()) {
            if *d < 0.0 {
                alpha = alpha.min(-tau * x / d);
            }
        }
        alpha
    }

    /// One Newton step on the barrier subproblem. Returns false when no
    /// usable direction could be computed.
    fn step(&mut self, it: &mut Iterate) -> bool {
        let tr = self.tr;
        let Some(fac) = self.factor(it) else {
            log::debug!("interior point: inertia correction failed at mu={:.2e}", self.mu);
            return false;
        };
        let rd = tr.stationarity(&it.z, &it.y, &it.nu);
        let c = tr.eq_residual(&it.z);
        let g = tr.ineq_values(&it.z, self.rho);
        let sigma = it.nu.component_div(&it.t);
        let mut w = DVector::zeros(tr.ineqs.len());
        for j in 0..w.len() {
            w[j] = self.mu / it.t[j] - it.nu[j] - sigma[j] * (g[j] - it.t[j]);
        }
        let mut rhs_z = -&rd;
        for j in 0..w.len() {
            for (i, gi) in tr.ineq_gradient(j, &it.z) {
                if i != usize::MAX {
                    rhs_z[i] += gi * w[j];
                }
            }
        }
        let rhs = tr.join(&rhs_z, &(-&c));
        let sol = fac.solve(&rhs);
        if !sol.iter().all(|v| v.is_finite()) {
            log::debug!("interior point: non-finite Newton direction");
            return false;
        }
        let (dz, dy) = tr.split(&sol);
        let mut dt = DVector::zeros(w.len());
        for j in 0..w.len() {
            let mut jd = 0.0;
            for (i, gi) in tr.ineq_gradient(j, &it.z) {
                if i != usize::MAX {
                    jd += gi * dz[i];
                }
            }
            dt[j] = jd + g[j] - it.t[j];
        }
        let dnu = DVector::from_fn(w.len(), |j, _| self.mu / it.t[j] - it.nu[j] - sigma[j] * dt[j]);

        let tau = (1.0 - self.mu).max(0.99);
        let alpha_p = Self::fraction_to_boundary(&it.t, &dt, tau);
        let alpha_d = Self::fraction_to_boundary(&it.nu, &dnu, tau);

        let y_trial = &it.y + &dy;
        let nu_trial = &it.nu + &dnu;
        self.penalty = self
            .penalty
            .max(1.1 * y_trial.amax().max(nu_trial.amax()) + 1.0);

        let phi0 = self.merit(&it.z, &it.t);
        let theta0 = c.lp_norm(1) + (&g - &it.t).lp_norm(1);
        let grad_f = tr.objective_gradient(&it.z);
        let barrier_slope: f64 = dt.iter().zip(it.t.iter()).map(|(d, t)| d / t).sum();
        let slope = grad_f.dot(&dz) - self.mu * barrier_slope - self.penalty * theta0;
        let err0 = self.kkt_error(it, self.mu).scaled;

        let mut alpha = alpha_p;
        let mut accepted = None;
        for trial in 0..40 {
            let z_new = &it.z + &dz * alpha;
            let t_new = Self::reset_slacks(&(&it.t + &dt * alpha), &tr.ineq_values(&z_new, self.rho));
            let phi = self.merit(&z_new, &t_new);
            let roundoff = 10.0 * f64::EPSILON * phi0.abs().max(1.0);
            let armijo = phi.is_finite() && phi <= phi0 + 1e-4 * alpha * slope.min(0.0) + roundoff;
            let kkt_better = trial == 0 && {
                let cand = Iterate {
                    z: z_new.clone(),
                    y: &it.y + &dy * alpha,
                    t: t_new.clone(),
                    nu: &it.nu + &dnu * alpha_d,
                };
                self.kkt_error(&cand, self.mu).scaled < 0.9 * err0
            };
            if armijo || kkt_better {
                accepted = Some((z_new, t_new, alpha));
                break;
            }
            alpha *= 0.5;
        }
        let (z_new, t_new, alpha) = accepted.unwrap_or_else(|| {
            let a = alpha.max(1e-12);
            let z_new = &it.z + &dz * a;
            let t_new = Self::reset_slacks(&(&it.t + &dt * a), &tr.ineq_values(&z_new, self.rho));
            (z_new, t_new, a)
        });
        it.z = z_new;
        it.t = t_new;
        it.y += &dy * alpha;
        it.nu += &dnu * alpha_d;
        // Keep multipliers within a factor of the central path.
        let kappa = 1e10;
        for j in 0..it.nu.len() {
            let c = self.mu / it.t[j];
            it.nu[j] = it.nu[j].clamp(c / kappa, c * kappa);
        }
        true
    }

    /// Drives the barrier parameter from its current value down to
    /// `mu_final` and polishes the final subproblem to `tol`.
    fn solve(&mut self, it: &mut Iterate, mu_final: f64, tol: f64, max_iters: usize) -> bool {
        let start = self.iterations;
        loop {
            let mut err = self.kkt_error(it, self.mu);
            while self.mu > mu_final && err.scaled <= KAPPA_EPS * self.mu {
                self.mu = (0.2 * self.mu).min(self.mu.powf(1.5)).max(mu_final);
                err = self.kkt_error(it, self.mu);
            }
            log::trace!(
                "ipm it={} rho={:.1e} mu={:.2e} err={:.3e} (stat {:.2e}, feas {:.2e}, comp {:.2e})",
                self.iterations,
                self.rho,
                self.mu,
                err.scaled,
                err.stationarity,
                err.feasibility,
                err.complementarity
            );
            if self.mu <= mu_final && err.scaled <= tol {
                return true;
            }
            if self.iterations - start >= max_iters {
                return false;
            }
            self.iterations += 1;
            if !self.step(it) {
                return false;
            }
        }
    }
}

fn initial_slacks(g: &DVector<f64>, floor: f64) -> DVector<f64> {
    g.map(|v| v.max(floor))
}

fn assemble_solution(tr: &Transcription, it: &Iterate, rho: f64, mu: f64) -> MpcSolution {
    let lay = &tr.lay;
    let controls = (0..lay.h).map(|k| it.z.rows(lay.u(k), lay.n_u).into_owned()).collect();
    let states = (0..=lay.h).map(|j| tr.state(&it.z, j)).collect();
    let forces = (0..lay.h).map(|k| it.z.rows(lay.lam(k), lay.m).into_owned()).collect();
    let gaps = (0..lay.h).map(|k| it.z.rows(lay.gap(k), lay.m).into_owned()).collect();
    let rd = tr.stationarity(&it.z, &it.y, &it.nu);
    let c = tr.eq_residual(&it.z);
    let g = tr.ineq_values(&it.z, rho);
    let comp = it.t.iter().zip(it.nu.iter()).map(|(t, n)| t * n).fold(0.0, f64::max);
    let kkt_residual = rd.amax().max(c.amax()).max((&g - &it.t).amax()).max(comp);
    MpcSolution {
        controls,
        states,
        forces,
        gaps,
        multipliers: Multipliers {
            equality: it.y.clone(),
            inequality: it.nu.clone(),
            inequality_slack: it.t.clone(),
        },
        kkt_residual,
        converged: false,
        objective: tr.objective(&it.z),
        stage_objectives: Vec::new(),
        iterations: 0,
        mu,
    }
}

/// Solves the relaxed contact-implicit problem from `x0`.
///
/// Without a warm start the full relaxation schedule is traversed, each
/// stage starting from the previous stage's solution. With a compatible warm
/// start only the final relaxation level is solved, starting from the given
/// iterate at a small barrier parameter; if that fails the cold path is used.
pub fn solve_mpc(prob: &MpcProblem, x0: &DVector<f64>, warm_start: Option<&MpcSolution>) -> Result<MpcSolution> {
    prob.validate()?;
    if x0.len() != prob.dims().n_x || x0.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::InvalidProblem(format!(
            "initial state must be finite with length {}",
            prob.dims().n_x
        )));
    }
    let tr = Transcription::new(prob, x0);
    let result = match warm_start.filter(|w| tr.compatible(w)) {
        Some(w) => solve_warm(&tr, w).or_else(|_| solve_cold(&tr)),
        None => solve_cold(&tr),
    };
    if let (Some(path), Ok(sol)) = (&prob.settings.dump_path, &result) {
        if let Err(e) = append_dump(path, sol) {
            log::warn!("could not write MPC trajectory dump to {}: {e}", path.display());
        }
    }
    result
}

fn solve_cold(tr: &Transcription) -> Result<MpcSolution> {
    let prob = tr.prob;
    let s = &prob.settings;
    let rho0 = prob.relaxation[0];
    let z = tr.cold_start();
    let t = initial_slacks(&tr.ineq_values(&z, rho0), 1e-2_f64.min(0.5 * rho0));
    let nu = t.map(|v| s.mu_init / v);
    let mut it = Iterate {
        z,
        y: DVector::zeros(tr.lay.n_y()),
        t,
        nu,
    };
    let mut ipm = Ipm {
        tr,
        rho: rho0,
        mu: s.mu_init,
        penalty: 1.0,
        last_delta_w: 0.0,
        iterations: 0,
    };
    let mut stage_objectives = Vec::with_capacity(prob.relaxation.len());
    for (stage, &rho) in prob.relaxation.iter().enumerate() {
        if stage > 0 {
            ipm.rho = rho;
            ipm.mu = (1e-2 * rho).clamp(s.mu_final, s.mu_init);
            let g = tr.ineq_values(&it.z, rho);
            for (j, q) in tr.ineqs.iter().enumerate() {
                if matches!(q, Ineq::Comp { .. }) {
                    it.t[j] = g[j].max(0.1 * rho);
                    it.nu[j] = it.nu[j].max(ipm.mu / it.t[j]);
                }
            }
        }
        let ok = ipm.solve(&mut it, s.mu_final, s.tol, s.max_iters);
        let mut sol = assemble_solution(tr, &it, rho, ipm.mu);
        stage_objectives.push(sol.objective);
        if !ok {
            sol.iterations = ipm.iterations;
            sol.stage_objectives = stage_objectives;
            return Err(MpcError::SolveFailed {
                residual: sol.kkt_residual,
                iterations: ipm.iterations,
                iterate: Box::new(sol),
            });
        }
    }
    let mut sol = assemble_solution(tr, &it, ipm.rho, ipm.mu);
    sol.converged = true;
    sol.iterations = ipm.iterations;
    sol.stage_objectives = stage_objectives;
    Ok(sol)
}

fn solve_warm(tr: &Transcription, warm: &MpcSolution) -> Result<MpcSolution> {
    let prob = tr.prob;
    let s = &prob.settings;
    let rho = prob.rho_final();
    let mu = s.mu_warm.max(s.mu_final);
    let z = tr.pack(warm);
    let g = tr.ineq_values(&z, rho);
    let floor = (0.1 * rho).min(mu.sqrt());
    let t = DVector::from_fn(g.len(), |j, _| g[j].max(warm.multipliers.inequality_slack[j].min(floor)).max(floor * 1e-3));
    let nu = DVector::from_fn(g.len(), |j, _| {
        let c = mu / t[j];
        warm.multipliers.inequality[j].clamp(c * 1e-3, c * 1e3)
    });
    let mut it = Iterate {
        z,
        y: warm.multipliers.equality.clone(),
        t,
        nu,
    };
    let mut ipm = Ipm {
        tr,
        rho,
        mu,
        penalty: 1.0,
        last_delta_w: 0.0,
        iterations: 0,
    };
    let ok = ipm.solve(&mut it, s.mu_final, s.tol, s.max_iters);
    let mut sol = assemble_solution(tr, &it, rho, ipm.mu);
    sol.iterations = ipm.iterations;
    sol.stage_objectives = vec![sol.objective];
    if !ok {
        return Err(MpcError::SolveFailed {
            residual: sol.kkt_residual,
            iterations: ipm.iterations,
            iterate: Box::new(sol),
        });
    }
    sol.converged = true;
    Ok(sol)
}

fn append_dump(path: &Path, sol: &MpcSolution) -> std::io::Result<()> {
    let mut buf = Vec::new();
    sol.write_csv(&mut buf)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&buf)
}

/// Outcome of [`mpc_first_action`].
#[derive(Debug, Clone)]
pub struct FirstAction {
    pub action: DVector<f64>,
    /// Present when the solve converged.
    pub solution: Option<MpcSolution>,
    pub fallback: bool,
}

/// First planned action, falling back to the warm start's first action (or
/// zero, clamped into the bounds) when the solve fails.
pub fn mpc_first_action(prob: &MpcProblem, x0: &DVector<f64>, warm_start: Option<&MpcSolution>) -> FirstAction {
    match solve_mpc(prob, x0, warm_start) {
        Ok(sol) => FirstAction {
            action: sol.controls[0].clone(),
            solution: Some(sol),
            fallback: false,
        },
        Err(e) => {
            log::debug!("planner fallback: {e}");
            let n_u = prob.dims().n_u;
            let action = match warm_start {
                Some(w) if !w.controls.is_empty() && w.controls[0].len() == n_u => w.controls[0].clone(),
                _ => DVector::zeros(n_u),
            };
            let action = DVector::from_fn(n_u, |j, _| action[j].clamp(prob.u_min[j], prob.u_max[j]));
            FirstAction {
                action,
                solution: None,
                fallback: true,
            }
        }
    }
}

#[cfg(test)]
mod tests;
