//! Violation-based LCS identification.
//!
//! For a transition `(x, u, x')` the loss is the optimal value of
//!
//! ```txt
//!   min_{λ ≥ 0, φ ≥ 0}  ½‖A x + B u + C λ + d − x'‖²
//!                      + (1/ξ)(λᵀφ + (1/2γ)‖D x + E u + F λ + c − φ‖²)
//! ```
//!
//! which is a convex QP in `(λ, φ)` whenever `γ ≤ σ_min(F + Fᵀ)`. Its gradient
//! with respect to the LCS parameters is taken at the fixed inner minimizer
//! (envelope theorem), so no differentiation through the inner solve is
//! needed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::lcs::{lcp_solve, LcpInstance, LcsDims, LcsParams, LEARNED_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("inner violation QP did not converge after {iterations} iterations (residual {residual:.3e})")]
    InnerSolveFailed { iterations: usize, residual: f64 },
    #[error("data buffer is empty")]
    EmptyBuffer,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LearnError>;

/// One observed transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTriple {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

impl TransitionTriple {
    pub fn new(x: DVector<f64>, u: DVector<f64>, x_next: DVector<f64>) -> Self {
        Self { x, u, x_next }
    }

    fn check(&self, dims: LcsDims) -> Result<()> {
        if self.x.len() != dims.n_x || self.x_next.len() != dims.n_x || self.u.len() != dims.n_u {
            return Err(LearnError::DimensionMismatch(format!(
                "transition has |x|={}, |u|={}, |x'|={} but model expects n_x={}, n_u={}",
                self.x.len(),
                self.u.len(),
                self.x_next.len(),
                dims.n_x,
                dims.n_u
            )));
        }
        Ok(())
    }
}

/// Insertion-ordered transition store. When bounded, the oldest entries are
/// evicted first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataBuffer {
    transitions: Vec<TransitionTriple>,
    capacity: Option<usize>,
}

impl DataBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            transitions: Vec::new(),
            capacity: Some(capacity),
        }
    }

    pub fn push(&mut self, t: TransitionTriple) {
        self.transitions.push(t);
        if let Some(cap) = self.capacity {
            if self.transitions.len() > cap {
                let excess = self.transitions.len() - cap;
                self.transitions.drain(..excess);
            }
        }
    }

    pub fn extend<I: IntoIterator<Item = TransitionTriple>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn transitions(&self) -> &[TransitionTriple] {
        &self.transitions
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationConfig {
    /// Balance between the dynamics and complementarity terms.
    pub xi: f64,
    /// Conditioning parameter of the complementarity term.
    pub gamma: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Keep `σ_min(F + Fᵀ) ≥ gamma` after every training step.
    pub project: bool,
}

impl Default for ViolationConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            gamma: 1e-2,
            inner_tol: 1e-10,
            inner_max_iters: 500,
            project: true,
        }
    }
}

impl ViolationConfig {
    /// Smallest eigenvalue of `F + Fᵀ`, if it is below `gamma`. The inner QP
    /// is only guaranteed convex when this returns `None`.
    pub fn gamma_violation(&self, params: &LcsParams) -> Option<f64> {
        let f = &params.gap_lambda;
        let sym = f + f.transpose();
        let min_eig = sym.symmetric_eigenvalues().min();
        if self.gamma > min_eig {
            Some(min_eig)
        } else {
            None
        }
    }

    /// Raises the eigenvalues of `F + Fᵀ` to at least `gamma`, leaving the
    /// skew part of `F` alone. This is the Frobenius-nearest `F` meeting the
    /// condition. Returns whether `F` changed.
    pub fn project_gamma(&self, params: &mut LcsParams) -> bool {
        if self.gamma_violation(params).is_none() {
            return false;
        }
        let f = &params.gap_lambda;
        let sym = (f + f.transpose()) * 0.5;
        let skew = (f - f.transpose()) * 0.5;
        let mut eig = sym.symmetric_eigen();
        eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.5 * self.gamma));
        let sym = eig.recompose();
        params.gap_lambda = (&sym + sym.transpose()) * 0.5 + skew;
        true
    }

    /// Logs a warning when the conditioning parameter exceeds `σ_min(F + Fᵀ)`.
    pub fn validate(&self, params: &LcsParams) -> bool {
        match self.gamma_violation(params) {
            Some(min_eig) => {
                log::warn!(
                    "violation loss gamma={} exceeds smallest eigenvalue {:.4e} of F + F^T; inner problem may be nonconvex",
                    self.gamma,
                    min_eig
                );
                false
            }
            None => true,
        }
    }
}

/// Minimizer of the inner problem for one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub lambda: DVector<f64>,
    pub phi: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at the returned point.
    pub residual: f64,
}

/// Quadratic model `½ vᵀ H v + gᵀ v + k` of the inner objective in
/// `v = (λ, φ)`, together with the pieces needed to evaluate it exactly.
struct InnerQp<'a> {
    params: &'a LcsParams,
    cfg: &'a ViolationConfig,
    /// `A x + B u + d − x'`.
    dyn_base: DVector<f64>,
    /// `D x + E u + c`.
    gap_base: DVector<f64>,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
}

impl<'a> InnerQp<'a> {
    fn new(params: &'a LcsParams, triple: &TransitionTriple, cfg: &'a ViolationConfig) -> Self {
        let m = params.dims().n_lambda;
        let dyn_base = &params.a * &triple.x + &params.b * &triple.u + &params.d - &triple.x_next;
        let gap_base = &params.gap_x * &triple.x + &params.gap_u * &triple.u + &params.gap_offset;
        let k = 1.0 / (cfg.xi * cfg.gamma);
        let c = &params.c;
        let f = &params.gap_lambda;

        let mut hessian = DMatrix::zeros(2 * m, 2 * m);
        let h_ll = c.transpose() * c + f.transpose() * f * k;
        let h_lp = (DMatrix::identity(m, m) * cfg.gamma - f.transpose()) * k;
        hessian.view_mut((0, 0), (m, m)).copy_from(&h_ll);
        hessian.view_mut((0, m), (m, m)).copy_from(&h_lp);
        hessian.view_mut((m, 0), (m, m)).copy_from(&h_lp.transpose());
        hessian.view_mut((m, m), (m, m)).copy_from(&(DMatrix::identity(m, m) * k));

        let mut linear = DVector::zeros(2 * m);
        linear
            .rows_mut(0, m)
            .copy_from(&(c.transpose() * &dyn_base + f.transpose() * &gap_base * k));
        linear.rows_mut(m, m).copy_from(&(-&gap_base * k));

        Self {
            params,
            cfg,
            dyn_base,
            gap_base,
            hessian,
            linear,
        }
    }

    fn m(&self) -> usize {
        self.gap_base.len()
    }

    /// Dynamics residual and complementarity residual at `(λ, φ)`.
    fn residuals(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.m();
        let lambda = v.rows(0, m);
        let phi = v.rows(m, m);
        let r = &self.dyn_base + &self.params.c * lambda;
        let s = &self.gap_base + &self.params.gap_lambda * lambda - phi;
        (r, s)
    }

    fn objective(&self, v: &DVector<f64>) -> f64 {
        let m = self.m();
        let (r, s) = self.residuals(v);
        let bilinear = v.rows(0, m).dot(&v.rows(m, m));
        0.5 * r.norm_squared() + (bilinear + s.norm_squared() / (2.0 * self.cfg.gamma)) / self.cfg.xi
    }

    fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.hessian * v + &self.linear
    }
}

fn projected_gradient(v: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| if v[i] > 0.0 { grad[i] } else { grad[i].min(0.0) })
}

/// Solves the inner nonnegativity-constrained QP for one transition.
///
/// Alternates a projected-gradient step with exact line search (up to the
/// first breakpoint) and a Newton step on the current free variables,
/// accepting the latter only if it does not increase the objective. The
/// objective is therefore non-increasing across iterations.
pub fn violation_inner_solve(
    params: &LcsParams,
    triple: &TransitionTriple,
    cfg: &ViolationConfig,
) -> Result<InnerSolution> {
    inner_solve_impl(params, triple, cfg, None)
}

/// Same as [`violation_inner_solve`], also recording the objective after
/// every iteration (entry 0 is the starting point).
pub fn violation_inner_solve_traced(
    params: &LcsParams,
    triple: &TransitionTriple,
    cfg: &ViolationConfig,
) -> Result<(InnerSolution, Vec<f64>)> {
    let mut trace = Vec::new();
    let sol = inner_solve_impl(params, triple, cfg, Some(&mut trace))?;
    Ok((sol, trace))
}

fn inner_solve_impl(
    params: &LcsParams,
    triple: &TransitionTriple,
    cfg: &ViolationConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<InnerSolution> {
    let dims = params.dims();
    triple.check(dims)?;
    let m = dims.n_lambda;
    let qp = InnerQp::new(params, triple, cfg);

    // Start from the model's own LCP solution when it exists: for data the
    // model generated, that point is already the minimizer.
    let mut v = DVector::zeros(2 * m);
    if let Ok(inst) = params.lcp_at(&triple.x, &triple.u) {
        if let Ok(sol) = lcp_solve(&inst, LEARNED_TOL) {
            v.rows_mut(0, m).copy_from(&sol.lambda);
            v.rows_mut(m, m).copy_from(&sol.slack.map(|s| s.max(0.0)));
        }
    }
    let mut obj = qp.objective(&v);
    // The QP over v ≥ 0 is itself the LCP (H, g); when pivoting succeeds it
    // lands on the minimizer up to roundoff.
    if let Ok(inst) = LcpInstance::new(qp.hessian.clone(), qp.linear.clone()) {
        if let Ok(sol) = lcp_solve(&inst, cfg.inner_tol) {
            let cand = sol.lambda.map(|x| x.max(0.0));
            let cand_obj = qp.objective(&cand);
            if cand_obj < obj {
                v = cand;
                obj = cand_obj;
            }
        }
    }
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj);
    }

    let scale = 1.0 + qp.linear.amax();
    let mut residual = f64::INFINITY;
    for iter in 0..cfg.inner_max_iters {
        let grad = qp.gradient(&v);
        let pg = projected_gradient(&v, &grad);
        residual = pg.amax();
        if residual <= cfg.inner_tol * scale {
            return Ok(InnerSolution {
                lambda: v.rows(0, m).into_owned(),
                phi: v.rows(m, m).into_owned(),
                objective: obj,
                iterations: iter,
                residual,
            });
        }

        // Projected gradient step, exact line search to the first breakpoint.
        let dir = -&pg;
        let curvature = dir.dot(&(&qp.hessian * &dir));
        let slope = grad.dot(&dir);
        let mut alpha = if curvature > 0.0 { -slope / curvature } else { f64::INFINITY };
        let mut blocking = None;
        for i in 0..v.len() {
            if dir[i] < 0.0 {
                let a = v[i] / -dir[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        if alpha.is_finite() {
            let candidate = (&v + &dir * alpha).map(|x| x.max(0.0));
            let mut candidate = candidate;
            if let Some(i) = blocking {
                candidate[i] = 0.0;
            }
            let cand_obj = qp.objective(&candidate);
            if cand_obj <= obj {
                v = candidate;
                obj = cand_obj;
            }
        }

        // Newton step on the free variables.
        let grad = qp.gradient(&v);
        let free: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0 || grad[i] < 0.0).collect();
        if !free.is_empty() {
            let h_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| qp.hessian[(free[i], free[j])]);
            let g_f = DVector::from_fn(free.len(), |i, _| -grad[free[i]]);
            if let Some(chol) = h_ff.cholesky() {
                let step = chol.solve(&g_f);
                let mut t = 1.0;
                for _ in 0..40 {
                    let mut candidate = v.clone();
                    for (k, &i) in free.iter().enumerate() {
                        candidate[i] = (v[i] + t * step[k]).max(0.0);
                    }
                    let cand_obj = qp.objective(&candidate);
                    if cand_obj <= obj {
                        v = candidate;
                        obj = cand_obj;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(obj);
        }
    }

    let grad = qp.gradient(&v);
    let final_residual = projected_gradient(&v, &grad).amax();
    if final_residual <= cfg.inner_tol * scale {
        return Ok(InnerSolution {
            lambda: v.rows(0, m).into_owned(),
            phi: v.rows(m, m).into_owned(),
            objective: obj,
            iterations: cfg.inner_max_iters,
            residual: final_residual,
        });
    }
    Err(LearnError::InnerSolveFailed {
        iterations: cfg.inner_max_iters,
        residual: final_residual.min(residual),
    })
}

/// Mean inner objective over the buffer.
pub fn violation_loss(params: &LcsParams, buffer: &DataBuffer, cfg: &ViolationConfig) -> Result<f64> {
    loss_over(params, buffer.transitions(), cfg)
}

pub fn loss_over(params: &LcsParams, data: &[TransitionTriple], cfg: &ViolationConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(LearnError::EmptyBuffer);
    }
    let mut total = 0.0;
    for t in data {
        total += violation_inner_solve(params, t, cfg)?.objective;
    }
    Ok(total / data.len() as f64)
}

/// Envelope gradient of one transition's loss at a given inner minimizer,
/// accumulated into `out` with weight `weight`.
fn accumulate_envelope_gradient(
    params: &LcsParams,
    triple: &TransitionTriple,
    inner: &InnerSolution,
    cfg: &ViolationConfig,
    weight: f64,
    out: &mut [f64],
) {
    let dims = params.dims();
    let r = params.next_state(&triple.x, &triple.u, &inner.lambda) - &triple.x_next;
    let s = &params.gap_x * &triple.x + &params.gap_u * &triple.u + &params.gap_lambda * &inner.lambda
        + &params.gap_offset
        - &inner.phi;
    let k = weight / (cfg.xi * cfg.gamma);
    let blocks = dims.blocks();

    let mut outer = |block: usize, left: &DVector<f64>, right: Option<&DVector<f64>>, w: f64| {
        let b = blocks[block];
        for i in 0..b.rows {
            match right {
                Some(rv) => {
                    for j in 0..b.cols {
                        out[b.index(i, j)] += w * left[i] * rv[j];
                    }
                }
                None => out[b.index(i, 0)] += w * left[i],
            }
        }
    };
    outer(0, &r, Some(&triple.x), weight);
    outer(1, &r, Some(&triple.u), weight);
    outer(2, &r, Some(&inner.lambda), weight);
    outer(3, &r, None, weight);
    outer(4, &s, Some(&triple.x), k);
    outer(5, &s, Some(&triple.u), k);
    outer(6, &s, Some(&inner.lambda), k);
    outer(7, &s, None, k);
}

/// Gradient of [`violation_loss`] with respect to the flattened parameters.
pub fn violation_gradient(params: &LcsParams, buffer: &DataBuffer, cfg: &ViolationConfig) -> Result<Vec<f64>> {
    loss_and_gradient(params, buffer.transitions(), cfg).map(|(_, g)| g)
}

/// Loss and envelope gradient over a slice of transitions, summed in
/// buffer order.
pub fn loss_and_gradient(
    params: &LcsParams,
    data: &[TransitionTriple],
    cfg: &ViolationConfig,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(LearnError::EmptyBuffer);
    }
    let weight = 1.0 / data.len() as f64;
    let mut grad = vec![0.0; params.dims().param_count()];
    let mut loss = 0.0;
    for t in data {
        let inner = violation_inner_solve(params, t, cfg)?;
        loss += inner.objective * weight;
        accumulate_envelope_gradient(params, t, &inner, cfg, weight, &mut grad);
    }
    Ok((loss, grad))
}

/// Random initial model: entries uniform in `[-0.1, 0.1]`, except
/// `F = 0.1 I + noise` so that `F + Fᵀ` starts positive definite.
pub fn init_params<R: Rng + ?Sized>(dims: LcsDims, rng: &mut R) -> LcsParams {
    let theta: Vec<f64> = (0..dims.param_count()).map(|_| rng.random_range(-0.1..=0.1)).collect();
    let mut params = LcsParams::from_slice(dims, &theta).expect("length matches by construction");
    let n = dims.n_lambda;
    params.gap_lambda = DMatrix::from_fn(n, n, |i, j| {
        let noise = rng.random_range(-0.01..=0.01);
        if i == j {
            0.1 + noise
        } else {
            noise
        }
    });
    params
}
