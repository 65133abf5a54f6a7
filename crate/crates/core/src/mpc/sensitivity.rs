//! Derivative of the first planned action with respect to the LCS parameters.
//!
//! At a converged barrier solution the condensed KKT residual
//! `F(z, y; θ) = [∇f + J_cᵀ y − J_gᵀ ν; c(z; θ)]` vanishes, and only the
//! equality constraints depend on the model parameters. The implicit function
//! theorem then gives `d(z, y)/dθ = −K⁻¹ ∂F/∂θ` with `K` the unregularized
//! Newton matrix; only the rows of the first action are needed, so `n_u`
//! adjoint solves suffice.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};

use super::linalg::{bandwidth, rcond_estimate, BandLdl, Inertia};
use super::{Ineq, MpcProblem, MpcSolution, Transcription};

/// Reciprocal condition estimate below which the KKT matrix counts as
/// singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    /// `n_u × dim(Θ)` Jacobian of the first action, columns in the flattened
    /// parameter order.
    pub jacobian: DMatrix<f64>,
    pub valid: bool,
    pub degeneracy_note: Option<String>,
    pub rcond: f64,
    /// Smallest multiplier over constraints judged active.
    pub min_active_multiplier: f64,
    /// Smallest slack over constraints judged inactive.
    pub min_inactive_slack: f64,
}

impl SensitivityResult {
    fn invalid(n_u: usize, n_theta: usize, note: String) -> Self {
        Self {
            jacobian: DMatrix::zeros(n_u, n_theta),
            valid: false,
            degeneracy_note: Some(note),
            rcond: 0.0,
            min_active_multiplier: f64::NAN,
            min_inactive_slack: f64::NAN,
        }
    }
}

enum KktSolver {
    Band(BandLdl),
    Dense(SymmetricEigen<f64, Dyn>),
}

impl KktSolver {
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Band(f) => f.solve(b),
            Self::Dense(e) => {
                let mut c = e.eigenvectors.tr_mul(b);
                c.component_div_assign(&e.eigenvalues);
                &e.eigenvectors * c
            }
        }
    }
}

/// Jacobian of `controls[0]` with respect to the flattened model parameters
/// at a converged solution.
///
/// The result is flagged invalid (never an error) when the solution did not
/// converge, the Newton matrix has the wrong inertia or is numerically
/// singular, an action bound is weakly active (slack and multiplier both
/// vanishing), or a contact is at a double-zero point (`λ` and its gap both
/// below `√ρ`).
pub fn kkt_sensitivity(prob: &MpcProblem, sol: &MpcSolution) -> SensitivityResult {
    let dims = prob.dims();
    let n_theta = dims.param_count();
    if !sol.converged {
        return SensitivityResult::invalid(dims.n_u, n_theta, "solution did not converge".into());
    }
    let tr = Transcription::new(prob, &sol.states[0]);
    if !tr.compatible(sol) {
        return SensitivityResult::invalid(dims.n_u, n_theta, "solution does not match the problem layout".into());
    }
    let lay = &tr.lay;
    let z = tr.pack(sol);
    let y = &sol.multipliers.equality;
    let nu = &sol.multipliers.inequality;
    let t = &sol.multipliers.inequality_slack;

    // Strict complementarity bookkeeping.
    let bound_tol = 100.0 * sol.mu.max(prob.settings.mu_final).sqrt();
    let contact_tol = prob.rho_final().sqrt();
    let mut min_active = f64::INFINITY;
    let mut min_inactive = f64::INFINITY;
    let mut notes = Vec::new();
    for (j, q) in tr.ineqs.iter().enumerate() {
        if nu[j] > t[j] {
            min_active = min_active.min(nu[j]);
        } else {
            min_inactive = min_inactive.min(t[j]);
        }
        match *q {
            Ineq::Lower { var, .. } | Ineq::Upper { var, .. } if var % lay.stage_z < lay.n_u => {
                if t[j].max(nu[j]) <= bound_tol {
                    notes.push(format!(
                        "action bound {j} weakly active (slack {:.2e}, multiplier {:.2e})",
                        t[j], nu[j]
                    ));
                }
            }
            Ineq::Comp { force, gap } => {
                if z[force].max(z[gap]) <= contact_tol {
                    notes.push(format!(
                        "contact at double-zero point (force {:.2e}, gap {:.2e})",
                        z[force], z[gap]
                    ));
                }
            }
            _ => {}
        }
    }

    // Barrier terms scale rows by up to 1/μ, which is benign. Equilibrate
    // symmetrically, K̃ = S K S with S = diag(1/√max_j |K_ij|), before
    // estimating the condition number and solve through K̃.
    let k_raw = tr.kkt_matrix(&z, t, nu, 0.0, 0.0);
    let scale = DVector::from_fn(k_raw.nrows(), |i, _| {
        let r = k_raw.row(i).amax();
        if r > 0.0 { 1.0 / r.sqrt() } else { 1.0 }
    });
    let k = DMatrix::from_fn(k_raw.nrows(), k_raw.ncols(), |i, j| scale[i] * k_raw[(i, j)] * scale[j]);
    let fac = BandLdl::factor(&k, bandwidth(&k), 1e-14);
    let band_inertia = fac.inertia();
    // The banded factorization does not pivot, so a zero diagonal (e.g. a
    // terminal state without cost) stops it on a nonsingular matrix. Decide
    // with a dense eigendecomposition then.
    let solver = if band_inertia.zero == 0 {
        KktSolver::Band(fac)
    } else {
        KktSolver::Dense(k.clone().symmetric_eigen())
    };
    let (inertia, rcond) = match &solver {
        KktSolver::Band(f) => (band_inertia, rcond_estimate(&k, f)),
        KktSolver::Dense(e) => {
            let max = e.eigenvalues.amax();
            let tiny = 1e-14 * max;
            let count = |p: &dyn Fn(f64) -> bool| e.eigenvalues.iter().filter(|&&l| p(l)).count();
            let zero = count(&|l| l.abs() <= tiny);
            let rcond = if max > 0.0 { e.eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs())) / max } else { 0.0 };
            let inertia = Inertia {
                positive: count(&|l| l > tiny),
                negative: count(&|l| l < -tiny),
                zero,
            };
            (inertia, if zero == 0 { rcond } else { 0.0 })
        }
    };
    if inertia.zero > 0 || rcond < RCOND_THRESHOLD {
        notes.push(format!("KKT matrix numerically singular (rcond {rcond:.2e})"));
    } else if inertia.positive != lay.n_z() || inertia.negative != lay.n_y() {
        notes.push(format!(
            "KKT matrix inertia ({}, {}) differs from ({}, {})",
            inertia.positive,
            inertia.negative,
            lay.n_z(),
            lay.n_y()
        ));
    }

    let blocks = dims.blocks();
    let mut jac = DMatrix::zeros(dims.n_u, n_theta);
    if inertia.zero == 0 {
        for i in 0..dims.n_u {
            let mut e = DVector::zeros(k.nrows());
            let idx = lay.kkt_z(lay.u(0) + i);
            e[idx] = scale[idx];
            let w = solver.solve(&e).component_mul(&scale);
            let (wz, wy) = tr.split(&w);
            let var_term = |row: usize, var: Option<usize>, constant: f64| -> f64 {
                // The parameter enters row `row` with coefficient −1 on
                // `var` (or on the constant).
                match var {
                    Some(v) => wz[v] * y[row] + wy[row] * z[v],
                    None => wy[row] * constant,
                }
            };
            let mut row_i = vec![0.0; n_theta];
            for kk in 0..lay.h {
                let x_var = |b: usize| if kk == 0 { None } else { Some(lay.x(kk) + b) };
                for a in 0..lay.n_x {
                    let r = lay.dyn_row(kk) + a;
                    for b in 0..lay.n_x {
                        row_i[blocks[0].index(a, b)] += var_term(r, x_var(b), sol.states[0][b]);
                    }
                    for b in 0..lay.n_u {
                        row_i[blocks[1].index(a, b)] += var_term(r, Some(lay.u(kk) + b), 0.0);
                    }
                    for b in 0..lay.m {
                        row_i[blocks[2].index(a, b)] += var_term(r, Some(lay.lam(kk) + b), 0.0);
                    }
                    row_i[blocks[3].index(a, 0)] += var_term(r, None, 1.0);
                }
                for a in 0..lay.m {
                    let r = lay.gap_row(kk) + a;
                    for b in 0..lay.n_x {
                        row_i[blocks[4].index(a, b)] += var_term(r, x_var(b), sol.states[0][b]);
                    }
                    for b in 0..lay.n_u {
                        row_i[blocks[5].index(a, b)] += var_term(r, Some(lay.u(kk) + b), 0.0);
                    }
                    for b in 0..lay.m {
                        row_i[blocks[6].index(a, b)] += var_term(r, Some(lay.lam(kk) + b), 0.0);
                    }
                    row_i[blocks[7].index(a, 0)] += var_term(r, None, 1.0);
                }
            }
            for (col, v) in row_i.into_iter().enumerate() {
                jac[(i, col)] = v;
            }
        }
    }

    let valid = notes.is_empty() && jac.iter().all(|v| v.is_finite());
    SensitivityResult {
        jacobian: jac,
        valid,
        degeneracy_note: if notes.is_empty() { None } else { Some(notes.join("; ")) },
        rcond,
        min_active_multiplier: min_active,
        min_inactive_slack: min_inactive,
    }
}
