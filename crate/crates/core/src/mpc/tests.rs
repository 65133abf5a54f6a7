use super::*;
use nalgebra::{dmatrix, dvector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn contact_free(n_x: usize, n_u: usize, m: usize, rng: &mut ChaCha8Rng) -> LcsParams {
    let dims = LcsDims::new(n_x, n_u, m).unwrap();
    let mut p = LcsParams::zeros(dims);
    p.a = DMatrix::from_fn(n_x, n_x, |i, j| if i == j { 0.9 } else { rng.random_range(-0.2..0.2) });
    p.b = DMatrix::from_fn(n_x, n_u, |_, _| rng.random_range(-1.0..1.0));
    p.d = DVector::from_fn(n_x, |_, _| rng.random_range(-0.1..0.1));
    p.gap_lambda = DMatrix::identity(m, m);
    p.gap_offset = DVector::from_element(m, 1.0);
    p
}

fn quad_cost(n_x: usize, n_u: usize, goal: DVector<f64>) -> CostSpec {
    CostSpec::new(
        DMatrix::identity(n_x, n_x),
        DMatrix::identity(n_u, n_u) * 0.5,
        DMatrix::identity(n_x, n_x) * 2.0,
        goal,
    )
    .unwrap()
}

fn wide_problem(params: LcsParams, cost: CostSpec, h: usize) -> MpcProblem {
    let n_u = params.dims().n_u;
    MpcProblem::new(
        params,
        cost,
        h,
        DVector::from_element(n_u, -100.0),
        DVector::from_element(n_u, 100.0),
    )
    .unwrap()
}

/// Closed-form optimum of the unconstrained affine-dynamics LQ problem,
/// obtained by condensing the states and solving the normal equations.
fn lq_oracle(prob: &MpcProblem, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    let p = &prob.params;
    let (n_x, n_u, h) = (p.dims().n_x, p.dims().n_u, prob.horizon);
    // x_j = Φ_j x0 + Σ_{k<j} A^{j-1-k} (B u_k + d) = s_j + G_j u.
    let mut s = vec![x0.clone()];
    let mut g = vec![DMatrix::zeros(n_x, n_u * h)];
    for j in 0..h {
        let s_next = &p.a * &s[j] + &p.d;
        let mut g_next = &p.a * &g[j];
        g_next.view_mut((0, j * n_u), (n_x, n_u)).copy_from(&p.b);
        s.push(s_next);
        g.push(g_next);
    }
    let c = &prob.cost;
    let mut hess = DMatrix::zeros(n_u * h, n_u * h);
    let mut lin = DVector::zeros(n_u * h);
    for j in 1..=h {
        let w = if j == h { &c.terminal_weight } else { &c.state_weight };
        hess += g[j].transpose() * w * &g[j];
        lin += g[j].transpose() * w * (&s[j] - &c.goal_state);
    }
    for k in 0..h {
        let mut blk = hess.view_mut((k * n_u, k * n_u), (n_u, n_u));
        blk += &c.action_weight;
    }
    let u = hess.lu().solve(&(-lin)).unwrap();
    (0..h).map(|k| u.rows(k * n_u, n_u).into_owned()).collect()
}

fn check_solution(prob: &MpcProblem, sol: &MpcSolution) {
    let p = &prob.params;
    let rho = prob.rho_final();
    for k in 0..prob.horizon {
        let x = &sol.states[k];
        let u = &sol.controls[k];
        let lam = &sol.forces[k];
        let pred = p.next_state(x, u, lam);
        assert!((&pred - &sol.states[k + 1]).amax() <= 1e-6, "dynamics residual");
        let gap = &p.gap_x * x + &p.gap_u * u + &p.gap_lambda * lam + &p.gap_offset;
        assert!((&gap - &sol.gaps[k]).amax() <= 1e-6, "gap residual");
        for j in 0..u.len() {
            assert!(u[j] >= prob.u_min[j] - 1e-8 && u[j] <= prob.u_max[j] + 1e-8);
        }
        for i in 0..lam.len() {
            assert!(lam[i] >= -1e-8 && sol.gaps[k][i] >= -1e-8);
            assert!(lam[i] * sol.gaps[k][i] <= rho + 1e-8);
        }
    }
    let tr = Transcription::new(prob, &sol.states[0]);
    let z = tr.pack(sol);
    let rd = tr.stationarity(&z, &sol.multipliers.equality, &sol.multipliers.inequality);
    assert!(rd.amax() <= 1e-6, "stationarity {}", rd.amax());
}

#[test]
fn contact_free_matches_lq_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let params = contact_free(3, 2, 1, &mut rng);
        let goal = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let prob = wide_problem(params, quad_cost(3, 2, goal), 4);
        let x0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let sol = solve_mpc(&prob, &x0, None).unwrap();
        assert!(sol.converged);
        check_solution(&prob, &sol);
        let oracle = lq_oracle(&prob, &x0);
        for (u, o) in sol.controls.iter().zip(&oracle) {
            assert!((u - o).amax() <= 1e-6, "{u} vs {o}");
        }
        assert_eq!(sol.states[0], x0);
    }
}

#[test]
fn pinned_bounds_fix_the_action() {
    let dims = LcsDims::new(1, 1, 1).unwrap();
    let mut p = LcsParams::zeros(dims);
    p.a[(0, 0)] = 1.0;
    p.b[(0, 0)] = 1.0;
    p.gap_lambda[(0, 0)] = 1.0;
    p.gap_offset[0] = 1.0;
    let cost = quad_cost(1, 1, dvector![3.0]);
    let prob = MpcProblem::new(p, cost, 1, dvector![0.25], dvector![0.25]).unwrap();
    let sol = solve_mpc(&prob, &dvector![0.0], None).unwrap();
    assert!((sol.controls[0][0] - 0.25).abs() <= 1e-12);
}

fn wall_model() -> LcsParams {
    // Point mass, position p ≥ 0 enforced by an impulse: v' = v + u + λ,
    // p' = p + v + u + λ, gap = p' ≥ 0 (written in terms of x, u, λ).
    let dims = LcsDims::new(2, 1, 1).unwrap();
    let mut p = LcsParams::zeros(dims);
    p.a = dmatrix![1.0, 0.1; 0.0, 1.0];
    p.b = dmatrix![0.1; 1.0];
    p.c = dmatrix![0.1; 1.0];
    p.gap_x = dmatrix![1.0, 0.1];
    p.gap_u = dmatrix![0.1];
    p.gap_lambda = dmatrix![0.1];
    p
}

#[test]
fn contact_plan_is_feasible_and_improves_on_zero_control() {
    let params = wall_model();
    let cost = CostSpec::new(
        dmatrix![10.0, 0.0; 0.0, 1.0],
        dmatrix![0.1],
        dmatrix![10.0, 0.0; 0.0, 1.0],
        dvector![-0.5, 0.0],
    )
    .unwrap();
    let prob = MpcProblem::new(params.clone(), cost.clone(), 5, dvector![-1.0], dvector![1.0]).unwrap();
    let x0 = dvector![0.2, -0.5];
    let sol = solve_mpc(&prob, &x0, None).unwrap();
    check_solution(&prob, &sol);
    assert!(sol.forces.iter().any(|l| l[0] > 1e-3), "plan should use contact");
    let zero = vec![dvector![0.0]; 5];
    let states = crate::lcs::simulate_open_loop(&params, &x0, &zero, 1e-9).unwrap();
    assert!(sol.objective <= cost.trajectory_cost(&states, &zero) + 1e-9);
    for w in sol.stage_objectives.windows(2) {
        assert!(w[1] >= w[0] - 1e-8, "relaxation stages {:?}", sol.stage_objectives);
    }

    let again = solve_mpc(&prob, &x0, Some(&sol)).unwrap();
    assert!((again.objective - sol.objective).abs() <= 1e-8);
}

#[test]
fn fallback_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = contact_free(2, 1, 1, &mut rng);
    let mut prob = wide_problem(params, quad_cost(2, 1, dvector![1.0, 0.0]), 3);
    let x0 = dvector![0.1, 0.2];
    let good = solve_mpc(&prob, &x0, None).unwrap();
    let first = mpc_first_action(&prob, &x0, None);
    assert!(!first.fallback);
    assert_eq!(first.action, good.controls[0]);

    prob.settings.max_iters = 0;
    assert!(matches!(solve_mpc(&prob, &x0, None), Err(MpcError::SolveFailed { .. })));
    let warm = good.shifted();
    let fb = mpc_first_action(&prob, &x0, Some(&warm));
    assert!(fb.fallback);
    assert_eq!(fb.action, warm.controls[0]);
    let fb = mpc_first_action(&prob, &x0, None);
    assert!(fb.fallback);
    assert_eq!(fb.action, dvector![0.0]);
}

#[test]
fn shift_repeats_last_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = contact_free(2, 1, 1, &mut rng);
    let prob = wide_problem(params, quad_cost(2, 1, dvector![1.0, 0.0]), 3);
    let sol = solve_mpc(&prob, &dvector![0.0, 0.0], None).unwrap();
    let s = sol.shifted();
    assert_eq!(s.controls.len(), 3);
    assert_eq!(s.controls[0], sol.controls[1]);
    assert_eq!(s.controls[2], sol.controls[2]);
    assert_eq!(s.states[0], sol.states[1]);
    assert_eq!(s.states[3], sol.states[3]);
    assert_eq!(s.multipliers.equality.len(), sol.multipliers.equality.len());
}

fn first_action(prob: &MpcProblem, theta: &[f64], x0: &DVector<f64>) -> DVector<f64> {
    let mut p = prob.clone();
    p.params = LcsParams::from_slice(prob.dims(), theta).unwrap();
    let sol = solve_mpc(&p, x0, None).unwrap();
    sol.controls[0].clone()
}

fn fd_check(prob: &MpcProblem, x0: &DVector<f64>, rel_tol: f64) -> SensitivityResult {
    let sol = solve_mpc(prob, x0, None).unwrap();
    let sens = kkt_sensitivity(prob, &sol);
    assert!(sens.valid, "{:?}", sens.degeneracy_note);
    let theta = prob.params.to_vec();
    let h = 1e-5;
    for j in 0..theta.len() {
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let fd = (first_action(prob, &tp, x0) - first_action(prob, &tm, x0)) / (2.0 * h);
        for i in 0..fd.len() {
            let a = sens.jacobian[(i, j)];
            let err = (a - fd[i]).abs();
            assert!(
                err <= rel_tol * a.abs().max(fd[i].abs()).max(1e-3),
                "param {j} action {i}: analytic {a} vs fd {}",
                fd[i]
            );
        }
    }
    sens
}

#[test]
fn sensitivity_matches_fd_contact_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = contact_free(2, 1, 1, &mut rng);
    let prob = wide_problem(params, quad_cost(2, 1, dvector![0.5, -0.3]), 3);
    let x0 = dvector![0.3, 0.1];
    let sens = fd_check(&prob, &x0, 1e-3);
    // Contact offset c and gap matrices do not influence the plan when the
    // force is decoupled from the dynamics.
    let blocks = prob.dims().blocks();
    for b in 4..8 {
        for col in blocks[b].offset..blocks[b].offset + blocks[b].rows * blocks[b].cols {
            assert!(sens.jacobian[(0, col)].abs() <= 1e-8, "block {} col {col}", blocks[b].label);
        }
    }
}

#[test]
fn sensitivity_matches_fd_with_contact() {
    let params = wall_model();
    let cost = CostSpec::new(
        dmatrix![10.0, 0.0; 0.0, 1.0],
        dmatrix![0.1],
        dmatrix![10.0, 0.0; 0.0, 1.0],
        dvector![-0.5, 0.0],
    )
    .unwrap();
    let prob = MpcProblem::new(params, cost, 3, dvector![-1.0], dvector![1.0]).unwrap();
    fd_check(&prob, &dvector![0.2, -0.5], 1e-3);
}

#[test]
fn sensitivity_with_uncosted_state() {
    // The last state has no cost, so its terminal copy has a zero diagonal in
    // the Newton matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = contact_free(3, 2, 2, &mut rng);
    params.c = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-0.3..0.3));
    params.gap_x = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-0.5..0.5));
    params.gap_offset = dvector![0.05, 0.1];
    let q = DMatrix::from_diagonal(&dvector![1.0, 2.0, 0.0]);
    let cost = CostSpec::new(q.clone(), DMatrix::identity(2, 2) * 0.5, q * 3.0, dvector![0.4, -0.2, 0.0]).unwrap();
    let prob = wide_problem(params, cost, 3);
    fd_check(&prob, &dvector![0.1, 0.2, -0.3], 1e-3);
}

#[test]
fn weakly_active_bound_is_flagged() {
    // Scalar problem whose unconstrained optimum sits exactly on u_max.
    let dims = LcsDims::new(1, 1, 1).unwrap();
    let mut p = LcsParams::zeros(dims);
    p.b[(0, 0)] = 1.0;
    p.gap_lambda[(0, 0)] = 1.0;
    p.gap_offset[0] = 1.0;
    // Cost (x1 − 1)² + u² over x1 = u: optimum u = 0.5 for H = 1.
    let cost = CostSpec::new(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0], dvector![1.0]).unwrap();
    let prob = MpcProblem::new(p, cost, 1, dvector![-1.0], dvector![0.5]).unwrap();
    let sol = solve_mpc(&prob, &dvector![0.0], None).unwrap();
    assert!((sol.controls[0][0] - 0.5).abs() < 1e-4);
    let sens = kkt_sensitivity(&prob, &sol);
    assert!(!sens.valid);
    assert!(sens.degeneracy_note.unwrap().contains("action bound"));
}

#[test]
fn dump_writes_csv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = contact_free(2, 1, 1, &mut rng);
    let mut prob = wide_problem(params, quad_cost(2, 1, dvector![1.0, 0.0]), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    prob.settings.dump_path = Some(path.clone());
    solve_mpc(&prob, &dvector![0.0, 0.0], None).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("stage,kind,index,value"));
    assert_eq!(text.lines().filter(|l| l.contains(",control,")).count(), 2);
}

#[test]
fn rejects_bad_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = contact_free(2, 1, 1, &mut rng);
    let cost = quad_cost(2, 1, dvector![1.0, 0.0]);
    assert!(MpcProblem::new(params.clone(), cost.clone(), 0, dvector![-1.0], dvector![1.0]).is_err());
    assert!(MpcProblem::new(params.clone(), cost.clone(), 2, dvector![1.0], dvector![-1.0]).is_err());
    let mut prob = MpcProblem::new(params, cost, 2, dvector![-1.0], dvector![1.0]).unwrap();
    prob.relaxation = vec![1e-2, 1e-1];
    assert!(prob.validate().is_err());
    assert!(CostSpec::new(dmatrix![1.0, 2.0; 0.0, 1.0], dmatrix![1.0], DMatrix::identity(2, 2), dvector![0.0, 0.0]).is_err());
    assert!(CostSpec::new(DMatrix::identity(2, 2), dmatrix![0.0], DMatrix::identity(2, 2), dvector![0.0, 0.0]).is_err());
}
