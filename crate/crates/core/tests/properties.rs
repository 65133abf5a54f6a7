use lcsrl::lcs::{lcp_enumerate_oracle, lcp_solve, lcs_step, LcpInstance, LcsDims, LcsParams};
use lcsrl::learning::{loss_and_gradient, loss_over, violation_inner_solve, TransitionTriple, ViolationConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(lo..hi, r * c).prop_map(move |v| DMatrix::from_row_slice(r, c, &v))
}

fn vector(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

fn spd_lcp() -> impl Strategy<Value = LcpInstance> {
    (1usize..=6).prop_flat_map(|n| {
        (matrix(n, n, -1.0, 1.0), vector(n, -2.0, 2.0), 0.1f64..1.0).prop_map(move |(p, q, delta)| {
            let m = &p * p.transpose() + DMatrix::identity(n, n) * delta;
            LcpInstance::new(m, q).unwrap()
        })
    })
}

fn params_with_pd_f(dims: LcsDims) -> impl Strategy<Value = LcsParams> {
    let nl = dims.n_lambda;
    proptest::collection::vec(-0.5f64..0.5, dims.param_count()).prop_map(move |theta| {
        let mut p = LcsParams::from_slice(dims, &theta).unwrap();
        let f = p.gap_lambda.clone();
        p.gap_lambda = &f * f.transpose() + DMatrix::identity(nl, nl) * 0.5;
        p
    })
}

fn dims_strategy(max: usize) -> impl Strategy<Value = LcsDims> {
    (1..=max, 1..=max, 1..=max).prop_map(|(x, u, l)| LcsDims::new(x, u, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lcp_solution_is_an_oracle_solution(inst in spd_lcp()) {
        let sol = lcp_solve(&inst, 1e-10).unwrap();
        prop_assert!(sol.lambda.iter().all(|&l| l >= 0.0));
        prop_assert!(sol.slack.iter().all(|&w| w >= -1e-10));
        prop_assert!(sol.residual() <= 1e-8);
        let oracle = lcp_enumerate_oracle(&inst, 1e-10).unwrap();
        prop_assert!(oracle.iter().any(|o| (&o.lambda - &sol.lambda).amax() <= 1e-8));
    }

    #[test]
    fn flattening_round_trips(dims in dims_strategy(5), seed in any::<u64>()) {
        let n = dims.param_count();
        let theta: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7) % 1000) as f64 - 500.0) / 37.0).collect();
        let p = LcsParams::from_slice(dims, &theta).unwrap();
        prop_assert_eq!(p.to_vec(), theta);
        prop_assert_eq!(LcsParams::from_slice(dims, &p.to_vec()).unwrap(), p);
    }

    #[test]
    fn step_is_affine_within_a_mode(
        (p, x, u, dx, du) in dims_strategy(3).prop_flat_map(|d| (
            params_with_pd_f(d),
            vector(d.n_x, -1.0, 1.0),
            vector(d.n_u, -1.0, 1.0),
            vector(d.n_x, -1.0, 1.0),
            vector(d.n_u, -1.0, 1.0),
        ))
    ) {
        let h = 1e-4;
        let mut outs = Vec::new();
        let mut modes = Vec::new();
        for k in 0..3 {
            let s = k as f64 * h;
            let xs = &x + &dx * s;
            let us = &u + &du * s;
            let (next, lam) = lcs_step(&p, &xs, &us, 1e-12).unwrap();
            let inst = p.lcp_at(&xs, &us).unwrap();
            modes.push(inst.solution_from(lam, 1e-9).active_set);
            outs.push(next);
        }
        prop_assume!(modes[0] == modes[1] && modes[1] == modes[2]);
        let second_difference = &outs[0] - &outs[1] * 2.0 + &outs[2];
        prop_assert!(second_difference.amax() <= 1e-9, "{}", second_difference.amax());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn violation_loss_is_nonnegative_and_gradient_matches_fd(
        (p, data) in dims_strategy(3).prop_flat_map(|d| (
            params_with_pd_f(d),
            proptest::collection::vec(
                (vector(d.n_x, -1.0, 1.0), vector(d.n_u, -1.0, 1.0), vector(d.n_x, -1.0, 1.0)),
                1..4,
            ),
        ))
    ) {
        let cfg = ViolationConfig::default();
        let data: Vec<TransitionTriple> = data.into_iter().map(|(x, u, xn)| TransitionTriple::new(x, u, xn)).collect();
        for t in &data {
            let inner = violation_inner_solve(&p, t, &cfg).unwrap();
            prop_assert!(inner.objective >= 0.0);
            prop_assert!(inner.lambda.iter().chain(inner.phi.iter()).all(|&v| v >= 0.0));
        }
        let (loss, grad) = loss_and_gradient(&p, &data, &cfg).unwrap();
        prop_assert!(loss >= 0.0);
        let theta = p.to_vec();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let fd = (loss_over(&LcsParams::from_slice(p.dims(), &tp).unwrap(), &data, &cfg).unwrap()
                - loss_over(&LcsParams::from_slice(p.dims(), &tm).unwrap(), &data, &cfg).unwrap())
                / (2.0 * h);
            if grad[j].abs() > 1e-6 {
                prop_assert!((grad[j] - fd).abs() <= 1e-4 * grad[j].abs(), "entry {}: {} vs {}", j, grad[j], fd);
            }
        }
    }
}
