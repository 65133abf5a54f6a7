//! Symmetric indefinite factorization for the interior-point KKT systems.
//!
//! The KKT matrices are banded once variables and multipliers are interleaved
//! stage by stage, so an `LDLᵀ` factorization restricted to the band costs
//! `O(n b²)`. No pivoting is done: with the primal block regularized the
//! interleaved ordering is factorizable, and a tiny pivot is reported so that
//! the caller can increase the regularization. By Sylvester's law the signs of
//! the pivots give the inertia.

use nalgebra::{DMatrix, DVector};

/// Signs of the eigenvalues of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone)]
pub struct BandLdl {
    n: usize,
    bandwidth: usize,
    /// Unit lower factor, only entries within the band are meaningful.
    l: DMatrix<f64>,
    d: DVector<f64>,
    inertia: Inertia,
}

/// Largest `|i - j|` over nonzero entries of the lower triangle.
pub fn bandwidth(m: &DMatrix<f64>) -> usize {
    let n = m.nrows();
    let mut b = 0;
    for j in 0..n {
        for i in (j + b + 1..n).rev() {
            if m[(i, j)] != 0.0 {
                b = i - j;
                break;
            }
        }
    }
    b
}

impl BandLdl {
    /// Factors the symmetric matrix `m` (only the lower triangle is read).
    /// A pivot is counted as zero when its magnitude is below `pivot_tol`
    /// times the largest entry of its row within the band.
    pub fn factor(m: &DMatrix<f64>, bw: usize, pivot_tol: f64) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols(), "matrix must be square");
        let mut l = DMatrix::zeros(n, n);
        let mut d = DVector::zeros(n);
        let mut inertia = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        // Column-oriented Crout update using work = L[j, k] * d[k].
        let mut work = vec![0.0; bw + 1];
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let mut djj = m[(j, j)];
            for k in k0..j {
                work[k - k0] = l[(j, k)] * d[k];
                djj -= l[(j, k)] * work[k - k0];
            }
            let i_end = (j + bw + 1).min(n);
            let mut row_scale = f64::MIN_POSITIVE;
            for i in k0..i_end {
                row_scale = row_scale.max(m[(i.max(j), i.min(j))].abs());
            }
            if djj.abs() <= pivot_tol * row_scale || !djj.is_finite() {
                inertia.zero += 1;
            } else if djj > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
            d[j] = djj;
            l[(j, j)] = 1.0;
            for i in j + 1..i_end {
                let mut v = m[(i, j)];
                let kk0 = i.saturating_sub(bw).max(k0);
                for k in kk0..j {
                    v -= l[(i, k)] * work[k - k0];
                }
                l[(i, j)] = if djj != 0.0 { v / djj } else { 0.0 };
            }
        }
        Self {
            n,
            bandwidth: bw,
            l,
            d,
            inertia,
        }
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `M x = b`. Only meaningful when no zero pivots were found.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut x = b.clone();
        for i in 0..n {
            let k0 = i.saturating_sub(bw);
            let mut v = x[i];
            for k in k0..i {
                v -= self.l[(i, k)] * x[k];
            }
            x[i] = v;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let k_end = (i + bw + 1).min(n);
            let mut v = x[i];
            for k in i + 1..k_end {
                v -= self.l[(k, i)] * x[k];
            }
            x[i] = v;
        }
        x
    }

    /// Hager/Higham estimate of `‖M⁻¹‖₁` for symmetric `M`.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let new_est = y.lp_norm(1);
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve(&xi);
            let j = z.iamax();
            let zmax = z[j].abs();
            if new_est <= est || zmax <= z.dot(&x) {
                est = est.max(new_est);
                break;
            }
            est = new_est;
            x = DVector::zeros(n);
            x[j] = 1.0;
        }
        // Alternative lower bound guarding against unlucky sign patterns.
        let alt = DVector::from_fn(n, |i, _| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (1.0 + i as f64 / (n.max(2) - 1) as f64)
        });
        let alt_est = 2.0 * self.solve(&alt).lp_norm(1) / (3.0 * n as f64);
        est.max(alt_est)
    }
}

/// Reciprocal 1-norm condition estimate of a symmetric matrix given its
/// factorization.
pub fn rcond_estimate(m: &DMatrix<f64>, f: &BandLdl) -> f64 {
    let norm = (0..m.ncols()).map(|j| m.column(j).lp_norm(1)).fold(0.0, f64::max);
    let inv = f.inverse_norm1_estimate();
    if norm == 0.0 || !inv.is_finite() || inv == 0.0 {
        return 0.0;
    }
    1.0 / (norm * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded_kkt(rng: &mut ChaCha8Rng, n_p: usize, n_d: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n_p, n_p, |_, _| rng.random_range(-1.0..1.0));
        let h = &g * g.transpose() + DMatrix::identity(n_p, n_p);
        let j = DMatrix::from_fn(n_d, n_p, |_, _| rng.random_range(-1.0..1.0));
        let mut k = DMatrix::zeros(n_p + n_d, n_p + n_d);
        k.view_mut((0, 0), (n_p, n_p)).copy_from(&h);
        k.view_mut((n_p, 0), (n_d, n_p)).copy_from(&j);
        k.view_mut((0, n_p), (n_p, n_d)).copy_from(&j.transpose());
        k
    }

    #[test]
    fn solves_and_counts_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let k = random_banded_kkt(&mut rng, 6, 3);
            let f = BandLdl::factor(&k, bandwidth(&k), 1e-14);
            assert_eq!(f.inertia(), Inertia { positive: 6, negative: 3, zero: 0 });
            let b = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let x = f.solve(&b);
            assert!((&k * &x - &b).amax() < 1e-10);
        }
    }

    #[test]
    fn banded_matrix_matches_dense_solve() {
        let n = 30;
        let m = DMatrix::from_fn(n, n, |i, j| {
            let d = (i as i64 - j as i64).abs();
            match d {
                0 => 4.0 + (i % 3) as f64,
                1 => -1.0,
                2 => 0.5,
                _ => 0.0,
            }
        });
        assert_eq!(bandwidth(&m), 2);
        let f = BandLdl::factor(&m, 2, 1e-14);
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x = f.solve(&b);
        let dense = m.clone().lu().solve(&b).unwrap();
        assert!((x - dense).amax() < 1e-12);
    }

    #[test]
    fn detects_singular_and_indefinite() {
        let s = dmatrix![1.0, 1.0; 1.0, 1.0];
        let f = BandLdl::factor(&s, 1, 1e-12);
        assert_eq!(f.inertia().zero, 1);
        let ind = dmatrix![1.0, 0.0; 0.0, -2.0];
        let f = BandLdl::factor(&ind, 1, 1e-12);
        assert_eq!(f.inertia(), Inertia { positive: 1, negative: 1, zero: 0 });
    }

    #[test]
    fn condition_estimate_is_reasonable() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3, 10.0]));
        let f = BandLdl::factor(&m, 0, 1e-14);
        let rc = rcond_estimate(&m, &f);
        assert!((rc - 1e-4).abs() < 1e-10, "rcond {rc}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_banded_kkt(&mut rng, 5, 2);
        let f = BandLdl::factor(&k, bandwidth(&k), 1e-14);
        let inv = k.clone().try_inverse().unwrap();
        let exact = (0..7).map(|j| inv.column(j).lp_norm(1)).fold(0.0, f64::max);
        let est = f.inverse_norm1_estimate();
        assert!(est <= exact * (1.0 + 1e-10) && est >= exact / 10.0);
    }
}
