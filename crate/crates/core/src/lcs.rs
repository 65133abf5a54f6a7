//! Discrete-time linear complementarity systems.
//!
//! An LCS advances its state through an affine map driven by a contact force
//! that is itself the solution of a linear complementarity problem:
//!
//! ```txt
//!   x' = A x + B u + C λ + d
//!   0 ≤ λ ⊥ D x + E u + F λ + c ≥ 0
//! ```
//!
//! The production LCP solver is Lemke's complementary pivoting method. A
//! brute-force active-set enumeration is provided alongside it and serves as
//! the reference for tests throughout the crate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default LCP tolerance when simulating ground-truth plants.
pub const SIM_TOL: f64 = 1e-9;
/// Default LCP tolerance when stepping learned models.
pub const LEARNED_TOL: f64 = 1e-6;
/// Largest contact dimension the enumeration oracle accepts.
pub const MAX_ORACLE_LAMBDA: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LcsError {
    #[error("LCP pivoting terminated on a secondary ray after {iterations} pivots")]
    NoSolution { iterations: usize },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<LcsError>,
    },
}

pub type Result<T> = std::result::Result<T, LcsError>;

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(LcsError::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// State, action and contact dimensions of an LCS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LcsDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_lambda: usize,
}

impl LcsDims {
    pub fn new(n_x: usize, n_u: usize, n_lambda: usize) -> Result<Self> {
        if n_x == 0 || n_u == 0 || n_lambda == 0 {
            return Err(LcsError::InvalidDims(format!(
                "all dimensions must be positive (n_x={n_x}, n_u={n_u}, n_lambda={n_lambda})"
            )));
        }
        if n_lambda > MAX_ORACLE_LAMBDA {
            return Err(LcsError::InvalidDims(format!(
                "n_lambda={n_lambda} exceeds the supported maximum {MAX_ORACLE_LAMBDA}"
            )));
        }
        Ok(Self { n_x, n_u, n_lambda })
    }

    /// Length of the flattened parameter vector.
    pub fn param_count(&self) -> usize {
        let (nx, nu, nl) = (self.n_x, self.n_u, self.n_lambda);
        nx * nx + nx * nu + nx * nl + nx + nl * nx + nl * nu + nl * nl + nl
    }

    /// Offsets of each parameter block inside the flattened vector, in
    /// storage order `A, B, C, d, D, E, F, c`.
    pub fn blocks(&self) -> [ParamBlock; 8] {
        let (nx, nu, nl) = (self.n_x, self.n_u, self.n_lambda);
        let shapes = [
            ("A", nx, nx),
            ("B", nx, nu),
            ("C", nx, nl),
            ("d", nx, 1),
            ("D", nl, nx),
            ("E", nl, nu),
            ("F", nl, nl),
            ("c", nl, 1),
        ];
        let mut offset = 0;
        shapes.map(|(label, rows, cols)| {
            let block = ParamBlock {
                label,
                rows,
                cols,
                offset,
            };
            offset += rows * cols;
            block
        })
    }
}

/// Location of one matrix or vector inside the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub label: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of entry `(row, col)` (row-major).
    pub fn index(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.cols + col
    }
}

/// The eight matrices and vectors defining an LCS.
#[derive(Debug, Clone, PartialEq)]
pub struct LcsParams {
    /// `A`: autonomous state transition (n_x × n_x).
    pub a: DMatrix<f64>,
    /// `B`: action effect (n_x × n_u).
    pub b: DMatrix<f64>,
    /// `C`: contact-force effect (n_x × n_λ).
    pub c: DMatrix<f64>,
    /// `d`: constant drift (n_x).
    pub d: DVector<f64>,
    /// `D`: state term of the complementarity gap (n_λ × n_x).
    pub gap_x: DMatrix<f64>,
    /// `E`: action term of the gap (n_λ × n_u).
    pub gap_u: DMatrix<f64>,
    /// `F`: contact term of the gap (n_λ × n_λ).
    pub gap_lambda: DMatrix<f64>,
    /// `c`: gap offset (n_λ).
    pub gap_offset: DVector<f64>,
}

impl LcsParams {
    pub fn zeros(dims: LcsDims) -> Self {
        let (nx, nu, nl) = (dims.n_x, dims.n_u, dims.n_lambda);
        Self {
            a: DMatrix::zeros(nx, nx),
            b: DMatrix::zeros(nx, nu),
            c: DMatrix::zeros(nx, nl),
            d: DVector::zeros(nx),
            gap_x: DMatrix::zeros(nl, nx),
            gap_u: DMatrix::zeros(nl, nu),
            gap_lambda: DMatrix::zeros(nl, nl),
            gap_offset: DVector::zeros(nl),
        }
    }

    pub fn dims(&self) -> LcsDims {
        LcsDims {
            n_x: self.a.nrows(),
            n_u: self.b.ncols(),
            n_lambda: self.gap_lambda.nrows(),
        }
    }

    /// Checks that every block agrees with the dimensions implied by `A`,
    /// `B` and `F`, and that all entries are finite.
    pub fn validate(&self) -> Result<LcsDims> {
        let dims = self.dims();
        let (nx, nu, nl) = (dims.n_x, dims.n_u, dims.n_lambda);
        if nx == 0 || nu == 0 || nl == 0 {
            return Err(LcsError::InvalidDims("empty parameter block".into()));
        }
        check_dim("A cols", nx, self.a.ncols())?;
        check_dim("B rows", nx, self.b.nrows())?;
        check_dim("C rows", nx, self.c.nrows())?;
        check_dim("C cols", nl, self.c.ncols())?;
        check_dim("d len", nx, self.d.len())?;
        check_dim("D rows", nl, self.gap_x.nrows())?;
        check_dim("D cols", nx, self.gap_x.ncols())?;
        check_dim("E rows", nl, self.gap_u.nrows())?;
        check_dim("E cols", nu, self.gap_u.ncols())?;
        check_dim("F cols", nl, self.gap_lambda.ncols())?;
        check_dim("c len", nl, self.gap_offset.len())?;
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(LcsError::NonFinite("LCS parameters"));
        }
        Ok(dims)
    }

    fn block_slices(&self) -> [&[f64]; 8] {
        [
            self.a.as_slice(),
            self.b.as_slice(),
            self.c.as_slice(),
            self.d.as_slice(),
            self.gap_x.as_slice(),
            self.gap_u.as_slice(),
            self.gap_lambda.as_slice(),
            self.gap_offset.as_slice(),
        ]
    }

    /// Flattens into `[A, B, C, d, D, E, F, c]`, each matrix row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(dims.param_count());
        for (block, data) in dims.blocks().iter().zip(self.block_slices()) {
            // nalgebra stores column-major; emit row-major.
            for r in 0..block.rows {
                for col in 0..block.cols {
                    out.push(data[col * block.rows + r]);
                }
            }
        }
        out
    }

    /// Inverse of [`LcsParams::to_vec`].
    pub fn from_slice(dims: LcsDims, theta: &[f64]) -> Result<Self> {
        check_dim("parameter vector", dims.param_count(), theta.len())?;
        let blocks = dims.blocks();
        let mat = |b: &ParamBlock| DMatrix::from_row_slice(b.rows, b.cols, &theta[b.offset..b.offset + b.len()]);
        let vec = |b: &ParamBlock| DVector::from_column_slice(&theta[b.offset..b.offset + b.len()]);
        Ok(Self {
            a: mat(&blocks[0]),
            b: mat(&blocks[1]),
            c: mat(&blocks[2]),
            d: vec(&blocks[3]),
            gap_x: mat(&blocks[4]),
            gap_u: mat(&blocks[5]),
            gap_lambda: mat(&blocks[6]),
            gap_offset: vec(&blocks[7]),
        })
    }

    /// The LCP embedded at `(x, u)`: `M = F`, `q = D x + E u + c`.
    pub fn lcp_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<LcpInstance> {
        let dims = self.dims();
        check_dim("state", dims.n_x, x.len())?;
        check_dim("action", dims.n_u, u.len())?;
        let q = &self.gap_x * x + &self.gap_u * u + &self.gap_offset;
        Ok(LcpInstance {
            m: self.gap_lambda.clone(),
            q,
        })
    }

    /// Affine part of the next state, `A x + B u + C λ + d`.
    pub fn next_state(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c * lambda + &self.d
    }
}

/// `find λ ≥ 0 with w = q + M λ ≥ 0 and λᵀw = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LcpInstance {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl LcpInstance {
    pub fn new(m: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let inst = Self { m, q };
        inst.validate()?;
        Ok(inst)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if n == 0 {
            return Err(LcsError::InvalidDims("empty LCP".into()));
        }
        check_dim("M rows", n, self.m.nrows())?;
        check_dim("M cols", n, self.m.ncols())?;
        if !self.m.iter().chain(self.q.iter()).all(|v| v.is_finite()) {
            return Err(LcsError::NonFinite("LCP data"));
        }
        Ok(())
    }

    /// Builds a solution record from a candidate `λ`, recomputing the slack.
    pub fn solution_from(&self, lambda: DVector<f64>, tol: f64) -> LcpSolution {
        let slack = &self.q + &self.m * &lambda;
        let active_set = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > tol)
            .map(|(i, _)| i)
            .collect();
        LcpSolution {
            lambda,
            slack,
            active_set,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcpSolution {
    pub lambda: DVector<f64>,
    /// `q + M λ`.
    pub slack: DVector<f64>,
    /// Indices with strictly positive contact force.
    pub active_set: Vec<usize>,
}

impl LcpSolution {
    /// Largest violation among `λ ≥ 0`, `w ≥ 0` and `|λ_i w_i| = 0`.
    pub fn residual(&self) -> f64 {
        self.lambda
            .iter()
            .zip(self.slack.iter())
            .map(|(&l, &w)| (-l).max(-w).max((l * w).abs()).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn satisfies(&self, tol: f64) -> bool {
        self.residual() <= tol
    }
}

const PIVOT_EPS: f64 = 1e-12;

/// Solves an LCP with Lemke's method using the covering vector `e = 1`.
///
/// Ties in the minimum-ratio test go to the artificial variable first (so the
/// method terminates as soon as it can), then to the lowest row index. The
/// returned solution is refined by re-solving the linear system on its
/// active set.
pub fn lcp_solve(inst: &LcpInstance, tol: f64) -> Result<LcpSolution> {
    inst.validate()?;
    if !(tol > 0.0) {
        return Err(LcsError::InvalidDims(format!("tolerance must be positive, got {tol}")));
    }
    let n = inst.dim();
    if inst.q.iter().all(|&q| q >= 0.0) {
        return Ok(inst.solution_from(DVector::zeros(n), tol));
    }

    // Tableau rows: w - M z - e z0 = q, columns [w (n) | z (n) | z0 | rhs].
    let z0 = 2 * n;
    let rhs = 2 * n + 1;
    let mut tab = DMatrix::<f64>::zeros(n, 2 * n + 2);
    for i in 0..n {
        tab[(i, i)] = 1.0;
        for j in 0..n {
            tab[(i, n + j)] = -inst.m[(i, j)];
        }
        tab[(i, z0)] = -1.0;
        tab[(i, rhs)] = inst.q[i];
    }
    let mut basis: Vec<usize> = (0..n).collect();

    // z0 enters; the row with the most negative q leaves.
    let mut leave_row = 0;
    for i in 1..n {
        if inst.q[i] < inst.q[leave_row] {
            leave_row = i;
        }
    }
    let mut entering = z0;
    let max_pivots = 50 * (n + 1) * (n + 1);
    let scale = 1.0 + inst.m.amax() + inst.q.amax();

    for iteration in 0..max_pivots {
        pivot(&mut tab, leave_row, entering);
        let leaving = std::mem::replace(&mut basis[leave_row], entering);
        if leaving == z0 {
            let mut lambda = DVector::zeros(n);
            for (row, &var) in basis.iter().enumerate() {
                if (n..2 * n).contains(&var) {
                    lambda[var - n] = tab[(row, rhs)].max(0.0);
                }
            }
            return Ok(refine(inst, lambda, tol));
        }
        // Complement of the variable that just left enters next.
        entering = if leaving < n { leaving + n } else { leaving - n };

        let mut best: Option<(usize, f64)> = None;
        for row in 0..n {
            let col = tab[(row, entering)];
            if col > PIVOT_EPS * scale {
                let ratio = tab[(row, rhs)].max(0.0) / col;
                best = match best {
                    None => Some((row, ratio)),
                    Some((best_row, best_ratio)) => {
                        let tie = (ratio - best_ratio).abs() <= 1e-12 * (1.0 + best_ratio.abs());
                        if (tie && basis[row] == z0) || (!tie && ratio < best_ratio) {
                            Some((row, ratio))
                        } else {
                            Some((best_row, best_ratio))
                        }
                    }
                };
            }
        }
        match best {
            Some((row, _)) => leave_row = row,
            None => return Err(LcsError::NoSolution { iterations: iteration + 1 }),
        }
    }
    Err(LcsError::NoSolution { iterations: max_pivots })
}

fn pivot(tab: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = tab[(row, col)];
    let ncols = tab.ncols();
    for j in 0..ncols {
        tab[(row, j)] /= p;
    }
    for i in 0..tab.nrows() {
        if i == row {
            continue;
        }
        let factor = tab[(i, col)];
        if factor != 0.0 {
            for j in 0..ncols {
                let v = tab[(row, j)];
                tab[(i, j)] -= factor * v;
            }
        }
    }
}

/// Re-solves `M_SS λ_S = -q_S` on the detected active set; keeps the pivot
/// result if the refined point is no better.
fn refine(inst: &LcpInstance, lambda: DVector<f64>, tol: f64) -> LcpSolution {
    let raw = inst.solution_from(lambda, tol);
    let active: Vec<usize> = raw
        .lambda
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.0)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return raw;
    }
    match solve_on_support(inst, &active) {
        Some(candidate) => {
            let candidate = inst.solution_from(candidate.map(|v| v.max(0.0)), tol);
            if candidate.residual() <= raw.residual() {
                candidate
            } else {
                raw
            }
        }
        None => raw,
    }
}

fn solve_on_support(inst: &LcpInstance, support: &[usize]) -> Option<DVector<f64>> {
    let k = support.len();
    let n = inst.dim();
    let sub = DMatrix::from_fn(k, k, |i, j| inst.m[(support[i], support[j])]);
    let rhs = DVector::from_fn(k, |i, _| -inst.q[support[i]]);
    let lu = sub.lu();
    let x = lu.solve(&rhs)?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut lambda = DVector::zeros(n);
    for (i, &idx) in support.iter().enumerate() {
        lambda[idx] = x[i];
    }
    Some(lambda)
}

/// Every LCP solution reachable by enumerating the `2^n` candidate active
/// sets, solving the induced linear system and keeping feasible points.
/// Duplicates are merged; the result is sorted by active set.
pub fn lcp_enumerate_oracle(inst: &LcpInstance, tol: f64) -> Result<Vec<LcpSolution>> {
    inst.validate()?;
    let n = inst.dim();
    if n > MAX_ORACLE_LAMBDA {
        return Err(LcsError::InvalidDims(format!(
            "enumeration limited to n <= {MAX_ORACLE_LAMBDA}, got {n}"
        )));
    }
    let mut found: Vec<LcpSolution> = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let lambda = if support.is_empty() {
            DVector::zeros(n)
        } else {
            match solve_on_support(inst, &support) {
                Some(l) => l,
                None => continue,
            }
        };
        if lambda.iter().any(|&l| l < -tol) {
            continue;
        }
        let sol = inst.solution_from(lambda.map(|l| l.max(0.0)), tol);
        if !sol.satisfies(tol.max(1e-9 * (1.0 + inst.q.amax()))) {
            continue;
        }
        let duplicate = found
            .iter()
            .any(|s| (&s.lambda - &sol.lambda).amax() <= tol.max(1e-12));
        if !duplicate {
            found.push(sol);
        }
    }
    found.sort_by(|a, b| a.active_set.cmp(&b.active_set));
    Ok(found)
}

/// One LCS step: solve the embedded LCP, then apply the affine update.
pub fn lcs_step(
    params: &LcsParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let inst = params.lcp_at(x, u)?;
    let sol = lcp_solve(&inst, tol)?;
    let x_next = params.next_state(x, u, &sol.lambda);
    Ok((x_next, sol.lambda))
}

/// Rolls the LCS forward under an open-loop control sequence. The returned
/// trajectory has `controls.len() + 1` states and starts at `x0`.
pub fn simulate_open_loop(
    params: &LcsParams,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    tol: f64,
) -> Result<Vec<DVector<f64>>> {
    if controls.is_empty() {
        return Err(LcsError::InvalidDims("control sequence is empty".into()));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (step, u) in controls.iter().enumerate() {
        let (next, _) = lcs_step(params, &states[step], u, tol).map_err(|e| LcsError::StepFailed {
            step,
            source: Box::new(e),
        })?;
        states.push(next);
    }
    Ok(states)
}
