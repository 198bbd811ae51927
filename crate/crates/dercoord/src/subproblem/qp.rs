//! A convex quadratic-program solver for the prosumer subproblems.
//!
//! Problems are posed as
//!
//! ```text
//!     minimize   1/2 x' Q x + c' x + k
//!     subject to A_eq x  = b_eq
//!                A_in x <= b_in
//!                lower <= x <= upper
//! ```
//!
//! with `Q` symmetric positive semidefinite. The solver is an
//! operator-splitting (projection/proximal) iteration with over-relaxation
//! 1.6, per-row adaptive penalties, and Ruiz equilibration. The linear
//! system at each step is solved either by a cached dense KKT factorization
//! (small instances) or by a Jacobi-preconditioned conjugate-gradient loop
//! on the condensed normal equations (large instances). Termination is on
//! the infinity-norm KKT residual: primal feasibility, stationarity, and
//! complementarity all below the requested tolerance. An optional polish
//! step re-solves the KKT system on the detected active set to sharpen the
//! final iterate.
//!
//! A single solve is strictly sequential and allocation-stable, so results
//! are bit-reproducible for identical inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50_000;

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO_INIT: f64 = 0.1;
const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RUIZ_ITERS: usize = 10;
const CHECK_INTERVAL: usize = 25;
const RHO_UPDATE_INTERVAL: usize = 100;
const RHO_UPDATE_RATIO: f64 = 5.0;
/// Feasibility stall heuristic: give up when the primal residual has sat
/// above this level without improvement for `STALL_WINDOW` iterations.
const STALL_LEVEL: f64 = 1e-3;
const STALL_WINDOW: usize = 1000;
/// Largest KKT dimension (variables + general rows) solved by the dense
/// direct factorization; larger instances use conjugate gradients.
const DIRECT_KKT_LIMIT: usize = if cfg!(feature = "force-cg") { 0 } else { 1500 };
/// Polish runs only when the active KKT system stays this small; it is an
/// accuracy refinement for compact programs, not worth a dense solve on
/// every warm re-solve of a large one.
const POLISH_LIMIT: usize = 600;
const POLISH_REG: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("malformed program: {0}")]
    BadProblem(String),
}

fn bad(msg: impl Into<String>) -> QpError {
    QpError::BadProblem(msg.into())
}

// ---------------------------------------------------------------------
// Sparse matrix support
// ---------------------------------------------------------------------

/// Compressed sparse row matrix; the only operations the solver needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from triplets, summing duplicates.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets
            .iter()
            .copied()
            .filter(|&(_, _, v)| v != 0.0)
            .collect();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "triplet out of bounds");
            indices.push(c);
            values.push(v);
            indptr[r + 1] = indices.len();
        }
        // Rows that received no entries inherit the previous offset.
        for r in 1..=rows {
            if indptr[r] < indptr[r - 1] {
                indptr[r] = indptr[r - 1];
            }
        }
        let mut out = Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        };
        out.dedup_rows();
        out
    }

    fn dedup_rows(&mut self) {
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            let start = self.indptr[r];
            let end = self.indptr[r + 1];
            let mut k = start;
            while k < end {
                let col = self.indices[k];
                let mut v = self.values[k];
                let mut j = k + 1;
                while j < end && self.indices[j] == col {
                    v += self.values[j];
                    j += 1;
                }
                if v != 0.0 {
                    indices.push(col);
                    values.push(v);
                }
                k = j;
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices[self.indptr[r]..self.indptr[r + 1]]
            .iter()
            .copied()
            .zip(self.values[self.indptr[r]..self.indptr[r + 1]].iter().copied())
    }

    /// `out = self * x`
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            out[r] = acc;
        }
    }

    /// `out += self' * x`
    pub fn matvec_t_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[self.indices[k]] += self.values[k] * xr;
            }
        }
    }

    /// In-place `diag(row_scale) * self * diag(col_scale)`.
    pub fn scale(&mut self, row_scale: &[f64], col_scale: &[f64]) {
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                self.values[k] *= row_scale[r] * col_scale[self.indices[k]];
            }
        }
    }

    /// Per-column infinity norm accumulated into `out` (taking maxima).
    pub fn col_abs_max_into(&self, out: &mut [f64]) {
        for (k, &c) in self.indices.iter().enumerate() {
            out[c] = out[c].max(self.values[k].abs());
        }
    }

    /// Per-row infinity norm.
    pub fn row_abs_max(&self, r: usize) -> f64 {
        self.values[self.indptr[r]..self.indptr[r + 1]]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Vertical concatenation.
    pub fn vstack(top: &Csr, bottom: &Csr) -> Csr {
        assert_eq!(top.cols, bottom.cols);
        let mut indptr = Vec::with_capacity(top.rows + bottom.rows + 1);
        indptr.extend_from_slice(&top.indptr);
        let offset = top.nnz();
        indptr.extend(bottom.indptr[1..].iter().map(|p| p + offset));
        let mut indices = top.indices.clone();
        indices.extend_from_slice(&bottom.indices);
        let mut values = top.values.clone();
        values.extend_from_slice(&bottom.values);
        Csr {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            indptr,
            indices,
            values,
        }
    }
}

/// Convenience accumulator for building sparse matrices.
#[derive(Debug, Clone, Default)]
pub struct TripletList {
    entries: Vec<(usize, usize, f64)>,
}

impl TripletList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn build(&self, rows: usize, cols: usize) -> Csr {
        Csr::from_triplets(rows, cols, &self.entries)
    }
}

// ---------------------------------------------------------------------
// Problem statement
// ---------------------------------------------------------------------

/// Which decision a QP column holds; used to map solutions back onto
/// schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    GridPower,
    HvacPower,
    ShiftablePower,
    ChargePower,
    DischargePower,
    RenewableUse,
    FeedIn,
    DemandResponse,
    /// Epigraph scalar bounding the peak grid draw (one column).
    PeakDemand,
    /// Trade with the given counterpart (one column per slot).
    TradeWith(usize),
}

/// Name-to-column map for an assembled program. Each block covers one
/// decision vector of one prosumer (`PeakDemand` blocks have length 1,
/// everything else spans the horizon).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarIndex {
    blocks: Vec<(usize, VarKind, usize, usize)>,
}

impl VarIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prosumer: usize, kind: VarKind, start: usize, len: usize) {
        self.blocks.push((prosumer, kind, start, len));
    }

    pub fn block(&self, prosumer: usize, kind: VarKind) -> Option<(usize, usize)> {
        self.blocks
            .iter()
            .find(|(p, k, _, _)| *p == prosumer && *k == kind)
            .map(|&(_, _, s, l)| (s, l))
    }

    pub fn column(&self, prosumer: usize, kind: VarKind, slot: usize) -> Option<usize> {
        self.block(prosumer, kind).and_then(|(s, l)| {
            if slot < l {
                Some(s + slot)
            } else {
                None
            }
        })
    }

    /// Reverse lookup: which (prosumer, kind, slot) a column holds.
    pub fn describe(&self, col: usize) -> Option<(usize, VarKind, usize)> {
        self.blocks
            .iter()
            .find(|&&(_, _, s, l)| col >= s && col < s + l)
            .map(|&(p, k, s, _)| (p, k, col - s))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &(usize, VarKind, usize, usize)> {
        self.blocks.iter()
    }
}

/// A convex QP over box and linear constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticProgram {
    pub n: usize,
    /// Symmetric PSD quadratic coefficient matrix (full storage).
    pub quad: Csr,
    pub linear: Vec<f64>,
    /// Constant objective offset, carried so reported objectives match the
    /// model costs they were assembled from.
    pub constant: f64,
    pub a_eq: Csr,
    pub b_eq: Vec<f64>,
    pub a_in: Csr,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub var_index: VarIndex,
}

impl QuadraticProgram {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut qx = vec![0.0; self.n];
        self.quad.matvec(x, &mut qx);
        let quad_term: f64 = x.iter().zip(&qx).map(|(xi, qi)| xi * qi).sum();
        let lin_term: f64 = x.iter().zip(&self.linear).map(|(xi, ci)| xi * ci).sum();
        0.5 * quad_term + lin_term + self.constant
    }

    pub fn validate(&self) -> Result<(), QpError> {
        if self.quad.rows() != self.n || self.quad.cols() != self.n {
            return Err(bad("quadratic matrix shape"));
        }
        if self.linear.len() != self.n || self.lower.len() != self.n || self.upper.len() != self.n
        {
            return Err(bad("vector lengths must equal n"));
        }
        if self.a_eq.cols() != self.n || self.a_in.cols() != self.n {
            return Err(bad("constraint matrix width must equal n"));
        }
        if self.a_eq.rows() != self.b_eq.len() || self.a_in.rows() != self.b_in.len() {
            return Err(bad("constraint right-hand-side lengths"));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| l > u || l.is_nan() || u.is_nan())
        {
            return Err(bad("box bounds must satisfy lower <= upper"));
        }
        if self
            .linear
            .iter()
            .chain(self.b_eq.iter())
            .chain(self.b_in.iter())
            .any(|v| !v.is_finite())
        {
            return Err(bad("non-finite coefficient"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Solver output. `y_rows` holds the multipliers for the stacked
/// (equalities, then inequalities) rows; `y_bounds` the box multipliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub y_rows: Vec<f64>,
    pub y_bounds: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

/// The three components of the KKT residual, all infinity norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub feasibility: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.feasibility
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

/// Evaluates the KKT residual of a candidate primal/dual point.
pub fn kkt_residual(
    qp: &QuadraticProgram,
    x: &[f64],
    y_rows: &[f64],
    y_bounds: &[f64],
) -> KktResidual {
    let m_eq = qp.a_eq.rows();
    let m_in = qp.a_in.rows();
    let mut ax = vec![0.0; m_eq + m_in];
    qp.a_eq.matvec(x, &mut ax[..m_eq]);
    qp.a_in.matvec(x, &mut ax[m_eq..]);

    let mut feas = 0.0_f64;
    let mut comp = 0.0_f64;
    for r in 0..m_eq + m_in {
        let (lo, hi) = if r < m_eq {
            (qp.b_eq[r], qp.b_eq[r])
        } else {
            (f64::NEG_INFINITY, qp.b_in[r - m_eq])
        };
        feas = feas.max(ax[r] - hi).max(lo - ax[r]);
        let y_pos = y_rows[r].max(0.0);
        let y_neg = (-y_rows[r]).max(0.0);
        if hi.is_finite() {
            comp = comp.max(y_pos * (hi - ax[r]).abs());
        } else {
            comp = comp.max(y_pos * (1.0 + ax[r].abs()));
        }
        if lo.is_finite() {
            comp = comp.max(y_neg * (ax[r] - lo).abs());
        } else {
            comp = comp.max(y_neg * (1.0 + ax[r].abs()));
        }
    }
    for j in 0..qp.n {
        feas = feas.max(x[j] - qp.upper[j]).max(qp.lower[j] - x[j]);
        let w_pos = y_bounds[j].max(0.0);
        let w_neg = (-y_bounds[j]).max(0.0);
        if qp.upper[j].is_finite() {
            comp = comp.max(w_pos * (qp.upper[j] - x[j]).abs());
        } else {
            comp = comp.max(w_pos * (1.0 + x[j].abs()));
        }
        if qp.lower[j].is_finite() {
            comp = comp.max(w_neg * (x[j] - qp.lower[j]).abs());
        } else {
            comp = comp.max(w_neg * (1.0 + x[j].abs()));
        }
    }
    feas = feas.max(0.0);

    let mut grad = vec![0.0; qp.n];
    qp.quad.matvec(x, &mut grad);
    for j in 0..qp.n {
        grad[j] += qp.linear[j] + y_bounds[j];
    }
    qp.a_eq.matvec_t_add(&y_rows[..m_eq], &mut grad);
    qp.a_in.matvec_t_add(&y_rows[m_eq..], &mut grad);
    let station = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));

    KktResidual {
        feasibility: feas,
        stationarity: station,
        complementarity: comp,
    }
}

// ---------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------

enum KktBackend {
    /// Dense LU of [[Q + sigma I + diag(rho_b), A'], [A, -diag(1/rho_c)]].
    Direct { lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> },
    /// Jacobi-preconditioned CG on the condensed SPD system.
    Cg {
        precond_inv: Vec<f64>,
        xtilde: Vec<f64>,
    },
}

/// Reusable solver state: scaled problem data, penalty vectors, and warm
/// starts. Rebuilding the linear cost via [`QpSolver::update_linear`] keeps
/// factorizations and iterates across repeated solves of the same
/// structure.
pub struct QpSolver {
    n: usize,
    m: usize,
    // Unscaled data for residuals/objective.
    quad_u: Csr,
    a_u: Csr,
    linear_u: Vec<f64>,
    constant: f64,
    l_rows: Vec<f64>,
    u_rows: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    // Scaled data.
    quad_s: Csr,
    a_s: Csr,
    linear_s: Vec<f64>,
    l_rows_s: Vec<f64>,
    u_rows_s: Vec<f64>,
    lower_s: Vec<f64>,
    upper_s: Vec<f64>,
    d_scale: Vec<f64>,
    e_scale: Vec<f64>,
    // Penalties.
    rho_bar: f64,
    rho_c: Vec<f64>,
    rho_b: Vec<f64>,
    // Iterates (scaled domain).
    x: Vec<f64>,
    z: Vec<f64>,
    zb: Vec<f64>,
    y: Vec<f64>,
    yb: Vec<f64>,
    backend: KktBackend,
    /// Dense polish is attempted when the active KKT system stays small.
    allow_polish: bool,
}

impl QpSolver {
    pub fn new(qp: &QuadraticProgram) -> Result<Self, QpError> {
        qp.validate()?;
        let n = qp.n;
        let a_u = Csr::vstack(&qp.a_eq, &qp.a_in);
        let m = a_u.rows();
        let mut l_rows = qp.b_eq.clone();
        l_rows.extend(std::iter::repeat_n(f64::NEG_INFINITY, qp.a_in.rows()));
        let mut u_rows = qp.b_eq.clone();
        u_rows.extend_from_slice(&qp.b_in);

        // Ruiz equilibration of [[Q, A'], [A, 0]].
        let mut quad_s = qp.quad.clone();
        let mut a_s = a_u.clone();
        let mut d_scale = vec![1.0; n];
        let mut e_scale = vec![1.0; m];
        let mut col_norm = vec![0.0; n];
        let mut step_d = vec![0.0; n];
        for _ in 0..RUIZ_ITERS {
            col_norm.iter_mut().for_each(|v| *v = 0.0);
            quad_s.col_abs_max_into(&mut col_norm);
            a_s.col_abs_max_into(&mut col_norm);
            for j in 0..n {
                step_d[j] = if col_norm[j] > 1e-12 {
                    1.0 / col_norm[j].sqrt()
                } else {
                    1.0
                };
            }
            let mut step_e = vec![1.0; m];
            for r in 0..m {
                let norm = a_s.row_abs_max(r);
                if norm > 1e-12 {
                    step_e[r] = 1.0 / norm.sqrt();
                }
            }
            quad_s.scale(&step_d, &step_d);
            a_s.scale(&step_e, &step_d);
            for j in 0..n {
                d_scale[j] *= step_d[j];
            }
            for r in 0..m {
                e_scale[r] *= step_e[r];
            }
        }

        let linear_s: Vec<f64> = qp.linear.iter().zip(&d_scale).map(|(c, d)| c * d).collect();
        let l_rows_s: Vec<f64> = l_rows.iter().zip(&e_scale).map(|(l, e)| l * e).collect();
        let u_rows_s: Vec<f64> = u_rows.iter().zip(&e_scale).map(|(u, e)| u * e).collect();
        let lower_s: Vec<f64> = qp.lower.iter().zip(&d_scale).map(|(l, d)| l / d).collect();
        let upper_s: Vec<f64> = qp.upper.iter().zip(&d_scale).map(|(u, d)| u / d).collect();

        let mut solver = Self {
            n,
            m,
            quad_u: qp.quad.clone(),
            a_u,
            linear_u: qp.linear.clone(),
            constant: qp.constant,
            l_rows,
            u_rows,
            lower: qp.lower.clone(),
            upper: qp.upper.clone(),
            quad_s,
            a_s,
            linear_s,
            l_rows_s,
            u_rows_s,
            lower_s,
            upper_s,
            d_scale,
            e_scale,
            rho_bar: RHO_INIT,
            rho_c: Vec::new(),
            rho_b: Vec::new(),
            x: vec![0.0; n],
            z: vec![0.0; m],
            zb: vec![0.0; n],
            y: vec![0.0; m],
            yb: vec![0.0; n],
            backend: KktBackend::Cg {
                precond_inv: Vec::new(),
                xtilde: vec![0.0; n],
            },
            allow_polish: true,
        };
        solver.set_rho(RHO_INIT);
        Ok(solver)
    }

    /// Re-targets the linear cost (and constant) without touching the
    /// quadratic/constraint structure, factorization, or warm starts.
    pub fn update_linear(&mut self, linear: &[f64], constant: f64) {
        assert_eq!(linear.len(), self.n);
        self.linear_u.copy_from_slice(linear);
        self.constant = constant;
        for j in 0..self.n {
            self.linear_s[j] = linear[j] * self.d_scale[j];
        }
    }

    fn set_rho(&mut self, rho_bar: f64) {
        self.rho_bar = rho_bar.clamp(RHO_MIN, RHO_MAX);
        self.rho_c = (0..self.m)
            .map(|r| {
                if self.l_rows[r] == self.u_rows[r] {
                    self.rho_bar * RHO_EQ_SCALE
                } else {
                    self.rho_bar
                }
            })
            .collect();
        self.rho_b = (0..self.n)
            .map(|j| {
                if self.lower[j] == self.upper[j] {
                    self.rho_bar * RHO_EQ_SCALE
                } else {
                    self.rho_bar
                }
            })
            .collect();
        self.rebuild_backend();
    }

    fn rebuild_backend(&mut self) {
        if self.n + self.m <= DIRECT_KKT_LIMIT {
            let dim = self.n + self.m;
            let mut k = DMatrix::<f64>::zeros(dim, dim);
            for r in 0..self.n {
                for (c, v) in self.quad_s.row(r) {
                    k[(r, c)] += v;
                }
                k[(r, r)] += SIGMA + self.rho_b[r];
            }
            for r in 0..self.m {
                for (c, v) in self.a_s.row(r) {
                    k[(self.n + r, c)] = v;
                    k[(c, self.n + r)] = v;
                }
                k[(self.n + r, self.n + r)] = -1.0 / self.rho_c[r];
            }
            self.backend = KktBackend::Direct { lu: k.lu() };
        } else {
            // diag(Q) + sigma + rho_b + sum_r rho_c[r] * A[r,j]^2
            let mut diag = vec![SIGMA; self.n];
            for r in 0..self.n {
                for (c, v) in self.quad_s.row(r) {
                    if c == r {
                        diag[r] += v;
                    }
                }
            }
            for j in 0..self.n {
                diag[j] += self.rho_b[j];
            }
            for r in 0..self.m {
                for (c, v) in self.a_s.row(r) {
                    diag[c] += self.rho_c[r] * v * v;
                }
            }
            let precond_inv = diag
                .iter()
                .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
                .collect();
            let xtilde = self.x.clone();
            self.backend = KktBackend::Cg { precond_inv, xtilde };
        }
    }

    /// Enables or disables the active-set polish pass.
    pub fn set_polish(&mut self, enabled: bool) {
        self.allow_polish = enabled;
    }

    /// Seeds the primal iterate (scaled internally). Dual warm starts keep
    /// whatever the previous solve left behind.
    pub fn warm_start_primal(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.n);
        for j in 0..self.n {
            self.x[j] = x[j] / self.d_scale[j];
            self.zb[j] = self.x[j];
        }
        let mut ax = vec![0.0; self.m];
        self.a_s.matvec(&self.x, &mut ax);
        self.z.copy_from_slice(&ax);
    }

    fn unscaled_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut x_u = vec![0.0; self.n];
        for j in 0..self.n {
            x_u[j] = (self.d_scale[j] * self.x[j]).clamp(self.lower[j], self.upper[j]);
        }
        let y_u: Vec<f64> = (0..self.m).map(|r| self.e_scale[r] * self.y[r]).collect();
        let w_u: Vec<f64> = (0..self.n).map(|j| self.yb[j] / self.d_scale[j]).collect();
        (x_u, y_u, w_u)
    }

    fn residual_at(&self, x_u: &[f64], y_u: &[f64], w_u: &[f64]) -> KktResidual {
        let mut ax = vec![0.0; self.m];
        self.a_u.matvec(x_u, &mut ax);
        let mut feas = 0.0_f64;
        let mut comp = 0.0_f64;
        for r in 0..self.m {
            feas = feas.max(ax[r] - self.u_rows[r]).max(self.l_rows[r] - ax[r]);
            let y_pos = y_u[r].max(0.0);
            let y_neg = (-y_u[r]).max(0.0);
            if self.u_rows[r].is_finite() {
                comp = comp.max(y_pos * (self.u_rows[r] - ax[r]).abs());
            } else {
                comp = comp.max(y_pos * (1.0 + ax[r].abs()));
            }
            if self.l_rows[r].is_finite() {
                comp = comp.max(y_neg * (ax[r] - self.l_rows[r]).abs());
            } else {
                comp = comp.max(y_neg * (1.0 + ax[r].abs()));
            }
        }
        for j in 0..self.n {
            feas = feas.max(x_u[j] - self.upper[j]).max(self.lower[j] - x_u[j]);
            let w_pos = w_u[j].max(0.0);
            let w_neg = (-w_u[j]).max(0.0);
            if self.upper[j].is_finite() {
                comp = comp.max(w_pos * (self.upper[j] - x_u[j]).abs());
            } else {
                comp = comp.max(w_pos * (1.0 + x_u[j].abs()));
            }
            if self.lower[j].is_finite() {
                comp = comp.max(w_neg * (x_u[j] - self.lower[j]).abs());
            } else {
                comp = comp.max(w_neg * (1.0 + x_u[j].abs()));
            }
        }
        feas = feas.max(0.0);

        let mut grad = vec![0.0; self.n];
        self.quad_u.matvec(x_u, &mut grad);
        for j in 0..self.n {
            grad[j] += self.linear_u[j] + w_u[j];
        }
        self.a_u.matvec_t_add(y_u, &mut grad);
        let station = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        KktResidual {
            feasibility: feas,
            stationarity: station,
            complementarity: comp,
        }
    }

    fn objective_at(&self, x_u: &[f64]) -> f64 {
        let mut qx = vec![0.0; self.n];
        self.quad_u.matvec(x_u, &mut qx);
        let quad_term: f64 = x_u.iter().zip(&qx).map(|(a, b)| a * b).sum();
        let lin_term: f64 = x_u.iter().zip(&self.linear_u).map(|(a, b)| a * b).sum();
        0.5 * quad_term + lin_term + self.constant
    }

    /// One pass of the splitting iteration.
    fn step(&mut self, cg_tol: f64) {
        let n = self.n;
        let m = self.m;
        // Right-hand side for the x-block.
        let mut rhs_x = vec![0.0; n];
        for j in 0..n {
            rhs_x[j] = SIGMA * self.x[j] - self.linear_s[j] + self.rho_b[j] * self.zb[j]
                - self.yb[j];
        }
        let (xtilde, ztilde) = match &mut self.backend {
            KktBackend::Direct { lu } => {
                let mut rhs = DVector::<f64>::zeros(n + m);
                for j in 0..n {
                    rhs[j] = rhs_x[j];
                }
                for r in 0..m {
                    rhs[n + r] = self.z[r] - self.y[r] / self.rho_c[r];
                }
                let sol = lu.solve(&rhs).expect("KKT factorization is nonsingular");
                let xtilde: Vec<f64> = (0..n).map(|j| sol[j]).collect();
                let ztilde: Vec<f64> = (0..m)
                    .map(|r| self.z[r] + (sol[n + r] - self.y[r]) / self.rho_c[r])
                    .collect();
                (xtilde, ztilde)
            }
            KktBackend::Cg { precond_inv, xtilde } => {
                // rhs_x += A'(rho_c .* z - y)
                let mut t = vec![0.0; m];
                for r in 0..m {
                    t[r] = self.rho_c[r] * self.z[r] - self.y[r];
                }
                self.a_s.matvec_t_add(&t, &mut rhs_x);
                cg(
                    &self.quad_s,
                    &self.a_s,
                    &self.rho_c,
                    &self.rho_b,
                    precond_inv,
                    &rhs_x,
                    xtilde,
                    cg_tol,
                );
                let mut ztilde = vec![0.0; m];
                self.a_s.matvec(xtilde, &mut ztilde);
                (xtilde.clone(), ztilde)
            }
        };

        for j in 0..n {
            self.x[j] = ALPHA * xtilde[j] + (1.0 - ALPHA) * self.x[j];
        }
        for r in 0..m {
            let v = ALPHA * ztilde[r] + (1.0 - ALPHA) * self.z[r] + self.y[r] / self.rho_c[r];
            let z_new = v.clamp(self.l_rows_s[r], self.u_rows_s[r]);
            self.y[r] = self.rho_c[r] * (v - z_new);
            self.z[r] = z_new;
        }
        for j in 0..n {
            let v = ALPHA * xtilde[j] + (1.0 - ALPHA) * self.zb[j] + self.yb[j] / self.rho_b[j];
            let zb_new = v.clamp(self.lower_s[j], self.upper_s[j]);
            self.yb[j] = self.rho_b[j] * (v - zb_new);
            self.zb[j] = zb_new;
        }
    }

    /// Scaled residual ratio used by the adaptive penalty rule.
    fn rho_adapt_ratio(&self) -> f64 {
        let mut ax = vec![0.0; self.m];
        self.a_s.matvec(&self.x, &mut ax);
        let mut r_prim = 0.0_f64;
        let mut ax_norm = 0.0_f64;
        let mut z_norm = 0.0_f64;
        for r in 0..self.m {
            r_prim = r_prim.max((ax[r] - self.z[r]).abs());
            ax_norm = ax_norm.max(ax[r].abs());
            z_norm = z_norm.max(self.z[r].abs());
        }
        for j in 0..self.n {
            r_prim = r_prim.max((self.x[j] - self.zb[j]).abs());
            ax_norm = ax_norm.max(self.x[j].abs());
            z_norm = z_norm.max(self.zb[j].abs());
        }
        let mut grad = vec![0.0; self.n];
        self.quad_s.matvec(&self.x, &mut grad);
        let mut qx_norm = 0.0_f64;
        for g in &grad {
            qx_norm = qx_norm.max(g.abs());
        }
        let mut aty = vec![0.0; self.n];
        self.a_s.matvec_t_add(&self.y, &mut aty);
        let mut aty_norm = 0.0_f64;
        for (j, v) in aty.iter().enumerate() {
            aty_norm = aty_norm.max((v + self.yb[j]).abs());
        }
        let mut r_dual = 0.0_f64;
        for j in 0..self.n {
            r_dual = r_dual.max((grad[j] + self.linear_s[j] + aty[j] + self.yb[j]).abs());
        }
        let c_norm = self
            .linear_s
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let prim_rel = r_prim / ax_norm.max(z_norm).max(1e-10);
        let dual_rel = r_dual / qx_norm.max(aty_norm).max(c_norm).max(1e-10);
        (prim_rel / dual_rel.max(1e-300)).sqrt()
    }

    /// Active-set polish: direct KKT re-solve on the constraints the duals
    /// mark active. Returns an improved point when it verifies better.
    fn polish(
        &self,
        y_u: &[f64],
        w_u: &[f64],
        current: &KktResidual,
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, KktResidual)> {
        let mut active_rows = Vec::new();
        for r in 0..self.m {
            if y_u[r] > 0.0 && self.u_rows[r].is_finite() {
                active_rows.push((r, self.u_rows[r]));
            } else if y_u[r] < 0.0 && self.l_rows[r].is_finite() {
                active_rows.push((r, self.l_rows[r]));
            }
        }
        let mut active_bounds = Vec::new();
        for j in 0..self.n {
            if w_u[j] > 0.0 && self.upper[j].is_finite() {
                active_bounds.push((j, self.upper[j]));
            } else if w_u[j] < 0.0 && self.lower[j].is_finite() {
                active_bounds.push((j, self.lower[j]));
            }
        }
        let na = active_rows.len() + active_bounds.len();
        let dim = self.n + na;
        if dim > POLISH_LIMIT {
            return None;
        }

        let mut k = DMatrix::<f64>::zeros(dim, dim);
        for r in 0..self.n {
            for (c, v) in self.quad_u.row(r) {
                k[(r, c)] += v;
            }
            k[(r, r)] += POLISH_REG;
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        for j in 0..self.n {
            rhs[j] = -self.linear_u[j];
        }
        for (i, &(r, b)) in active_rows.iter().enumerate() {
            for (c, v) in self.a_u.row(r) {
                k[(self.n + i, c)] = v;
                k[(c, self.n + i)] = v;
            }
            k[(self.n + i, self.n + i)] = -POLISH_REG;
            rhs[self.n + i] = b;
        }
        let off = self.n + active_rows.len();
        for (i, &(j, b)) in active_bounds.iter().enumerate() {
            k[(off + i, j)] = 1.0;
            k[(j, off + i)] = 1.0;
            k[(off + i, off + i)] = -POLISH_REG;
            rhs[off + i] = b;
        }
        let lu = k.clone().lu();
        let mut sol = lu.solve(&rhs)?;
        // Two steps of iterative refinement against the regularized system.
        for _ in 0..2 {
            let resid = &rhs - &k * &sol;
            if let Some(corr) = lu.solve(&resid) {
                sol += corr;
            }
        }

        let mut x_p = vec![0.0; self.n];
        for j in 0..self.n {
            x_p[j] = sol[j].clamp(self.lower[j], self.upper[j]);
        }
        let mut y_p = vec![0.0; self.m];
        for (i, &(r, _)) in active_rows.iter().enumerate() {
            y_p[r] = sol[self.n + i];
        }
        let mut w_p = vec![0.0; self.n];
        for (i, &(j, _)) in active_bounds.iter().enumerate() {
            w_p[j] = sol[off + i];
        }
        let res = self.residual_at(&x_p, &y_p, &w_p);
        if res.max() < current.max() {
            Some((x_p, y_p, w_p, res))
        } else {
            None
        }
    }

    pub fn solve(&mut self, tol: f64, max_iter: usize) -> QpSolution {
        assert!(tol > 0.0, "tolerance must be positive");
        let mut best_feas = f64::INFINITY;
        let mut best_feas_iter = 0usize;
        let mut last_kkt = f64::INFINITY;
        let mut iter = 0usize;
        let mut status = QpStatus::MaxIter;

        while iter < max_iter {
            iter += 1;
            let cg_tol = (last_kkt * 1e-3).clamp(1e-12, 1e-8);
            self.step(cg_tol);

            let checkpoint = iter % CHECK_INTERVAL == 0 || iter == max_iter;
            if !checkpoint {
                continue;
            }
            let (x_u, y_u, w_u) = self.unscaled_point();
            let res = self.residual_at(&x_u, &y_u, &w_u);
            last_kkt = res.max();
            if std::env::var_os("DERCOORD_QP_TRACE").is_some() {
                eprintln!(
                    "qp iter {iter}: feas {:.3e} stat {:.3e} comp {:.3e} rho {:.3e}",
                    res.feasibility, res.stationarity, res.complementarity, self.rho_bar
                );
            }
            if last_kkt <= tol {
                status = QpStatus::Optimal;
                break;
            }
            // Stall heuristic for infeasible problems.
            if res.feasibility < best_feas * (1.0 - 1e-3) || res.feasibility + 1e-12 < best_feas
            {
                best_feas = res.feasibility;
                best_feas_iter = iter;
            }
            if best_feas > STALL_LEVEL && iter - best_feas_iter >= STALL_WINDOW {
                status = QpStatus::Infeasible;
                break;
            }
            // Adaptive penalty.
            if iter % RHO_UPDATE_INTERVAL == 0 {
                let ratio = self.rho_adapt_ratio();
                if ratio > RHO_UPDATE_RATIO || ratio < 1.0 / RHO_UPDATE_RATIO {
                    let new_rho = (self.rho_bar * ratio).clamp(RHO_MIN, RHO_MAX);
                    if (new_rho / self.rho_bar - 1.0).abs() > 1e-9 {
                        self.set_rho(new_rho);
                    }
                }
            }
        }

        let (mut x_u, mut y_u, mut w_u) = self.unscaled_point();
        let mut res = self.residual_at(&x_u, &y_u, &w_u);
        if self.allow_polish && status != QpStatus::Infeasible {
            if let Some((x_p, y_p, w_p, res_p)) = self.polish(&y_u, &w_u, &res) {
                x_u = x_p;
                y_u = y_p;
                w_u = w_p;
                res = res_p;
            }
        }
        if res.max() <= tol {
            status = QpStatus::Optimal;
        } else if status == QpStatus::Optimal {
            status = QpStatus::MaxIter;
        }
        let objective = self.objective_at(&x_u);
        QpSolution {
            x: x_u,
            y_rows: y_u,
            y_bounds: w_u,
            objective,
            kkt_residual: res.max(),
            iterations: iter,
            status,
        }
    }
}

/// Jacobi-preconditioned conjugate gradients on
/// `(Q + sigma I + diag(rho_b) + A' diag(rho_c) A) x = b`, warm-started.
#[allow(clippy::too_many_arguments)]
fn cg(
    quad: &Csr,
    a: &Csr,
    rho_c: &[f64],
    rho_b: &[f64],
    precond_inv: &[f64],
    b: &[f64],
    x: &mut Vec<f64>,
    rel_tol: f64,
) {
    let n = b.len();
    let m = a.rows();
    let apply = |v: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>| {
        quad.matvec(v, out);
        for j in 0..n {
            out[j] += (SIGMA + rho_b[j]) * v[j];
        }
        a.matvec(v, scratch);
        for r in 0..m {
            scratch[r] *= rho_c[r];
        }
        a.matvec_t_add(scratch, out);
    };

    let mut scratch = vec![0.0; m];
    let mut ax = vec![0.0; n];
    apply(x, &mut ax, &mut scratch);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let stop = (rel_tol * b_norm).max(1e-300);
    let r0: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let trace = std::env::var_os("DERCOORD_CG_TRACE").is_some();
    let mut used = 0usize;
    let mut z: Vec<f64> = r.iter().zip(precond_inv).map(|(ri, pi)| ri * pi).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let max_cg = 20 * n + 50;
    let mut ap = vec![0.0; n];
    for _ in 0..max_cg {
        let r_norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= stop {
            break;
        }
        used += 1;
        apply(&p, &mut ap, &mut scratch);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            if trace {
                eprintln!("cg: pap break at iter {used}, pap {pap:.3e}");
            }
            break;
        }
        let alpha = rz / pap;
        for j in 0..n {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        for j in 0..n {
            z[j] = r[j] * precond_inv[j];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz.max(1e-300);
        rz = rz_new;
        for j in 0..n {
            p[j] = z[j] + beta * p[j];
        }
    }
    if trace {
        let rf: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        eprintln!("cg: used {used}/{max_cg} r0 {r0:.3e} rf {rf:.3e} stop {stop:.3e}");
    }
}

/// One-shot solve with a fresh solver.
pub fn solve_qp(qp: &QuadraticProgram, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(qp)?;
    Ok(solver.solve(tol, max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn box_qp(quad: Vec<(usize, usize, f64)>, linear: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> QuadraticProgram {
        let n = linear.len();
        QuadraticProgram {
            n,
            quad: Csr::from_triplets(n, n, &quad),
            linear,
            constant: 0.0,
            a_eq: Csr::zeros(0, n),
            b_eq: vec![],
            a_in: Csr::zeros(0, n),
            b_in: vec![],
            lower,
            upper,
            var_index: VarIndex::new(),
        }
    }

    #[test]
    fn clipped_unconstrained_optimum() {
        // minimize (x - 1)^2 over 0 <= x <= 0.5
        let mut qp = box_qp(vec![(0, 0, 2.0)], vec![-2.0], vec![0.0], vec![0.5]);
        qp.constant = 1.0;
        let sol = solve_qp(&qp, 1e-8, 20_000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 0.25, epsilon = 1e-6);
    }

    #[test]
    fn symmetric_equality_split() {
        // minimize x^2 + y^2 subject to x + y = 2  =>  (1, 1), objective 2.
        let qp = QuadraticProgram {
            n: 2,
            quad: Csr::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]),
            linear: vec![0.0, 0.0],
            constant: 0.0,
            a_eq: Csr::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]),
            b_eq: vec![2.0],
            a_in: Csr::zeros(0, 2),
            b_in: vec![],
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
            var_index: VarIndex::new(),
        };
        let sol = solve_qp(&qp, 1e-8, 20_000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn bound_active_matches_grid_search() {
        // minimize x^2 - 4x over [-1, 1]; compare against a 1e-4 grid scan.
        let qp = box_qp(vec![(0, 0, 2.0)], vec![-4.0], vec![-1.0], vec![1.0]);
        let sol = solve_qp(&qp, 1e-8, 20_000).unwrap();

        let mut best = f64::INFINITY;
        let mut best_x = 0.0;
        let steps = 20_000; // 1e-4 resolution over [-1, 1]
        for i in 0..=steps {
            let x = -1.0 + 2.0 * (i as f64) / (steps as f64);
            let v = x * x - 4.0 * x;
            if v < best {
                best = v;
                best_x = x;
            }
        }
        assert_abs_diff_eq!(sol.x[0], best_x, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.objective, best, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, -3.0, epsilon = 1e-6);
    }

    #[test]
    fn reported_residual_matches_recomputation() {
        let qp = QuadraticProgram {
            n: 3,
            quad: Csr::from_triplets(
                3,
                3,
                &[
                    (0, 0, 2.5),
                    (1, 1, 1.0),
                    (2, 2, 3.0),
                    (0, 1, 0.4),
                    (1, 0, 0.4),
                ],
            ),
            linear: vec![-1.0, 0.3, -2.0],
            constant: 0.0,
            a_eq: Csr::from_triplets(1, 3, &[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0)]),
            b_eq: vec![1.5],
            a_in: Csr::from_triplets(1, 3, &[(0, 0, 1.0), (0, 2, -1.0)]),
            b_in: vec![0.8],
            lower: vec![0.0, -1.0, 0.0],
            upper: vec![2.0, 2.0, 1.0],
            var_index: VarIndex::new(),
        };
        let sol = solve_qp(&qp, 1e-7, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let recomputed = kkt_residual(&qp, &sol.x, &sol.y_rows, &sol.y_bounds);
        assert_abs_diff_eq!(recomputed.max(), sol.kkt_residual, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_box_rows_detected() {
        // x <= 0 and x >= 1 cannot both hold.
        let qp = QuadraticProgram {
            n: 1,
            quad: Csr::from_triplets(1, 1, &[(0, 0, 2.0)]),
            linear: vec![0.0],
            constant: 0.0,
            a_eq: Csr::zeros(0, 1),
            b_eq: vec![],
            a_in: Csr::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, -1.0)]),
            b_in: vec![0.0, -1.0],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            var_index: VarIndex::new(),
        };
        let sol = solve_qp(&qp, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn budget_exhaustion_returns_best_iterate() {
        let qp = box_qp(vec![(0, 0, 2.0)], vec![-2.0], vec![0.0], vec![0.5]);
        let mut solver = QpSolver::new(&qp).unwrap();
        solver.allow_polish = false;
        let sol = solver.solve(1e-14, 3);
        assert_eq!(sol.status, QpStatus::MaxIter);
        assert_eq!(sol.iterations, 3);
        assert!(sol.x[0].is_finite());
    }

    #[test]
    fn var_index_round_trip() {
        let mut idx = VarIndex::new();
        idx.insert(0, VarKind::GridPower, 0, 4);
        idx.insert(0, VarKind::TradeWith(2), 4, 4);
        idx.insert(0, VarKind::PeakDemand, 8, 1);
        assert_eq!(idx.column(0, VarKind::GridPower, 3), Some(3));
        assert_eq!(idx.column(0, VarKind::TradeWith(2), 0), Some(4));
        assert_eq!(idx.describe(5), Some((0, VarKind::TradeWith(2), 1)));
        assert_eq!(idx.describe(8), Some((0, VarKind::PeakDemand, 0)));
        assert_eq!(idx.column(0, VarKind::GridPower, 4), None);
        assert_eq!(idx.describe(9), None);
    }

    #[test]
    fn csr_builds_and_multiplies() {
        let m = Csr::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0), (0, 0, 0.5)]);
        assert_eq!(m.nnz(), 3);
        let mut out = vec![0.0; 2];
        m.matvec(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.5 + 6.0, -2.0]);
        let mut back = vec![0.0; 3];
        m.matvec_t_add(&[1.0, 1.0], &mut back);
        assert_eq!(back, vec![1.5, -1.0, 2.0]);
    }
}
