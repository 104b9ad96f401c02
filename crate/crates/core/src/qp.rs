//! Self-contained convex QP solver for the per-iteration CFTOC instances.
//!
//! Problem form:
//! `minimize 0.5 x'Px + q'x  subject to  l <= Ax <= u`
//! with P symmetric positive semidefinite. Equality rows use `l = u`;
//! one-sided rows use an infinite bound.
//!
//! The algorithm is operator splitting (ADMM) with over-relaxation,
//! a per-row penalty that treats equality rows stiffly, periodic penalty
//! rebalancing, and the standard primal/dual infeasibility certificates.

use nalgebra::{DMatrix, DVector};
use sprs::{CsMat, FillInReduction, PermutationCheck, SymmetryCheck, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("P is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("P is not positive semidefinite (eigenvalue estimate {0:.3e})")]
    NotPsd(f64),
    #[error("bounds inverted at row {0}")]
    InvertedBounds(usize),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("KKT matrix factorization failed")]
    Factorization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

/// `min 0.5 x'Px + q'x  s.t.  l <= Ax <= u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    /// Structural validation: dimensions, bound ordering, symmetry, and a
    /// power-iteration estimate of the smallest eigenvalue of P.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let m = self.m();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.a.nrows() != m || self.a.ncols() != n {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, expected {m}x{n}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.u.len() != m {
            return Err(QpError::Dimension("l and u lengths differ".into()));
        }
        if !self.p.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("P"));
        }
        if !self.q.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        if !self.a.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("A"));
        }
        for i in 0..m {
            if self.l[i].is_nan() || self.u[i].is_nan() || self.l[i] > self.u[i] {
                return Err(QpError::InvertedBounds(i));
            }
        }
        let asym = (&self.p - self.p.transpose()).amax();
        let scale = 1.0 + self.p.amax();
        if asym > 1e-8 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        let lambda_min = smallest_eigenvalue_estimate(&self.p);
        if lambda_min < -1e-8 * scale {
            return Err(QpError::NotPsd(lambda_min));
        }
        Ok(())
    }

    /// Triplet-form text dump for offline cross-checking.
    pub fn dump<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "qp n {} m {}", self.n(), self.m())?;
        for (label, mat) in [("P", &self.p), ("A", &self.a)] {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    if mat[(i, j)] != 0.0 {
                        writeln!(w, "{label} {i} {j} {}", mat[(i, j)])?;
                    }
                }
            }
        }
        for (i, v) in self.q.iter().enumerate() {
            writeln!(w, "q {i} {v}")?;
        }
        for i in 0..self.m() {
            writeln!(w, "b {i} {} {}", self.l[i], self.u[i])?;
        }
        Ok(())
    }
}

/// Power-iteration estimate of the smallest eigenvalue of a symmetric
/// matrix: shift by an upper bound on the largest eigenvalue, power-iterate
/// the shifted operator, shift back.
fn smallest_eigenvalue_estimate(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    if n == 0 {
        return 0.0;
    }
    // Gershgorin upper bound on lambda_max.
    let mut upper: f64 = 0.0;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| p[(i, j)].abs()).sum();
        upper = upper.max(row_sum);
    }
    if upper == 0.0 {
        return 0.0;
    }
    let shifted = DMatrix::identity(n, n) * upper - p;
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.7).sin());
    v /= v.norm();
    let mut mu = 0.0;
    for _ in 0..60 {
        let w = &shifted * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return upper;
        }
        mu = v.dot(&w);
        v = w / norm;
    }
    upper - mu
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    /// Absolute residual tolerance.
    pub eps_prim: f64,
    /// Absolute dual tolerance; both tolerances also get a relative term
    /// `eps_rel * scale` from the iterate magnitudes.
    pub eps_dual: f64,
    /// Relative tolerance applied to both residuals.
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Multiplier applied to `rho` on equality rows.
    pub rho_eq_scale: f64,
    pub adaptive_rho: bool,
    /// Ruiz equilibration passes; 0 disables scaling.
    pub scaling_iters: usize,
    /// After convergence, re-solve on the active set for a high-accuracy
    /// solution. Falls back to the iterate when it does not improve.
    pub polish: bool,
    /// Regularization used by the polish KKT factorization.
    pub polish_delta: f64,
    /// Run the PSD/symmetry validation before solving.
    pub check_problem: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_prim: 1e-6,
            eps_dual: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            rho_eq_scale: 1e3,
            adaptive_rho: true,
            scaling_iters: 10,
            polish: true,
            polish_delta: 1e-7,
            check_problem: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }

    pub fn objective(&self, problem: &QpProblem) -> f64 {
        0.5 * self.x.dot(&(&problem.p * &self.x)) + problem.q.dot(&self.x)
    }
}

/// Independent residual recomputation for a candidate solution.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// `max_i dist(A x, [l, u])_i`.
    pub primal_residual: f64,
    /// `|P x + q + A' y|_inf`.
    pub stationarity_residual: f64,
    /// Complementary-slackness proxy: `max_i |y_i| * dist_i` over rows
    /// where the constraint is strictly inactive.
    pub complementarity: f64,
}

pub fn verify_kkt(problem: &QpProblem, solution: &QpSolution) -> KktReport {
    let ax = &problem.a * &solution.x;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..problem.m() {
        let below = problem.l[i] - ax[i];
        let above = ax[i] - problem.u[i];
        primal = primal.max(below.max(above).max(0.0));
        let slack_lo = (ax[i] - problem.l[i]).max(0.0);
        let slack_hi = (problem.u[i] - ax[i]).max(0.0);
        // y_i < 0 pairs with the lower bound, y_i > 0 with the upper.
        let dist = if solution.y[i] >= 0.0 { slack_hi } else { slack_lo };
        if dist.is_finite() {
            comp = comp.max(solution.y[i].abs() * dist);
        }
    }
    let stat = (&problem.p * &solution.x + &problem.q + problem.a.transpose() * &solution.y).amax();
    KktReport {
        primal_residual: primal,
        stationarity_residual: stat,
        complementarity: comp,
    }
}

/// Diagonal problem equilibration: `x = d .* x_scaled`,
/// `y = e .* y_scaled / cost`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

impl Scaling {
    fn identity(n: usize, m: usize) -> Self {
        Self {
            d: DVector::from_element(n, 1.0),
            e: DVector::from_element(m, 1.0),
            cost: 1.0,
        }
    }
}

/// Modified Ruiz equilibration of `[P A'; A 0]` plus cost normalization,
/// returning the scaled problem and the scaling to undo it.
fn ruiz_equilibrate(problem: &QpProblem, iterations: usize) -> (QpProblem, Scaling) {
    let n = problem.n();
    let m = problem.m();
    let mut scaled = problem.clone();
    let mut scaling = Scaling::identity(n, m);
    let clip = |v: f64| v.clamp(1e-4, 1e4);

    for _ in 0..iterations {
        let mut delta_d = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(scaled.p[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(scaled.a[(i, j)].abs());
            }
            if norm > 0.0 {
                delta_d[j] = 1.0 / clip(norm.sqrt());
            }
        }
        let mut delta_e = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(scaled.a[(i, j)].abs());
            }
            if norm > 0.0 {
                delta_e[i] = 1.0 / clip(norm.sqrt());
            }
        }
        for i in 0..n {
            for j in 0..n {
                scaled.p[(i, j)] *= delta_d[i] * delta_d[j];
            }
        }
        for i in 0..m {
            for j in 0..n {
                scaled.a[(i, j)] *= delta_e[i] * delta_d[j];
            }
        }
        for j in 0..n {
            scaled.q[j] *= delta_d[j];
            scaling.d[j] *= delta_d[j];
        }
        for i in 0..m {
            scaled.l[i] *= delta_e[i];
            scaled.u[i] *= delta_e[i];
            scaling.e[i] *= delta_e[i];
        }

        // Cost normalization keeps the objective terms near unit size.
        let mut mean_col = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(scaled.p[(i, j)].abs());
            }
            mean_col += norm;
        }
        mean_col /= n.max(1) as f64;
        let denom = mean_col.max(scaled.q.amax());
        if denom > 0.0 {
            let gamma = 1.0 / clip(denom);
            scaled.p *= gamma;
            scaled.q *= gamma;
            scaling.cost *= gamma;
        }
    }
    (scaled, scaling)
}

fn to_csr(mat: &DMatrix<f64>) -> CsMat<f64> {
    let mut tri = TriMat::new((mat.nrows(), mat.ncols()));
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            let v = mat[(i, j)];
            if v != 0.0 {
                tri.add_triplet(i, j, v);
            }
        }
    }
    tri.to_csr()
}

fn csr_mul_vec(mat: &CsMat<f64>, x: &DVector<f64>, out: &mut DVector<f64>) {
    out.fill(0.0);
    sprs::prod::mul_acc_mat_vec_csr(mat.view(), x.as_slice(), out.as_mut_slice());
}

/// Sparse views of the scaled problem reused by every ADMM iteration.
struct SparseData {
    p: CsMat<f64>,
    a: CsMat<f64>,
    at: CsMat<f64>,
}

impl SparseData {
    fn new(problem: &QpProblem) -> Self {
        let a = to_csr(&problem.a);
        let at = a.transpose_view().to_csr();
        Self { p: to_csr(&problem.p), a, at }
    }
}

/// Factorization of `K = P + sigma I + A' diag(rho) A`. The LDL backend
/// cannot handle 1x1 systems, so those use plain division.
enum KktFactor {
    Scalar(f64),
    Ldl(LdlNumeric<f64, usize>),
}

impl KktFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            KktFactor::Scalar(k) => DVector::from_element(1, rhs[0] / k),
            KktFactor::Ldl(ldl) => DVector::from_vec(ldl.solve(rhs.as_slice())),
        }
    }
}

struct Workspace {
    rho_vec: DVector<f64>,
    kkt: KktFactor,
}

/// Factors the KKT matrix with a fill-reducing ordering.
fn factorize(
    sparse: &SparseData,
    rho_vec: &DVector<f64>,
    sigma: f64,
) -> Result<KktFactor, QpError> {
    let n = sparse.p.rows();
    let mut rho_a = TriMat::new(sparse.a.shape());
    for (v, (i, j)) in sparse.a.iter() {
        rho_a.add_triplet(i, j, v * rho_vec[i]);
    }
    let ata: CsMat<f64> = &sparse.at * &rho_a.to_csr();
    let sigma_eye: CsMat<f64> = CsMat::<f64>::eye(n).map(|v| v * sigma);
    let p_shifted: CsMat<f64> = &sparse.p + &sigma_eye;
    let raw: CsMat<f64> = &p_shifted + &ata;
    // The product A' diag(rho) A sums (i, j) and (j, i) in different orders,
    // so the values can differ by an ulp; the ordering code requires exact
    // symmetry.
    let raw_t: CsMat<f64> = raw.transpose_view().to_csr();
    let kkt = (&raw + &raw_t).map(|v| 0.5 * v).to_csc();
    if n == 1 {
        let k = *kkt.get(0, 0).unwrap_or(&0.0);
        if k <= 0.0 {
            return Err(QpError::Factorization);
        }
        return Ok(KktFactor::Scalar(k));
    }
    Ldl::new()
        .check_symmetry(SymmetryCheck::DontCheckSymmetry)
        .check_perm(PermutationCheck::DontCheckPerm)
        .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
        .numeric(kkt.view())
        .map(KktFactor::Ldl)
        .map_err(|_| QpError::Factorization)
}

/// Worst primal bound violation and dual stationarity residual, both in
/// original coordinates.
fn residuals(problem: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let ax = &problem.a * x;
    let mut prim: f64 = 0.0;
    for i in 0..problem.m() {
        prim = prim.max(problem.l[i] - ax[i]).max(ax[i] - problem.u[i]);
    }
    let dual = (&problem.p * x + &problem.q + problem.a.transpose() * y).amax();
    (prim.max(0.0), dual)
}

/// Multiplies a candidate by the unregularized polish KKT matrix
/// `[P A_act'; A_act 0]`.
fn polish_kkt_mul(
    problem: &QpProblem,
    rows: &[(usize, f64)],
    v: &DVector<f64>,
) -> DVector<f64> {
    let n = problem.n();
    let x = v.rows(0, n);
    let mut out = DVector::zeros(v.len());
    out.rows_mut(0, n).copy_from(&(&problem.p * x));
    for (r, &(row, _)) in rows.iter().enumerate() {
        let a_row = problem.a.row(row);
        let mut dot = 0.0;
        for j in 0..n {
            dot += a_row[j] * x[j];
            out[j] += a_row[j] * v[n + r];
        }
        out[n + r] = dot;
    }
    out
}

/// Re-solves on the active set guessed from the multiplier signs, with a
/// regularized KKT factorization and iterative refinement. Returns the
/// refit only when it is well posed.
/// Guesses the active rows: each row is pinned at the bound its multiplier
/// pushes against. Multipliers below the noise floor fall back to bound
/// proximity; equality rows are always pinned and infinite bounds stay free.
fn active_set_guess(
    problem: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    prim_res: f64,
) -> Vec<(usize, f64)> {
    let ax = &problem.a * x;
    let y_tol = 1e-6 * y.amax().max(1e-30);
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for i in 0..problem.m() {
        let (l, u) = (problem.l[i], problem.u[i]);
        let act_tol = 10.0 * prim_res + 1e-9 * (1.0 + ax[i].abs());
        let bound = if u - l <= 1e-12 {
            l
        } else if y[i] < -y_tol {
            l
        } else if y[i] > y_tol {
            u
        } else if ax[i] - l <= act_tol {
            l
        } else if u - ax[i] <= act_tol {
            u
        } else {
            continue;
        };
        if bound.is_finite() {
            rows.push((i, bound));
        }
    }
    rows
}

fn polish(
    problem: &QpProblem,
    rows: &[(usize, f64)],
    delta: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let m = problem.m();
    let dim = n + rows.len();
    if dim < 2 {
        return None;
    }
    let mut tri = TriMat::new((dim, dim));
    for i in 0..n {
        for j in 0..n {
            let v = problem.p[(i, j)];
            if v != 0.0 {
                tri.add_triplet(i, j, v);
            }
        }
        tri.add_triplet(i, i, delta);
    }
    for (r, &(row, _)) in rows.iter().enumerate() {
        for j in 0..n {
            let v = problem.a[(row, j)];
            if v != 0.0 {
                tri.add_triplet(n + r, j, v);
                tri.add_triplet(j, n + r, v);
            }
        }
        tri.add_triplet(n + r, n + r, -delta);
    }
    let kkt = tri.to_csc();
    let ldl = Ldl::new()
        .check_symmetry(SymmetryCheck::DontCheckSymmetry)
        .check_perm(PermutationCheck::DontCheckPerm)
        .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
        .numeric(kkt.view())
        .ok()?;
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -problem.q[j];
    }
    for (r, &(_, b)) in rows.iter().enumerate() {
        rhs[n + r] = b;
    }
    // Iterative refinement removes the delta regularization.
    let mut sol = DVector::from_vec(ldl.solve(rhs.as_slice()));
    for _ in 0..3 {
        let resid = &rhs - polish_kkt_mul(problem, &rows, &sol);
        sol += DVector::from_vec(ldl.solve(resid.as_slice()));
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x_pol = DVector::from_fn(n, |j, _| sol[j]);
    let mut y_pol = DVector::zeros(m);
    for (r, &(row, _)) in rows.iter().enumerate() {
        y_pol[row] = sol[n + r];
    }
    // Reject refits whose multiplier signs contradict the pinned bound:
    // those are KKT-stationary but not optimal.
    let sign_tol = 1e-7 * y_pol.amax().max(1.0);
    for &(row, bound) in rows {
        if problem.u[row] - problem.l[row] <= 1e-12 {
            continue;
        }
        let pinned_lower = bound == problem.l[row];
        if (pinned_lower && y_pol[row] > sign_tol)
            || (!pinned_lower && y_pol[row] < -sign_tol)
        {
            return None;
        }
    }
    Some((x_pol, y_pol))
}

/// Replaces the solution with the polished refit when it is at least as
/// accurate on both residuals.
fn try_polish(problem: &QpProblem, solution: &mut QpSolution, delta: f64) {
    let (prim, dual) = residuals(problem, &solution.x, &solution.y);
    let rows = active_set_guess(problem, &solution.x, &solution.y, prim);
    if let Some((xp, yp)) = polish(problem, &rows, delta) {
        let (pp, dp) = residuals(problem, &xp, &yp);
        if pp <= prim && dp <= dual {
            solution.x = xp;
            solution.y = yp;
            solution.primal_residual = pp;
            solution.dual_residual = dp;
        }
    }
}

fn build_rho(problem: &QpProblem, settings: &QpSettings, rho: f64) -> DVector<f64> {
    DVector::from_fn(problem.m(), |i, _| {
        if problem.u[i] - problem.l[i] <= 1e-12 {
            rho * settings.rho_eq_scale
        } else {
            rho
        }
    })
}

pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_with_start(problem, settings, None)
}

/// Solve with an optional primal/dual warm start.
pub fn solve_with_start(
    problem: &QpProblem,
    settings: &QpSettings,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    if settings.check_problem {
        problem.validate()?;
    } else {
        // Cheap structural checks are always on.
        if problem.p.nrows() != problem.n()
            || problem.a.nrows() != problem.m()
            || problem.a.ncols() != problem.n()
            || problem.u.len() != problem.m()
        {
            return Err(QpError::Dimension("problem dimensions inconsistent".into()));
        }
    }

    let n = problem.n();
    let m = problem.m();
    let (scaled, scaling) = if settings.scaling_iters > 0 {
        ruiz_equilibrate(problem, settings.scaling_iters)
    } else {
        (problem.clone(), Scaling::identity(n, m))
    };

    let sparse = SparseData::new(&scaled);
    let mut rho = settings.rho;
    let rho_vec = build_rho(&scaled, settings, rho);
    let mut ws = Workspace {
        kkt: factorize(&sparse, &rho_vec, settings.sigma)?,
        rho_vec,
    };

    // Warm starts arrive in original coordinates.
    let mut x = match start {
        Some((x0, _)) if x0.len() == n => x0.component_div(&scaling.d),
        _ => DVector::zeros(n),
    };
    let mut y = match start {
        Some((_, y0)) if y0.len() == m => {
            y0.component_div(&scaling.e) * scaling.cost
        }
        _ => DVector::zeros(m),
    };
    let mut ax = DVector::zeros(m);
    csr_mul_vec(&sparse.a, &x, &mut ax);
    let mut z = clamp(&ax, &scaled.l, &scaled.u);
    let mut atv = DVector::zeros(n);
    let mut px = DVector::zeros(n);

    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let polish_factor = 1e3;
    let mut last_active_guess: Option<Vec<(usize, f64)>> = None;
    let unscale = |x: &DVector<f64>, y: &DVector<f64>| {
        (
            x.component_mul(&scaling.d),
            y.component_mul(&scaling.e) / scaling.cost,
        )
    };

    for iter in 1..=settings.max_iter {
        let x_prev = x.clone();
        let y_prev = y.clone();

        // x-update: (P + sigma I + A' rho A) xt = sigma x - q + A'(rho z - y)
        csr_mul_vec(&sparse.at, &(ws.rho_vec.component_mul(&z) - &y), &mut atv);
        let rhs = &x * settings.sigma - &scaled.q + &atv;
        let xt = ws.kkt.solve(&rhs);
        let mut zt = DVector::zeros(m);
        csr_mul_vec(&sparse.a, &xt, &mut zt);

        let alpha = settings.alpha;
        x = &xt * alpha + &x_prev * (1.0 - alpha);
        let z_relaxed = &zt * alpha + &z * (1.0 - alpha);
        let z_arg = &z_relaxed + y.component_div(&ws.rho_vec);
        let z_new = clamp(&z_arg, &scaled.l, &scaled.u);
        y += ws.rho_vec.component_mul(&(&z_relaxed - &z_new));
        z = z_new;

        if iter % 25 == 0 || iter == settings.max_iter {
            // Residuals and tolerances are judged in original coordinates.
            csr_mul_vec(&sparse.a, &x, &mut ax);
            let ax_orig = ax.component_div(&scaling.e);
            let z_orig = z.component_div(&scaling.e);
            prim_res = (&ax - clamp(&ax, &scaled.l, &scaled.u))
                .component_div(&scaling.e)
                .amax();
            csr_mul_vec(&sparse.p, &x, &mut px);
            let px_orig = px.component_div(&scaling.d) / scaling.cost;
            csr_mul_vec(&sparse.at, &y, &mut atv);
            let aty_orig = atv.component_div(&scaling.d) / scaling.cost;
            let q_orig = scaled.q.component_div(&scaling.d) / scaling.cost;
            dual_res = (&px_orig + &q_orig + &aty_orig).amax();
            let eps_prim = settings.eps_prim
                + settings.eps_rel * ax_orig.amax().max(z_orig.amax());
            let eps_dual = settings.eps_dual
                + settings.eps_rel
                    * px_orig.amax().max(aty_orig.amax()).max(q_orig.amax());
            let raw_ok = prim_res <= eps_prim && dual_res <= eps_dual;
            // Polish can certify an exact solution well before the iterate
            // itself meets tolerance. Attempt it once the iterate is within
            // a coarse factor of tolerance and the guessed active set has
            // stopped changing between checks.
            let polish_near = settings.polish
                && prim_res <= eps_prim * polish_factor
                && dual_res <= eps_dual * polish_factor;
            let mut polish_try = false;
            if polish_near && !raw_ok {
                let (xu, yu) = unscale(&x, &y);
                let guess = active_set_guess(problem, &xu, &yu, prim_res);
                polish_try = last_active_guess.as_deref() == Some(&guess[..]);
                last_active_guess = Some(guess);
            }
            if raw_ok || polish_try {
                let (xu, yu) = unscale(&x, &y);
                let mut solution = QpSolution {
                    x: xu,
                    y: yu,
                    status: QpStatus::Solved,
                    iterations: iter,
                    primal_residual: prim_res,
                    dual_residual: dual_res,
                };
                if settings.polish {
                    try_polish(problem, &mut solution, settings.polish_delta);
                }
                if raw_ok
                    || (solution.primal_residual <= eps_prim
                        && solution.dual_residual <= eps_dual)
                {
                    return Ok(solution);
                }
            }

            let (_, dy) = unscale(&x, &(&y - &y_prev));
            if is_primal_infeasibility_certificate(problem, &dy, settings.eps_infeasible) {
                let (x, _) = unscale(&x, &y);
                return Ok(QpSolution {
                    x,
                    y: dy,
                    status: QpStatus::PrimalInfeasible,
                    iterations: iter,
                    primal_residual: prim_res,
                    dual_residual: dual_res,
                });
            }
            let (dx, _) = unscale(&(&x - &x_prev), &y);
            if is_dual_infeasibility_certificate(problem, &dx, settings.eps_infeasible) {
                let (_, y) = unscale(&x, &y);
                return Ok(QpSolution {
                    x: dx,
                    y,
                    status: QpStatus::DualInfeasible,
                    iterations: iter,
                    primal_residual: prim_res,
                    dual_residual: dual_res,
                });
            }
        }

        if settings.adaptive_rho && iter % 100 == 0 {
            csr_mul_vec(&sparse.a, &x, &mut ax);
            let p_rel = (&ax - clamp(&ax, &scaled.l, &scaled.u)).amax()
                / (1.0 + ax.amax().max(z.amax()));
            csr_mul_vec(&sparse.p, &x, &mut px);
            csr_mul_vec(&sparse.at, &y, &mut atv);
            let d_rel = (&px + &scaled.q + &atv).amax()
                / (1.0 + px.amax().max(scaled.q.amax()).max(atv.amax()));
            if p_rel > 0.0 && d_rel > 0.0 {
                let ratio = (p_rel / d_rel).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    rho = (rho * ratio).clamp(1e-6, 1e6);
                    ws.rho_vec = build_rho(&scaled, settings, rho);
                    ws.kkt = factorize(&sparse, &ws.rho_vec, settings.sigma)?;
                }
            }
        }
    }

    let (x, y) = unscale(&x, &y);
    let mut solution = QpSolution {
        x,
        y,
        status: QpStatus::MaxIterations,
        iterations: settings.max_iter,
        primal_residual: prim_res,
        dual_residual: dual_res,
    };
    if settings.polish {
        try_polish(problem, &mut solution, settings.polish_delta);
    }
    Ok(solution)
}

fn clamp(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

/// Primal infeasibility certificate: `dy != 0`, `A' dy ~ 0`, and the
/// support function `u'[dy]+ + l'[dy]-` strictly negative. Rows with an
/// infinite bound must not contribute on that side.
fn is_primal_infeasibility_certificate(problem: &QpProblem, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm <= eps {
        return false;
    }
    let dy = dy / norm;
    if (problem.a.transpose() * &dy).amax() > eps.max(1e-10) * problem.a.amax().max(1.0) {
        return false;
    }
    let mut support = 0.0;
    for i in 0..problem.m() {
        let v = dy[i];
        if v > 1e-10 {
            if problem.u[i].is_infinite() {
                return false;
            }
            support += problem.u[i] * v;
        } else if v < -1e-10 {
            if problem.l[i].is_infinite() {
                return false;
            }
            support += problem.l[i] * v;
        }
    }
    support < -eps.max(1e-10)
}

/// Dual infeasibility certificate: `dx != 0`, `P dx ~ 0`, `q' dx < 0`, and
/// `A dx` consistent with the recession cone of the constraint set.
fn is_dual_infeasibility_certificate(problem: &QpProblem, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = dx.amax();
    if norm <= eps {
        return false;
    }
    let dx = dx / norm;
    let tol = eps.max(1e-10);
    if (&problem.p * &dx).amax() > tol * problem.p.amax().max(1.0) {
        return false;
    }
    if problem.q.dot(&dx) >= -tol * problem.q.amax().max(1.0) {
        return false;
    }
    let adx = &problem.a * &dx;
    for i in 0..problem.m() {
        if adx[i] > tol && problem.u[i].is_finite() {
            return false;
        }
        if adx[i] < -tol && problem.l[i].is_finite() {
            return false;
        }
    }
    true
}
