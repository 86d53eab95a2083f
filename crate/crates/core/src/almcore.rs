//! Method of multipliers for small smooth problems
//!
//! ```text
//! min f(z)  s.t.  A_p(z) = 0,  B_r(z) <= 0
//! ```
//!
//! Inequalities are turned into equalities with squared slacks,
//! `B_r(z) + phi_r^2 = 0`, giving the augmented Lagrangian
//!
//! ```text
//! L_c = f + lambda.A + c/2 |A|^2 + mu.(B + phi^2) + c/2 |B + phi^2|^2
//! ```
//!
//! The inner minimization eliminates the slacks in closed form,
//! `phi_r^2 = max(0, -B_r - mu_r / c)`, and runs a regularized Newton method
//! with Armijo backtracking on the remaining function of `z`. Box bounds are
//! appended after the user inequalities as `z_i - hi <= 0` and `lo - z_i <= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value, sparse gradient and sparse lower-triangular Hessian of a scalar
/// function. Hessian entries are `(row, col, value)` with `row >= col`;
/// repeated entries add.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Eval {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
    pub hess: Vec<(usize, usize, f64)>,
}

impl Eval {
    /// `offset + sum coeffs[k].1 * z[coeffs[k].0]`
    pub fn linear(z: &[f64], offset: f64, coeffs: &[(usize, f64)]) -> Eval {
        Eval {
            value: offset + coeffs.iter().map(|&(i, a)| a * z[i]).sum::<f64>(),
            grad: coeffs.to_vec(),
            hess: Vec::new(),
        }
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|g| g.1.is_finite())
            && self.hess.iter().all(|h| h.2.is_finite())
    }

    fn dense_grad(&self, n: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for &(i, v) in &self.grad {
            g[i] += v;
        }
        g
    }

    fn add_hess_to(&self, h: &mut DMatrix<f64>, w: f64) {
        for &(i, j, v) in &self.hess {
            h[(i, j)] += w * v;
            if i != j {
                h[(j, i)] += w * v;
            }
        }
    }

    fn add_outer_to(&self, h: &mut DMatrix<f64>, w: f64) {
        for &(i, a) in &self.grad {
            for &(j, b) in &self.grad {
                h[(i, j)] += w * a * b;
            }
        }
    }
}

pub type SmoothFn = Box<dyn Fn(&[f64]) -> Eval + Send + Sync>;

pub struct NlpProblem {
    pub dim: usize,
    pub objective: SmoothFn,
    pub eq_constraints: Vec<SmoothFn>,
    pub ineq_constraints: Vec<SmoothFn>,
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl std::fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NlpProblem")
            .field("dim", &self.dim)
            .field("eq", &self.eq_constraints.len())
            .field("ineq", &self.ineq_constraints.len())
            .field("bounds", &self.bounds.is_some())
            .finish()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AlmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value from {0}")]
    NonFinite(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("start point outside bounds at variable {0}")]
    InvalidStart(usize),
}

/// Evaluated constraint and objective pieces at one point.
struct Point {
    f: Eval,
    eq: Vec<Eval>,
    ineq: Vec<Eval>,
}

impl NlpProblem {
    /// Number of inequalities including the two per bounded variable.
    pub fn n_ineq_total(&self) -> usize {
        self.ineq_constraints.len() + self.bounds.as_ref().map_or(0, |b| 2 * b.len())
    }

    fn check_point(&self, z: &[f64]) -> Result<(), AlmError> {
        if z.len() != self.dim {
            return Err(AlmError::DimensionMismatch(format!(
                "point has {} entries, problem has {}",
                z.len(),
                self.dim
            )));
        }
        if let Some(b) = &self.bounds {
            if b.len() != self.dim {
                return Err(AlmError::DimensionMismatch("bounds length".into()));
            }
        }
        Ok(())
    }

    fn evaluate(&self, z: &[f64]) -> Result<Point, AlmError> {
        let f = (self.objective)(z);
        if !f.is_finite() {
            return Err(AlmError::NonFinite("objective".into()));
        }
        let mut eq = Vec::with_capacity(self.eq_constraints.len());
        for (k, a) in self.eq_constraints.iter().enumerate() {
            let e = a(z);
            if !e.is_finite() {
                return Err(AlmError::NonFinite(format!("equality {k}")));
            }
            eq.push(e);
        }
        let mut ineq = Vec::with_capacity(self.n_ineq_total());
        for (k, b) in self.ineq_constraints.iter().enumerate() {
            let e = b(z);
            if !e.is_finite() {
                return Err(AlmError::NonFinite(format!("inequality {k}")));
            }
            ineq.push(e);
        }
        if let Some(bounds) = &self.bounds {
            for (i, &(lo, hi)) in bounds.iter().enumerate() {
                ineq.push(Eval::linear(z, -hi, &[(i, 1.0)]));
                ineq.push(Eval::linear(z, lo, &[(i, -1.0)]));
            }
        }
        Ok(Point { f, eq, ineq })
    }
}

/// Primal/dual iterate of the squared-slack formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub z: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugLagEval {
    pub value: f64,
    pub grad_z: DVector<f64>,
    pub hess_z: DMatrix<f64>,
}

/// Value, gradient and Hessian in `z` of `L_c` with explicit slacks `phi`.
pub fn eval_augmented_lagrangian(problem: &NlpProblem, state: &AlmState) -> Result<AugLagEval, AlmError> {
    problem.check_point(&state.z)?;
    let n_eq = problem.eq_constraints.len();
    let n_in = problem.n_ineq_total();
    if state.lambda.len() != n_eq || state.mu.len() != n_in || state.phi.len() != n_in {
        return Err(AlmError::DimensionMismatch(format!(
            "state has {} lambda, {} mu, {} phi; problem has {n_eq} equalities, {n_in} inequalities",
            state.lambda.len(),
            state.mu.len(),
            state.phi.len()
        )));
    }
    let pt = problem.evaluate(&state.z)?;
    let n = problem.dim;
    let c = state.c;

    let mut value = pt.f.value;
    let mut grad = pt.f.dense_grad(n);
    let mut hess = DMatrix::zeros(n, n);
    pt.f.add_hess_to(&mut hess, 1.0);

    for (a, &lam) in pt.eq.iter().zip(&state.lambda) {
        value += lam * a.value + 0.5 * c * a.value * a.value;
        let w = lam + c * a.value;
        grad += a.dense_grad(n) * w;
        a.add_hess_to(&mut hess, w);
        a.add_outer_to(&mut hess, c);
    }
    for ((b, &mu), &phi) in pt.ineq.iter().zip(&state.mu).zip(&state.phi) {
        let s = b.value + phi * phi;
        value += mu * s + 0.5 * c * s * s;
        let w = mu + c * s;
        grad += b.dense_grad(n) * w;
        b.add_hess_to(&mut hess, w);
        b.add_outer_to(&mut hess, c);
    }
    Ok(AugLagEval {
        value,
        grad_z: grad,
        hess_z: hess,
    })
}

/// Slack-eliminated augmented Lagrangian
/// `f + lambda.A + c/2|A|^2 + 1/(2c) sum (max(0, mu + c B)^2 - mu^2)`.
/// The Hessian is the generalized one (active terms only).
fn eval_reduced(
    problem: &NlpProblem,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
    c: f64,
    want_hess: bool,
) -> Result<(f64, DVector<f64>, Option<DMatrix<f64>>), AlmError> {
    let pt = problem.evaluate(z)?;
    let n = problem.dim;
    let mut value = pt.f.value;
    let mut grad = pt.f.dense_grad(n);
    let mut hess = want_hess.then(|| {
        let mut h = DMatrix::zeros(n, n);
        pt.f.add_hess_to(&mut h, 1.0);
        h
    });
    for (a, &lam) in pt.eq.iter().zip(lambda) {
        value += lam * a.value + 0.5 * c * a.value * a.value;
        let w = lam + c * a.value;
        grad += a.dense_grad(n) * w;
        if let Some(h) = hess.as_mut() {
            a.add_hess_to(h, w);
            a.add_outer_to(h, c);
        }
    }
    for (b, &m) in pt.ineq.iter().zip(mu) {
        let t = (m + c * b.value).max(0.0);
        value += (t * t - m * m) / (2.0 * c);
        if t > 0.0 {
            grad += b.dense_grad(n) * t;
            if let Some(h) = hess.as_mut() {
                b.add_hess_to(h, t);
                b.add_outer_to(h, c);
            }
        }
    }
    Ok((value, grad, hess))
}

/// Public form of the slack-eliminated augmented Lagrangian, for analysis.
pub fn eval_reduced_augmented_lagrangian(
    problem: &NlpProblem,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
    c: f64,
) -> Result<AugLagEval, AlmError> {
    problem.check_point(z)?;
    if lambda.len() != problem.eq_constraints.len() || mu.len() != problem.n_ineq_total() {
        return Err(AlmError::DimensionMismatch("multiplier lengths".into()));
    }
    let (value, grad_z, hess) = eval_reduced(problem, z, lambda, mu, c, true)?;
    Ok(AugLagEval {
        value,
        grad_z,
        hess_z: hess.expect("requested"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmOptions {
    pub kkt_tol: f64,
    pub c0: f64,
    pub c_growth: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for AlmOptions {
    fn default() -> Self {
        AlmOptions {
            kkt_tol: 1e-8,
            c0: 10.0,
            c_growth: 10.0,
            max_outer: 30,
            max_inner: 50,
        }
    }
}

const C_MAX: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub z_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub mu_star: Vec<f64>,
    /// Slacks with `B_r + phi_r^2 = 0` where satisfiable, `phi_r >= 0`.
    pub phi_star: Vec<f64>,
    pub objective: f64,
    pub kkt_stationarity: f64,
    pub kkt_feasibility: f64,
    pub kkt_complementarity: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    /// Inner steps where no regularized Newton system could be factored.
    pub gradient_fallbacks: usize,
    pub converged: bool,
    pub c_final: f64,
}

/// KKT residuals of the ordinary Lagrangian `f + lambda.A + mu.B` at a point.
pub fn kkt_residuals(
    problem: &NlpProblem,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
) -> Result<KktResiduals, AlmError> {
    problem.check_point(z)?;
    if lambda.len() != problem.eq_constraints.len() || mu.len() != problem.n_ineq_total() {
        return Err(AlmError::DimensionMismatch("multiplier lengths".into()));
    }
    let pt = problem.evaluate(z)?;
    Ok(kkt_from_point(&pt, problem.dim, lambda, mu))
}

fn kkt_from_point(pt: &Point, n: usize, lambda: &[f64], mu: &[f64]) -> KktResiduals {
    let mut g = pt.f.dense_grad(n);
    let mut feas: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (a, &l) in pt.eq.iter().zip(lambda) {
        g += a.dense_grad(n) * l;
        feas = feas.max(a.value.abs());
    }
    for (b, &m) in pt.ineq.iter().zip(mu) {
        g += b.dense_grad(n) * m;
        feas = feas.max(b.value.max(0.0));
        comp = comp.max((m * b.value).abs());
    }
    KktResiduals {
        stationarity: g.amax(),
        feasibility: feas,
        complementarity: comp,
    }
}

/// Solves `(H + tau I) d = -g`, growing `tau` from 1e-8 by 10x until the
/// Cholesky factorization succeeds. `None` when no shift up to 1e8 works.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.len();
    let scale = h.diagonal().amax().max(1.0);
    let mut tau = 0.0;
    loop {
        let shifted = if tau == 0.0 {
            h.clone()
        } else {
            h + DMatrix::identity(n, n) * (tau * scale)
        };
        if let Some(ch) = shifted.cholesky() {
            let d = ch.solve(&(-g));
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        tau = if tau == 0.0 { 1e-8 } else { tau * 10.0 };
        if tau > 1e8 {
            return None;
        }
    }
}

struct InnerOutcome {
    iterations: usize,
    fallbacks: usize,
}

fn inner_minimize(
    problem: &NlpProblem,
    z: &mut [f64],
    lambda: &[f64],
    mu: &[f64],
    c: f64,
    opts: &AlmOptions,
) -> Result<InnerOutcome, AlmError> {
    let inner_tol = (opts.kkt_tol * 1e-2).max(1e-14);
    let mut out = InnerOutcome {
        iterations: 0,
        fallbacks: 0,
    };
    for _ in 0..opts.max_inner {
        let (val, g, h) = eval_reduced(problem, z, lambda, mu, c, true)?;
        if g.amax() <= inner_tol {
            break;
        }
        out.iterations += 1;
        let mut d = match newton_direction(&h.expect("requested"), &g) {
            Some(d) => d,
            None => {
                out.fallbacks += 1;
                -g.clone()
            }
        };
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            out.fallbacks += 1;
            d = -g.clone();
            slope = -g.dot(&g);
        }
        let mut alpha = 1.0;
        let mut trial = z.to_vec();
        let mut accepted = false;
        for _ in 0..60 {
            for (t, (zi, di)) in trial.iter_mut().zip(z.iter().zip(d.iter())) {
                *t = zi + alpha * di;
            }
            match eval_reduced(problem, &trial, lambda, mu, c, false) {
                Ok((tv, _, _)) if tv <= val + 1e-4 * alpha * slope => {
                    accepted = true;
                    break;
                }
                Ok(_) | Err(AlmError::NonFinite(_)) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            // No decrease representable in floating point; the iterate is as
            // good as this penalty level allows.
            break;
        }
        z.copy_from_slice(&trial);
    }
    Ok(out)
}

pub fn alm_solve(problem: &NlpProblem, start: &[f64], opts: &AlmOptions) -> Result<SolveReport, AlmError> {
    if !(opts.kkt_tol > 0.0 && opts.c0 > 0.0 && opts.c_growth >= 1.0 && opts.max_outer > 0 && opts.max_inner > 0) {
        return Err(AlmError::InvalidOptions(format!("{opts:?}")));
    }
    problem.check_point(start)?;
    if let Some(bounds) = &problem.bounds {
        for (i, (&zi, &(lo, hi))) in start.iter().zip(bounds).enumerate() {
            if !(lo <= zi && zi <= hi) {
                return Err(AlmError::InvalidStart(i));
            }
        }
    }

    let mut z = start.to_vec();
    let mut lambda = vec![0.0; problem.eq_constraints.len()];
    let mut mu = vec![0.0; problem.n_ineq_total()];
    let mut c = opts.c0;
    let mut prev_feas = f64::INFINITY;
    let mut inner_total = 0;
    let mut fallbacks = 0;
    let mut iterations = 0;
    let mut kkt = KktResiduals {
        stationarity: f64::INFINITY,
        feasibility: f64::INFINITY,
        complementarity: f64::INFINITY,
    };
    let mut c_used = c;

    for outer in 1..=opts.max_outer {
        iterations = outer;
        let inner = inner_minimize(problem, &mut z, &lambda, &mu, c, opts)?;
        inner_total += inner.iterations;
        fallbacks += inner.fallbacks;

        let pt = problem.evaluate(&z)?;
        for (l, a) in lambda.iter_mut().zip(&pt.eq) {
            *l += c * a.value;
        }
        for (m, b) in mu.iter_mut().zip(&pt.ineq) {
            *m = (*m + c * b.value).max(0.0);
        }
        kkt = kkt_from_point(&pt, problem.dim, &lambda, &mu);
        c_used = c;
        if kkt.stationarity <= opts.kkt_tol
            && kkt.feasibility <= opts.kkt_tol
            && kkt.complementarity <= opts.kkt_tol
        {
            break;
        }
        if kkt.feasibility > 0.25 * prev_feas {
            c = (c * opts.c_growth).min(C_MAX);
        }
        prev_feas = kkt.feasibility;
    }

    let pt = problem.evaluate(&z)?;
    let phi_star = pt.ineq.iter().map(|b| (-b.value).max(0.0).sqrt()).collect();
    let converged =
        kkt.stationarity <= opts.kkt_tol && kkt.feasibility <= opts.kkt_tol && kkt.complementarity <= opts.kkt_tol;
    Ok(SolveReport {
        z_star: z,
        lambda_star: lambda,
        mu_star: mu,
        phi_star,
        objective: pt.f.value,
        kkt_stationarity: kkt.stationarity,
        kkt_feasibility: kkt.feasibility,
        kkt_complementarity: kkt.complementarity,
        iterations,
        inner_iterations: inner_total,
        gradient_fallbacks: fallbacks,
        converged,
        c_final: c_used,
    })
}

/// Determinants of the `k x k` upper-left blocks, `k = 1..n`, each by LU
/// with partial pivoting.
pub fn leading_minors(matrix: &DMatrix<f64>) -> Result<Vec<f64>, AlmError> {
    if !matrix.is_square() {
        return Err(AlmError::DimensionMismatch(format!(
            "{}x{} matrix is not square",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    Ok((1..=matrix.nrows())
        .map(|k| matrix.view((0, 0), (k, k)).into_owned().lu().determinant())
        .collect())
}
