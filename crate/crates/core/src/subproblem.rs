//! The per-node optimal power flow solved by every controllable bus each
//! round.
//!
//! Node `j` with parent `i` treats the upstream network as a fixed voltage
//! `v_i` (last round's value) and its children as fixed loads (last round's
//! flows). Local variables are `z = [P_ij, Q_ij, v_j, l_ij, q_Dj]`:
//!
//! ```text
//! A1 = P - r l - p_L + p_D - sum P_jk           = 0
//! A2 = Q - x l - q_L + q_D - sum Q_jk           = 0
//! A3 = v - v_i + 2 (r P + x Q) - (r^2 + x^2) l  = 0
//! A4 = P^2 + Q^2 - v_i l                        = 0
//! B1 = v_min^2 - v <= 0        B2 = v - v_max^2 <= 0
//! B3 = -qbar - q_D <= 0        B4 = q_D - qbar  <= 0
//! B5 = l - I_rated^2 <= 0
//! ```
//!
//! with `qbar = sqrt(S^2 - p_D^2)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::almcore::{alm_solve, AlmError, AlmOptions, Eval, NlpProblem, SmoothFn, SolveReport};
use crate::network::{Bus, BusId, Line};

pub const IDX_P: usize = 0;
pub const IDX_Q: usize = 1;
pub const IDX_V: usize = 2;
pub const IDX_L: usize = 3;
pub const IDX_QD: usize = 4;

/// Index of the current equation `A4` among the equalities.
pub const EQ_CURRENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeState {
    pub p_flow: f64,
    pub q_flow: f64,
    pub v_sq: f64,
    pub l_sq: f64,
    pub q_der: f64,
}

impl NodeState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.p_flow, self.q_flow, self.v_sq, self.l_sq, self.q_der]
    }

    pub fn from_slice(z: &[f64]) -> NodeState {
        NodeState {
            p_flow: z[IDX_P],
            q_flow: z[IDX_Q],
            v_sq: z[IDX_V],
            l_sq: z[IDX_L],
            q_der: z[IDX_QD],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Line loss `r l`.
    Loss,
    /// `(v - v_ref_sq)^2` in squared-voltage units.
    VoltageDeviation { v_ref_sq: f64 },
}

impl ObjectiveKind {
    pub fn value(&self, line: &Line, s: &NodeState) -> f64 {
        match *self {
            ObjectiveKind::Loss => line.r * s.l_sq,
            ObjectiveKind::VoltageDeviation { v_ref_sq } => (s.v_sq - v_ref_sq).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemContext {
    pub v_parent_prev: f64,
    pub child_p_sum: f64,
    pub child_q_sum: f64,
    pub line: Line,
    pub bus: Bus,
    pub v_min_sq: f64,
    pub v_max_sq: f64,
    pub objective: ObjectiveKind,
}

impl SubproblemContext {
    /// Reactive capability half-width; zero without a DER.
    pub fn q_headroom(&self) -> f64 {
        self.bus.der.map_or(0.0, |d| d.q_headroom())
    }

    pub fn bus_id(&self) -> BusId {
        self.bus.id
    }

    fn validate(&self) -> Result<(), SubproblemError> {
        if self.bus.der.is_none() {
            return Err(SubproblemError::NoDer(self.bus.id));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<(), SubproblemError> {
        if self.v_min_sq > self.v_max_sq {
            return Err(SubproblemError::InfeasibleBox);
        }
        if !(self.v_parent_prev > 0.0) || !self.child_p_sum.is_finite() || !self.child_q_sum.is_finite() {
            return Err(SubproblemError::InvalidInput(format!(
                "bus {}: v_parent_prev {} child sums ({}, {})",
                self.bus.id, self.v_parent_prev, self.child_p_sum, self.child_q_sum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubproblemError {
    #[error("bus {0} has no DER")]
    NoDer(BusId),
    #[error("voltage box is empty")]
    InfeasibleBox,
    #[error("invalid context: {0}")]
    InvalidInput(String),
    #[error("solver error: {0}")]
    Alm(#[from] AlmError),
    #[error("local solve at bus {bus} did not converge (feasibility {feas:e}, stationarity {stat:e})")]
    NotConverged {
        bus: BusId,
        feas: f64,
        stat: f64,
        report: Box<SolveReport>,
    },
    #[error("no feasible sample for bus {0}")]
    NoFeasibleSample(BusId),
    #[error("grid must have at least 2 points")]
    InvalidGrid,
    #[error("c and d_j must be positive")]
    NonPositiveParameter,
}

/// The local problem (P1) in standard form.
pub fn build_p1(ctx: &SubproblemContext) -> Result<NlpProblem, SubproblemError> {
    ctx.validate()?;
    let (r, x) = (ctx.line.r, ctx.line.x);
    let z_sq = ctx.line.z_sq();
    let v_i = ctx.v_parent_prev;
    let p_net = ctx.bus.p_load - ctx.bus.p_der() + ctx.child_p_sum;
    let q_net = ctx.bus.q_load + ctx.child_q_sum;
    let qbar = ctx.q_headroom();
    let (v_lo, v_hi) = (ctx.v_min_sq, ctx.v_max_sq);
    let l_max = ctx.line.i_rated * ctx.line.i_rated;

    let objective: SmoothFn = match ctx.objective {
        ObjectiveKind::Loss => Box::new(move |z: &[f64]| Eval::linear(z, 0.0, &[(IDX_L, r)])),
        ObjectiveKind::VoltageDeviation { v_ref_sq } => Box::new(move |z: &[f64]| {
            let d = z[IDX_V] - v_ref_sq;
            Eval {
                value: d * d,
                grad: vec![(IDX_V, 2.0 * d)],
                hess: vec![(IDX_V, IDX_V, 2.0)],
            }
        }),
    };

    let eq: Vec<SmoothFn> = vec![
        Box::new(move |z: &[f64]| Eval::linear(z, -p_net, &[(IDX_P, 1.0), (IDX_L, -r)])),
        Box::new(move |z: &[f64]| Eval::linear(z, -q_net, &[(IDX_Q, 1.0), (IDX_L, -x), (IDX_QD, 1.0)])),
        Box::new(move |z: &[f64]| {
            Eval::linear(z, -v_i, &[(IDX_V, 1.0), (IDX_P, 2.0 * r), (IDX_Q, 2.0 * x), (IDX_L, -z_sq)])
        }),
        Box::new(move |z: &[f64]| Eval {
            value: z[IDX_P] * z[IDX_P] + z[IDX_Q] * z[IDX_Q] - v_i * z[IDX_L],
            grad: vec![(IDX_P, 2.0 * z[IDX_P]), (IDX_Q, 2.0 * z[IDX_Q]), (IDX_L, -v_i)],
            hess: vec![(IDX_P, IDX_P, 2.0), (IDX_Q, IDX_Q, 2.0)],
        }),
    ];

    let ineq: Vec<SmoothFn> = vec![
        Box::new(move |z: &[f64]| Eval::linear(z, v_lo, &[(IDX_V, -1.0)])),
        Box::new(move |z: &[f64]| Eval::linear(z, -v_hi, &[(IDX_V, 1.0)])),
        Box::new(move |z: &[f64]| Eval::linear(z, -qbar, &[(IDX_QD, -1.0)])),
        Box::new(move |z: &[f64]| Eval::linear(z, -qbar, &[(IDX_QD, 1.0)])),
        Box::new(move |z: &[f64]| Eval::linear(z, -l_max, &[(IDX_L, 1.0)])),
    ];

    Ok(NlpProblem {
        dim: 5,
        objective,
        eq_constraints: eq,
        ineq_constraints: ineq,
        bounds: None,
    })
}

pub fn solve_node(
    ctx: &SubproblemContext,
    warm_start: &NodeState,
    opts: &AlmOptions,
) -> Result<(NodeState, SolveReport), SubproblemError> {
    let problem = build_p1(ctx)?;
    let report = alm_solve(&problem, &warm_start.to_vec(), opts)?;
    if !report.converged {
        return Err(SubproblemError::NotConverged {
            bus: ctx.bus.id,
            feas: report.kkt_feasibility,
            stat: report.kkt_stationarity,
            report: Box::new(report),
        });
    }
    let mut state = NodeState::from_slice(&report.z_star);
    let qbar = ctx.q_headroom();
    state.q_der = state.q_der.clamp(-qbar, qbar);
    Ok((state, report))
}

/// Fixed point of the flow, voltage and current equations for a given
/// reactive injection. Damped (0.5) iteration on `l`; `None` when it does not
/// settle to 1e-12 within 500 steps.
pub fn resolve_state(ctx: &SubproblemContext, q_der: f64) -> Option<NodeState> {
    let (r, x) = (ctx.line.r, ctx.line.x);
    let v_i = ctx.v_parent_prev;
    let p0 = ctx.bus.p_load - ctx.bus.p_der() + ctx.child_p_sum;
    let q0 = ctx.bus.q_load - q_der + ctx.child_q_sum;
    let mut l = 0.0_f64;
    for _ in 0..500 {
        let (p, q) = (p0 + r * l, q0 + x * l);
        let target = (p * p + q * q) / v_i;
        let next = l + 0.5 * (target - l);
        if !next.is_finite() || next > 1e12 {
            return None;
        }
        let done = (next - l).abs() < 1e-12;
        l = next;
        if done {
            let (p, q) = (p0 + r * l, q0 + x * l);
            let v = v_i - 2.0 * (r * p + x * q) + ctx.line.z_sq() * l;
            return Some(NodeState {
                p_flow: p,
                q_flow: q,
                v_sq: v,
                l_sq: l,
                q_der,
            });
        }
    }
    None
}

/// State of a bus without a DER: the flow equations with `q_D = 0`.
pub fn pass_through(ctx: &SubproblemContext) -> Result<NodeState, SubproblemError> {
    ctx.validate_common()?;
    resolve_state(ctx, 0.0).ok_or(SubproblemError::NoFeasibleSample(ctx.bus.id))
}

/// Grid search over the reactive capability interval. Independent of the
/// multiplier solver; used as its oracle.
pub fn brute_force_qd(ctx: &SubproblemContext, grid: usize) -> Result<(f64, NodeState), SubproblemError> {
    if grid < 2 {
        return Err(SubproblemError::InvalidGrid);
    }
    ctx.validate()?;
    let qbar = ctx.q_headroom();
    let samples = if qbar == 0.0 { 1 } else { grid };
    let l_max = ctx.line.i_rated * ctx.line.i_rated;
    let mut best: Option<(f64, f64, NodeState)> = None;
    for k in 0..samples {
        let q = if samples == 1 {
            0.0
        } else {
            -qbar + 2.0 * qbar * (k as f64) / ((samples - 1) as f64)
        };
        let Some(s) = resolve_state(ctx, q) else { continue };
        if s.v_sq < ctx.v_min_sq || s.v_sq > ctx.v_max_sq || s.l_sq > l_max {
            continue;
        }
        let f = ctx.objective.value(&ctx.line, &s);
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, q, s));
        }
    }
    best.map(|(_, q, s)| (q, s))
        .ok_or(SubproblemError::NoFeasibleSample(ctx.bus.id))
}

/// The scaled local Hessian `M'` (so that the Hessian of the augmented
/// Lagrangian is `c M'`), entry by entry. `d_j` is the multiplier of the
/// current equation.
pub fn build_m_prime(
    z: &NodeState,
    v_parent_prev: f64,
    line: &Line,
    d_j: f64,
    c: f64,
) -> Result<DMatrix<f64>, SubproblemError> {
    if !(c > 0.0 && d_j > 0.0) {
        return Err(SubproblemError::NonPositiveParameter);
    }
    let (r, x) = (line.r, line.x);
    let (p, q) = (z.p_flow, z.q_flow);
    let vi = v_parent_prev;
    let zz = r * r + x * x;
    let dc = 2.0 * d_j / c;
    let a14 = -r - 2.0 * r * zz - 2.0 * p * vi;
    let a24 = -x - 2.0 * x * zz - 2.0 * q * vi;
    #[rustfmt::skip]
    let rows = [
        4.0*r*r + 4.0*p*p + 1.0 + dc, 4.0*r*x + 4.0*p*q,             2.0*r, a14,                    0.0,
        4.0*r*x + 4.0*p*q,            4.0*x*x + 4.0*q*q + 1.0 + dc,  2.0*x, a24,                    1.0,
        2.0*r,                        2.0*x,                         1.0,   -zz,                    0.0,
        a14,                          a24,                           -zz,   zz + zz*zz + vi*vi,     -x,
        0.0,                          1.0,                           0.0,   -x,                     1.0,
    ];
    Ok(DMatrix::from_row_slice(5, 5, &rows))
}

/// `v_i - 4 P r - 4 Q x`
pub fn hessian_condition_value(z: &NodeState, v_parent_prev: f64, line: &Line) -> f64 {
    v_parent_prev - 4.0 * z.p_flow * line.r - 4.0 * z.q_flow * line.x
}

/// Largest violation of the local equalities and inequalities at `z`.
pub fn max_violation(ctx: &SubproblemContext, z: &NodeState) -> Result<f64, SubproblemError> {
    let problem = build_p1(ctx)?;
    let v = z.to_vec();
    let eq = problem.eq_constraints.iter().map(|a| a(&v).value.abs());
    let ineq = problem.ineq_constraints.iter().map(|b| b(&v).value.max(0.0));
    Ok(eq.chain(ineq).fold(0.0, f64::max))
}
