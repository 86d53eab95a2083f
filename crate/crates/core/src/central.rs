//! Whole-network optimal power flow, solved in one problem.
//!
//! The current equation uses the parent's voltage from the same solution,
//! so this is the exact branch flow model rather than the lagged local one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::almcore::{alm_solve, AlmError, AlmOptions, Eval, NlpProblem, SmoothFn, SolveReport};
use crate::coordinator::Objective;
use crate::network::{BusId, FeederModel};
use crate::powerflow::{sweep_solve, Dispatch, PowerFlowError, SweepOptions};

pub const DEFAULT_VARIABLE_CAP: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralOptions {
    pub alm: AlmOptions,
    pub variable_cap: usize,
}

impl Default for CentralOptions {
    fn default() -> Self {
        CentralOptions {
            alm: AlmOptions {
                max_outer: 40,
                max_inner: 100,
                ..AlmOptions::default()
            },
            variable_cap: DEFAULT_VARIABLE_CAP,
        }
    }
}

#[derive(Debug, Error)]
pub enum CentralError {
    #[error("{vars} variables exceed the cap of {cap}")]
    TooLarge { vars: usize, cap: usize },
    #[error("start point: {0}")]
    Start(#[from] PowerFlowError),
    #[error(transparent)]
    Alm(#[from] AlmError),
    #[error("solver did not converge (feasibility {feas:e}, stationarity {stat:e})")]
    NotConverged { feas: f64, stat: f64, report: Box<SolveReport> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralSolution {
    pub dispatch: Dispatch,
    /// Every bus, root included.
    pub v_sq: BTreeMap<BusId, f64>,
    pub flows: BTreeMap<BusId, (f64, f64)>,
    pub l: BTreeMap<BusId, f64>,
    pub objective: f64,
    pub report: SolveReport,
}

/// Variable layout: `(P, Q, v, l)` per non-root bus in breadth-first order,
/// then one `q_D` per DER bus.
#[derive(Debug, Clone)]
pub struct Layout {
    pub base: BTreeMap<BusId, usize>,
    pub qd: BTreeMap<BusId, usize>,
    pub dim: usize,
}

impl Layout {
    pub fn new(model: &FeederModel) -> Layout {
        let mut base = BTreeMap::new();
        let mut next = 0;
        for &b in model.bfs_order() {
            if b != model.root() {
                base.insert(b, next);
                next += 4;
            }
        }
        let mut qd = BTreeMap::new();
        for b in model.der_buses() {
            qd.insert(b, next);
            next += 1;
        }
        Layout { base, qd, dim: next }
    }
}

/// The whole-network problem with the given objective.
pub fn build_central(model: &FeederModel, objective: Objective) -> NlpProblem {
    let lay = Layout::new(model);
    let root = model.root();
    let v_root = model.bus(root).expect("root").v_squared_init();
    let v_ref = model.v_ref_sq();
    let (v_lo, v_hi) = (model.v_min_sq(), model.v_max_sq());

    let mut obj_terms: Vec<(usize, f64)> = Vec::new();
    let mut eq: Vec<SmoothFn> = Vec::new();
    let mut ineq: Vec<SmoothFn> = Vec::new();
    let mut v_idx: Vec<usize> = Vec::new();

    for bus in model.non_root_buses() {
        let j = bus.id;
        let b = lay.base[&j];
        let (ip, iq, iv, il) = (b, b + 1, b + 2, b + 3);
        let line = *model.line_into(j).expect("known").expect("non-root");
        let (r, x, zz) = (line.r, line.x, line.z_sq());
        let parent_v = bus.parent.and_then(|p| lay.base.get(&p)).map(|pb| pb + 2);
        let children = model.children_of(j).expect("known");

        let mut p_terms = vec![(ip, 1.0), (il, -r)];
        let mut q_terms = vec![(iq, 1.0), (il, -x)];
        for c in children {
            p_terms.push((lay.base[c], -1.0));
            q_terms.push((lay.base[c] + 1, -1.0));
        }
        if let Some(&k) = lay.qd.get(&j) {
            q_terms.push((k, 1.0));
        }
        let p_off = -bus.p_load + bus.p_der();
        let q_off = -bus.q_load;
        eq.push(Box::new(move |z: &[f64]| Eval::linear(z, p_off, &p_terms)));
        eq.push(Box::new(move |z: &[f64]| Eval::linear(z, q_off, &q_terms)));

        match parent_v {
            Some(pv) => {
                eq.push(Box::new(move |z: &[f64]| {
                    Eval::linear(z, 0.0, &[(iv, 1.0), (pv, -1.0), (ip, 2.0 * r), (iq, 2.0 * x), (il, -zz)])
                }));
                eq.push(Box::new(move |z: &[f64]| Eval {
                    value: z[ip] * z[ip] + z[iq] * z[iq] - z[pv] * z[il],
                    grad: vec![(ip, 2.0 * z[ip]), (iq, 2.0 * z[iq]), (pv, -z[il]), (il, -z[pv])],
                    hess: vec![(ip, ip, 2.0), (iq, iq, 2.0), (pv.max(il), pv.min(il), -1.0)],
                }));
            }
            None => {
                eq.push(Box::new(move |z: &[f64]| {
                    Eval::linear(z, -v_root, &[(iv, 1.0), (ip, 2.0 * r), (iq, 2.0 * x), (il, -zz)])
                }));
                eq.push(Box::new(move |z: &[f64]| Eval {
                    value: z[ip] * z[ip] + z[iq] * z[iq] - v_root * z[il],
                    grad: vec![(ip, 2.0 * z[ip]), (iq, 2.0 * z[iq]), (il, -v_root)],
                    hess: vec![(ip, ip, 2.0), (iq, iq, 2.0)],
                }));
            }
        }

        let l_max = line.i_rated * line.i_rated;
        ineq.push(Box::new(move |z: &[f64]| Eval::linear(z, v_lo, &[(iv, -1.0)])));
        ineq.push(Box::new(move |z: &[f64]| Eval::linear(z, -v_hi, &[(iv, 1.0)])));
        ineq.push(Box::new(move |z: &[f64]| Eval::linear(z, -l_max, &[(il, 1.0)])));
        if let Some(&k) = lay.qd.get(&j) {
            let qbar = bus.der.as_ref().expect("der bus").q_headroom();
            ineq.push(Box::new(move |z: &[f64]| Eval::linear(z, -qbar, &[(k, -1.0)])));
            ineq.push(Box::new(move |z: &[f64]| Eval::linear(z, -qbar, &[(k, 1.0)])));
        }

        obj_terms.push((il, r));
        v_idx.push(iv);
    }

    let objective_fn: SmoothFn = match objective {
        Objective::Loss => Box::new(move |z: &[f64]| Eval::linear(z, 0.0, &obj_terms)),
        Objective::VoltageDeviation => Box::new(move |z: &[f64]| {
            let mut e = Eval::default();
            for &i in &v_idx {
                let d = z[i] - v_ref;
                e.value += d * d;
                e.grad.push((i, 2.0 * d));
                e.hess.push((i, i, 2.0));
            }
            e
        }),
    };

    NlpProblem {
        dim: lay.dim,
        objective: objective_fn,
        eq_constraints: eq,
        ineq_constraints: ineq,
        bounds: None,
    }
}

pub fn solve_central(model: &FeederModel, objective: Objective, opts: &CentralOptions) -> Result<CentralSolution, CentralError> {
    let lay = Layout::new(model);
    if lay.dim > opts.variable_cap {
        return Err(CentralError::TooLarge { vars: lay.dim, cap: opts.variable_cap });
    }
    let sweep = sweep_solve(model, &Dispatch::new(), &SweepOptions::default())?;
    let mut start = vec![0.0; lay.dim];
    for (&b, &i) in &lay.base {
        let (p, q) = sweep.flows[&b];
        start[i] = p;
        start[i + 1] = q;
        start[i + 2] = sweep.v_sq[&b];
        start[i + 3] = sweep.l[&b];
    }

    let problem = build_central(model, objective);
    let report = alm_solve(&problem, &start, &opts.alm)?;
    if !report.converged {
        return Err(CentralError::NotConverged {
            feas: report.kkt_feasibility,
            stat: report.kkt_stationarity,
            report: Box::new(report),
        });
    }

    let z = &report.z_star;
    let mut v_sq = BTreeMap::new();
    v_sq.insert(model.root(), model.bus(model.root()).expect("root").v_squared_init());
    let mut flows = BTreeMap::new();
    let mut l = BTreeMap::new();
    for (&b, &i) in &lay.base {
        flows.insert(b, (z[i], z[i + 1]));
        v_sq.insert(b, z[i + 2]);
        l.insert(b, z[i + 3]);
    }
    let dispatch = lay
        .qd
        .iter()
        .map(|(&b, &k)| {
            let qbar = model.bus(b).expect("known").der.as_ref().expect("der").q_headroom();
            (b, z[k].clamp(-qbar, qbar))
        })
        .collect();
    Ok(CentralSolution {
        dispatch,
        v_sq,
        flows,
        l,
        objective: report.objective,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_line_feeder, GeneratorConfig};
    use crate::powerflow::total_loss;

    #[test]
    fn no_freedom_matches_sweep() {
        let cfg = GeneratorConfig { der_density: 0.0, ..Default::default() };
        let m = generate_line_feeder(2, &cfg).unwrap();
        let c = solve_central(&m, Objective::Loss, &CentralOptions::default()).unwrap();
        let s = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert!((c.objective - total_loss(&m, &s.l)).abs() < 1e-9);
        assert!((c.v_sq[&2] - s.v_sq[&2]).abs() < 1e-8);
    }

    #[test]
    fn central_solution_is_flow_feasible() {
        let m = generate_line_feeder(6, &GeneratorConfig::default()).unwrap();
        let c = solve_central(&m, Objective::Loss, &CentralOptions::default()).unwrap();
        let s = sweep_solve(&m, &c.dispatch, &SweepOptions::default()).unwrap();
        for (b, v) in &c.v_sq {
            assert!((v - s.v_sq[b]).abs() < 1e-4, "bus {b}");
        }
        let base = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert!(c.objective <= total_loss(&m, &base.l) + 1e-9);
    }

    #[test]
    fn variable_cap() {
        let m = generate_line_feeder(6, &GeneratorConfig::default()).unwrap();
        let opts = CentralOptions { variable_cap: 5, ..Default::default() };
        assert!(matches!(solve_central(&m, Objective::Loss, &opts), Err(CentralError::TooLarge { .. })));
    }
}
