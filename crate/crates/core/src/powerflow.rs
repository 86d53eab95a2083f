//! Backward/forward sweep solution of the branch flow equations on a radial
//! feeder.
//!
//! For every line `(i, j)`:
//!
//! ```text
//! P_ij - r l_ij - p_Lj + p_Dj = sum_k P_jk
//! Q_ij - x l_ij - q_Lj + q_Dj = sum_k Q_jk
//! v_j  = v_i - 2 (r P_ij + x Q_ij) + (r^2 + x^2) l_ij
//! v_i l_ij = P_ij^2 + Q_ij^2
//! ```
//!
//! Lines are keyed by their receiving bus. The root voltage is fixed at the
//! root's initial value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BusId, FeederModel};

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("sweep did not converge after {iterations} iterations (last change {last_change:e}, residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        residual: f64,
    },
    #[error("voltage collapse at bus {0}")]
    VoltageCollapse(BusId),
    #[error("dispatch for bus {bus}: {reason}")]
    InvalidDispatch { bus: BusId, reason: String },
    #[error("solution is missing entries for bus {0}")]
    Incomplete(BusId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_sq: BTreeMap<BusId, f64>,
    /// Sending-end `(P, Q)` of the line feeding each non-root bus.
    pub flows: BTreeMap<BusId, (f64, f64)>,
    pub l: BTreeMap<BusId, f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Reactive dispatch for every DER bus; missing entries dispatch zero.
pub type Dispatch = BTreeMap<BusId, f64>;

fn check_dispatch(model: &FeederModel, q: &Dispatch) -> Result<(), PowerFlowError> {
    for (&bus, &qd) in q {
        let b = model.bus(bus).map_err(|_| PowerFlowError::InvalidDispatch {
            bus,
            reason: "unknown bus".into(),
        })?;
        let der = b.der.ok_or_else(|| PowerFlowError::InvalidDispatch {
            bus,
            reason: "bus has no DER".into(),
        })?;
        let cap = der.q_headroom();
        if !qd.is_finite() || qd.abs() > cap + 1e-9 {
            return Err(PowerFlowError::InvalidDispatch {
                bus,
                reason: format!("q = {qd} outside [-{cap}, {cap}]"),
            });
        }
    }
    Ok(())
}

pub fn sweep_solve(
    model: &FeederModel,
    q_dispatch: &Dispatch,
    opts: &SweepOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    check_dispatch(model, q_dispatch)?;
    match sweep_with_damping(model, q_dispatch, opts, 1.0) {
        Err(PowerFlowError::NonConvergence { .. }) => sweep_with_damping(model, q_dispatch, opts, 0.5),
        other => other,
    }
}

fn sweep_with_damping(
    model: &FeederModel,
    q_dispatch: &Dispatch,
    opts: &SweepOptions,
    damping: f64,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let order = model.bfs_order();
    let root = model.root();
    let v_root = model.bus(root).expect("root exists").v_squared_init();

    let mut v: BTreeMap<BusId, f64> = order.iter().map(|&b| (b, v_root)).collect();
    let mut l: BTreeMap<BusId, f64> = BTreeMap::new();
    let mut flows: BTreeMap<BusId, (f64, f64)> = BTreeMap::new();
    for &b in &order[1..] {
        l.insert(b, 0.0);
        flows.insert(b, (0.0, 0.0));
    }

    let mut last_change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mut change: f64 = 0.0;

        // backward: leaves first
        for &j in order[1..].iter().rev() {
            let bus = model.bus(j).expect("bus in order");
            let line = model.line_into(j).expect("bus in order").expect("non-root");
            let (mut p, mut q) = (bus.p_load - bus.p_der(), bus.q_load - q_dispatch.get(&j).copied().unwrap_or(0.0));
            for &k in model.children_of(j).expect("bus in order") {
                let (pk, qk) = flows[&k];
                p += pk;
                q += qk;
            }
            let lj = l[&j];
            p += line.r * lj;
            q += line.x * lj;
            let old = flows.insert(j, (p, q)).expect("initialized");
            change = change.max((old.0 - p).abs()).max((old.1 - q).abs());
        }

        // forward: root first
        for &j in &order[1..] {
            let line = model.line_into(j).expect("bus in order").expect("non-root");
            let vi = v[&line.from_bus];
            let (p, q) = flows[&j];
            let vj = vi - 2.0 * (line.r * p + line.x * q) + line.z_sq() * l[&j];
            if !(vj > 0.0) {
                return Err(PowerFlowError::VoltageCollapse(j));
            }
            let old = v.insert(j, vj).expect("initialized");
            change = change.max((old - vj).abs());
        }

        for &j in &order[1..] {
            let line = model.line_into(j).expect("bus in order").expect("non-root");
            let (p, q) = flows[&j];
            let target = (p * p + q * q) / v[&line.from_bus];
            let old = l[&j];
            let new = old + damping * (target - old);
            change = change.max((new - old).abs());
            l.insert(j, new);
        }

        if !change.is_finite() {
            break;
        }
        last_change = change;
        if change < opts.tol {
            let mut sol = PowerFlowSolution {
                v_sq: v,
                flows,
                l,
                residual: 0.0,
                iterations: it,
            };
            sol.residual = residual_of(model, &sol, q_dispatch)?;
            return Ok(sol);
        }
    }

    let sol = PowerFlowSolution {
        v_sq: v,
        flows,
        l,
        residual: 0.0,
        iterations: opts.max_iter,
    };
    let residual = residual_of(model, &sol, q_dispatch).unwrap_or(f64::INFINITY);
    Err(PowerFlowError::NonConvergence {
        iterations: opts.max_iter,
        last_change,
        residual,
    })
}

/// Maximum absolute violation over all four branch-flow equation families.
pub fn residual_of(
    model: &FeederModel,
    sol: &PowerFlowSolution,
    q_dispatch: &Dispatch,
) -> Result<f64, PowerFlowError> {
    let mut worst: f64 = 0.0;
    for bus in model.non_root_buses() {
        let j = bus.id;
        let line = model.line_into(j).expect("known bus").expect("non-root");
        let i = line.from_bus;
        let missing = || PowerFlowError::Incomplete(j);
        let (p, q) = *sol.flows.get(&j).ok_or_else(missing)?;
        let l = *sol.l.get(&j).ok_or_else(missing)?;
        let vj = *sol.v_sq.get(&j).ok_or_else(missing)?;
        let vi = *sol.v_sq.get(&i).ok_or(PowerFlowError::Incomplete(i))?;
        let (mut pk, mut qk) = (0.0, 0.0);
        for &k in model.children_of(j).expect("known bus") {
            let (a, b) = *sol.flows.get(&k).ok_or(PowerFlowError::Incomplete(k))?;
            pk += a;
            qk += b;
        }
        let qd = q_dispatch.get(&j).copied().unwrap_or(0.0);
        let active = p - line.r * l - bus.p_load + bus.p_der() - pk;
        let reactive = q - line.x * l - bus.q_load + qd - qk;
        let drop = vj - (vi - 2.0 * (line.r * p + line.x * q) + line.z_sq() * l);
        let current = vi * l - (p * p + q * q);
        for e in [active, reactive, drop, current] {
            worst = worst.max(e.abs());
        }
    }
    Ok(worst)
}

/// Total line loss `sum r_ij l_ij`.
pub fn total_loss(model: &FeederModel, l: &BTreeMap<BusId, f64>) -> f64 {
    model
        .lines()
        .iter()
        .map(|line| line.r * l.get(&line.to_bus).copied().unwrap_or(0.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_line_feeder, parse_feeder, GeneratorConfig};

    fn two_bus(p: f64, q: f64, v_root: f64) -> FeederModel {
        parse_feeder(&format!(
            r#"{{"header": {{"base_kva": 1000, "base_kv": 4.16}},
            "buses": [{{"id": 1, "p_load": 0, "q_load": 0, "v_init": {v_root}}},
                      {{"id": 2, "parent": 1, "p_load": {p}, "q_load": {q}}}],
            "lines": [{{"from": 1, "to": 2, "r": 0.01, "x": 0.02, "i_rated": 2}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn no_flow_identity() {
        let m = two_bus(0.0, 0.0, 1.0);
        let s = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert_eq!(s.flows[&2], (0.0, 0.0));
        assert_eq!(s.l[&2], 0.0);
        assert_eq!(s.v_sq[&2], s.v_sq[&1]);
        assert_eq!(s.residual, 0.0);
    }

    // Reference from a plain scalar fixed point run to machine precision:
    //   l = ((0.5 + 0.01 l)^2 + (0.2 + 0.02 l)^2) / 1.0
    #[test]
    fn two_bus_loaded() {
        let mut l: f64 = 0.0;
        for _ in 0..200 {
            l = (0.5 + 0.01 * l).powi(2) + (0.2 + 0.02 * l).powi(2);
        }
        let (p_ref, q_ref) = (0.5 + 0.01 * l, 0.2 + 0.02 * l);
        let v_ref = 1.0 - 2.0 * (0.01 * p_ref + 0.02 * q_ref) + 0.0005 * l;

        let m = two_bus(0.5, 0.2, 1.0);
        let s = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert!((s.l[&2] - 0.2953).abs() < 1e-3);
        assert!((s.flows[&2].0 - 0.5030).abs() < 1e-3);
        assert!((s.flows[&2].1 - 0.2059).abs() < 1e-3);
        assert!((s.v_sq[&2] - 0.9819).abs() < 1e-3);
        assert!((s.l[&2] - l).abs() < 1e-9);
        assert!((s.v_sq[&2] - v_ref).abs() < 1e-9);
        assert!(s.residual < 1e-8);
    }

    #[test]
    fn residual_detects_perturbation() {
        let m = generate_line_feeder(5, &GeneratorConfig::default()).unwrap();
        let mut s = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert!(residual_of(&m, &s, &Dispatch::new()).unwrap() < 1e-8);
        *s.v_sq.get_mut(&3).unwrap() += 1e-3;
        assert!(residual_of(&m, &s, &Dispatch::new()).unwrap() >= 1e-3 * 0.99);
    }

    #[test]
    fn zero_flows_residual_is_max_load() {
        let cfg = GeneratorConfig { der_density: 0.0, ..Default::default() };
        let m = generate_line_feeder(4, &cfg).unwrap();
        let sol = PowerFlowSolution {
            v_sq: m.buses().iter().map(|b| (b.id, 1.0)).collect(),
            flows: m.non_root_buses().map(|b| (b.id, (0.0, 0.0))).collect(),
            l: m.non_root_buses().map(|b| (b.id, 0.0)).collect(),
            residual: 0.0,
            iterations: 0,
        };
        let r = residual_of(&m, &sol, &Dispatch::new()).unwrap();
        assert!((r - 0.1).abs() < 1e-15);
    }

    #[test]
    fn missing_entries_reported() {
        let m = two_bus(0.1, 0.0, 1.0);
        let mut s = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        s.l.remove(&2);
        assert_eq!(residual_of(&m, &s, &Dispatch::new()), Err(PowerFlowError::Incomplete(2)));
    }

    #[test]
    fn dispatch_outside_box_rejected() {
        let m = generate_line_feeder(3, &GeneratorConfig::default()).unwrap();
        let bad = Dispatch::from([(2, 5.0)]);
        assert!(matches!(
            sweep_solve(&m, &bad, &SweepOptions::default()),
            Err(PowerFlowError::InvalidDispatch { bus: 2, .. })
        ));
    }

    #[test]
    fn collapse_reported() {
        let m = two_bus(40.0, 20.0, 1.0);
        let err = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap_err();
        assert!(
            matches!(err, PowerFlowError::VoltageCollapse(2) | PowerFlowError::NonConvergence { .. }),
            "{err}"
        );
    }
}
