//! Sufficient convergence conditions evaluated on recorded rounds.
//!
//! Every evaluator is pure and reports a signed margin. A failed condition
//! means "not certified"; it says nothing about divergence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::almcore::leading_minors;
use crate::coordinator::RoundTrace;
use crate::network::{BusId, FeederModel, Line};
use crate::subproblem::{build_m_prime, hessian_condition_value, NodeState};

pub const THEOREM1: &str = "single_step_margin";
pub const DELTA_EQUALS_ONE: &str = "delta_equals_one";
pub const DELTA_BRACKET: &str = "delta_bracket";
pub const HESSIAN_MINORS: &str = "hessian_leading_minors";

/// Names of the twelve three-node conditions, in printed order.
pub const THREE_NODE_NAMES: [&str; 12] = [
    "x_minus_r",
    "vv_next_flow",
    "vv_flow",
    "v_next_plus_now_r",
    "v_next_r_now_rx",
    "v_now_rx",
    "v_single_r",
    "vv_child_now_rx",
    "v_child_cubic",
    "v_8pr",
    "v_8qx",
    "v_8child_r",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub holds: bool,
    pub margin: f64,
    /// `true` for `> 0`, `false` for `>= 0`.
    pub strict: bool,
    pub inputs: BTreeMap<String, f64>,
}

impl ConditionResult {
    fn new(name: &str, margin: f64, strict: bool, inputs: &[(&str, f64)]) -> Self {
        let holds = if strict { margin > 0.0 } else { margin >= 0.0 };
        ConditionResult {
            name: name.to_string(),
            holds,
            margin,
            strict,
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn verdict(&self) -> &'static str {
        if self.holds {
            "certified"
        } else {
            "condition not certified"
        }
    }
}

/// `v_i^(t-1) - 4 P^(t) r - 4 Q^(t) x > 0`
pub fn check_theorem1(state: &NodeState, v_parent_prev: f64, line: &Line) -> ConditionResult {
    ConditionResult::new(
        THEOREM1,
        hessian_condition_value(state, v_parent_prev, line),
        true,
        &[
            ("v_i_prev", v_parent_prev),
            ("p", state.p_flow),
            ("q", state.q_flow),
            ("r", line.r),
            ("x", line.x),
        ],
    )
}

/// `(1/delta) v_prev <= v_now <= delta v_prev`, margin the smaller slack.
pub fn check_delta_condition(v_now: f64, v_prev: f64, delta: f64) -> ConditionResult {
    let lower = v_now - v_prev / delta;
    let upper = delta * v_prev - v_now;
    ConditionResult::new(
        DELTA_BRACKET,
        lower.min(upper),
        false,
        &[("v_now", v_now), ("v_prev", v_prev), ("delta", delta)],
    )
}

/// Inputs of the three-node conditions for a parent `i`, a bus `j` and its
/// only child `k`, evaluated at round `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeNodeInputs {
    /// `v_i^(t-1)`
    pub v_i_prev: f64,
    /// `v_j^(t-1)`
    pub v_j_prev: f64,
    /// `v_j^(t)`
    pub v_j_now: f64,
    /// `P_ij^(t)`
    pub p_ij: f64,
    /// `P_ij^(t+1)`
    pub p_ij_next: f64,
    /// `Q_ij^(t)`
    pub q_ij: f64,
    /// `P_jk^(t)`
    pub p_jk: f64,
    pub r_ij: f64,
    pub x_ij: f64,
    pub r_jk: f64,
}

/// Margins of the twelve printed inequalities, in order.
pub fn three_node_margins(s: &ThreeNodeInputs) -> [f64; 12] {
    let (vi, vj) = (s.v_i_prev, s.v_j_prev);
    let (pn, p, q, pjk) = (s.p_ij_next, s.p_ij, s.q_ij, s.p_jk);
    let (r, x, rjk) = (s.r_ij, s.x_ij, s.r_jk);
    [
        x - r,
        vi * vj - 4.0 * pn * r * vj - 4.0 * pjk * rjk * vi,
        vi * vj - 4.0 * p * r * vj - 4.0 * pjk * rjk * vi,
        vi - 4.0 * pn * r - 4.0 * p * r,
        vi - 4.0 * pn * r - 2.0 * p * r - 2.0 * p * x,
        vi - 4.0 * p * r - 4.0 * p * x,
        vi - pn * r - pjk * rjk,
        vi * vj - 4.0 * pjk * rjk * vi - 2.0 * p * r * vj - 2.0 * p * x * vj,
        vj.powi(3) - 4.0 * pn * r * vi * vj - 2.0 * pjk * rjk * vi - 4.0 * pn * r,
        vi - 8.0 * p * r,
        vi - 8.0 * q * x,
        vi - 8.0 * pjk * rjk,
    ]
}

/// The twelve conditions plus the `delta = 1` voltage test.
pub fn check_theorem2(s: &ThreeNodeInputs, eps_v: f64) -> Vec<ConditionResult> {
    let inputs = [
        ("v_i_prev", s.v_i_prev),
        ("v_j_prev", s.v_j_prev),
        ("v_j_now", s.v_j_now),
        ("p_ij", s.p_ij),
        ("p_ij_next", s.p_ij_next),
        ("q_ij", s.q_ij),
        ("p_jk", s.p_jk),
        ("r_ij", s.r_ij),
        ("x_ij", s.x_ij),
        ("r_jk", s.r_jk),
    ];
    let mut out: Vec<ConditionResult> = THREE_NODE_NAMES
        .iter()
        .zip(three_node_margins(s))
        .map(|(name, m)| ConditionResult::new(name, m, false, &inputs))
        .collect();
    out.push(ConditionResult::new(
        DELTA_EQUALS_ONE,
        eps_v - (s.v_j_now - s.v_j_prev).abs(),
        false,
        &[("v_j_now", s.v_j_now), ("v_j_prev", s.v_j_prev), ("eps_v", eps_v)],
    ));
    out
}

/// Leading minors of `M'`; not applicable unless `d_j > 0` and `c > 0`.
pub fn check_hessian(state: &NodeState, v_parent_prev: f64, line: &Line, d_j: f64, c: f64) -> Option<ConditionResult> {
    let m = build_m_prime(state, v_parent_prev, line, d_j, c).ok()?;
    let minors = leading_minors(&m).ok()?;
    let worst = minors.iter().copied().fold(f64::INFINITY, f64::min);
    Some(ConditionResult::new(HESSIAN_MINORS, worst, true, &[("d_j", d_j), ("c", c)]))
}

/// Boundary quantities of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    /// Every bus, root included.
    pub v_sq: BTreeMap<BusId, f64>,
    /// `(P, Q)` into each non-root bus.
    pub flows: BTreeMap<BusId, (f64, f64)>,
    /// Adaptive variant only: delta after this round.
    pub delta: BTreeMap<BusId, f64>,
}

pub fn snapshots_from_traces(model: &FeederModel, traces: &[RoundTrace], v_root_sq: f64) -> Vec<RoundSnapshot> {
    traces
        .iter()
        .map(|t| {
            let mut v_sq: BTreeMap<BusId, f64> = t.node_states.iter().map(|(&b, s)| (b, s.v_sq)).collect();
            v_sq.insert(model.root(), v_root_sq);
            RoundSnapshot {
                round: t.round,
                v_sq,
                flows: t.node_states.iter().map(|(&b, s)| (b, (s.p_flow, s.q_flow))).collect(),
                delta: t.delta.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub round: usize,
    pub per_node: BTreeMap<BusId, Vec<ConditionResult>>,
    pub theorem1_all: bool,
    /// `None` when no bus had a three-node window at this round.
    pub theorem2_all: Option<bool>,
}

impl CertificateReport {
    fn summarize(round: usize, per_node: BTreeMap<BusId, Vec<ConditionResult>>) -> Self {
        let all = |names: &[&str]| -> Option<bool> {
            let mut seen = false;
            let mut ok = true;
            for c in per_node.values().flatten().filter(|c| names.contains(&c.name.as_str())) {
                seen = true;
                ok &= c.holds;
            }
            seen.then_some(ok)
        };
        let mut two: Vec<&str> = THREE_NODE_NAMES.to_vec();
        two.push(DELTA_EQUALS_ONE);
        CertificateReport {
            round,
            theorem1_all: all(&[THEOREM1]).unwrap_or(true),
            theorem2_all: all(&two),
            per_node,
        }
    }

    pub fn recomputed(&self) -> CertificateReport {
        CertificateReport::summarize(self.round, self.per_node.clone())
    }
}

/// Three-node window for bus `j` at round `t`, if `j` has exactly one child
/// and rounds `t - 1 ..= t + 1` are present.
pub fn three_node_window(model: &FeederModel, snaps: &[RoundSnapshot], t: usize, j: BusId) -> Option<ThreeNodeInputs> {
    if t == 0 || t + 1 >= snaps.len() {
        return None;
    }
    let bus = model.bus(j).ok()?;
    let i = bus.parent?;
    let children = model.children_of(j).ok()?;
    if children.len() != 1 {
        return None;
    }
    let k = children[0];
    let line_ij = model.line_into(j).ok()??;
    let line_jk = model.line_into(k).ok()??;
    let (prev, now, next) = (&snaps[t - 1], &snaps[t], &snaps[t + 1]);
    Some(ThreeNodeInputs {
        v_i_prev: *prev.v_sq.get(&i)?,
        v_j_prev: *prev.v_sq.get(&j)?,
        v_j_now: *now.v_sq.get(&j)?,
        p_ij: now.flows.get(&j)?.0,
        p_ij_next: next.flows.get(&j)?.0,
        q_ij: now.flows.get(&j)?.1,
        p_jk: now.flows.get(&k)?.0,
        r_ij: line_ij.r,
        x_ij: line_ij.x,
        r_jk: line_jk.r,
    })
}

/// One report per snapshot. Round 0 carries no conditions. When the live
/// traces are supplied, the Hessian check runs for every local solve.
pub fn certify_rounds(
    model: &FeederModel,
    snaps: &[RoundSnapshot],
    eps_v: f64,
    traces: Option<&[RoundTrace]>,
) -> Vec<CertificateReport> {
    (0..snaps.len())
        .map(|t| {
            let mut per_node: BTreeMap<BusId, Vec<ConditionResult>> = BTreeMap::new();
            if t > 0 {
                for bus in model.non_root_buses() {
                    let j = bus.id;
                    let parent = bus.parent.expect("non-root");
                    let line = model.line_into(j).expect("known").expect("non-root");
                    let (Some(&v_i_prev), Some(&(p, q))) = (snaps[t - 1].v_sq.get(&parent), snaps[t].flows.get(&j))
                    else {
                        continue;
                    };
                    let mut conds = Vec::new();
                    let v_j = snaps[t].v_sq.get(&j).copied().unwrap_or(f64::NAN);
                    let state = NodeState { p_flow: p, q_flow: q, v_sq: v_j, l_sq: 0.0, q_der: 0.0 };
                    conds.push(check_theorem1(&state, v_i_prev, line));
                    if let Some(w) = three_node_window(model, snaps, t, j) {
                        conds.extend(check_theorem2(&w, eps_v));
                    }
                    if let (Some(&d), Some(&v_prev)) = (snaps[t - 1].delta.get(&j), snaps[t - 1].v_sq.get(&j)) {
                        conds.push(check_delta_condition(v_j, v_prev, d));
                    }
                    if let Some(info) = traces.and_then(|tr| tr.get(t)).and_then(|tr| tr.solves.get(&j)) {
                        let full = traces.expect("checked").get(t).expect("checked").node_states[&j];
                        if let Some(h) = check_hessian(&full, v_i_prev, line, info.d_j, info.c_final) {
                            conds.push(h);
                        }
                    }
                    per_node.insert(j, conds);
                }
            }
            CertificateReport::summarize(snaps[t].round, per_node)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Theorem3Summary {
    NotApplicable { reason: String },
    Evaluated {
        /// Subsystem `{i, i+1, i+2}` keyed by the first bus, with its round.
        schedule: Vec<(BusId, Option<usize>)>,
        valid: bool,
    },
}

impl Theorem3Summary {
    pub fn is_valid(&self) -> bool {
        matches!(self, Theorem3Summary::Evaluated { valid: true, .. })
    }
}

/// Greedy sequential schedule on a line feeder: earliest round for the first
/// subsystem, then the earliest round at least one later for each next one.
pub fn check_theorem3_schedule(
    model: &FeederModel,
    snaps: &[RoundSnapshot],
    converged: bool,
    eps_v: f64,
) -> Theorem3Summary {
    if !model.is_line_network() {
        return Theorem3Summary::NotApplicable {
            reason: "feeder is not a line".into(),
        };
    }
    let order = model.bfs_order();
    if order.len() < 3 {
        return Theorem3Summary::NotApplicable {
            reason: "line has fewer than three buses".into(),
        };
    }
    let mut schedule = Vec::new();
    let mut next_min = 1;
    let mut valid = converged;
    for w in order.windows(3) {
        let j = w[1];
        let found = if valid {
            (next_min..snaps.len()).find(|&t| {
                three_node_window(model, snaps, t, j)
                    .map(|inp| check_theorem2(&inp, eps_v).iter().all(|c| c.holds))
                    .unwrap_or(false)
            })
        } else {
            None
        };
        match found {
            Some(t) => next_min = t + 1,
            None => valid = false,
        }
        schedule.push((w[0], found));
    }
    Theorem3Summary::Evaluated { schedule, valid }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRun {
    pub rounds: Vec<CertificateReport>,
    pub theorem3: Theorem3Summary,
}

impl CertificateRun {
    pub fn theorem1_all(&self) -> bool {
        self.rounds.iter().all(|r| r.theorem1_all)
    }
}

pub fn certify_snapshots(model: &FeederModel, snaps: &[RoundSnapshot], converged: bool, eps_v: f64) -> CertificateRun {
    CertificateRun {
        rounds: certify_rounds(model, snaps, eps_v, None),
        theorem3: check_theorem3_schedule(model, snaps, converged, eps_v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(r: f64, x: f64) -> Line {
        Line { from_bus: 1, to_bus: 2, r, x, i_rated: 5.0 }
    }

    fn flow(p: f64, q: f64) -> NodeState {
        NodeState { p_flow: p, q_flow: q, v_sq: 1.0, l_sq: 0.0, q_der: 0.0 }
    }

    #[test]
    fn theorem1_examples() {
        let c = check_theorem1(&flow(0.0, 0.0), 1.0404, &line(0.01, 0.02));
        assert!(c.holds && (c.margin - 1.0404).abs() < 1e-15);
        let c = check_theorem1(&flow(0.5, 0.2), 1.0, &line(0.01, 0.02));
        assert!(c.holds && (c.margin - 0.964).abs() < 1e-12);
        let c = check_theorem1(&flow(10.0, 0.0), 1.0, &line(0.05, 0.02));
        assert!(!c.holds && (c.margin + 1.0).abs() < 1e-12);
        assert_eq!(c.verdict(), "condition not certified");
        let c = check_theorem1(&flow(25.0, 0.0), 1.0, &line(0.01, 0.02));
        assert!(!c.holds && c.margin == 0.0);
    }

    fn zero_flow(r: f64, x: f64) -> ThreeNodeInputs {
        ThreeNodeInputs {
            v_i_prev: 1.0,
            v_j_prev: 1.0,
            v_j_now: 1.0,
            p_ij: 0.0,
            p_ij_next: 0.0,
            q_ij: 0.0,
            p_jk: 0.0,
            r_ij: r,
            x_ij: x,
            r_jk: 0.01,
        }
    }

    #[test]
    fn theorem2_examples() {
        let res = check_theorem2(&zero_flow(0.01, 0.02), 1e-6);
        assert_eq!(res.len(), 13);
        assert!(res.iter().all(|c| c.holds && !c.strict));
        assert!((res[0].margin - 0.01).abs() < 1e-15);
        assert_eq!(res[9].margin, 1.0);
        let res = check_theorem2(&zero_flow(0.03, 0.01), 1e-6);
        assert!(!res[0].holds && (res[0].margin + 0.02).abs() < 1e-15);
        let mut moved = zero_flow(0.01, 0.02);
        moved.v_j_now = 1.001;
        assert!(!check_theorem2(&moved, 1e-6)[12].holds);
    }

    #[test]
    fn delta_condition_examples() {
        let c = check_delta_condition(1.0, 1.0, 1.5);
        assert!(c.holds && (c.margin - (1.0 - 1.0 / 1.5)).abs() < 1e-15);
        let c = check_delta_condition(1.0, 1.0, 1.0);
        assert!(c.holds && c.margin == 0.0);
        assert!(!check_delta_condition(1.01, 1.0, 1.0).holds);
        let c = check_delta_condition(1.9, 1.0, 2.0);
        assert!(c.holds && (c.margin - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hessian_not_applicable_without_positive_multiplier() {
        assert!(check_hessian(&flow(0.5, 0.2), 1.0, &line(0.01, 0.02), 0.0, 10.0).is_none());
        let h = check_hessian(&flow(0.5, 0.2), 1.0, &line(0.01, 0.02), 1.0, 10.0).unwrap();
        assert!(h.holds);
    }
}
