//! Synchronous message-passing rounds.
//!
//! Round `t` reads only the messages produced at the end of round `t - 1`:
//! every bus sends its squared voltage to its children and every non-root bus
//! sends its line flow to its parent. Controllable buses then solve their
//! local problem, buses without a DER resolve their flow equations with
//! `q_D = 0`, and the new states produce the next batch of messages.
//!
//! The adaptive variant additionally tracks a per-bus bracket parameter
//! `delta` on the voltage sequence. It does not feed back into the local
//! solves.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::almcore::AlmOptions;
use crate::network::{BusId, FeederModel};
use crate::powerflow::{sweep_solve, Dispatch, PowerFlowError, SweepOptions};
use crate::subproblem::{
    pass_through, resolve_state, solve_node, NodeState, ObjectiveKind, SubproblemContext, SubproblemError,
    EQ_CURRENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Loss,
    #[serde(alias = "dv")]
    VoltageDeviation,
}

impl Objective {
    pub fn kind(&self, model: &FeederModel) -> ObjectiveKind {
        match self {
            Objective::Loss => ObjectiveKind::Loss,
            Objective::VoltageDeviation => ObjectiveKind::VoltageDeviation {
                v_ref_sq: model.v_ref_sq(),
            },
        }
    }
}

/// Network total of the objective over all non-root buses.
pub fn network_objective(model: &FeederModel, objective: Objective, states: &BTreeMap<BusId, NodeState>) -> f64 {
    let kind = objective.kind(model);
    model
        .non_root_buses()
        .map(|b| {
            let line = model.line_into(b.id).expect("known").expect("non-root");
            kind.value(line, &states[&b.id])
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Delta { delta0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub tol: f64,
    pub max_rounds: usize,
    pub variant: Variant,
    pub objective: Objective,
    /// Equality tolerance of the adaptive variant's stop test (pu^2).
    pub eps_v: f64,
    pub alm: AlmOptions,
    pub max_retry: usize,
    pub record_certificates: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            tol: 1e-3,
            max_rounds: 200,
            variant: Variant::Plain,
            objective: Objective::Loss,
            eps_v: 1e-6,
            alm: AlmOptions::default(),
            max_retry: 1,
            record_certificates: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    VoltageDown { v_sq: f64 },
    FlowUp { p: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMessage {
    pub from: BusId,
    pub to: BusId,
    pub round: usize,
    pub payload: Payload,
}

/// Multiplier data from a controllable bus's local solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    /// Multiplier of the current equation.
    pub d_j: f64,
    pub c_final: f64,
    pub iterations: usize,
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    /// Infinite for the initial state.
    pub residual_max: f64,
    pub objective: f64,
    /// Non-root buses only; the root voltage is fixed.
    pub node_states: BTreeMap<BusId, NodeState>,
    /// Adaptive variant: delta after this round's update.
    pub delta: BTreeMap<BusId, f64>,
    pub stopped: BTreeMap<BusId, bool>,
    pub solves: BTreeMap<BusId, SolveInfo>,
    /// Messages sent at the end of this round.
    pub messages: Vec<BoundaryMessage>,
    pub certificates: Option<crate::certificates::CertificateReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub converged: bool,
    /// Rounds executed (not counting the initial state).
    pub rounds: usize,
    pub final_states: BTreeMap<BusId, NodeState>,
    /// `traces[0]` is the initial state, `traces[t]` round `t`.
    pub traces: Vec<RoundTrace>,
    pub dispatch: Dispatch,
    pub objective: Objective,
    pub v_root_sq: f64,
}

impl RunResult {
    pub fn final_objective(&self) -> f64 {
        self.traces.last().map_or(f64::NAN, |t| t.objective)
    }

    /// Squared voltage of every bus at round `t`, root included.
    pub fn v_sq_at(&self, t: usize, root: BusId) -> BTreeMap<BusId, f64> {
        let mut v: BTreeMap<BusId, f64> = self.traces[t].node_states.iter().map(|(&b, s)| (b, s.v_sq)).collect();
        v.insert(root, self.v_root_sq);
        v
    }
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("initial sweep failed: {0}")]
    Init(#[from] PowerFlowError),
    #[error("round {round}: bus {bus} failed after retries: {source}")]
    SolveFailed {
        round: usize,
        bus: BusId,
        source: SubproblemError,
        partial: Box<RunResult>,
    },
    #[error("traces differ in bus sets")]
    MismatchedTraces,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeltaStep {
    Stop,
    Continue(f64),
}

/// One step of the adaptive bracket update.
pub fn delta_update(delta_t: f64, v_now: f64, v_prev: f64, eps_v: f64) -> DeltaStep {
    if (v_now - v_prev).abs() <= eps_v {
        DeltaStep::Stop
    } else if v_prev / delta_t <= v_now && v_now <= delta_t * v_prev {
        DeltaStep::Continue(1.0 + (delta_t - 1.0) / 2.0)
    } else {
        DeltaStep::Continue(2.0 * delta_t - 1.0)
    }
}

/// Largest change of any boundary quantity between two rounds: voltages sent
/// to children and flows sent to parents.
pub fn residual(model: &FeederModel, now: &RoundTrace, prev: &RoundTrace) -> Result<f64, CoordinatorError> {
    if now.node_states.len() != prev.node_states.len()
        || now.node_states.keys().zip(prev.node_states.keys()).any(|(a, b)| a != b)
    {
        return Err(CoordinatorError::MismatchedTraces);
    }
    let mut worst: f64 = 0.0;
    for (bus, s) in &now.node_states {
        let p = &prev.node_states[bus];
        worst = worst.max((s.p_flow - p.p_flow).abs()).max((s.q_flow - p.q_flow).abs());
        let has_children = model.children_of(*bus).map(|c| !c.is_empty()).unwrap_or(false);
        if has_children {
            worst = worst.max((s.v_sq - p.v_sq).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Default)]
struct Inbox {
    v_parent: Option<f64>,
    child_p: f64,
    child_q: f64,
}

fn outgoing(model: &FeederModel, round: usize, v_root_sq: f64, states: &BTreeMap<BusId, NodeState>) -> Vec<BoundaryMessage> {
    let mut msgs = Vec::new();
    for &bus in model.bfs_order() {
        let v = if bus == model.root() { v_root_sq } else { states[&bus].v_sq };
        for &child in model.children_of(bus).expect("known") {
            msgs.push(BoundaryMessage {
                from: bus,
                to: child,
                round,
                payload: Payload::VoltageDown { v_sq: v },
            });
        }
        if let Some(parent) = model.bus(bus).expect("known").parent {
            let s = &states[&bus];
            msgs.push(BoundaryMessage {
                from: bus,
                to: parent,
                round,
                payload: Payload::FlowUp { p: s.p_flow, q: s.q_flow },
            });
        }
    }
    msgs
}

fn deliver(msgs: &[BoundaryMessage]) -> BTreeMap<BusId, Inbox> {
    let mut boxes: BTreeMap<BusId, Inbox> = BTreeMap::new();
    for m in msgs {
        let inbox = boxes.entry(m.to).or_default();
        match m.payload {
            Payload::VoltageDown { v_sq } => inbox.v_parent = Some(v_sq),
            Payload::FlowUp { p, q } => {
                inbox.child_p += p;
                inbox.child_q += q;
            }
        }
    }
    boxes
}

fn context_for(model: &FeederModel, bus: BusId, inbox: &Inbox, kind: ObjectiveKind) -> SubproblemContext {
    let b = model.bus(bus).expect("known");
    SubproblemContext {
        v_parent_prev: inbox.v_parent.expect("every non-root bus hears its parent"),
        child_p_sum: inbox.child_p,
        child_q_sum: inbox.child_q,
        line: *model.line_into(bus).expect("known").expect("non-root"),
        bus: b.clone(),
        v_min_sq: model.v_min_sq(),
        v_max_sq: model.v_max_sq(),
        objective: kind,
    }
}

fn step_node(
    ctx: &SubproblemContext,
    prev: &NodeState,
    opts: &ProtocolOptions,
) -> Result<(NodeState, Option<SolveInfo>), SubproblemError> {
    if ctx.bus.der.is_none() {
        return pass_through(ctx).map(|s| (s, None));
    }
    let mut attempt = 0;
    let mut warm = *prev;
    loop {
        match solve_node(ctx, &warm, &opts.alm) {
            Ok((s, rep)) => {
                return Ok((
                    s,
                    Some(SolveInfo {
                        d_j: rep.lambda_star[EQ_CURRENT],
                        c_final: rep.c_final,
                        iterations: rep.iterations,
                        retried: attempt > 0,
                    }),
                ))
            }
            Err(e) if attempt >= opts.max_retry => return Err(e),
            Err(e) => {
                debug!("bus {}: {e}; retrying from a flow-consistent start", ctx.bus.id);
                attempt += 1;
                let q = prev.q_der.clamp(-ctx.q_headroom(), ctx.q_headroom());
                warm = resolve_state(ctx, q).or_else(|| resolve_state(ctx, 0.0)).unwrap_or(warm);
            }
        }
    }
}

fn validate(opts: &ProtocolOptions) -> Result<(), CoordinatorError> {
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(CoordinatorError::InvalidOptions("tol must be positive".into()));
    }
    if opts.max_rounds == 0 {
        return Err(CoordinatorError::InvalidOptions("max_rounds must be at least 1".into()));
    }
    if let Variant::Delta { delta0 } = opts.variant {
        if !(delta0 > 1.0 && delta0.is_finite()) {
            return Err(CoordinatorError::InvalidOptions("delta0 must exceed 1".into()));
        }
    }
    if !(opts.eps_v >= 0.0) {
        return Err(CoordinatorError::InvalidOptions("eps_v must be nonnegative".into()));
    }
    Ok(())
}

/// Flat-start voltages with flows and currents from a `q_D = 0` sweep.
pub fn initial_states(model: &FeederModel) -> Result<BTreeMap<BusId, NodeState>, PowerFlowError> {
    let sweep = sweep_solve(model, &Dispatch::new(), &SweepOptions::default())?;
    Ok(model
        .non_root_buses()
        .map(|b| {
            let (p, q) = sweep.flows[&b.id];
            (
                b.id,
                NodeState {
                    p_flow: p,
                    q_flow: q,
                    v_sq: b.v_squared_init(),
                    l_sq: sweep.l[&b.id],
                    q_der: 0.0,
                },
            )
        })
        .collect())
}

pub fn run_endico(model: &FeederModel, opts: &ProtocolOptions) -> Result<RunResult, CoordinatorError> {
    validate(opts)?;
    let kind = opts.objective.kind(model);
    let v_root_sq = model.bus(model.root()).expect("root").v_squared_init();
    let buses: Vec<BusId> = model.non_root_buses().map(|b| b.id).collect();

    let init = initial_states(model)?;
    let delta0 = match opts.variant {
        Variant::Delta { delta0 } => Some(delta0),
        Variant::Plain => None,
    };
    let mut traces = vec![RoundTrace {
        round: 0,
        residual_max: f64::INFINITY,
        objective: network_objective(model, opts.objective, &init),
        messages: outgoing(model, 0, v_root_sq, &init),
        node_states: init,
        delta: delta0.map_or_else(BTreeMap::new, |d| buses.iter().map(|&b| (b, d)).collect()),
        stopped: buses.iter().map(|&b| (b, false)).collect(),
        solves: BTreeMap::new(),
        certificates: None,
    }];

    let mut converged = false;
    for round in 1..=opts.max_rounds {
        let prev = traces.last().expect("nonempty");
        let inboxes = deliver(&prev.messages);

        let results: Vec<(BusId, Result<(NodeState, Option<SolveInfo>), SubproblemError>)> = buses
            .par_iter()
            .map(|&bus| {
                let ctx = context_for(model, bus, &inboxes[&bus], kind);
                (bus, step_node(&ctx, &prev.node_states[&bus], opts))
            })
            .collect();

        let mut states = BTreeMap::new();
        let mut solves = BTreeMap::new();
        for (bus, res) in results {
            match res {
                Ok((s, info)) => {
                    states.insert(bus, s);
                    if let Some(i) = info {
                        solves.insert(bus, i);
                    }
                }
                Err(source) => {
                    let partial = finish(model, traces, false, opts, v_root_sq);
                    return Err(CoordinatorError::SolveFailed {
                        round,
                        bus,
                        source,
                        partial: Box::new(partial),
                    });
                }
            }
        }

        let mut delta = prev.delta.clone();
        let mut stopped = prev.stopped.clone();
        if delta0.is_some() {
            for &bus in &buses {
                if stopped[&bus] {
                    continue;
                }
                match delta_update(delta[&bus], states[&bus].v_sq, prev.node_states[&bus].v_sq, opts.eps_v) {
                    DeltaStep::Stop => {
                        // Equality certifies the bracket with delta = 1.
                        stopped.insert(bus, true);
                        delta.insert(bus, 1.0);
                    }
                    DeltaStep::Continue(d) => {
                        delta.insert(bus, d);
                    }
                }
            }
        }

        let mut trace = RoundTrace {
            round,
            residual_max: 0.0,
            objective: network_objective(model, opts.objective, &states),
            messages: outgoing(model, round, v_root_sq, &states),
            node_states: states,
            delta,
            stopped,
            solves,
            certificates: None,
        };
        trace.residual_max = residual(model, &trace, prev)?;
        debug!("round {round}: residual {:e}, objective {}", trace.residual_max, trace.objective);

        let all_stopped = delta0.is_none() || trace.stopped.values().all(|&s| s);
        let done = trace.residual_max < opts.tol && all_stopped;
        traces.push(trace);
        if done {
            converged = true;
            break;
        }
    }

    Ok(finish(model, traces, converged, opts, v_root_sq))
}

fn finish(
    model: &FeederModel,
    mut traces: Vec<RoundTrace>,
    converged: bool,
    opts: &ProtocolOptions,
    v_root_sq: f64,
) -> RunResult {
    let last = traces.last().expect("nonempty");
    let final_states = last.node_states.clone();
    let dispatch = model
        .der_buses()
        .into_iter()
        .map(|b| (b, final_states[&b].q_der))
        .collect();
    let mut result = RunResult {
        converged,
        rounds: traces.len() - 1,
        final_states,
        traces: Vec::new(),
        dispatch,
        objective: opts.objective,
        v_root_sq,
    };
    if opts.record_certificates {
        let snaps = crate::certificates::snapshots_from_traces(model, &traces, v_root_sq);
        let reports = crate::certificates::certify_rounds(model, &snaps, opts.eps_v, Some(&traces));
        for (t, rep) in traces.iter_mut().zip(reports) {
            t.certificates = Some(rep);
        }
    }
    result.traces = traces;
    result
}

/// For each non-root bus, the last round in which its squared voltage moved
/// by more than `eps` (0 if it never did). On a run that did not converge
/// only buses that settled before the final round are reported.
pub fn convergence_round_per_node(result: &RunResult, eps: f64) -> BTreeMap<BusId, usize> {
    let mut out = BTreeMap::new();
    let last = result.traces.len().saturating_sub(1);
    for bus in result.final_states.keys() {
        let mut settle = 0;
        for t in 1..result.traces.len() {
            let d = (result.traces[t].node_states[bus].v_sq - result.traces[t - 1].node_states[bus].v_sq).abs();
            if d > eps {
                settle = t;
            }
        }
        if result.converged || settle < last {
            out.insert(*bus, settle);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_line_feeder, GeneratorConfig};

    #[test]
    fn delta_update_branches() {
        assert_eq!(delta_update(1.5, 1.2, 1.0, 1e-6), DeltaStep::Continue(1.25));
        assert_eq!(delta_update(1.5, 1.6, 1.0, 1e-6), DeltaStep::Continue(2.0));
        assert_eq!(delta_update(1.5, 1.0, 1.0, 1e-6), DeltaStep::Stop);
        // below the bracket
        assert_eq!(delta_update(1.5, 0.6, 1.0, 1e-6), DeltaStep::Continue(2.0));
    }

    #[test]
    fn two_bus_without_der_converges_fast() {
        let cfg = GeneratorConfig { der_density: 0.0, ..Default::default() };
        let m = generate_line_feeder(2, &cfg).unwrap();
        let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.rounds <= 3, "{}", r.rounds);
        let sweep = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        assert!((r.final_states[&2].v_sq - sweep.v_sq[&2]).abs() < 1e-9);
    }

    #[test]
    fn messages_only_between_neighbours() {
        let m = generate_line_feeder(5, &GeneratorConfig::default()).unwrap();
        let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
        for t in &r.traces {
            for msg in &t.messages {
                let (from, to) = (m.bus(msg.from).unwrap(), m.bus(msg.to).unwrap());
                match msg.payload {
                    Payload::VoltageDown { .. } => assert_eq!(to.parent, Some(from.id)),
                    Payload::FlowUp { .. } => assert_eq!(from.parent, Some(to.id)),
                }
            }
        }
    }

    #[test]
    fn residual_of_identical_and_perturbed_traces() {
        let m = generate_line_feeder(4, &GeneratorConfig::default()).unwrap();
        let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
        let t = r.traces.last().unwrap();
        assert_eq!(residual(&m, t, t).unwrap(), 0.0);
        let mut u = t.clone();
        u.node_states.get_mut(&2).unwrap().v_sq += 0.002;
        assert!((residual(&m, &u, t).unwrap() - 0.002).abs() < 1e-12);
        // a leaf voltage is not sent anywhere
        let mut w = t.clone();
        w.node_states.get_mut(&4).unwrap().v_sq += 0.5;
        assert_eq!(residual(&m, &w, t).unwrap(), 0.0);
        let mut x = t.clone();
        x.node_states.remove(&4);
        assert!(residual(&m, &x, t).is_err());
    }

    #[test]
    fn invalid_options() {
        let m = generate_line_feeder(3, &GeneratorConfig::default()).unwrap();
        let bad_tol = ProtocolOptions { tol: 0.0, ..Default::default() };
        assert!(matches!(run_endico(&m, &bad_tol), Err(CoordinatorError::InvalidOptions(_))));
        let bad_delta = ProtocolOptions { variant: Variant::Delta { delta0: 1.0 }, ..Default::default() };
        assert!(matches!(run_endico(&m, &bad_delta), Err(CoordinatorError::InvalidOptions(_))));
    }

    #[test]
    fn single_round_budget_is_not_convergence() {
        let m = generate_line_feeder(6, &GeneratorConfig::default()).unwrap();
        let r = run_endico(&m, &ProtocolOptions { max_rounds: 1, ..Default::default() }).unwrap();
        assert!(!r.converged);
        assert_eq!(r.rounds, 1);
    }

    #[test]
    fn infinite_threshold_settles_everything_at_zero() {
        let m = generate_line_feeder(5, &GeneratorConfig::default()).unwrap();
        let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
        let map = convergence_round_per_node(&r, f64::INFINITY);
        assert!(map.values().all(|&t| t == 0));
        assert_eq!(map.len(), 4);
    }
}
