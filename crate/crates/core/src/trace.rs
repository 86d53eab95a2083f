//! Run artifacts: the per-round trace CSV, the run summary, certificate
//! reports and the central/distributed comparison.
//!
//! Trace layout: one `#` comment line carrying the format version and the
//! configuration as JSON, then a header and one row per round (the initial
//! state is not written). Columns are `round, residual_max, objective`,
//! `v_<bus>` for every bus (magnitude, pu), `qd_<bus>` per DER bus,
//! `pf_<bus>`/`qf_<bus>` per non-root bus and, for the adaptive variant,
//! `delta_<bus>` per non-root bus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central::CentralSolution;
use crate::certificates::{CertificateRun, RoundSnapshot, Theorem3Summary};
use crate::coordinator::RunResult;
use crate::network::{BusId, FeederModel};
use crate::powerflow::Dispatch;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "# feeder-opf trace";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad preamble: {0}")]
    Preamble(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("bad column {0:?}")]
    Column(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("trace does not match feeder: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub residual_max: f64,
    pub objective: f64,
    pub v: BTreeMap<BusId, f64>,
    pub qd: BTreeMap<BusId, f64>,
    pub flows: BTreeMap<BusId, (f64, f64)>,
    pub delta: BTreeMap<BusId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub version: u32,
    pub config: serde_json::Value,
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Copy)]
enum Col {
    V(BusId),
    Qd(BusId),
    Pf(BusId),
    Qf(BusId),
    Delta(BusId),
}

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_trace_csv(model: &FeederModel, result: &RunResult, config: &serde_json::Value) -> String {
    let mut out = format!("{MAGIC} v{FORMAT_VERSION} {config}\n");
    let ders = model.der_buses();
    let non_root: Vec<BusId> = model.non_root_buses().map(|b| b.id).collect();
    let with_delta = result.traces.iter().any(|t| !t.delta.is_empty());

    let mut header: Vec<String> = vec!["round".into(), "residual_max".into(), "objective".into()];
    header.extend(model.buses().iter().map(|b| format!("v_{}", b.id)));
    header.extend(ders.iter().map(|b| format!("qd_{b}")));
    header.extend(non_root.iter().map(|b| format!("pf_{b}")));
    header.extend(non_root.iter().map(|b| format!("qf_{b}")));
    if with_delta {
        header.extend(non_root.iter().map(|b| format!("delta_{b}")));
    }

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for (t, tr) in result.traces.iter().enumerate().skip(1) {
        let v_sq = result.v_sq_at(t, model.root());
        let mut rec = vec![tr.round.to_string(), fmt(tr.residual_max), fmt(tr.objective)];
        rec.extend(model.buses().iter().map(|b| fmt(v_sq[&b.id].max(0.0).sqrt())));
        rec.extend(ders.iter().map(|b| fmt(tr.node_states[b].q_der)));
        rec.extend(non_root.iter().map(|b| fmt(tr.node_states[b].p_flow)));
        rec.extend(non_root.iter().map(|b| fmt(tr.node_states[b].q_flow)));
        if with_delta {
            rec.extend(non_root.iter().map(|b| fmt(tr.delta.get(b).copied().unwrap_or(f64::NAN))));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8"));
    out
}

fn parse_col(name: &str) -> Result<Col, TraceError> {
    let bad = || TraceError::Column(name.to_string());
    let (prefix, id) = name.rsplit_once('_').ok_or_else(bad)?;
    let id: BusId = id.parse().map_err(|_| bad())?;
    Ok(match prefix {
        "v" => Col::V(id),
        "qd" => Col::Qd(id),
        "pf" => Col::Pf(id),
        "qf" => Col::Qf(id),
        "delta" => Col::Delta(id),
        _ => return Err(bad()),
    })
}

pub fn parse_trace(text: &str) -> Result<TraceTable, TraceError> {
    let (first, body) = text.split_once('\n').ok_or_else(|| TraceError::Preamble("missing".into()))?;
    let rest = first
        .strip_prefix(MAGIC)
        .ok_or_else(|| TraceError::Preamble("missing marker".into()))?
        .trim_start();
    let (ver, cfg) = rest.split_once(' ').unwrap_or((rest, "null"));
    let version: u32 = ver
        .strip_prefix('v')
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TraceError::Preamble(format!("bad version {ver:?}")))?;
    if version != FORMAT_VERSION {
        return Err(TraceError::Version(version));
    }
    let config: serde_json::Value =
        serde_json::from_str(cfg.trim()).map_err(|e| TraceError::Preamble(format!("config: {e}")))?;

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    let fixed = ["round", "residual_max", "objective"];
    if headers.len() < 3 || headers.iter().take(3).ne(fixed) {
        return Err(TraceError::Column(headers.iter().take(3).collect::<Vec<_>>().join(",")));
    }
    let cols: Vec<Col> = headers.iter().skip(3).map(parse_col).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_err = |reason: String| TraceError::Row { row: n + 1, reason };
        let num = |i: usize| -> Result<f64, TraceError> {
            rec.get(i)
                .ok_or_else(|| row_err(format!("missing field {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| row_err(format!("field {i}: {e}")))
        };
        let round: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| row_err("bad round".into()))?;
        let mut row = TraceRow {
            round,
            residual_max: num(1)?,
            objective: num(2)?,
            v: BTreeMap::new(),
            qd: BTreeMap::new(),
            flows: BTreeMap::new(),
            delta: BTreeMap::new(),
        };
        for (k, col) in cols.iter().enumerate() {
            let x = num(k + 3)?;
            match *col {
                Col::V(b) => {
                    row.v.insert(b, x);
                }
                Col::Qd(b) => {
                    row.qd.insert(b, x);
                }
                Col::Pf(b) => row.flows.entry(b).or_insert((0.0, 0.0)).0 = x,
                Col::Qf(b) => row.flows.entry(b).or_insert((0.0, 0.0)).1 = x,
                Col::Delta(b) => {
                    row.delta.insert(b, x);
                }
            }
        }
        if let Some(prev) = rows.last().map(|r: &TraceRow| r.round) {
            if round != prev + 1 {
                return Err(row_err(format!("round {round} follows {prev}")));
            }
        }
        rows.push(row);
    }
    Ok(TraceTable { version, config, rows })
}

impl TraceTable {
    /// Snapshots for certificate evaluation, checked against the feeder.
    pub fn snapshots(&self, model: &FeederModel) -> Result<Vec<RoundSnapshot>, TraceError> {
        self.rows
            .iter()
            .map(|r| {
                for b in model.buses() {
                    if !r.v.contains_key(&b.id) {
                        return Err(TraceError::Mismatch(format!("no voltage for bus {}", b.id)));
                    }
                }
                for b in model.non_root_buses() {
                    if !r.flows.contains_key(&b.id) {
                        return Err(TraceError::Mismatch(format!("no flow for bus {}", b.id)));
                    }
                }
                if let Some(b) = r.v.keys().find(|b| !model.contains(**b)) {
                    return Err(TraceError::Mismatch(format!("unknown bus {b}")));
                }
                Ok(RoundSnapshot {
                    round: r.round,
                    v_sq: r.v.iter().map(|(&b, &v)| (b, v * v)).collect(),
                    flows: r.flows.clone(),
                    delta: r.delta.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub converged: bool,
    pub rounds: usize,
    pub dispatch: Dispatch,
    pub final_objective: f64,
}

impl RunSummary {
    pub fn new(result: &RunResult, config: serde_json::Value) -> Self {
        RunSummary {
            format_version: FORMAT_VERSION,
            config,
            converged: result.converged,
            rounds: result.rounds,
            dispatch: result.dispatch.clone(),
            final_objective: result.final_objective(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

pub fn write_certificate_csv(run: &CertificateRun) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["round", "bus", "condition", "holds", "margin"]).expect("in-memory write");
    for rep in &run.rounds {
        for (bus, conds) in &rep.per_node {
            for c in conds {
                w.write_record([
                    rep.round.to_string(),
                    bus.to_string(),
                    c.name.clone(),
                    c.holds.to_string(),
                    fmt(c.margin),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundVerdict {
    pub round: usize,
    pub theorem1_all: bool,
    pub theorem2_all: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub format_version: u32,
    pub theorem1_all: bool,
    pub rounds: Vec<RoundVerdict>,
    pub theorem3: Theorem3Summary,
}

impl CertificateSummary {
    pub fn new(run: &CertificateRun) -> Self {
        CertificateSummary {
            format_version: FORMAT_VERSION,
            theorem1_all: run.theorem1_all(),
            rounds: run
                .rounds
                .iter()
                .map(|r| RoundVerdict {
                    round: r.round,
                    theorem1_all: r.theorem1_all,
                    theorem2_all: r.theorem2_all,
                })
                .collect(),
            theorem3: run.theorem3.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionDoc {
    pub objective: f64,
    pub dispatch: Dispatch,
    /// Magnitudes, every bus.
    pub v: BTreeMap<BusId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub converged: bool,
    pub rounds: usize,
    pub distributed: SolutionDoc,
    pub central: SolutionDoc,
    pub relative_gap: f64,
    pub max_voltage_diff: f64,
}

impl Comparison {
    pub fn new(model: &FeederModel, dist: &RunResult, central: &CentralSolution, config: serde_json::Value) -> Self {
        let vd: BTreeMap<BusId, f64> = dist
            .v_sq_at(dist.traces.len() - 1, model.root())
            .into_iter()
            .map(|(b, v)| (b, v.max(0.0).sqrt()))
            .collect();
        let vc: BTreeMap<BusId, f64> = central.v_sq.iter().map(|(&b, &v)| (b, v.max(0.0).sqrt())).collect();
        let max_voltage_diff = vd.iter().map(|(b, v)| (v - vc[b]).abs()).fold(0.0, f64::max);
        let (od, oc) = (dist.final_objective(), central.objective);
        Comparison {
            format_version: FORMAT_VERSION,
            config,
            converged: dist.converged,
            rounds: dist.rounds,
            distributed: SolutionDoc { objective: od, dispatch: dist.dispatch.clone(), v: vd },
            central: SolutionDoc { objective: oc, dispatch: central.dispatch.clone(), v: vc },
            relative_gap: (od - oc).abs() / oc.abs().max(1e-9),
            max_voltage_diff,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::certify_snapshots;
    use crate::coordinator::{run_endico, ProtocolOptions, Variant};
    use crate::network::{generate_line_feeder, GeneratorConfig};

    #[test]
    fn round_trip_preserves_values() {
        let m = generate_line_feeder(5, &GeneratorConfig::default()).unwrap();
        let opts = ProtocolOptions { variant: Variant::Delta { delta0: 1.5 }, ..Default::default() };
        let r = run_endico(&m, &opts).unwrap();
        let cfg = serde_json::json!({"tol": 1e-3});
        let text = write_trace_csv(&m, &r, &cfg);
        let t = parse_trace(&text).unwrap();
        assert_eq!(t.config, cfg);
        assert_eq!(t.rows.len(), r.rounds);
        for (row, tr) in t.rows.iter().zip(&r.traces[1..]) {
            assert_eq!(row.residual_max, tr.residual_max);
            for (b, s) in &tr.node_states {
                assert_eq!(row.flows[b], (s.p_flow, s.q_flow));
                assert!((row.v[b].powi(2) - s.v_sq).abs() < 1e-14);
                assert_eq!(row.delta[b], tr.delta[b]);
            }
        }
        let snaps = t.snapshots(&m).unwrap();
        let run = certify_snapshots(&m, &snaps, r.converged, 1e-6);
        assert_eq!(run.rounds.len(), r.rounds);
        assert!(write_certificate_csv(&run).starts_with("round,bus,condition,holds,margin\n"));
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(parse_trace("").is_err());
        assert!(parse_trace("round,residual_max\n").is_err());
        assert!(matches!(parse_trace("# feeder-opf trace v9 {}\nround\n"), Err(TraceError::Version(9))));
        let head = "# feeder-opf trace v1 {}\nround,residual_max,objective,v_1\n";
        assert!(parse_trace(&format!("{head}1,0.1,0.2,x\n")).is_err());
        assert!(parse_trace(&format!("{head}1,0.1,0.2,1.0\n3,0.1,0.2,1.0\n")).is_err());
        assert!(parse_trace("# feeder-opf trace v1 {}\nround,residual_max,objective,w_1\n").is_err());
        assert_eq!(parse_trace(&format!("{head}1,0.1,0.2,1.0\n")).unwrap().rows.len(), 1);
    }
}
