use std::collections::BTreeMap;

use proptest::prelude::*;

use feeder_opf::central::{solve_central, CentralOptions};
use feeder_opf::certificates::{
    check_delta_condition, check_theorem2, check_theorem3_schedule, snapshots_from_traces, three_node_margins,
    ThreeNodeInputs, Theorem3Summary,
};
use feeder_opf::coordinator::{delta_update, run_endico, DeltaStep, Objective, ProtocolOptions};
use feeder_opf::network::{
    generate_line_feeder, generate_tree_feeder, load_feeder, parse_feeder, FeederModel, GeneratorConfig,
    TreeShape,
};
use feeder_opf::powerflow::{sweep_solve, Dispatch, PowerFlowSolution, SweepOptions};
use feeder_opf::trace::write_trace_csv;

/// Largest residual of the branch flow equations, written out directly.
fn branch_flow_residual(m: &FeederModel, sol: &PowerFlowSolution, dispatch: &Dispatch) -> f64 {
    let mut worst: f64 = 0.0;
    for b in m.non_root_buses() {
        let j = b.id;
        let i = b.parent.unwrap();
        let line = m.line_into(j).unwrap().unwrap();
        let (p, q) = sol.flows[&j];
        let l = sol.l[&j];
        let (mut cp, mut cq) = (0.0, 0.0);
        for k in m.children_of(j).unwrap() {
            cp += sol.flows[k].0;
            cq += sol.flows[k].1;
        }
        let qd = dispatch.get(&j).copied().unwrap_or(0.0);
        let p_bal = p - line.r * l - b.p_load + b.p_der() - cp;
        let q_bal = q - line.x * l - b.q_load + qd - cq;
        let v_drop = sol.v_sq[&j] - sol.v_sq[&i] + 2.0 * (line.r * p + line.x * q) - (line.r.powi(2) + line.x.powi(2)) * l;
        let current = p * p + q * q - sol.v_sq[&i] * l;
        worst = worst.max(p_bal.abs()).max(q_bal.abs()).max(v_drop.abs()).max(current.abs());
    }
    worst
}

fn feeder_strategy() -> impl Strategy<Value = FeederModel> {
    (2usize..14, any::<u64>(), 0.0f64..0.5, 0.0f64..=1.0, any::<bool>()).prop_map(|(n, seed, spread, density, tree)| {
        let cfg = GeneratorConfig { seed, spread, der_density: density, p_load: 0.05, q_load: 0.025, ..Default::default() };
        if tree {
            generate_tree_feeder(TreeShape::Random { buses: n }, &cfg).unwrap()
        } else {
            generate_line_feeder(n, &cfg).unwrap()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feeder_json_round_trip(m in feeder_strategy()) {
        let back = parse_feeder(&m.to_json()).unwrap();
        prop_assert_eq!(back.to_document(), m.to_document());
    }

    #[test]
    fn sweep_satisfies_branch_flow(m in feeder_strategy(), frac in -1.0f64..1.0) {
        let dispatch: Dispatch = m
            .der_buses()
            .into_iter()
            .map(|b| (b, frac * m.bus(b).unwrap().der.unwrap().q_headroom()))
            .collect();
        let sol = sweep_solve(&m, &dispatch, &SweepOptions::default()).unwrap();
        prop_assert!(branch_flow_residual(&m, &sol, &dispatch) < 1e-9);
    }

    #[test]
    fn heavier_load_lowers_every_voltage(m in feeder_strategy(), scale in 1.0f64..2.0) {
        let doc = m.to_document();
        let mut heavy = doc.clone();
        for b in &mut heavy.buses {
            b.p_load *= scale;
            b.q_load *= scale;
        }
        let heavy = FeederModel::try_from(heavy).unwrap();
        let a = sweep_solve(&m, &Dispatch::new(), &SweepOptions::default()).unwrap();
        let b = sweep_solve(&heavy, &Dispatch::new(), &SweepOptions::default()).unwrap();
        for (bus, v) in &a.v_sq {
            prop_assert!(b.v_sq[bus] <= v + 1e-12);
        }
    }

    #[test]
    fn delta_step_direction(delta in 1.0001f64..4.0, v_prev in 0.8f64..1.2, ratio in 0.2f64..3.0) {
        let v_now = v_prev * ratio;
        match delta_update(delta, v_now, v_prev, 1e-6) {
            DeltaStep::Stop => prop_assert!((v_now - v_prev).abs() <= 1e-6),
            DeltaStep::Continue(d) => {
                prop_assert!(d >= 1.0);
                let inside = check_delta_condition(v_now, v_prev, delta).holds;
                prop_assert_eq!(d < delta, inside);
            }
        }
    }

    #[test]
    fn delta_condition_margin_sign(delta in 1.0f64..3.0, v_prev in 0.5f64..1.5, v_now in 0.2f64..3.0) {
        let c = check_delta_condition(v_now, v_prev, delta);
        prop_assert_eq!(c.holds, v_prev / delta <= v_now && v_now <= delta * v_prev);
        prop_assert_eq!(c.holds, c.margin >= 0.0);
    }

    #[test]
    fn three_node_evaluator_matches_line_form(
        v in prop::array::uniform4(0.8f64..1.2),
        p in prop::array::uniform4(-2.0f64..2.0),
        z in prop::array::uniform3(0.001f64..0.1),
    ) {
        // Line buses i, i+1, i+2 with the subscripts written out.
        let (v_i, v_i1) = (v[0], v[1]);
        let (p_i_i1_next, p_i_i1, q_i_i1, p_i1_i2) = (p[0], p[1], p[2], p[3]);
        let (r_i_i1, x_i_i1, r_i1_i2) = (z[0], z[1], z[2]);
        let direct = [
            x_i_i1 - r_i_i1,
            v_i * v_i1 - 4.0 * p_i_i1_next * r_i_i1 * v_i1 - 4.0 * p_i1_i2 * r_i1_i2 * v_i,
            v_i * v_i1 - 4.0 * p_i_i1 * r_i_i1 * v_i1 - 4.0 * p_i1_i2 * r_i1_i2 * v_i,
            v_i - 4.0 * p_i_i1_next * r_i_i1 - 4.0 * p_i_i1 * r_i_i1,
            v_i - 4.0 * p_i_i1_next * r_i_i1 - 2.0 * p_i_i1 * r_i_i1 - 2.0 * p_i_i1 * x_i_i1,
            v_i - 4.0 * p_i_i1 * r_i_i1 - 4.0 * p_i_i1 * x_i_i1,
            v_i - p_i_i1_next * r_i_i1 - p_i1_i2 * r_i1_i2,
            v_i * v_i1 - 4.0 * p_i1_i2 * r_i1_i2 * v_i - 2.0 * p_i_i1 * r_i_i1 * v_i1 - 2.0 * p_i_i1 * x_i_i1 * v_i1,
            v_i1.powi(3) - 4.0 * p_i_i1_next * r_i_i1 * v_i * v_i1 - 2.0 * p_i1_i2 * r_i1_i2 * v_i - 4.0 * p_i_i1_next * r_i_i1,
            v_i - 8.0 * p_i_i1 * r_i_i1,
            v_i - 8.0 * q_i_i1 * x_i_i1,
            v_i - 8.0 * p_i1_i2 * r_i1_i2,
        ];
        let inp = ThreeNodeInputs {
            v_i_prev: v_i, v_j_prev: v_i1, v_j_now: v[2],
            p_ij: p_i_i1, p_ij_next: p_i_i1_next, q_ij: q_i_i1, p_jk: p_i1_i2,
            r_ij: r_i_i1, x_ij: x_i_i1, r_jk: r_i1_i2,
        };
        let shared = three_node_margins(&inp);
        for (a, b) in shared.iter().zip(direct) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let results = check_theorem2(&inp, 1e-6);
        prop_assert_eq!(results.len(), 13);
        for r in &results {
            prop_assert_eq!(r.holds, r.margin >= 0.0);
        }
    }
}

#[test]
fn feeder_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feeder.json");
    let m = generate_tree_feeder(TreeShape::Full { branching: 3, levels: 3 }, &GeneratorConfig::default()).unwrap();
    assert_eq!(m.len(), 13);
    m.save(&path).unwrap();
    assert_eq!(load_feeder(&path).unwrap().to_document(), m.to_document());
}

#[test]
fn certificates_leave_runs_unchanged() {
    let m = generate_line_feeder(6, &GeneratorConfig { seed: 3, spread: 0.3, ..Default::default() }).unwrap();
    let cfg = serde_json::json!({});
    let plain = run_endico(&m, &ProtocolOptions::default()).unwrap();
    let with = run_endico(&m, &ProtocolOptions { record_certificates: true, ..Default::default() }).unwrap();
    assert!(with.traces.iter().all(|t| t.certificates.is_some()));
    assert_eq!(write_trace_csv(&m, &plain, &cfg), write_trace_csv(&m, &with, &cfg));
    for rep in with.traces.iter().filter_map(|t| t.certificates.as_ref()) {
        assert_eq!(rep.recomputed(), *rep);
    }
    let again = run_endico(&m, &ProtocolOptions::default()).unwrap();
    assert_eq!(write_trace_csv(&m, &plain, &cfg), write_trace_csv(&m, &again, &cfg));
}

#[test]
fn light_line_run_keeps_single_step_margin() {
    let m = generate_line_feeder(8, &GeneratorConfig::default()).unwrap();
    let r = run_endico(&m, &ProtocolOptions { record_certificates: true, ..Default::default() }).unwrap();
    for t in &r.traces[1..] {
        assert!(t.certificates.as_ref().unwrap().theorem1_all, "round {}", t.round);
    }
}

#[test]
fn sequential_schedule_on_settled_line() {
    let m = generate_line_feeder(4, &GeneratorConfig::default()).unwrap();
    let opts = ProtocolOptions { tol: 1e-9, ..Default::default() };
    let r = run_endico(&m, &opts).unwrap();
    assert!(r.converged);
    let snaps = snapshots_from_traces(&m, &r.traces, r.v_root_sq);
    match check_theorem3_schedule(&m, &snaps, true, opts.eps_v) {
        Theorem3Summary::Evaluated { schedule, valid } => {
            assert!(valid, "{schedule:?}");
            let t: Vec<usize> = schedule.iter().map(|s| s.1.unwrap()).collect();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
        }
        other => panic!("{other:?}"),
    }
    let short = ProtocolOptions { max_rounds: 1, ..Default::default() };
    let r = run_endico(&m, &short).unwrap();
    let snaps = snapshots_from_traces(&m, &r.traces, r.v_root_sq);
    assert!(!check_theorem3_schedule(&m, &snaps, r.converged, 1e-6).is_valid());
}

#[test]
fn star_feeder_has_no_sequential_schedule() {
    let m = generate_tree_feeder(TreeShape::Full { branching: 4, levels: 2 }, &GeneratorConfig::default()).unwrap();
    let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
    let snaps = snapshots_from_traces(&m, &r.traces, r.v_root_sq);
    assert!(matches!(
        check_theorem3_schedule(&m, &snaps, r.converged, 1e-6),
        Theorem3Summary::NotApplicable { .. }
    ));
}

#[test]
fn central_is_no_worse_than_distributed() {
    for seed in 0..5 {
        let m = generate_line_feeder(4, &GeneratorConfig { seed, spread: 0.3, ..Default::default() }).unwrap();
        let d = run_endico(&m, &ProtocolOptions::default()).unwrap();
        let c = solve_central(&m, Objective::Loss, &CentralOptions::default()).unwrap();
        let obj = d.final_objective();
        assert!(c.objective <= obj + 1e-3 * obj.abs(), "seed {seed}: {} vs {obj}", c.objective);
    }
}

#[test]
fn settle_rounds_grow_with_depth_on_lines() {
    let m = generate_line_feeder(8, &GeneratorConfig { seed: 11, spread: 0.2, ..Default::default() }).unwrap();
    let r = run_endico(&m, &ProtocolOptions::default()).unwrap();
    let map = feeder_opf::coordinator::convergence_round_per_node(&r, 1e-3);
    let by_depth: BTreeMap<usize, usize> = map.iter().map(|(b, t)| (m.depth(*b).unwrap(), *t)).collect();
    let seq: Vec<usize> = by_depth.values().copied().collect();
    assert!(seq.windows(2).all(|w| w[0] <= w[1]), "{seq:?}");
}
