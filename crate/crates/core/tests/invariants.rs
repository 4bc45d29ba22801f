use std::collections::HashMap;

use pilotsim::metrics::{ttc, ttc_ideal, EntityKind, Trace};
use pilotsim::pilot::BindingMode;
use pilotsim::resource::{QueueModel, Site};
use pilotsim::simulator::{run, RunResult, SimConfig};
use pilotsim::strategy::{plan_fixed, ExecutionPlan, FixedShape, PlanOverheads};
use pilotsim::workload::{make_bot, Workload};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Scenario {
    n: usize,
    duration_s: f64,
    cores_per_task: u32,
    sites: usize,
    pilots_per_site: u32,
    cores_per_pilot: u32,
    early: bool,
    mu: f64,
    seed: u64,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (1usize..40, 10.0f64..500.0, 1u32..3, 1usize..4, 1u32..3, 2u32..17, any::<bool>(), 2.0f64..7.0, any::<u64>()).prop_map(
        |(n, duration_s, cores_per_task, sites, pilots_per_site, cores_per_pilot, early, mu, seed)| Scenario {
            n,
            duration_s,
            cores_per_task,
            sites,
            pilots_per_site,
            cores_per_pilot,
            early,
            mu,
            seed,
        },
    )
}

fn setup(s: &Scenario) -> (Workload, Vec<Site>, ExecutionPlan, SimConfig) {
    let w = make_bot(s.n, s.duration_s, s.cores_per_task).unwrap();
    let sites: Vec<Site> = (0..s.sites)
        .map(|i| Site {
            queue: QueueModel::lognormal(s.mu + i as f64, 0.8).with_seed_offset(i as u64),
            ..Site::idle(format!("site{i}"), 256)
        })
        .collect();
    let cfg = SimConfig {
        seed: s.seed,
        ..SimConfig::default()
    };
    let overheads = PlanOverheads {
        bootstrap_s: cfg.bootstrap_s,
        shutdown_s: cfg.shutdown_s,
        unit_margin_s: cfg.unit_margin(&w, &sites),
    };
    // Enough walltime for every task to run back to back on one pilot.
    let walltime = s.n as f64 * (s.duration_s + overheads.unit_margin_s) + 2.0 * cfg.bootstrap_s + 60.0;
    let shape = FixedShape {
        pilots_per_site: s.pilots_per_site,
        cores_per_pilot: s.cores_per_pilot,
        walltime_s: walltime,
    };
    let binding = if s.early { BindingMode::EarlyToResource } else { BindingMode::LateToPilot };
    let plan = plan_fixed(&w, &sites, shape, binding, overheads).unwrap();
    (w, sites, plan, cfg)
}

fn simulate(s: &Scenario) -> (Workload, ExecutionPlan, RunResult) {
    let (w, sites, plan, cfg) = setup(s);
    let r = run(&plan, &w, &sites, &cfg).unwrap();
    (w, plan, r)
}

/// Last-attempt timestamps per unit, keyed by state.
fn unit_times(trace: &Trace) -> HashMap<&str, (HashMap<&str, f64>, Option<&str>)> {
    let mut out: HashMap<&str, (HashMap<&str, f64>, Option<&str>)> = HashMap::new();
    for r in trace.records.iter().filter(|r| r.entity_kind == EntityKind::Unit) {
        let e = out.entry(&r.entity_id).or_default();
        if r.state == "new" {
            e.0.clear();
        }
        e.0.insert(&r.state, r.time_s);
        if r.bound_to.is_some() {
            e.1 = r.bound_to.as_deref();
        }
    }
    out
}

fn pilot_times(trace: &Trace) -> HashMap<&str, HashMap<&str, f64>> {
    let mut out: HashMap<&str, HashMap<&str, f64>> = HashMap::new();
    for r in trace.records.iter().filter(|r| r.entity_kind == EntityKind::Pilot) {
        out.entry(&r.entity_id).or_default().insert(&r.state, r.time_s);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_unit_runs_once_for_its_duration(s in scenario()) {
        let (w, _, r) = simulate(&s);
        prop_assert!(r.completed(), "{:?}", r.unschedulable);
        let units = unit_times(&r.trace);
        prop_assert_eq!(units.len(), w.len());
        let mut busy = 0.0;
        for task in w.tasks() {
            let (t, _) = &units[task.id.as_str()];
            let start = t["executing"];
            let end = t.get("staging_output").or(t.get("done")).copied().unwrap();
            prop_assert!(((end - start) - task.duration_s).abs() < 1e-6);
            busy += (end - start) * f64::from(task.cores);
        }
        prop_assert!((busy - w.total_core_seconds()).abs() < 1e-6 * busy.max(1.0));
    }

    #[test]
    fn causality_and_capacity(s in scenario()) {
        let (_, plan, r) = simulate(&s);
        prop_assert!(r.completed(), "{:?}", r.unschedulable);
        let pilots = pilot_times(&r.trace);
        let units = unit_times(&r.trace);
        let mut per_pilot: HashMap<&str, Vec<(f64, f64, u32)>> = HashMap::new();
        for task_id in units.keys() {
            let (t, pilot) = &units[task_id];
            let pilot = pilot.expect("completed units are bound");
            let order = ["new", "scheduled", "staging_input", "executing", "staging_output", "done"];
            let stamps: Vec<f64> = order.iter().filter_map(|k| t.get(k).copied()).collect();
            prop_assert!(stamps.windows(2).all(|p| p[0] <= p[1]), "{task_id} out of order");
            let p = &pilots[pilot];
            prop_assert!(t["executing"] >= p["ready"] - 1e-9, "{task_id} ran before {pilot} was ready");
            prop_assert!(p["active"] >= p["queued"]);
            let end = t["done"];
            let cores = s.cores_per_task;
            per_pilot.entry(pilot).or_default().push((t["executing"], end, cores));
        }
        // Concurrent cores on a pilot never exceed its size.
        for (pilot, spans) in per_pilot {
            let idx: usize = pilot.trim_start_matches("pilot.").parse().unwrap();
            let cap = plan.pilot_descriptions[idx].cores;
            for &(start, _, _) in &spans {
                let load: u32 = spans.iter().filter(|(a, b, _)| *a <= start && start < *b).map(|x| x.2).sum();
                prop_assert!(load <= cap, "{pilot} runs {load} cores at {start}, has {cap}");
            }
        }
    }

    #[test]
    fn breakdown_adds_up_and_respects_ideal(s in scenario()) {
        let (w, plan, r) = simulate(&s);
        prop_assert!(r.completed(), "{:?}", r.unschedulable);
        let b = ttc(&r.trace).unwrap();
        let sum: f64 = b.components.values().iter().sum();
        prop_assert!((sum - b.ttc_s).abs() < 1e-6);
        prop_assert!((b.tw_s - b.components.waiting()).abs() < 1e-6);
        prop_assert!((b.tx_s - b.components.executing()).abs() < 1e-6);
        prop_assert!((b.tx_s + b.tw_s - b.ttc_s).abs() < 1e-6);
        prop_assert!(b.components.values().iter().all(|v| *v >= -1e-9));
        prop_assert!(b.ttc_s >= ttc_ideal(&plan, &w).unwrap() - 1e-6);
    }

    #[test]
    fn replays_are_identical(s in scenario()) {
        let (_, _, a) = simulate(&s);
        let (_, _, b) = simulate(&s);
        prop_assert_eq!(a.trace.hash(), b.trace.hash());
        let back = Trace::read_ndjson(a.trace.to_ndjson().as_bytes()).unwrap();
        prop_assert_eq!(back.hash(), a.trace.hash());
        if a.completed() {
            prop_assert_eq!(ttc(&back).unwrap(), ttc(&a.trace).unwrap());
        }
    }
}
