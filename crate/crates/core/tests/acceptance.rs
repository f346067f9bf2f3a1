// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria. Prints one PASS or FAIL line per criterion and exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use gwardar::controller::PriorityClass;
use gwardar::dataplane::Terminal;
use gwardar::detection::{AttackAction, VerdictKind};
use gwardar::harness::{
    campaign_specs, generate_topology, run_experiment, GwardarConfig, RunConfig, Simulation, TopologyKind,
    WarmupReport,
};
use gwardar::interceptor::{ReplicaSnapshot, VirtualReplica};
use gwardar::netmodel::{
    Action, CookieNamespace, DeviceId, FlowMod, FlowModCommand, FlowRule, FlowTable, HeaderField, HeaderSpace,
    Ipv4Prefix, Topology,
};
use gwardar::normal::{build_normal_model, TimeWindow};
use gwardar::protection::{host_prefixes, restore_from_snapshot, routing_consistency_check, HoleKind, RestoreScope};
use gwardar::southbound::Origin;
use gwardar::trajectory::expected_trajectory;

const SEED: u64 = 1;

type Verdict = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Verdict {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn base54() -> &'static (Simulation, WarmupReport) {
    static BASE: OnceLock<(Simulation, WarmupReport)> = OnceLock::new();
    BASE.get_or_init(|| {
        let topo = generate_topology(&TopologyKind::Random { n: 54, degree: 3 }, SEED, None).unwrap();
        let mut sim = Simulation::new(topo, GwardarConfig::default(), SEED).unwrap();
        let report = sim.warm_up().unwrap();
        (sim, report)
    })
}

struct CampaignRun {
    correct: usize,
    total: usize,
    wrong: Vec<String>,
    nos_inspections: usize,
    order_violations: Vec<String>,
}

fn campaign() -> &'static CampaignRun {
    static RUN: OnceLock<CampaignRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (base, _) = base54();
        let specs = campaign_specs(25, SEED, base.now());
        let mut run = CampaignRun {
            correct: 0,
            total: specs.len(),
            wrong: Vec::new(),
            nos_inspections: 0,
            order_violations: Vec::new(),
        };
        for spec in &specs {
            let out = run_experiment(base, spec).unwrap();
            if out.attack.correct {
                run.correct += 1;
            } else {
                run.wrong.push(format!("{} seed {} -> {}", spec.id, spec.seed, out.attack.verdict));
            }
            let det = &out.simulation.detector;
            match common::phase_order_holds(det.events(), det.config.recurrence_threshold) {
                Ok(n) => run.nos_inspections += n,
                Err(e) => run.order_violations.push(format!("{} seed {}: {e}", spec.id, spec.seed)),
            }
        }
        run
    })
}

fn detection_completeness() -> Verdict {
    let run = campaign();
    check(
        run.correct == run.total && run.total == 25,
        format!("{}/{} attacks correctly attributed", run.correct, run.total),
        format!("{}/{} correct; wrong: {:?}", run.correct, run.total, run.wrong),
    )
}

fn false_positive_decay() -> Verdict {
    let (base, report) = base54();
    let mut sim = base.clone();
    sim.monitor(10).unwrap();
    let fpr: Vec<f64> = sim.fpr.iter().map(|p| p.fpr).collect();
    let Some(stable) = report.stabilized_at else {
        return Err(format!("warm-up never stabilized: {fpr:?}"));
    };
    let after = &fpr[stable..];
    let worst = after.iter().copied().fold(0.0, f64::max);
    let smoothed: Vec<f64> = fpr.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let rises: Vec<usize> = smoothed
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, _)| i + 1)
        .collect();
    check(
        worst <= 0.05 && rises.is_empty(),
        format!(
            "stabilized at window {stable}; max fpr afterwards {worst:.4} over {} windows; smoothed series non-increasing",
            after.len()
        ),
        format!("max fpr after window {stable}: {worst:.4}; smoothed rises at {rises:?}; series {fpr:?}"),
    )
}

fn replica_fidelity() -> Verdict {
    let topo = common::random_topology(10, 3, SEED);
    let (mut sdn, mut icp) = common::routed(topo.clone(), SEED);
    let mut r = common::rng(SEED);
    let mut prefixes: Vec<Ipv4Prefix> = host_prefixes(&topo);
    prefixes.extend(host_prefixes(&topo).iter().map(|p| Ipv4Prefix::new(p.network(), p.len() + 2).unwrap()));
    prefixes.push(Ipv4Prefix::ANY);
    for i in 0..1000u64 {
        sdn.set_time(i);
        let d = DeviceId(r.gen_range(0..topo.num_devices() as u32));
        let dst = prefixes[r.gen_range(0..prefixes.len())];
        let port = r.gen_range(1..=topo.port_count(d).unwrap());
        let mut actions = Vec::new();
        if r.gen_bool(0.2) {
            actions.push(Action::Rewrite {
                field: HeaderField::DstPort,
                value: r.gen_range(0..1024),
            });
        }
        actions.push(if r.gen_bool(0.1) { Action::Drop } else { Action::Forward(port) });
        let rule = FlowRule {
            match_: HeaderSpace::dst(dst),
            priority: r.gen_range(1000..1040),
            actions,
            cookie: CookieNamespace::Controller.tag(i),
            install_time: i,
        };
        let command = match r.gen_range(0..10) {
            0 => FlowModCommand::Delete,
            1 | 2 => FlowModCommand::DeleteStrict,
            3 | 4 => FlowModCommand::Modify,
            _ => FlowModCommand::Add,
        };
        sdn.dataplane.apply_flow_mod(&FlowMod { device: d, command, rule }, Origin::Controller).unwrap();
        if i % 97 == 0 {
            icp.sync(sdn.dataplane.channel());
        }
    }
    icp.sync(sdn.dataplane.channel());
    let live = sdn.dataplane.snapshot_tables();
    let empty = FlowTable::new();
    let differing: Vec<DeviceId> = topo
        .device_ids()
        .filter(|d| icp.replica().table(*d).unwrap_or(&empty) != live.get(d).unwrap_or(&empty))
        .collect();
    let rules: usize = live.values().map(FlowTable::len).sum();
    check(
        differing.is_empty(),
        format!("1000 FlowMods applied; {rules} live rules on {} devices match the replica exactly", topo.num_devices()),
        format!("replica differs on {differing:?}"),
    )
}

fn small_topologies() -> Vec<(String, Topology)> {
    let mut out = Vec::new();
    for n in 2..=10u32 {
        out.push((format!("line{n}"), generate_topology(&TopologyKind::Line(n), 0, None).unwrap()));
        if n >= 3 {
            out.push((format!("ring{n}"), generate_topology(&TopologyKind::Ring(n), 0, None).unwrap()));
        }
        if n >= 4 {
            for seed in 0..3 {
                out.push((format!("random{n}s{seed}"), common::random_topology(n as usize, 3, seed)));
            }
        }
    }
    out
}

fn expected_trajectory_oracle() -> Verdict {
    let mut mismatches = Vec::new();
    let topos = small_topologies();
    for (i, (name, topo)) in topos.iter().enumerate() {
        let (mut sdn, mut icp) = common::routed(topo.clone(), i as u64);
        let mut r = common::rng(i as u64);
        // Extra rules so drops, detours, loops and rewrites all show up.
        for k in 0..12 {
            let d = DeviceId(r.gen_range(0..topo.num_devices() as u32));
            let host = &topo.hosts()[r.gen_range(0..topo.hosts().len())];
            let port = r.gen_range(1..=topo.port_count(d).unwrap());
            let actions = match r.gen_range(0..3) {
                0 => vec![Action::Drop],
                1 => vec![Action::Forward(port)],
                _ => vec![
                    Action::Rewrite {
                        field: HeaderField::SrcPort,
                        value: k,
                    },
                    Action::Forward(port),
                ],
            };
            let rule = FlowRule {
                match_: HeaderSpace::dst(host.prefix),
                priority: 3000 + r.gen_range(0..3),
                actions,
                cookie: 1,
                install_time: 0,
            };
            sdn.send_direct(&[FlowMod::add(d, rule)]);
        }
        icp.sync(sdn.dataplane.channel());
        let wiring = common::Wiring::of(topo);
        for id in 0..200 {
            let (h, ing) = common::random_header(topo, &mut r, id + 1);
            let t = expected_trajectory(icp.replica(), h, ing).unwrap();
            let (hops, term) = common::walk(&icp.replica().tables, &wiring, h, ing);
            if !common::same_as_oracle(&t, &hops, term) {
                mismatches.push(format!("{name} header {id}"));
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("{} topologies x 200 headers agree with the per-hop interpreter", topos.len()),
        format!("{} mismatches, first {:?}", mismatches.len(), mismatches.first()),
    )
}

fn algorithm1_equivalence() -> Verdict {
    let mut instances = 0;
    let mut bad = Vec::new();
    for seed in 0..24 {
        let (store, replica, regions) = common::normal_instance(seed);
        assert!(store.topology().num_devices() <= 12);
        for window in [TimeWindow::until(100), TimeWindow::new(5, 12).unwrap()] {
            for region in &regions {
                let model = build_normal_model(region, &store, &replica, window);
                if common::model_sets(&model) != common::algorithm1(region, &store, &replica.tables, window) {
                    bad.push((seed, region.id));
                }
            }
        }
        instances += 1;
    }
    check(
        bad.is_empty() && instances >= 20,
        format!("{instances} seeded instances, every region and window equal to the transcription"),
        format!("differs on (seed, region) {bad:?}"),
    )
}

fn scramble(sdn: &mut gwardar::sdn::Sdn, topo: &Topology, seed: u64) {
    let mut r = common::rng(seed);
    for _ in 0..8 {
        let d = DeviceId(r.gen_range(0..topo.num_devices() as u32));
        let m = match r.gen_range(0..3) {
            0 => FlowMod::delete_all(d),
            1 => FlowMod::add(d, FlowRule::drop(HeaderSpace::universal(), r.gen_range(1..3000), 0)),
            _ => {
                let dst = topo.hosts()[r.gen_range(0..topo.hosts().len())].prefix;
                FlowMod::add(d, FlowRule::forward(HeaderSpace::dst(dst), 5000, r.gen_range(1..=topo.port_count(d).unwrap()), 0))
            }
        };
        sdn.send_direct(&[m]);
    }
}

fn restoration() -> Verdict {
    let non_empty = |t: &gwardar::netmodel::Tables| -> gwardar::netmodel::Tables {
        t.iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (*k, v.clone())).collect()
    };
    let mut problems = Vec::new();
    let runs = 20;
    for seed in 0..runs {
        let topo = common::random_topology(6 + seed as usize % 7, 3, seed);
        let prefixes = host_prefixes(&topo);
        let (mut sdn, mut icp) = common::routed(topo.clone(), seed);
        let snap = icp.take_snapshot(true, 0);
        scramble(&mut sdn, &topo, seed);
        let first = restore_from_snapshot(&mut sdn, &snap, &RestoreScope::Full).unwrap();
        let once = sdn.dataplane.snapshot_tables();
        let second = restore_from_snapshot(&mut sdn, &snap, &RestoreScope::Full).unwrap();
        if !first.all_match() || non_empty(&once) != non_empty(snap.tables()) {
            problems.push(format!("seed {seed}: not exact"));
        }
        if second != first || sdn.dataplane.snapshot_tables() != once {
            problems.push(format!("seed {seed}: not idempotent"));
        }
        if !routing_consistency_check(&once, &topo, &prefixes).is_empty()
            || !common::consistency_oracle(&once, &topo, &prefixes).is_empty()
        {
            problems.push(format!("seed {seed}: inconsistent after restore"));
        }
    }

    // Mixed epochs: the transit device from a drained epoch, everything else from before.
    let topo = common::transit_ring();
    let prefixes = host_prefixes(&topo);
    let (mut sdn, _) = common::routed(topo.clone(), 0);
    let drained = common::routes_avoiding(&topo, &BTreeSet::from([DeviceId(2)]));
    let snap = ReplicaSnapshot {
        replica: VirtualReplica::from_tables(topo.clone(), drained),
        taken_at: 1,
        trusted: true,
    };
    restore_from_snapshot(&mut sdn, &snap, &RestoreScope::Devices(BTreeSet::from([DeviceId(2)]))).unwrap();
    let findings = routing_consistency_check(&sdn.dataplane.snapshot_tables(), &topo, &prefixes);
    let holes: Vec<_> = findings.iter().filter(|f| f.kind == HoleKind::BlackHole).collect();
    if holes.is_empty() {
        problems.push("mixed-epoch partial restore produced no black hole".into());
    }
    check(
        problems.is_empty(),
        format!(
            "{runs} full restores exact, idempotent and consistent; mixed-epoch partial restore gives {} black-hole findings",
            holes.len()
        ),
        format!("{problems:?}"),
    )
}

fn phase_order() -> Verdict {
    let run = campaign();
    check(
        run.order_violations.is_empty() && run.nos_inspections > 0,
        format!("{} NOS inspections across {} scenarios, all after escalate or recurrence", run.nos_inspections, run.total),
        format!("violations {:?}, NOS inspections {}", run.order_violations, run.nos_inspections),
    )
}

fn takeover_isolation() -> Verdict {
    let (base, _) = base54();
    let mut sim = base.clone();
    let snap = sim.interceptor.latest_trusted_snapshot().unwrap();
    sim.protection.engage_takeover(&mut sim.sdn, snap).unwrap();
    let frozen = sim.sdn.dataplane.snapshot_tables();
    let blocked = sim.sdn.blocked_count();
    let topo = sim.sdn.topology().clone();
    let mut r = common::rng(SEED);
    let mut reached = 0;
    for i in 0..100u32 {
        let d = DeviceId(r.gen_range(0..topo.num_devices() as u32));
        let dst = topo.hosts()[r.gen_range(0..topo.hosts().len())].prefix;
        let rule = FlowRule::forward(HeaderSpace::dst(dst), 2000 + i, 1, CookieNamespace::Controller.tag(i.into()));
        reached += sim.sdn.submit_policy(vec![(d, rule)], PriorityClass::Normal);
    }
    let unchanged = sim.sdn.dataplane.snapshot_tables() == frozen;
    let dropped = sim.sdn.blocked_count() - blocked;
    check(
        unchanged && reached == 0 && dropped == 100,
        "100 submissions under takeover, 0 live-table changes".into(),
        format!("reached {reached}, blocked {dropped}, tables unchanged: {unchanged}"),
    )
}

fn loss_robustness() -> Verdict {
    let topo = generate_topology(&TopologyKind::Random { n: 54, degree: 3 }, SEED, None).unwrap();
    let config = GwardarConfig {
        run: RunConfig {
            loss_probability: 0.01,
            ..RunConfig::default()
        },
        ..GwardarConfig::default()
    };
    let mut sim = Simulation::new(topo, config, SEED).unwrap();
    sim.warm_up().unwrap();
    let start = sim.actual.len();
    let mut verdicts = Vec::new();
    while sim.actual.len() - start < 10_000 {
        verdicts.extend(sim.step().unwrap());
    }
    let packets = sim.actual.len() - start;
    let lost = sim.actual.iter().skip(start).filter(|t| t.terminal == Terminal::Dropped).count();
    let drops = verdicts
        .iter()
        .filter(|v| matches!(v.kind, VerdictKind::MaliciousDevice { action: AttackAction::Drop, .. }))
        .count();
    check(
        drops == 0 && lost > 0,
        format!("{packets} packets, {lost} lost in transit, 0 Drop verdicts (min probes {})", sim.config.detection.min_probes),
        format!("{drops} Drop verdicts over {packets} packets ({lost} lost)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 detection completeness", detection_completeness),
        ("2 false-positive decay", false_positive_decay),
        ("3 replica fidelity", replica_fidelity),
        ("4 expected-trajectory oracle", expected_trajectory_oracle),
        ("5 normal-model transcription", algorithm1_equivalence),
        ("6 restoration", restoration),
        ("7 phase order", phase_order),
        ("8 takeover isolation", takeover_isolation),
        ("9 loss robustness", loss_robustness),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
