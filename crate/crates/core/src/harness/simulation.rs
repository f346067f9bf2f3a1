// SPDX-License-Identifier: Apache-2.0

//! End-to-end runs: learning warm-up, monitored traffic, attack implantation and response.

use std::collections::BTreeSet;

use log::info;
use serde::{Deserialize, Serialize};

use crate::detection::{merge_verdicts, DetectionConfig, Detector, Verdict, VerdictKind};
use crate::error::{Error, Result};
use crate::harness::metrics::{AttackRecord, ExperimentMetrics, FprPoint, Phase, RestoreRecord};
use crate::harness::scenario::{implant, GroundTruth, ScenarioId, ScenarioSpec};
use crate::harness::traffic::{TrafficConfig, TrafficGen};
use crate::interceptor::{Interceptor, ReplicaSnapshot, DEFAULT_SNAPSHOT_CAPACITY, DEFAULT_SNAPSHOT_INTERVAL};
use crate::netmodel::{DeviceId, FlowMod, SimTime, Tables, Topology};
use crate::normal::{build_normal_model, identify_scanning_regions, NormalModel, ScanningRegion, TimeWindow};
use crate::protection::{
    host_prefixes, restore_from_snapshot, routing_consistency_check, ActionReport, ProtectionEngine, ResponsePolicy,
    RestoreReport, RestoreScope,
};
use crate::sdn::Sdn;
use crate::trajectory::{StoreRole, TrajectoryStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    /// Length of one false-positive-rate window.
    pub fpr_window: SimTime,
    pub region_threshold: f64,
    pub sample_rate: f64,
    /// Consecutive windows whose FPR change stays below `stabilization_epsilon`.
    pub stabilization_windows: usize,
    pub stabilization_epsilon: f64,
    pub max_warmup_windows: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            fpr_window: 20,
            region_threshold: 0.05,
            sample_rate: 0.25,
            stabilization_windows: 5,
            stabilization_epsilon: 0.01,
            max_warmup_windows: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapshotConfig {
    pub capacity: usize,
    pub interval: SimTime,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_SNAPSHOT_CAPACITY,
            interval: DEFAULT_SNAPSHOT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Detection cycle period.
    pub cycle_interval: SimTime,
    /// How long after implantation a correct verdict may take.
    pub attack_deadline: SimTime,
    pub campaign_size: usize,
    pub loss_probability: f64,
    /// Monitored windows after warm-up in an honest run.
    pub monitor_windows: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cycle_interval: 1,
            attack_deadline: 360,
            campaign_size: 25,
            loss_probability: 0.0,
            monitor_windows: 5,
        }
    }
}

/// Everything configurable, loadable from one JSON file. Missing sections take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwardarConfig {
    pub detection: DetectionConfig,
    pub learning: LearningConfig,
    pub traffic: TrafficConfig,
    pub snapshot: SnapshotConfig,
    pub run: RunConfig,
    pub policies: Vec<ResponsePolicy>,
}

impl GwardarConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub windows: usize,
    /// Window index at which the FPR stabilized, if it did.
    pub stabilized_at: Option<usize>,
    pub final_fpr: f64,
}

/// A simulated network with Gwardar attached.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: GwardarConfig,
    pub sdn: Sdn,
    pub interceptor: Interceptor,
    pub actual: TrajectoryStore,
    pub detector: Detector,
    pub regions: Vec<ScanningRegion>,
    pub models: Vec<NormalModel>,
    pub protection: ProtectionEngine,
    pub fpr: Vec<FprPoint>,
    traffic: TrafficGen,
    seed: u64,
    clock: SimTime,
    learning: bool,
}

impl Simulation {
    /// Routes the network through the NOS and takes the first trusted snapshot at time 0.
    pub fn new(topology: Topology, config: GwardarConfig, seed: u64) -> Result<Self> {
        let mut sdn = Sdn::new(topology.clone(), seed);
        sdn.dataplane.set_loss(config.run.loss_probability);
        sdn.install_shortest_paths()?;
        let mut interceptor = Interceptor::new(topology.clone(), config.snapshot.capacity);
        interceptor.sync(sdn.dataplane.channel());
        interceptor.take_snapshot(true, 0);
        Ok(Self {
            traffic: TrafficGen::new(&topology, config.traffic.clone(), seed ^ 0x7AFF1C),
            actual: TrajectoryStore::new(StoreRole::ActualDb, topology),
            detector: Detector::new(config.detection.clone()),
            protection: ProtectionEngine::new(config.policies.clone()),
            regions: Vec::new(),
            models: Vec::new(),
            fpr: Vec::new(),
            config,
            sdn,
            interceptor,
            seed,
            clock: 0,
            learning: false,
        })
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Advances one time unit: traffic, then a detection cycle if one is due, then a snapshot if
    /// one is due. Returns the verdicts issued.
    pub fn step(&mut self) -> Result<Vec<Verdict>> {
        let now = self.clock;
        self.sdn.set_time(now);
        for p in self.traffic.tick(now) {
            let t = self.sdn.dataplane.inject_packet(p.header, p.ingress)?;
            self.actual.record_actual(t)?;
            for replay in self.sdn.dataplane.drain_replays() {
                match self.actual.record_actual(replay) {
                    Ok(()) | Err(Error::DuplicatePacketId(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let mut verdicts = Vec::new();
        if !self.learning && now % self.config.run.cycle_interval.max(1) == 0 {
            verdicts = self
                .detector
                .run_detection_cycle(&mut self.sdn, &mut self.interceptor, &self.actual, &self.models)?;
        }
        if now > 0 && now % self.config.snapshot.interval.max(1) == 0 {
            self.interceptor.sync(self.sdn.dataplane.channel());
            let trusted = self.learning || self.detector.is_quiescent(now);
            self.interceptor.take_snapshot(trusted, now);
        }
        self.clock += 1;
        Ok(verdicts)
    }

    /// Rebuilds regions and normal models over everything recorded so far.
    pub fn rebuild_models(&mut self) -> Result<()> {
        self.interceptor.sync(self.sdn.dataplane.channel());
        if self.actual.is_empty() {
            return Ok(());
        }
        let l = &self.config.learning;
        self.regions = identify_scanning_regions(&self.actual, l.region_threshold, l.sample_rate, self.seed)?;
        let window = TimeWindow::until(self.clock);
        self.models = self
            .regions
            .iter()
            .map(|r| build_normal_model(r, &self.actual, self.interceptor.replica(), window))
            .collect();
        Ok(())
    }

    fn push_fpr(&mut self, phase: Phase, checked: u64, raised: u64) {
        let fpr = if checked == 0 { 0.0 } else { raised as f64 / checked as f64 };
        self.fpr.push(FprPoint {
            window: self.fpr.len(),
            time: self.clock,
            phase,
            checked,
            raised,
            fpr,
        });
    }

    fn stabilized(&self) -> bool {
        let k = self.config.learning.stabilization_windows;
        let eps = self.config.learning.stabilization_epsilon;
        self.fpr.len() > k
            && self.fpr[self.fpr.len() - k - 1..]
                .windows(2)
                .all(|w| (w[1].fpr - w[0].fpr).abs() < eps)
    }

    /// Learning phase. Each window is scored against the models built before it, then the
    /// models are rebuilt. Stops once the FPR stabilizes or the window cap is hit.
    pub fn warm_up(&mut self) -> Result<WarmupReport> {
        self.learning = true;
        let window = self.config.learning.fpr_window.max(1);
        let mut stabilized_at = None;
        for _ in 0..self.config.learning.max_warmup_windows {
            let cursor = self.actual.len();
            for _ in 0..window {
                self.step()?;
            }
            let mut checked = 0;
            let mut raised = 0;
            for t in self.actual.since(cursor) {
                checked += 1;
                if self.detector.classify(&self.models, self.actual.topology(), t).is_some() {
                    raised += 1;
                }
            }
            self.push_fpr(Phase::Warmup, checked, raised);
            self.rebuild_models()?;
            if self.stabilized() {
                stabilized_at = Some(self.fpr.len() - 1);
                break;
            }
        }
        self.learning = false;
        self.detector.fast_forward(&self.actual);
        let final_fpr = self.fpr.last().map_or(0.0, |p| p.fpr);
        info!("warm-up done after {} windows, fpr {final_fpr:.4}", self.fpr.len());
        Ok(WarmupReport {
            windows: self.fpr.len(),
            stabilized_at,
            final_fpr,
        })
    }

    /// Runs `n` monitored windows and records their FPR. Every anomaly counts; callers use this
    /// on honest networks.
    pub fn monitor(&mut self, n: usize) -> Result<Vec<Verdict>> {
        let mut verdicts = Vec::new();
        for _ in 0..n {
            let (c0, r0) = self.detector.counters();
            for _ in 0..self.config.learning.fpr_window.max(1) {
                verdicts.extend(self.step()?);
            }
            let (c1, r1) = self.detector.counters();
            self.push_fpr(Phase::Monitor, c1 - c0, r1 - r0);
        }
        Ok(verdicts)
    }

    pub fn verify_replica(&mut self) -> ReplicaCheck {
        self.interceptor.sync(self.sdn.dataplane.channel());
        self.export_state().verify_replica()
    }

    /// Full restore from the latest trusted snapshot, bypassing response policies.
    pub fn force_restore(&mut self) -> Result<RestoreReport> {
        self.interceptor.sync(self.sdn.dataplane.channel());
        let snap = self.interceptor.latest_trusted_snapshot().ok_or(Error::NoTrustedSnapshot)?;
        let report = restore_from_snapshot(&mut self.sdn, &snap, &RestoreScope::Full)?;
        self.interceptor.sync(self.sdn.dataplane.channel());
        Ok(report)
    }

    /// Returns whether a takeover was active.
    pub fn release_takeover(&mut self) -> bool {
        let was = self.protection.takeover().active;
        self.protection.release_takeover(&mut self.sdn);
        was
    }

    /// Current Gwardar-side and live state, for persistence between CLI invocations.
    pub fn export_state(&self) -> SimulationState {
        SimulationState {
            time: self.clock,
            live: self.sdn.dataplane.snapshot_tables(),
            snapshots: self.interceptor.history().map(|s| (**s).clone()).collect(),
            replica: self.interceptor.replica().tables.clone(),
            topology: self.sdn.topology().to_file(),
            takeover_active: self.protection.takeover().active,
        }
    }
}

fn kind_label(kind: &VerdictKind) -> String {
    let ids = |s: &BTreeSet<DeviceId>| s.iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join(";");
    match kind {
        VerdictKind::MaliciousDevice { device, action } => {
            format!("malicious_device({}:{})", device.0, serde_json::to_value(action).expect("enum").as_str().unwrap_or(""))
        }
        VerdictKind::CompromisedNos { mode, targets } => format!(
            "compromised_nos({}:{})",
            serde_json::to_value(mode).expect("enum").as_str().unwrap_or(""),
            ids(targets)
        ),
        VerdictKind::FalsePositive => "false_positive".into(),
    }
}

/// Result of one attack instance.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub attack: AttackRecord,
    pub restore: Option<RestoreRecord>,
    pub truth: GroundTruth,
    pub verdicts: Vec<Verdict>,
    pub simulation: Simulation,
}

/// Clones a warmed-up simulation, implants `spec`, runs until the merged verdicts match the
/// ground truth or the deadline passes, then applies the protection response.
pub fn run_experiment(base: &Simulation, spec: &ScenarioSpec) -> Result<ExperimentOutcome> {
    let mut sim = base.clone();
    while sim.clock < spec.start_time {
        sim.step()?;
    }
    let implanted_at = sim.clock;
    sim.sdn.set_time(implanted_at);
    let truth = implant(&mut sim.sdn, spec)?;
    sim.interceptor.sync(sim.sdn.dataplane.channel());
    let deadline = implanted_at + sim.config.run.attack_deadline;
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut detected_at = None;
    while sim.clock <= deadline {
        let issued = sim.step()?;
        verdicts.extend(issued.into_iter().filter(|v| !v.is_false_positive()));
        if truth.matches(&merge_verdicts(&verdicts)) {
            detected_at = verdicts.last().map(|v| v.issued_at);
            break;
        }
    }
    let merged = merge_verdicts(&verdicts);
    let correct = truth.matches(&merged);
    let label = merged.iter().map(kind_label).collect::<Vec<_>>().join(" ");
    let restore = match verdicts.last() {
        Some(v) => Some(respond_and_check(&mut sim, v, spec)?),
        None => None,
    };
    let ids = truth.targets().iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join(";");
    Ok(ExperimentOutcome {
        attack: AttackRecord {
            scenario: spec.id,
            seed: spec.seed,
            targets: ids,
            implanted_at,
            detected_at,
            latency: detected_at.map(|d| d - implanted_at),
            verdict: label,
            correct,
        },
        restore,
        truth,
        verdicts,
        simulation: sim,
    })
}

fn respond_and_check(sim: &mut Simulation, verdict: &Verdict, spec: &ScenarioSpec) -> Result<RestoreRecord> {
    let report = match sim.protection.respond(verdict, &mut sim.sdn, &mut sim.interceptor) {
        Ok(r) => r,
        Err(Error::NoTrustedSnapshot) => ActionReport::Skipped,
        Err(e) => return Err(e),
    };
    let topo = sim.sdn.topology().clone();
    let consistent = routing_consistency_check(&sim.sdn.dataplane.snapshot_tables(), &topo, &host_prefixes(&topo)).is_empty();
    let (action, devices, tables_match) = match &report {
        ActionReport::Restored(r) => ("restored", r.devices.len(), r.all_match()),
        ActionReport::TakeoverEngaged(r) => ("takeover", r.devices.len(), r.all_match()),
        ActionReport::InstalledRules { count } => ("installed_rules", *count, true),
        ActionReport::Skipped => ("skipped", 0, false),
    };
    Ok(RestoreRecord {
        scenario: spec.id,
        seed: spec.seed,
        action: action.into(),
        devices,
        tables_match,
        consistent,
    })
}

/// Scenario specs for a campaign: ids assigned round-robin, seeds derived from `seed`.
pub fn campaign_specs(count: usize, seed: u64, start_time: SimTime) -> Vec<ScenarioSpec> {
    (0..count)
        .map(|i| ScenarioSpec {
            start_time,
            ..ScenarioSpec::new(ScenarioId::ALL[i % ScenarioId::ALL.len()], seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Runs every spec from the same warmed-up base.
pub fn run_campaign(base: &Simulation, specs: &[ScenarioSpec]) -> Result<ExperimentMetrics> {
    let mut metrics = ExperimentMetrics {
        fpr_timeline: base.fpr.clone(),
        ..ExperimentMetrics::default()
    };
    for spec in specs {
        let out = run_experiment(base, spec)?;
        info!("{} seed {}: correct={} verdict={}", spec.id, spec.seed, out.attack.correct, out.attack.verdict);
        metrics.attacks.push(out.attack);
        metrics.restore_checks.extend(out.restore);
    }
    Ok(metrics)
}

/// Persisted view of a run for operator commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationState {
    pub time: SimTime,
    pub topology: crate::netmodel::TopologyFile,
    pub live: Tables,
    pub replica: Tables,
    pub snapshots: Vec<ReplicaSnapshot>,
    pub takeover_active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaCheck {
    pub equal: bool,
    pub differing_devices: Vec<DeviceId>,
}

impl SimulationState {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    /// Compares the intercepted replica with the live tables device by device.
    pub fn verify_replica(&self) -> ReplicaCheck {
        let devices: BTreeSet<DeviceId> = self.live.keys().chain(self.replica.keys()).copied().collect();
        let differing_devices: Vec<DeviceId> = devices
            .into_iter()
            .filter(|d| self.live.get(d).filter(|t| !t.is_empty()) != self.replica.get(d).filter(|t| !t.is_empty()))
            .collect();
        ReplicaCheck {
            equal: differing_devices.is_empty(),
            differing_devices,
        }
    }

    /// Full restore of the live tables from the latest trusted snapshot.
    pub fn force_restore(&mut self) -> Result<RestoreReport> {
        let snap = self
            .snapshots
            .iter()
            .rev()
            .find(|s| s.trusted)
            .cloned()
            .ok_or(Error::NoTrustedSnapshot)?;
        let topology = Topology::from_file(&self.topology)?;
        let mut sdn = Sdn::new(topology, 0);
        let mods: Vec<FlowMod> = self
            .live
            .iter()
            .flat_map(|(d, t)| t.rules().iter().map(move |r| FlowMod::add(*d, r.clone())))
            .collect();
        sdn.send_direct(&mods);
        let report = restore_from_snapshot(&mut sdn, &snap, &RestoreScope::Full)?;
        self.live = sdn.dataplane.snapshot_tables();
        self.replica = self.live.clone();
        Ok(report)
    }

    /// Returns whether a takeover was active.
    pub fn release_takeover(&mut self) -> bool {
        std::mem::replace(&mut self.takeover_active, false)
    }
}
