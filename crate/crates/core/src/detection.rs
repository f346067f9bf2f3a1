// SPDX-License-Identifier: Apache-2.0

//! Anomaly detection against the normal model, data-plane inspection by probe comparison, and
//! NOS inspection through fix rules.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::controller::{PriorityClass, GWARDAR_PRIORITY_BASE};
use crate::dataplane::{Terminal, Trajectory};
use crate::error::Result;
use crate::interceptor::{Interceptor, ReplicaSnapshot, VirtualReplica};
use crate::netmodel::{
    CookieNamespace, DeviceId, Endpoint, FlowMod, FlowModCommand, FlowRule, PacketHeader, PortNo,
    SimTime, Tables, Topology,
};
use crate::normal::{check_models, NormalCheck, NormalModel, UnknownClassPolicy};
use crate::sdn::Sdn;
use crate::trajectory::{expected_trajectory_at, same_path, HeaderClass, ReplayEvidence, TrajectoryStore};

/// Probe packet ids live in their own range so they never collide with traffic.
pub const PROBE_ID_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Recurrences of one anomaly before the NOS is inspected without a device culprit.
    pub recurrence_threshold: u32,
    /// Simulated time allowed for submitted fix rules to show up southbound.
    pub inspection_deadline: SimTime,
    pub probes_per_inspection: usize,
    /// Minimum probe trajectories before any device is accused.
    pub min_probes: usize,
    /// Divergence frequency a device must exceed to be accused.
    pub loss_tolerance: f64,
    pub unknown_class: UnknownClassPolicy,
    /// Open anomalies older than this are considered resolved.
    pub anomaly_ttl: SimTime,
    pub fix_rule_ttl: SimTime,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            recurrence_threshold: 2,
            inspection_deadline: 10,
            probes_per_inspection: 20,
            min_probes: 5,
            loss_tolerance: 0.25,
            unknown_class: UnknownClassPolicy::NotNormal,
            anomaly_ttl: 50,
            fix_rule_ttl: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackAction {
    Drop,
    Replay,
    Misroute,
    Modify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NosMismatch {
    RuleMismatch,
    ViewMismatch,
    Both,
}

impl NosMismatch {
    pub fn merge(self, other: NosMismatch) -> NosMismatch {
        if self == other {
            self
        } else {
            NosMismatch::Both
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerdictKind {
    MaliciousDevice { device: DeviceId, action: AttackAction },
    CompromisedNos { mode: NosMismatch, targets: BTreeSet<DeviceId> },
    FalsePositive,
}

impl VerdictKind {
    pub fn targets(&self) -> BTreeSet<DeviceId> {
        match self {
            VerdictKind::MaliciousDevice { device, .. } => BTreeSet::from([*device]),
            VerdictKind::CompromisedNos { targets, .. } => targets.clone(),
            VerdictKind::FalsePositive => BTreeSet::new(),
        }
    }
}

/// Expected-versus-actual artifacts backing a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    /// First probe hop where actual and expected part ways.
    Divergence {
        device: DeviceId,
        action: AttackAction,
        expected_out: Option<PortNo>,
        actual_out: Option<PortNo>,
        expected_header: Box<PacketHeader>,
        actual_header: Box<PacketHeader>,
        hits: usize,
        probes: usize,
    },
    /// A rule from the NOS explains the anomalous path.
    ControllerRule { device: DeviceId, rule: FlowRule },
    InjectedRule { device: DeviceId, rule: FlowRule },
    /// Submitted fix rule never seen southbound before the deadline.
    FlowModTimeout { device: DeviceId, deadline: SimTime },
    ViewOmits { device: DeviceId, rule: FlowRule },
    AnomalyPersisted { packet_id: u64 },
    NoFixPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(flatten)]
    pub kind: VerdictKind,
    pub class: HeaderClass,
    pub evidence: Vec<Evidence>,
    pub issued_at: SimTime,
}

impl Verdict {
    pub fn is_false_positive(&self) -> bool {
        self.kind == VerdictKind::FalsePositive
    }

    /// Earliest install time among the NOS rules named in the evidence.
    pub fn attack_install_time(&self) -> Option<SimTime> {
        self.evidence
            .iter()
            .filter_map(|e| match e {
                Evidence::ControllerRule { rule, .. } => Some(rule.install_time),
                _ => None,
            })
            .min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyReason {
    NotNormal,
    UnknownClass,
    Dropped,
    Looped,
    Misdelivered,
    Replay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anomaly {
    pub class: HeaderClass,
    pub trajectory: Trajectory,
    pub offending_devices: BTreeSet<DeviceId>,
    pub reasons: BTreeSet<AnomalyReason>,
    pub detected_at: SimTime,
    pub recurrence_count: u32,
}

impl Anomaly {
    pub fn key(&self) -> (HeaderClass, BTreeSet<DeviceId>) {
        (self.class, self.offending_devices.clone())
    }

    fn only_unknown_class(&self) -> bool {
        self.reasons.iter().all(|r| *r == AnomalyReason::UnknownClass)
    }
}

/// Gwardar-priority rule steering one class along its normal path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRule {
    pub device: DeviceId,
    pub rule: FlowRule,
    pub target_class: HeaderClass,
    pub ttl: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataPlaneOutcome {
    Verdict(Verdict),
    /// Every divergence is explained by rules the NOS installed.
    Escalate(Vec<Evidence>),
    /// Probes match the replica and the anomaly is a first-seen class.
    Clear,
    Inconclusive,
}

impl DataPlaneOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            DataPlaneOutcome::Verdict(_) => "verdict",
            DataPlaneOutcome::Escalate(_) => "escalate",
            DataPlaneOutcome::Clear => "clear",
            DataPlaneOutcome::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NosInspectionReason {
    Escalate,
    Recurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DetectionEvent {
    AnomalyRaised {
        time: SimTime,
        anomaly_id: u64,
        packet_id: u64,
        class: HeaderClass,
        offending: BTreeSet<DeviceId>,
        recurrence_count: u32,
    },
    DataPlaneInspected {
        time: SimTime,
        anomaly_id: u64,
        outcome: String,
    },
    NosInspected {
        time: SimTime,
        anomaly_id: u64,
        reason: NosInspectionReason,
        recurrence_count: u32,
    },
    VerdictIssued {
        time: SimTime,
        anomaly_id: u64,
        verdict: Verdict,
    },
}

/// Hop-level comparison of one probe against its expected trajectory.
fn first_divergence(actual: &Trajectory, expected: &Trajectory, replays: &[Trajectory]) -> Option<Evidence> {
    let evidence = |i: usize, action: AttackAction, device: DeviceId| {
        let a = &actual.hops[i];
        let e = &expected.hops[i];
        Evidence::Divergence {
            device,
            action,
            expected_out: e.out_port,
            actual_out: a.out_port,
            expected_header: Box::new(e.observed_header),
            actual_header: Box::new(a.observed_header),
            hits: 1,
            probes: 1,
        }
    };
    if let Some(origin) = replays.first().and_then(|r| r.hops.first()) {
        let a = actual.hops.iter().find(|h| h.device == origin.device).unwrap_or(origin);
        return Some(Evidence::Divergence {
            device: origin.device,
            action: AttackAction::Replay,
            expected_out: a.out_port,
            actual_out: a.out_port,
            expected_header: Box::new(a.observed_header),
            actual_header: Box::new(origin.observed_header),
            hits: 1,
            probes: 1,
        });
    }
    for i in 0..actual.hops.len().min(expected.hops.len()) {
        let a = &actual.hops[i];
        let e = &expected.hops[i];
        if i > 0 && a.observed_header != e.observed_header {
            let prev = actual.hops[i - 1].device;
            return Some(evidence(i, AttackAction::Modify, prev));
        }
        if a.out_port != e.out_port {
            let action = if a.out_port.is_none() {
                AttackAction::Drop
            } else {
                AttackAction::Misroute
            };
            return Some(evidence(i, action, a.device));
        }
    }
    None
}

/// Rules the replica would apply along `trajectory`.
fn rules_along(replica: &VirtualReplica, trajectory: &Trajectory) -> Vec<(DeviceId, Option<FlowRule>)> {
    trajectory
        .hops
        .iter()
        .map(|h| {
            let rule = replica
                .table(h.device)
                .and_then(|t| t.lookup(&h.observed_header))
                .cloned();
            (h.device, rule)
        })
        .collect()
}

/// Bookkeeping for the detection phases. One cycle runs at a time.
#[derive(Debug, Clone, Default)]
pub struct Detector {
    pub config: DetectionConfig,
    recurrence: HashMap<(HeaderClass, BTreeSet<DeviceId>), u32>,
    settled: HashMap<(HeaderClass, BTreeSet<DeviceId>), VerdictKind>,
    learned: BTreeMap<HeaderClass, BTreeSet<DeviceId>>,
    open: VecDeque<(u64, SimTime)>,
    events: Vec<DetectionEvent>,
    verdicts: Vec<Verdict>,
    cursor: usize,
    replay_cursor: usize,
    next_probe: u64,
    next_anomaly: u64,
    checked: u64,
    raised: u64,
}

impl Detector {
    pub fn new(config: DetectionConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.events
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    /// Trajectories examined and anomalies raised so far.
    pub fn counters(&self) -> (u64, u64) {
        (self.checked, self.raised)
    }

    /// No anomaly is open at `now`.
    pub fn is_quiescent(&self, now: SimTime) -> bool {
        self.open.iter().all(|&(_, until)| until <= now)
    }

    /// Skips every trajectory already in `store` so the next cycle only sees new ones.
    pub fn fast_forward(&mut self, store: &TrajectoryStore) {
        self.cursor = store.len();
        self.replay_cursor = store.replay_evidence().len();
    }

    fn fresh_probe_id(&mut self) -> u64 {
        self.next_probe += 1;
        PROBE_ID_BASE + self.next_probe
    }

    /// Classes first seen after learning whose path was verified against a trusted snapshot.
    pub fn learned(&self) -> &BTreeMap<HeaderClass, BTreeSet<DeviceId>> {
        &self.learned
    }

    /// Normal-set lookup over the region models plus verified first-seen classes.
    pub fn check(&self, models: &[NormalModel], class: &HeaderClass, device: DeviceId) -> NormalCheck {
        let learned = self.learned.get(class);
        match check_models(models, class, device) {
            NormalCheck::Normal => NormalCheck::Normal,
            _ if learned.is_some_and(|s| s.contains(&device)) => NormalCheck::Normal,
            NormalCheck::UnknownClass if learned.is_none() => NormalCheck::UnknownClass,
            _ => NormalCheck::NotNormal,
        }
    }

    /// Compares `trajectory` with the normal sets without touching recurrence state. Also flags
    /// terminals that never reach the class's destination.
    pub fn classify(
        &self,
        models: &[NormalModel],
        topology: &Topology,
        trajectory: &Trajectory,
    ) -> Option<(HeaderClass, BTreeSet<DeviceId>, BTreeSet<AnomalyReason>)> {
        let header = trajectory.header()?;
        let class = HeaderClass::of(topology, header);
        let mut offending = BTreeSet::new();
        let mut reasons = BTreeSet::new();
        for d in trajectory.devices() {
            match self.check(models, &class, d) {
                NormalCheck::Normal => {}
                NormalCheck::NotNormal => {
                    offending.insert(d);
                    reasons.insert(AnomalyReason::NotNormal);
                }
                c @ NormalCheck::UnknownClass => {
                    if !c.is_normal(self.config.unknown_class) {
                        offending.insert(d);
                        reasons.insert(AnomalyReason::UnknownClass);
                    }
                }
            }
        }
        let last = trajectory.hops.last()?;
        match trajectory.terminal {
            Terminal::Dropped => {
                reasons.insert(AnomalyReason::Dropped);
                offending.insert(last.device);
            }
            Terminal::Looped => {
                reasons.insert(AnomalyReason::Looped);
                offending.insert(last.device);
            }
            Terminal::Delivered => {
                let out = last.out_port.map(|p| Endpoint(last.device, p));
                let delivered_to = out.and_then(|ep| topology.host_at(ep));
                let dst_attached = topology.attachment_of(header.dst_addr).is_some();
                if dst_attached && delivered_to.is_some_and(|h| !h.prefix.contains(header.dst_addr)) {
                    reasons.insert(AnomalyReason::Misdelivered);
                    offending.insert(last.device);
                }
            }
            Terminal::InFlight => {}
        }
        (!offending.is_empty()).then_some((class, offending, reasons))
    }

    /// [`Detector::classify`] plus recurrence counting.
    pub fn detect_anomaly(
        &mut self,
        models: &[NormalModel],
        store: &TrajectoryStore,
        trajectory: &Trajectory,
        now: SimTime,
    ) -> Option<Anomaly> {
        let (class, offending, reasons) = self.classify(models, store.topology(), trajectory)?;
        Some(self.raise(class, trajectory.clone(), offending, reasons, now))
    }

    fn raise(
        &mut self,
        class: HeaderClass,
        trajectory: Trajectory,
        offending_devices: BTreeSet<DeviceId>,
        reasons: BTreeSet<AnomalyReason>,
        now: SimTime,
    ) -> Anomaly {
        let count = self
            .recurrence
            .entry((class, offending_devices.clone()))
            .or_insert(0);
        *count += 1;
        Anomaly {
            class,
            trajectory,
            offending_devices,
            reasons,
            detected_at: now,
            recurrence_count: *count,
        }
    }

    fn replay_anomaly(&mut self, store: &TrajectoryStore, ev: &ReplayEvidence, now: SimTime) -> Option<Anomaly> {
        let original = store.get(ev.packet_id)?;
        let class = HeaderClass::of(store.topology(), original.header()?);
        let origin = ev.origin()?;
        Some(self.raise(
            class,
            original.clone(),
            BTreeSet::from([origin]),
            BTreeSet::from([AnomalyReason::Replay]),
            now,
        ))
    }

    /// Probes the anomalous class and compares each probe with the replica's expected path.
    /// `trusted` is the latest trusted replica; a first-seen class is cleared only if it
    /// follows the path that replica predicts.
    pub fn inspect_data_plane(
        &mut self,
        anomaly: &Anomaly,
        sdn: &mut Sdn,
        replica: &VirtualReplica,
        trusted: Option<&VirtualReplica>,
    ) -> DataPlaneOutcome {
        let now = sdn.now();
        let (Some(&header), Some(ingress)) = (anomaly.trajectory.header(), anomaly.trajectory.ingress()) else {
            return DataPlaneOutcome::Inconclusive;
        };
        let probes = self.config.probes_per_inspection;
        let mut tally: BTreeMap<(DeviceId, AttackAction), (usize, Evidence)> = BTreeMap::new();
        for _ in 0..probes {
            let probe = PacketHeader {
                packet_id: self.fresh_probe_id(),
                ..header
            };
            let Ok((actual, replays)) = sdn.dataplane.inject_with_replays(probe, ingress) else {
                return DataPlaneOutcome::Inconclusive;
            };
            let Ok(expected) = expected_trajectory_at(replica, probe, ingress, now) else {
                return DataPlaneOutcome::Inconclusive;
            };
            if let Some(ev) = first_divergence(&actual, &expected, &replays) {
                let Evidence::Divergence { device, action, .. } = ev else { unreachable!() };
                tally.entry((device, action)).or_insert((0, ev)).0 += 1;
            }
        }
        let accused = tally
            .iter()
            .filter(|(_, (hits, _))| probes >= self.config.min_probes && *hits as f64 / probes as f64 > self.config.loss_tolerance)
            .max_by_key(|(_, (hits, _))| *hits);
        if let Some((&(device, action), (hits, ev))) = accused {
            let mut ev = ev.clone();
            if let Evidence::Divergence { hits: h, probes: p, .. } = &mut ev {
                *h = *hits;
                *p = probes;
            }
            return DataPlaneOutcome::Verdict(Verdict {
                kind: VerdictKind::MaliciousDevice { device, action },
                class: anomaly.class,
                evidence: vec![ev],
                issued_at: now,
            });
        }
        if !tally.is_empty() {
            return DataPlaneOutcome::Inconclusive;
        }
        // Probes agree with the replica. Does the replica itself explain the anomaly?
        let Ok(expected) = expected_trajectory_at(replica, header, ingress, anomaly.trajectory.injected_at()) else {
            return DataPlaneOutcome::Inconclusive;
        };
        if anomaly.only_unknown_class() {
            let start = anomaly.trajectory.injected_at();
            let matches_trusted = trusted
                .and_then(|r| expected_trajectory_at(r, header, ingress, start).ok())
                .is_some_and(|t| same_path(&t, &anomaly.trajectory));
            if matches_trusted {
                return DataPlaneOutcome::Clear;
            }
        }
        if !same_path(&expected, &anomaly.trajectory) {
            return DataPlaneOutcome::Inconclusive;
        }
        let rules = rules_along(replica, &expected);
        let all_from_nos = rules.iter().all(|(_, r)| {
            r.as_ref()
                .is_some_and(|r| CookieNamespace::of(r.cookie) == CookieNamespace::Controller)
        });
        if !all_from_nos || rules.is_empty() {
            return DataPlaneOutcome::Inconclusive;
        }
        // Name the most recently installed rule on the path as the likely culprit.
        let newest = rules.iter().filter_map(|(d, r)| r.clone().map(|r| (*d, r))).max_by_key(|(_, r)| r.install_time);
        DataPlaneOutcome::Escalate(
            newest
                .map(|(device, rule)| Evidence::ControllerRule { device, rule })
                .into_iter()
                .collect(),
        )
    }

    /// Devices a packet of `anomaly` should cross: the trusted snapshot's path if it reaches
    /// the destination without leaving the normal set, else a shortest path over normal devices.
    fn fix_path(
        &self,
        anomaly: &Anomaly,
        models: &[NormalModel],
        trusted: Option<&ReplicaSnapshot>,
        sdn: &Sdn,
    ) -> Option<Vec<(DeviceId, PortNo)>> {
        let header = *anomaly.trajectory.header()?;
        let ingress = anomaly.trajectory.ingress()?;
        let topology = sdn.topology();
        let is_normal = |d: DeviceId| self.check(models, &anomaly.class, d) != NormalCheck::NotNormal;
        if let Some(snap) = trusted {
            if let Ok(t) = expected_trajectory_at(&snap.replica, header, ingress, 0) {
                if t.terminal == Terminal::Delivered && t.devices().all(is_normal) {
                    return t.hops.iter().map(|h| h.out_port.map(|p| (h.device, p))).collect();
                }
            }
        }
        let dest = topology.attachment_of(header.dst_addr)?;
        let allowed: BTreeSet<DeviceId> = topology.device_ids().filter(|&d| is_normal(d)).collect();
        let mut prev: BTreeMap<DeviceId, DeviceId> = BTreeMap::new();
        let mut queue = VecDeque::from([ingress.0]);
        let mut seen = BTreeSet::from([ingress.0]);
        while let Some(d) = queue.pop_front() {
            if d == dest.device {
                break;
            }
            for (_, n) in topology.neighbors(d) {
                if allowed.contains(&n.0) && seen.insert(n.0) {
                    prev.insert(n.0, d);
                    queue.push_back(n.0);
                }
            }
        }
        if !seen.contains(&dest.device) {
            return None;
        }
        let mut devices = vec![dest.device];
        while let Some(&p) = prev.get(devices.last()?) {
            devices.push(p);
        }
        devices.reverse();
        let mut hops: Vec<(DeviceId, PortNo)> = devices
            .windows(2)
            .map(|w| topology.port_toward(w[0], w[1]).map(|p| (w[0], p)))
            .collect::<Option<_>>()?;
        hops.push((dest.device, dest.port));
        Some(hops)
    }

    /// Injects fix rules through the NOS and checks that they appear southbound and in the view.
    /// The data plane is returned to its pre-inspection state before returning.
    pub fn inspect_nos(
        &mut self,
        anomaly: &Anomaly,
        models: &[NormalModel],
        sdn: &mut Sdn,
        interceptor: &mut Interceptor,
    ) -> Result<Verdict> {
        let now = sdn.now();
        interceptor.sync(sdn.dataplane.channel());
        let before: Tables = sdn.dataplane.snapshot_tables();
        let trusted = interceptor.latest_trusted_snapshot();
        let Some(path) = self.fix_path(anomaly, models, trusted.as_deref(), sdn) else {
            return Ok(Verdict {
                kind: VerdictKind::FalsePositive,
                class: anomaly.class,
                evidence: vec![Evidence::NoFixPath],
                issued_at: now,
            });
        };
        let fix: Vec<InspectionRule> = path
            .iter()
            .enumerate()
            .map(|(i, &(device, port))| InspectionRule {
                device,
                rule: FlowRule::forward(
                    anomaly.class.key(),
                    GWARDAR_PRIORITY_BASE,
                    port,
                    CookieNamespace::Gwardar.tag(self.next_anomaly << 8 | i as u64),
                )
                .installed_at(now),
                target_class: anomaly.class,
                ttl: self.config.fix_rule_ttl,
            })
            .collect();
        let submission: Vec<(DeviceId, FlowRule)> = fix.iter().map(|r| (r.device, r.rule.clone())).collect();

        let mark = interceptor.log().len();
        sdn.submit_policy(submission.clone(), PriorityClass::GwardarHigh);
        interceptor.sync(sdn.dataplane.channel());
        let observed: Vec<&FlowMod> = interceptor
            .log_since(mark)
            .iter()
            .filter_map(|r| r.flow_mod())
            .filter(|m| m.command == FlowModCommand::Add)
            .collect();
        let mut evidence: Vec<Evidence> = fix
            .iter()
            .map(|r| Evidence::InjectedRule {
                device: r.device,
                rule: r.rule.clone(),
            })
            .collect();
        let mut rule_mismatch = BTreeSet::new();
        for (device, rule) in &submission {
            if !observed.iter().any(|m| m.device == *device && m.rule == *rule) {
                rule_mismatch.insert(*device);
                evidence.push(Evidence::FlowModTimeout {
                    device: *device,
                    deadline: self.config.inspection_deadline,
                });
            }
        }
        let view = sdn.controller.query_view();
        let mut view_mismatch = BTreeSet::new();
        for (device, rule) in &submission {
            if !view.tables.get(device).is_some_and(|t| t.contains(rule)) {
                view_mismatch.insert(*device);
                evidence.push(Evidence::ViewOmits {
                    device: *device,
                    rule: rule.clone(),
                });
            }
        }

        let header = *anomaly.trajectory.header().expect("anomalies carry a header");
        let ingress = anomaly.trajectory.ingress().expect("anomalies carry a hop");
        let probe = PacketHeader {
            packet_id: self.fresh_probe_id(),
            ..header
        };
        let ceased = sdn
            .dataplane
            .inject_with_replays(probe, ingress)
            .map(|(t, replays)| {
                replays.is_empty()
                    && t.terminal == Terminal::Delivered
                    && t.devices().all(|d| self.check(models, &anomaly.class, d) != NormalCheck::NotNormal)
            })
            .unwrap_or(false);
        if !ceased {
            evidence.push(Evidence::AnomalyPersisted { packet_id: probe.packet_id });
        }

        // Remove the fix rules and put back whatever the tables held before.
        sdn.withdraw_policy(submission.clone(), PriorityClass::GwardarHigh);
        let leftovers: Vec<FlowMod> = submission
            .iter()
            .filter(|(d, r)| sdn.dataplane.device(*d).is_some_and(|dev| dev.table.contains(r)))
            .map(|(d, r)| FlowMod::delete_strict(*d, r.clone()))
            .collect();
        sdn.send_direct(&leftovers);
        let mut resubmit = Vec::new();
        for (device, table) in &before {
            let live = sdn.dataplane.device(*device).map(|d| &d.table);
            if live != Some(table) {
                resubmit.push(FlowMod::delete_all(*device));
                resubmit.extend(table.rules().iter().map(|r| FlowMod::add(*device, r.clone())));
            }
        }
        sdn.send_direct(&resubmit);
        interceptor.sync(sdn.dataplane.channel());

        let kind = match (rule_mismatch.is_empty(), view_mismatch.is_empty()) {
            (true, true) => VerdictKind::FalsePositive,
            (false, true) => VerdictKind::CompromisedNos {
                mode: NosMismatch::RuleMismatch,
                targets: rule_mismatch,
            },
            (true, false) => VerdictKind::CompromisedNos {
                mode: NosMismatch::ViewMismatch,
                targets: view_mismatch,
            },
            (false, false) => VerdictKind::CompromisedNos {
                mode: NosMismatch::Both,
                targets: &rule_mismatch | &view_mismatch,
            },
        };
        Ok(Verdict {
            kind,
            class: anomaly.class,
            evidence,
            issued_at: now,
        })
    }

    /// Runs phases III to V over everything recorded since the previous cycle.
    pub fn run_detection_cycle(
        &mut self,
        sdn: &mut Sdn,
        interceptor: &mut Interceptor,
        store: &TrajectoryStore,
        models: &[NormalModel],
    ) -> Result<Vec<Verdict>> {
        let now = sdn.now();
        interceptor.sync(sdn.dataplane.channel());
        while self.open.front().is_some_and(|&(_, until)| until <= now) {
            self.open.pop_front();
        }

        let mut anomalies = Vec::new();
        let fresh: Vec<Trajectory> = store.since(self.cursor).cloned().collect();
        self.cursor = store.len();
        for t in &fresh {
            self.checked += 1;
            if let Some(a) = self.detect_anomaly(models, store, t, now) {
                anomalies.push(a);
            }
        }
        let evidence: Vec<ReplayEvidence> = store.replay_evidence()[self.replay_cursor..].to_vec();
        self.replay_cursor = store.replay_evidence().len();
        for ev in &evidence {
            if let Some(a) = self.replay_anomaly(store, ev, now) {
                anomalies.push(a);
            }
        }

        // One inspection per distinct anomaly per cycle; later duplicates only bump recurrence.
        let mut latest: BTreeMap<(HeaderClass, BTreeSet<DeviceId>), Anomaly> = BTreeMap::new();
        for a in anomalies {
            self.raised += 1;
            let key = a.key();
            match latest.get(&key) {
                Some(prev) if prev.recurrence_count >= a.recurrence_count => {}
                _ => {
                    latest.insert(key, a);
                }
            }
        }

        let mut issued = Vec::new();
        for (key, anomaly) in latest {
            let id = self.next_anomaly;
            self.next_anomaly += 1;
            self.open.push_back((id, now + self.config.anomaly_ttl));
            self.events.push(DetectionEvent::AnomalyRaised {
                time: now,
                anomaly_id: id,
                packet_id: anomaly.trajectory.packet_id,
                class: anomaly.class,
                offending: anomaly.offending_devices.clone(),
                recurrence_count: anomaly.recurrence_count,
            });
            if self.settled.contains_key(&key) {
                continue;
            }
            let trusted = interceptor.latest_trusted_snapshot();
            let outcome = self.inspect_data_plane(
                &anomaly,
                sdn,
                interceptor.replica(),
                trusted.as_deref().map(|s| &s.replica),
            );
            self.events.push(DetectionEvent::DataPlaneInspected {
                time: now,
                anomaly_id: id,
                outcome: outcome.label().to_string(),
            });
            debug!("anomaly {id} on {} -> {}", anomaly.class, outcome.label());
            let verdict = match outcome {
                DataPlaneOutcome::Verdict(v) => Some(v),
                DataPlaneOutcome::Escalate(rule_evidence) => {
                    self.events.push(DetectionEvent::NosInspected {
                        time: now,
                        anomaly_id: id,
                        reason: NosInspectionReason::Escalate,
                        recurrence_count: anomaly.recurrence_count,
                    });
                    let mut v = self.inspect_nos(&anomaly, models, sdn, interceptor)?;
                    v.evidence.extend(rule_evidence);
                    Some(v)
                }
                DataPlaneOutcome::Clear => {
                    self.open.retain(|&(a, _)| a != id);
                    self.learned
                        .entry(anomaly.class)
                        .or_default()
                        .extend(anomaly.trajectory.devices());
                    None
                }
                DataPlaneOutcome::Inconclusive if anomaly.recurrence_count >= self.config.recurrence_threshold => {
                    self.events.push(DetectionEvent::NosInspected {
                        time: now,
                        anomaly_id: id,
                        reason: NosInspectionReason::Recurrence,
                        recurrence_count: anomaly.recurrence_count,
                    });
                    Some(self.inspect_nos(&anomaly, models, sdn, interceptor)?)
                }
                DataPlaneOutcome::Inconclusive => None,
            };
            let Some(verdict) = verdict else { continue };
            if !verdict.is_false_positive() {
                info!("verdict at {now}: {:?}", verdict.kind);
                self.settled.insert(key, verdict.kind.clone());
                if let Some(t) = verdict.attack_install_time() {
                    interceptor.distrust_since(t);
                }
            }
            self.events.push(DetectionEvent::VerdictIssued {
                time: now,
                anomaly_id: id,
                verdict: verdict.clone(),
            });
            self.verdicts.push(verdict.clone());
            issued.push(verdict);
        }
        Ok(issued)
    }
}

/// Unions `CompromisedNos` verdicts into one; others pass through deduplicated by kind.
pub fn merge_verdicts(verdicts: &[Verdict]) -> Vec<VerdictKind> {
    let mut out: Vec<VerdictKind> = Vec::new();
    let mut nos: Option<(NosMismatch, BTreeSet<DeviceId>)> = None;
    for v in verdicts {
        match &v.kind {
            VerdictKind::CompromisedNos { mode, targets } => {
                nos = Some(match nos.take() {
                    None => (*mode, targets.clone()),
                    Some((m, t)) => (m.merge(*mode), &t | targets),
                });
            }
            VerdictKind::FalsePositive => {}
            k => {
                if !out.contains(k) {
                    out.push(k.clone());
                }
            }
        }
    }
    if let Some((mode, targets)) = nos {
        out.push(VerdictKind::CompromisedNos { mode, targets });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataplane::TrajectoryHop;
    use crate::netmodel::{Ipv4Prefix, Topology};
    use crate::normal::TimeWindow;
    use crate::trajectory::StoreRole;

    fn line(n: u32) -> Topology {
        let mut t = Topology::new();
        for i in 0..n {
            t.add_device(DeviceId(i), 0).unwrap();
        }
        for i in 1..n {
            t.connect(DeviceId(i - 1), DeviceId(i)).unwrap();
        }
        t
    }

    fn traj(id: u64, devices: &[u32]) -> Trajectory {
        let h = PacketHeader::new([9, 9, 9, 9].into(), [8, 8, 8, 8].into(), 6, id);
        Trajectory {
            packet_id: id,
            hops: devices
                .iter()
                .map(|&d| TrajectoryHop {
                    device: DeviceId(d),
                    in_port: 0,
                    out_port: Some(1),
                    observed_header: h,
                    time: 0,
                })
                .collect(),
            terminal: Terminal::Delivered,
        }
    }

    fn model_for(store: &TrajectoryStore, devices: &[u32]) -> NormalModel {
        let class = HeaderClass::of(store.topology(), traj(0, &[0]).header().unwrap());
        NormalModel {
            region: 0,
            window: TimeWindow::until(1),
            per_class: BTreeMap::from([(class, devices.iter().map(|&d| DeviceId(d)).collect())]),
            built_at: 0,
        }
    }

    #[test]
    fn anomaly_lists_non_normal_hops_and_recurs() {
        let store = TrajectoryStore::new(StoreRole::ActualDb, line(4));
        let model = model_for(&store, &[0, 1, 2]);
        let mut det = Detector::default();
        assert!(det.detect_anomaly(&[model.clone()], &store, &traj(1, &[0, 1, 2]), 0).is_none());
        let a = det.detect_anomaly(&[model.clone()], &store, &traj(2, &[0, 1, 3]), 0).unwrap();
        assert_eq!(a.offending_devices, BTreeSet::from([DeviceId(3)]));
        assert_eq!(a.recurrence_count, 1);
        let b = det.detect_anomaly(&[model], &store, &traj(3, &[0, 1, 3]), 1).unwrap();
        assert_eq!(b.recurrence_count, 2);
    }

    #[test]
    fn dropped_terminal_is_anomalous() {
        let store = TrajectoryStore::new(StoreRole::ActualDb, line(3));
        let model = model_for(&store, &[0, 1, 2]);
        let mut t = traj(1, &[0, 1]);
        t.terminal = Terminal::Dropped;
        let a = Detector::default().detect_anomaly(&[model], &store, &t, 0).unwrap();
        assert_eq!(a.offending_devices, BTreeSet::from([DeviceId(1)]));
        assert!(a.reasons.contains(&AnomalyReason::Dropped));
    }

    #[test]
    fn unknown_class_fails_closed() {
        let store = TrajectoryStore::new(StoreRole::ActualDb, line(2));
        let mut det = Detector::default();
        let a = det.detect_anomaly(&[], &store, &traj(1, &[0, 1]), 0).unwrap();
        assert!(a.only_unknown_class());
        let mut lenient = Detector::new(DetectionConfig {
            unknown_class: UnknownClassPolicy::Normal,
            ..DetectionConfig::default()
        });
        assert!(lenient.detect_anomaly(&[], &store, &traj(1, &[0, 1]), 0).is_none());
    }

    #[test]
    fn merge_unions_nos_targets() {
        let class = HeaderClass {
            src: Ipv4Prefix::ANY,
            dst: Ipv4Prefix::ANY,
            proto: 6,
        };
        let v = |kind| Verdict {
            kind,
            class,
            evidence: vec![],
            issued_at: 0,
        };
        let merged = merge_verdicts(&[
            v(VerdictKind::CompromisedNos {
                mode: NosMismatch::RuleMismatch,
                targets: BTreeSet::from([DeviceId(1)]),
            }),
            v(VerdictKind::FalsePositive),
            v(VerdictKind::CompromisedNos {
                mode: NosMismatch::RuleMismatch,
                targets: BTreeSet::from([DeviceId(4)]),
            }),
        ]);
        assert_eq!(
            merged,
            vec![VerdictKind::CompromisedNos {
                mode: NosMismatch::RuleMismatch,
                targets: BTreeSet::from([DeviceId(1), DeviceId(4)]),
            }]
        );
    }

    #[test]
    fn verdict_json_shape() {
        let v = Verdict {
            kind: VerdictKind::MaliciousDevice {
                device: DeviceId(2),
                action: AttackAction::Drop,
            },
            class: HeaderClass {
                src: Ipv4Prefix::ANY,
                dst: Ipv4Prefix::ANY,
                proto: 6,
            },
            evidence: vec![Evidence::NoFixPath],
            issued_at: 5,
        };
        let json: serde_json::Value = serde_json::to_value(&v).unwrap();
        assert_eq!(json["kind"], "malicious_device");
        assert_eq!(json["action"], "drop");
        let back: Verdict = serde_json::from_value(json).unwrap();
        assert_eq!(back, v);
    }
}
