// SPDX-License-Identifier: Apache-2.0

//! Protection engine: verdict-triggered policies, restoration from trusted snapshots, and
//! takeover of the network while the NOS is untrusted.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataplane::Terminal;
use crate::detection::{Verdict, VerdictKind};
use crate::error::{Error, Result};
use crate::interceptor::{Interceptor, ReplicaSnapshot, VirtualReplica};
use crate::netmodel::{DeviceId, FlowMod, FlowRule, Ipv4Prefix, PacketHeader, SimTime, Tables, Topology};
use crate::sdn::Sdn;
use crate::trajectory::{default_ingress, expected_trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", content = "devices", rename_all = "snake_case")]
pub enum RestoreScope {
    Full,
    Devices(BTreeSet<DeviceId>),
}

impl RestoreScope {
    fn includes(&self, d: DeviceId) -> bool {
        match self {
            RestoreScope::Full => true,
            RestoreScope::Devices(set) => set.contains(&d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ResponseAction {
    InstallRules { rules: Vec<(DeviceId, FlowRule)> },
    RestoreSnapshot { scope: RestoreScope },
    Takeover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictTag {
    MaliciousDevice,
    CompromisedNos,
}

/// Predicate over a verdict. Unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerdictTrigger {
    pub kind: Option<VerdictTag>,
    /// Fires when the verdict names any of these devices.
    pub targets: Option<BTreeSet<DeviceId>>,
    pub class: Option<String>,
}

impl VerdictTrigger {
    pub fn matches(&self, v: &Verdict) -> bool {
        let kind_ok = match (self.kind, &v.kind) {
            (None, _) => true,
            (Some(VerdictTag::MaliciousDevice), VerdictKind::MaliciousDevice { .. }) => true,
            (Some(VerdictTag::CompromisedNos), VerdictKind::CompromisedNos { .. }) => true,
            _ => false,
        };
        let targets_ok = self
            .targets
            .as_ref()
            .map_or(true, |t| !t.is_disjoint(&v.kind.targets()));
        let class_ok = self.class.as_ref().map_or(true, |c| *c == v.class.to_string());
        kind_ok && targets_ok && class_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePolicy {
    #[serde(default)]
    pub trigger: VerdictTrigger,
    #[serde(flatten)]
    pub action: ResponseAction,
}

impl ResponsePolicy {
    /// Fallback when nothing matches.
    pub fn default_policy() -> Self {
        Self {
            trigger: VerdictTrigger::default(),
            action: ResponseAction::RestoreSnapshot {
                scope: RestoreScope::Full,
            },
        }
    }

    pub fn load_list(json: &str) -> Result<Vec<ResponsePolicy>> {
        Ok(serde_json::from_str(json)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRestore {
    pub device: DeviceId,
    pub rules: usize,
    pub matches_snapshot: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub snapshot_taken_at: SimTime,
    pub scope: RestoreScope,
    pub devices: Vec<DeviceRestore>,
}

impl RestoreReport {
    pub fn all_match(&self) -> bool {
        self.devices.iter().all(|d| d.matches_snapshot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "applied", rename_all = "snake_case")]
pub enum ActionReport {
    Skipped,
    InstalledRules { count: usize },
    Restored(RestoreReport),
    TakeoverEngaged(RestoreReport),
}

#[derive(Debug, Clone, Default)]
pub struct TakeoverState {
    pub active: bool,
    pub since: SimTime,
    pub frozen_from: Option<Arc<ReplicaSnapshot>>,
}

/// Delete-all then Add every snapshot rule on each in-scope device, ascending by id, sent
/// straight to the switches.
pub fn restore_from_snapshot(sdn: &mut Sdn, snapshot: &ReplicaSnapshot, scope: &RestoreScope) -> Result<RestoreReport> {
    let mut failed = Vec::new();
    let mut devices = Vec::new();
    for (&device, table) in snapshot.tables().iter().filter(|(d, _)| scope.includes(**d)) {
        let mut mods = vec![FlowMod::delete_all(device)];
        mods.extend(table.rules().iter().map(|r| FlowMod::add(device, r.clone())));
        if sdn.send_direct(&mods).iter().any(|ack| ack.is_err()) {
            failed.push(device);
            continue;
        }
        let live = sdn.dataplane.device(device).map(|d| &d.table);
        devices.push(DeviceRestore {
            device,
            rules: table.len(),
            matches_snapshot: live == Some(table),
        });
    }
    if let RestoreScope::Devices(set) = scope {
        failed.extend(set.iter().filter(|d| !snapshot.tables().contains_key(d)));
    }
    if !failed.is_empty() {
        return Err(Error::PartialRestore(failed));
    }
    Ok(RestoreReport {
        snapshot_taken_at: snapshot.taken_at,
        scope: scope.clone(),
        devices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleKind {
    BlackHole,
    GreyHole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyFinding {
    pub ingress: DeviceId,
    pub prefix: Ipv4Prefix,
    pub kind: HoleKind,
    /// Where the packet stopped.
    pub at: DeviceId,
}

/// Propagates one packet per (host-facing device, prefix) through `tables`. Anything not
/// delivered to the prefix's own attachment is a black hole; a loop is a grey hole.
pub fn routing_consistency_check(tables: &Tables, topology: &Topology, prefixes: &[Ipv4Prefix]) -> Vec<ConsistencyFinding> {
    let replica = VirtualReplica::from_tables(topology.clone(), tables.clone());
    let edge: BTreeSet<DeviceId> = topology.hosts().iter().map(|h| h.device).collect();
    let mut findings = Vec::new();
    for ingress in edge {
        let ep = default_ingress(topology, ingress);
        for &prefix in prefixes {
            let header = PacketHeader::new(std::net::Ipv4Addr::UNSPECIFIED, prefix.network(), 6, 0);
            let Ok(t) = expected_trajectory(&replica, header, ep) else { continue };
            let Some(last) = t.hops.last() else { continue };
            let kind = match t.terminal {
                Terminal::Looped => Some(HoleKind::GreyHole),
                Terminal::Delivered => {
                    let host = last.out_port.and_then(|p| topology.host_at(crate::netmodel::Endpoint(last.device, p)));
                    (!host.is_some_and(|h| h.prefix == prefix)).then_some(HoleKind::BlackHole)
                }
                Terminal::Dropped | Terminal::InFlight => Some(HoleKind::BlackHole),
            };
            if let Some(kind) = kind {
                findings.push(ConsistencyFinding {
                    ingress,
                    prefix,
                    kind,
                    at: last.device,
                });
            }
        }
    }
    findings
}

/// Host prefixes of a topology, in attachment order.
pub fn host_prefixes(topology: &Topology) -> Vec<Ipv4Prefix> {
    topology.hosts().iter().map(|h| h.prefix).collect()
}

#[derive(Debug, Clone)]
pub struct ProtectionEngine {
    policies: Vec<ResponsePolicy>,
    takeover: TakeoverState,
}

impl Default for ProtectionEngine {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ProtectionEngine {
    /// `policies` are tried in order before the built-in full restore.
    pub fn new(policies: Vec<ResponsePolicy>) -> Self {
        Self {
            policies,
            takeover: TakeoverState::default(),
        }
    }

    pub fn policies(&self) -> &[ResponsePolicy] {
        &self.policies
    }

    pub fn takeover(&self) -> &TakeoverState {
        &self.takeover
    }

    pub fn respond(&mut self, verdict: &Verdict, sdn: &mut Sdn, interceptor: &mut Interceptor) -> Result<ActionReport> {
        if verdict.is_false_positive() {
            return Ok(ActionReport::Skipped);
        }
        let fallback = ResponsePolicy::default_policy();
        let action = self
            .policies
            .iter()
            .find(|p| p.trigger.matches(verdict))
            .unwrap_or(&fallback)
            .action
            .clone();
        let report = match action {
            ResponseAction::InstallRules { rules } => {
                let mods: Vec<FlowMod> = rules.into_iter().map(|(d, r)| FlowMod::add(d, r)).collect();
                let count = sdn.send_direct(&mods).iter().filter(|a| a.is_ok()).count();
                ActionReport::InstalledRules { count }
            }
            ResponseAction::RestoreSnapshot { scope } => {
                let snap = interceptor.latest_trusted_snapshot().ok_or(Error::NoTrustedSnapshot)?;
                ActionReport::Restored(restore_from_snapshot(sdn, &snap, &scope)?)
            }
            ResponseAction::Takeover => {
                let snap = interceptor.latest_trusted_snapshot().ok_or(Error::NoTrustedSnapshot)?;
                ActionReport::TakeoverEngaged(self.engage_takeover(sdn, snap)?)
            }
        };
        interceptor.sync(sdn.dataplane.channel());
        Ok(report)
    }

    /// Full restore, then drop every controller FlowMod until [`ProtectionEngine::release_takeover`].
    pub fn engage_takeover(&mut self, sdn: &mut Sdn, snapshot: Arc<ReplicaSnapshot>) -> Result<RestoreReport> {
        let report = restore_from_snapshot(sdn, &snapshot, &RestoreScope::Full)?;
        sdn.set_controller_blocked(true);
        self.takeover = TakeoverState {
            active: true,
            since: sdn.now(),
            frozen_from: Some(snapshot),
        };
        Ok(report)
    }

    pub fn release_takeover(&mut self, sdn: &mut Sdn) {
        sdn.set_controller_blocked(false);
        self.takeover.active = false;
    }
}
