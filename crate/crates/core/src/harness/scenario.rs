// SPDX-License-Identifier: Apache-2.0

//! Attack scenarios and their ground truth.
//!
//! | id | attacker | targets |
//! |----|----------|---------|
//! | S1 | NOS installs misrouting rules | one device |
//! | S2 | same | several devices |
//! | S3 | NOS installs rules and hides them from the view | one device |
//! | S4 | same | several devices |
//! | S6 | forwarding devices misbehave, NOS honest | one or more devices |

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::CompromiseMode;
use crate::dataplane::{MaliciousBehavior, MaliciousKind, Terminal};
use crate::detection::{AttackAction, NosMismatch, VerdictKind};
use crate::error::{Error, Result};
use crate::interceptor::VirtualReplica;
use crate::netmodel::{CookieNamespace, DeviceId, FlowRule, HeaderField, HeaderSpace, Ipv4Prefix, SimTime};
use crate::sdn::Sdn;
use crate::trajectory::{default_ingress, expected_trajectory};

/// Priority of attacker rules: above routing, below the Gwardar band.
pub const ATTACK_PRIORITY: u32 = 40_000;
const ATTACK_COOKIE_SEQ: u64 = 0xA77AC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    S1,
    S2,
    S3,
    S4,
    S6,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [ScenarioId::S1, ScenarioId::S2, ScenarioId::S3, ScenarioId::S4, ScenarioId::S6];

    pub fn default_target_count(self) -> usize {
        match self {
            ScenarioId::S2 | ScenarioId::S4 => 2,
            _ => 1,
        }
    }

    fn concealed(self) -> bool {
        matches!(self, ScenarioId::S3 | ScenarioId::S4)
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Devices(BTreeSet<DeviceId>),
    Random { random: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub action: AttackAction,
    #[serde(default = "one")]
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

/// Together with the topology, traffic and config, fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    #[serde(default)]
    pub targets: Option<TargetSpec>,
    /// Device scenarios only. Drawn from the seed when absent.
    #[serde(default)]
    pub behavior: Option<BehaviorSpec>,
    /// Implant time; runs that are already past it implant immediately.
    #[serde(default)]
    pub start_time: SimTime,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId, seed: u64) -> Self {
        Self {
            id,
            targets: None,
            behavior: None,
            start_time: 0,
            seed,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum GroundTruth {
    Nos { mode: NosMismatch, targets: BTreeSet<DeviceId> },
    Devices { implants: BTreeSet<(DeviceId, AttackAction)> },
}

impl GroundTruth {
    pub fn expected_verdicts(&self) -> BTreeSet<VerdictKindKey> {
        match self {
            GroundTruth::Nos { mode, targets } => BTreeSet::from([VerdictKindKey::Nos(*mode, targets.clone())]),
            GroundTruth::Devices { implants } => implants.iter().map(|&(d, a)| VerdictKindKey::Device(d, a)).collect(),
        }
    }

    /// Exact match of kind and target set; judged only from implant parameters.
    pub fn matches(&self, merged: &[VerdictKind]) -> bool {
        let got: BTreeSet<VerdictKindKey> = merged.iter().filter_map(VerdictKindKey::of).collect();
        got == self.expected_verdicts()
    }

    pub fn targets(&self) -> BTreeSet<DeviceId> {
        match self {
            GroundTruth::Nos { targets, .. } => targets.clone(),
            GroundTruth::Devices { implants } => implants.iter().map(|(d, _)| *d).collect(),
        }
    }
}

/// Orderable view of a non-false-positive verdict.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum VerdictKindKey {
    Device(DeviceId, AttackAction),
    Nos(NosMismatch, BTreeSet<DeviceId>),
}

impl VerdictKindKey {
    pub fn of(kind: &VerdictKind) -> Option<Self> {
        match kind {
            VerdictKind::MaliciousDevice { device, action } => Some(VerdictKindKey::Device(*device, *action)),
            VerdictKind::CompromisedNos { mode, targets } => Some(VerdictKindKey::Nos(*mode, targets.clone())),
            VerdictKind::FalsePositive => None,
        }
    }
}

fn live_replica(sdn: &Sdn) -> VirtualReplica {
    VirtualReplica::from_tables(sdn.topology().clone(), sdn.dataplane.snapshot_tables())
}

/// Devices a routed packet crosses between its first and last hop, for a random
/// (source, destination prefix) pair with at least `k` of them.
fn pick_transit_path(replica: &VirtualReplica, k: usize, rng: &mut ChaCha8Rng) -> Result<(Ipv4Prefix, Vec<DeviceId>)> {
    let topo = &replica.topology;
    let hosts = topo.hosts();
    if hosts.is_empty() {
        return Err(Error::InvalidTopology("no host prefixes to attack".into()));
    }
    let sources: Vec<DeviceId> = topo.device_ids().collect();
    for _ in 0..4096 {
        let dst = hosts.choose(rng).expect("non-empty");
        let src = *sources.choose(rng).expect("non-empty");
        let header = crate::netmodel::PacketHeader::new(std::net::Ipv4Addr::UNSPECIFIED, dst.prefix.network(), 6, 0);
        let Ok(t) = expected_trajectory(replica, header, default_ingress(topo, src)) else {
            continue;
        };
        if t.terminal != Terminal::Delivered || t.hops.len() < k + 2 {
            continue;
        }
        let transit: Vec<DeviceId> = t.hops[1..t.hops.len() - 1].iter().map(|h| h.device).collect();
        return Ok((dst.prefix, transit));
    }
    Err(Error::InvalidTopology(format!("no routed path with {k} transit devices")))
}

/// Attacker rule at `device` sending `prefix` to a neighbor other than the routed next hop.
fn misroute_rule(replica: &VirtualReplica, device: DeviceId, prefix: Ipv4Prefix, now: SimTime, rng: &mut ChaCha8Rng) -> Result<FlowRule> {
    let header = crate::netmodel::PacketHeader::new(std::net::Ipv4Addr::UNSPECIFIED, prefix.network(), 6, 0);
    let honest = replica.table(device).and_then(|t| t.lookup(&header)).and_then(|r| r.out_port());
    let port = replica
        .topology
        .neighbors(device)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| Some(*p) != honest)
        .choose(rng)
        .ok_or_else(|| Error::InvalidTopology(format!("{device} has no alternative neighbor")))?;
    Ok(FlowRule::forward(
        HeaderSpace::dst(prefix),
        ATTACK_PRIORITY,
        port,
        CookieNamespace::Controller.tag(ATTACK_COOKIE_SEQ),
    )
    .installed_at(now))
}

fn chosen_targets(spec: &ScenarioSpec) -> TargetSpec {
    spec.targets.clone().unwrap_or(TargetSpec::Random {
        random: spec.id.default_target_count(),
    })
}

fn implant_nos(sdn: &mut Sdn, spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<GroundTruth> {
    let replica = live_replica(sdn);
    let now = sdn.now();
    let mut rules = Vec::new();
    match chosen_targets(spec) {
        TargetSpec::Random { random } => {
            let (prefix, transit) = pick_transit_path(&replica, random.max(1), rng)?;
            let mut picked: Vec<DeviceId> = transit.choose_multiple(rng, random.max(1)).copied().collect();
            picked.sort();
            for d in picked {
                rules.push((d, misroute_rule(&replica, d, prefix, now, rng)?));
            }
        }
        TargetSpec::Devices(devices) => {
            for d in devices {
                if !replica.topology.has_device(d) {
                    return Err(Error::UnknownDevice(d));
                }
                let prefix = replica
                    .topology
                    .hosts()
                    .iter()
                    .filter(|h| h.device != d)
                    .choose(rng)
                    .ok_or_else(|| Error::InvalidTopology("no remote prefix".into()))?
                    .prefix;
                rules.push((d, misroute_rule(&replica, d, prefix, now, rng)?));
            }
        }
    }
    let targets: BTreeSet<DeviceId> = rules.iter().map(|(d, _)| *d).collect();
    let (mode, compromise) = if spec.id.concealed() {
        (
            NosMismatch::ViewMismatch,
            CompromiseMode::MaliciousRulesConcealed {
                targets: targets.clone(),
                rules,
            },
        )
    } else {
        (
            NosMismatch::RuleMismatch,
            CompromiseMode::MaliciousRules {
                targets: targets.clone(),
                rules,
            },
        )
    };
    sdn.compromise(compromise);
    Ok(GroundTruth::Nos { mode, targets })
}

fn implant_devices(sdn: &mut Sdn, spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<GroundTruth> {
    let topo = sdn.topology().clone();
    let targets: Vec<DeviceId> = match chosen_targets(spec) {
        TargetSpec::Devices(d) => d.into_iter().collect(),
        TargetSpec::Random { random } => {
            let replica = live_replica(sdn);
            let (_, transit) = pick_transit_path(&replica, random.max(1), rng)?;
            let mut picked: Vec<DeviceId> = transit.choose_multiple(rng, random.max(1)).copied().collect();
            picked.sort();
            picked
        }
    };
    let mut implants = BTreeSet::new();
    for d in targets {
        let (action, probability) = match &spec.behavior {
            Some(b) => (b.action, b.probability),
            None => {
                let all = [AttackAction::Drop, AttackAction::Replay, AttackAction::Misroute, AttackAction::Modify];
                (all[rng.gen_range(0..all.len())], 1.0)
            }
        };
        let kind = match action {
            AttackAction::Drop => MaliciousKind::Drop,
            AttackAction::Replay => MaliciousKind::Replay,
            AttackAction::Misroute => {
                let (port, _) = *topo
                    .neighbors(d)
                    .choose(rng)
                    .ok_or_else(|| Error::InvalidTopology(format!("{d} has no neighbors")))?;
                MaliciousKind::Misroute { wrong_port: port }
            }
            AttackAction::Modify => {
                let other = topo
                    .hosts()
                    .iter()
                    .filter(|h| h.device != d)
                    .choose(rng)
                    .ok_or_else(|| Error::InvalidTopology("no remote prefix".into()))?;
                MaliciousKind::Modify {
                    field: HeaderField::DstAddr,
                    value: u64::from(u32::from(other.prefix.network())),
                }
            }
        };
        sdn.dataplane.implant_behavior(
            d,
            MaliciousBehavior {
                probability,
                ..MaliciousBehavior::universal(kind)
            },
        )?;
        implants.insert((d, action));
    }
    Ok(GroundTruth::Devices { implants })
}

/// Plants the scenario's attack into a routed network at the current time.
pub fn implant(sdn: &mut Sdn, spec: &ScenarioSpec) -> Result<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.id {
        ScenarioId::S6 => implant_devices(sdn, spec, &mut rng),
        _ => implant_nos(sdn, spec, &mut rng),
    }
}
