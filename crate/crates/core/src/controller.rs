// SPDX-License-Identifier: Apache-2.0

//! Simulated NOS: shortest-path rule compilation, the northbound network view, and the
//! compromise modes an attacker who owns the NOS can switch it into.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    CookieNamespace, DeviceId, FlowMod, FlowModCommand, FlowRule, FlowTable, HeaderSpace, SimTime,
    Tables, Topology,
};

/// Highest priority a `Normal` policy may use.
pub const NORMAL_PRIORITY_MAX: u32 = 49_999;
/// Lowest priority of the Gwardar band. Policy composition never places normal rules here.
pub const GWARDAR_PRIORITY_BASE: u32 = 50_000;
/// Routing rules use `ROUTE_PRIORITY_BASE + prefix length`, giving longest-prefix match.
pub const ROUTE_PRIORITY_BASE: u32 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityClass {
    Normal,
    GwardarHigh,
}

impl PriorityClass {
    fn clamp(self, priority: u32) -> u32 {
        match self {
            PriorityClass::Normal => priority.min(NORMAL_PRIORITY_MAX),
            PriorityClass::GwardarHigh => priority.max(GWARDAR_PRIORITY_BASE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompromiseMode {
    Honest,
    /// Installs attacker rules and reports them in the view.
    MaliciousRules {
        targets: BTreeSet<DeviceId>,
        rules: Vec<(DeviceId, FlowRule)>,
    },
    /// Installs attacker rules while the view keeps showing the pre-attack tables of targets.
    MaliciousRulesConcealed {
        targets: BTreeSet<DeviceId>,
        rules: Vec<(DeviceId, FlowRule)>,
    },
}

impl CompromiseMode {
    pub fn targets(&self) -> BTreeSet<DeviceId> {
        match self {
            CompromiseMode::Honest => BTreeSet::new(),
            CompromiseMode::MaliciousRules { targets, .. }
            | CompromiseMode::MaliciousRulesConcealed { targets, .. } => targets.clone(),
        }
    }

    fn is_concealed_target(&self, d: DeviceId) -> bool {
        matches!(self, CompromiseMode::MaliciousRulesConcealed { targets, .. } if targets.contains(&d))
    }

    fn suppresses_gwardar_on(&self, d: DeviceId) -> bool {
        matches!(self, CompromiseMode::MaliciousRules { targets, .. } if targets.contains(&d))
    }
}

/// What the NOS claims the network looks like.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkView {
    #[serde(with = "topology_serde")]
    pub topology: Topology,
    pub tables: Tables,
    pub version: u64,
}

pub(crate) mod topology_serde {
    use crate::netmodel::{Topology, TopologyFile};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Topology, s: S) -> Result<S::Ok, S::Error> {
        t.to_file().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Topology, D::Error> {
        let file = TopologyFile::deserialize(d)?;
        Topology::from_file(&file).map_err(serde::de::Error::custom)
    }
}

impl NetworkView {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("view serializes")
    }
}

/// One rule per (device, prefix) toward the prefix's attachment along a shortest path.
/// Equal-length alternatives resolve to the lowest next-hop device id.
pub fn compile_shortest_paths(topology: &Topology) -> Result<BTreeMap<DeviceId, Vec<FlowRule>>> {
    if !topology.is_connected() {
        return Err(Error::DisconnectedTopology);
    }
    let mut out: BTreeMap<DeviceId, Vec<FlowRule>> =
        topology.device_ids().map(|d| (d, Vec::new())).collect();
    let cookie = CookieNamespace::Controller.tag(0);
    for host in topology.hosts() {
        let dist = topology.distances_from(host.device);
        let priority = ROUTE_PRIORITY_BASE + u32::from(host.prefix.len());
        let m = HeaderSpace::dst(host.prefix);
        for (&dev, rules) in out.iter_mut() {
            let port = if dev == host.device {
                host.port
            } else {
                let here = dist[&dev];
                let next = topology
                    .neighbors(dev)
                    .into_iter()
                    .map(|(_, n)| n.0)
                    .filter(|n| dist.get(n) == Some(&(here - 1)))
                    .min()
                    .expect("connected graph has a closer neighbor");
                topology.port_toward(dev, next).expect("neighbor is linked")
            };
            rules.push(FlowRule::forward(m, priority, port, cookie));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Controller {
    view: NetworkView,
    mode: CompromiseMode,
}

impl Controller {
    pub fn new(topology: Topology) -> Self {
        let tables = topology.device_ids().map(|d| (d, FlowTable::new())).collect();
        Self {
            view: NetworkView {
                topology,
                tables,
                version: 0,
            },
            mode: CompromiseMode::Honest,
        }
    }

    pub fn mode(&self) -> &CompromiseMode {
        &self.mode
    }

    pub fn query_view(&self) -> NetworkView {
        self.view.clone()
    }

    fn claim(&mut self, device: DeviceId, command: FlowModCommand, rule: &FlowRule) {
        if self.mode.is_concealed_target(device) {
            return;
        }
        let table = self.view.tables.entry(device).or_default();
        if table.apply(command, rule) {
            self.view.version += 1;
        }
    }

    fn translate(
        &mut self,
        rules: Vec<(DeviceId, FlowRule)>,
        class: PriorityClass,
        command: FlowModCommand,
    ) -> Vec<FlowMod> {
        let mut mods = Vec::with_capacity(rules.len());
        for (device, mut rule) in rules {
            rule.priority = class.clamp(rule.priority);
            self.claim(device, command, &rule);
            if class == PriorityClass::GwardarHigh && self.mode.suppresses_gwardar_on(device) {
                continue;
            }
            mods.push(FlowMod {
                device,
                command,
                rule,
            });
        }
        mods
    }

    /// Translates a policy into southbound FlowMods. A compromised NOS may suppress some of them
    /// or leave the view untouched; the caller only sees what it emits.
    pub fn submit_policy(&mut self, rules: Vec<(DeviceId, FlowRule)>, class: PriorityClass) -> Vec<FlowMod> {
        self.translate(rules, class, FlowModCommand::Add)
    }

    pub fn withdraw_policy(&mut self, rules: Vec<(DeviceId, FlowRule)>, class: PriorityClass) -> Vec<FlowMod> {
        self.translate(rules, class, FlowModCommand::DeleteStrict)
    }

    /// Switches the NOS into `mode` and returns the attacker FlowMods it pushes southbound.
    pub fn compromise(&mut self, mode: CompromiseMode, _now: SimTime) -> Vec<FlowMod> {
        let rules = match &mode {
            CompromiseMode::Honest => Vec::new(),
            CompromiseMode::MaliciousRules { rules, .. }
            | CompromiseMode::MaliciousRulesConcealed { rules, .. } => rules.clone(),
        };
        self.mode = mode;
        rules
            .into_iter()
            .map(|(device, rule)| {
                self.claim(device, FlowModCommand::Add, &rule);
                FlowMod::add(device, rule)
            })
            .collect()
    }
}
