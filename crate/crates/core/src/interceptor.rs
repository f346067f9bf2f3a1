// SPDX-License-Identifier: Apache-2.0

//! Southbound tap: rebuilds a virtual replica of every flow table from intercepted FlowMods and
//! keeps a bounded history of frozen snapshots.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{FlowMod, FlowTable, SimTime, Tables, Topology, TopologyFile};
use crate::southbound::{SouthboundChannel, SouthboundRecord};

pub const DEFAULT_SNAPSHOT_CAPACITY: usize = 32;
pub const DEFAULT_SNAPSHOT_INTERVAL: SimTime = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualReplica {
    pub topology: Topology,
    pub tables: Tables,
    pub last_update: SimTime,
}

/// Topology file schema plus a `tables` section.
#[derive(Serialize, Deserialize)]
struct ReplicaFile {
    #[serde(flatten)]
    topology: TopologyFile,
    tables: Tables,
    last_update: SimTime,
}

impl Serialize for VirtualReplica {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ReplicaFile {
            topology: self.topology.to_file(),
            tables: self.tables.clone(),
            last_update: self.last_update,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VirtualReplica {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = ReplicaFile::deserialize(d)?;
        Ok(VirtualReplica {
            topology: Topology::from_file(&f.topology).map_err(serde::de::Error::custom)?,
            tables: f.tables,
            last_update: f.last_update,
        })
    }
}

impl VirtualReplica {
    pub fn new(topology: Topology) -> Self {
        let tables = topology.device_ids().map(|d| (d, FlowTable::new())).collect();
        Self {
            topology,
            tables,
            last_update: 0,
        }
    }

    pub fn from_tables(topology: Topology, tables: Tables) -> Self {
        Self {
            topology,
            tables,
            last_update: 0,
        }
    }

    /// Same semantics as the data plane's FlowMod application.
    pub fn apply(&mut self, m: &FlowMod, time: SimTime) {
        self.tables
            .entry(m.device)
            .or_default()
            .apply(m.command, &m.rule);
        self.last_update = self.last_update.max(time);
    }

    pub fn table(&self, device: crate::netmodel::DeviceId) -> Option<&FlowTable> {
        self.tables.get(&device)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSnapshot {
    pub replica: VirtualReplica,
    pub taken_at: SimTime,
    pub trusted: bool,
}

impl ReplicaSnapshot {
    pub fn tables(&self) -> &Tables {
        &self.replica.tables
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Interceptor {
    replica: VirtualReplica,
    log: Vec<SouthboundRecord>,
    cursor: usize,
    history: VecDeque<Arc<ReplicaSnapshot>>,
    capacity: usize,
}

impl Interceptor {
    pub fn new(topology: Topology, capacity: usize) -> Self {
        Self {
            replica: VirtualReplica::new(topology),
            log: Vec::new(),
            cursor: 0,
            history: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn replica(&self) -> &VirtualReplica {
        &self.replica
    }

    pub fn on_flow_mod(&mut self, m: &FlowMod, time: SimTime) {
        self.replica.apply(m, time);
    }

    /// Consumes every message appended to `channel` since the previous call.
    pub fn sync(&mut self, channel: &SouthboundChannel) -> usize {
        let fresh = channel.since(self.cursor).to_vec();
        self.cursor = channel.len();
        for rec in &fresh {
            if let Some(m) = rec.flow_mod() {
                self.replica.apply(m, rec.time);
            }
        }
        let n = fresh.len();
        self.log.extend(fresh);
        n
    }

    /// Every intercepted message, in order.
    pub fn log(&self) -> &[SouthboundRecord] {
        &self.log
    }

    pub fn log_since(&self, mark: usize) -> &[SouthboundRecord] {
        &self.log[mark.min(self.log.len())..]
    }

    pub fn take_snapshot(&mut self, trusted: bool, now: SimTime) -> Arc<ReplicaSnapshot> {
        let snap = Arc::new(ReplicaSnapshot {
            replica: self.replica.clone(),
            taken_at: now,
            trusted,
        });
        self.history.push_back(Arc::clone(&snap));
        while self.history.len() > self.capacity {
            self.history.pop_front();
        }
        snap
    }

    pub fn history(&self) -> impl Iterator<Item = &Arc<ReplicaSnapshot>> {
        self.history.iter()
    }

    pub fn latest_trusted_snapshot(&self) -> Option<Arc<ReplicaSnapshot>> {
        self.history.iter().rev().find(|s| s.trusted).cloned()
    }

    /// Marks every snapshot taken at or after `since` untrusted. Used once an attacker rule's
    /// install time is known; replica contents are not touched.
    pub fn distrust_since(&mut self, since: SimTime) -> usize {
        let mut n = 0;
        for s in self.history.iter_mut() {
            if s.trusted && s.taken_at >= since {
                *s = Arc::new(ReplicaSnapshot {
                    trusted: false,
                    ..(**s).clone()
                });
                n += 1;
            }
        }
        n
    }
}
