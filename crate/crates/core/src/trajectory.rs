// SPDX-License-Identifier: Apache-2.0

//! Actual and expected trajectory databases, header classes, and reachability over the replica.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataplane::{honest_step, propagate, Terminal, Trajectory, TrajectoryHop};
use crate::error::{Error, Result};
use crate::interceptor::VirtualReplica;
use crate::netmodel::{
    DeviceId, Endpoint, HeaderSpace, Ipv4Prefix, PacketHeader, SimTime, Topology, LOCAL_PORT,
};

/// Traffic class: source prefix, destination prefix and protocol.
///
/// Addresses are masked to the host prefixes they belong to (a `/32` when unattached). Since
/// the source prefix pins the ingress device and routing matches on prefixes, every header in a
/// class follows the same rule sequence for a fixed table state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeaderClass {
    pub src: Ipv4Prefix,
    pub dst: Ipv4Prefix,
    pub proto: u8,
}

impl HeaderClass {
    pub fn of(topology: &Topology, header: &PacketHeader) -> Self {
        let mask = |a: Ipv4Addr| {
            topology
                .attachment_of(a)
                .map_or_else(|| Ipv4Prefix::host(a), |h| h.prefix)
        };
        Self {
            src: mask(header.src_addr),
            dst: mask(header.dst_addr),
            proto: header.proto,
        }
    }

    pub fn key(&self) -> HeaderSpace {
        HeaderSpace {
            src: self.src,
            dst: self.dst,
            src_port: None,
            dst_port: None,
            proto: Some(self.proto),
        }
    }

    /// Lowest-address member of the class.
    pub fn representative(&self, packet_id: u64) -> PacketHeader {
        PacketHeader::new(self.src.network(), self.dst.network(), self.proto, packet_id)
    }
}

impl fmt::Display for HeaderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}:{}", self.src, self.dst, self.proto)
    }
}

impl FromStr for HeaderClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad class key {s:?}"));
        let (src, rest) = s.split_once('>').ok_or_else(bad)?;
        let (dst, proto) = rest.rsplit_once(':').ok_or_else(bad)?;
        Ok(Self {
            src: src.parse()?,
            dst: dst.parse()?,
            proto: proto.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for HeaderClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeaderClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreRole {
    ActualDb,
    ExpectedDb,
}

/// A second sighting of a packet id with a different hop sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEvidence {
    pub packet_id: u64,
    pub duplicate: Trajectory,
}

impl ReplayEvidence {
    /// The device that re-emitted the packet.
    pub fn origin(&self) -> Option<DeviceId> {
        self.duplicate.hops.first().map(|h| h.device)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    role: StoreRole,
    topology: Topology,
    by_packet: HashMap<u64, Trajectory>,
    by_class: BTreeMap<HeaderClass, Vec<u64>>,
    order: Vec<u64>,
    replay_evidence: Vec<ReplayEvidence>,
}

impl TrajectoryStore {
    pub fn new(role: StoreRole, topology: Topology) -> Self {
        Self {
            role,
            topology,
            by_packet: HashMap::new(),
            by_class: BTreeMap::new(),
            order: Vec::new(),
            replay_evidence: Vec::new(),
        }
    }

    pub fn role(&self) -> StoreRole {
        self.role
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn class_of(&self, t: &Trajectory) -> Option<HeaderClass> {
        t.header().map(|h| HeaderClass::of(&self.topology, h))
    }

    /// Indexes a complete trajectory. A repeated packet id is rejected; if the hops differ the
    /// duplicate is also kept as replay evidence.
    pub fn record(&mut self, trajectory: Trajectory) -> Result<()> {
        if !trajectory.is_complete() || trajectory.hops.is_empty() {
            return Err(Error::IncompleteTrajectory(trajectory.packet_id));
        }
        let id = trajectory.packet_id;
        if let Some(existing) = self.by_packet.get(&id) {
            if existing.hops != trajectory.hops {
                self.replay_evidence.push(ReplayEvidence {
                    packet_id: id,
                    duplicate: trajectory,
                });
            }
            return Err(Error::DuplicatePacketId(id));
        }
        let class = self.class_of(&trajectory).expect("non-empty");
        self.by_class.entry(class).or_default().push(id);
        self.order.push(id);
        self.by_packet.insert(id, trajectory);
        Ok(())
    }

    pub fn record_actual(&mut self, trajectory: Trajectory) -> Result<()> {
        self.record(trajectory)
    }

    pub fn get(&self, packet_id: u64) -> Option<&Trajectory> {
        self.by_packet.get(&packet_id)
    }

    /// All trajectories in recording order.
    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.order.iter().map(|id| &self.by_packet[id])
    }

    /// Recorded trajectories from position `cursor` on.
    pub fn since(&self, cursor: usize) -> impl Iterator<Item = &Trajectory> + '_ {
        self.order[cursor.min(self.order.len())..]
            .iter()
            .map(|id| &self.by_packet[id])
    }

    pub fn classes(&self) -> impl Iterator<Item = &HeaderClass> + '_ {
        self.by_class.keys()
    }

    pub fn by_class(&self, class: &HeaderClass) -> impl Iterator<Item = &Trajectory> + '_ {
        self.by_class
            .get(class)
            .into_iter()
            .flatten()
            .map(|id| &self.by_packet[id])
    }

    /// Trajectories of `class` injected inside `[start, end)`.
    pub fn in_window(&self, class: &HeaderClass, start: SimTime, end: SimTime) -> impl Iterator<Item = &Trajectory> + '_ {
        self.by_class(class)
            .filter(move |t| (start..end).contains(&t.injected_at()))
    }

    pub fn replay_evidence(&self) -> &[ReplayEvidence] {
        &self.replay_evidence
    }

    pub fn export_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for t in self.iter() {
            let rec = TrajectoryRecord {
                packet_id: t.packet_id,
                class_key: self.class_of(t).expect("stored trajectories are non-empty"),
                hops: t.hops.clone(),
                terminal: t.terminal,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn import_ndjson<R: BufRead>(&mut self, input: R) -> Result<usize> {
        let mut n = 0;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            self.record(Trajectory {
                packet_id: rec.packet_id,
                hops: rec.hops,
                terminal: rec.terminal,
            })?;
            n += 1;
        }
        Ok(n)
    }
}

/// One line of a trajectory export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub packet_id: u64,
    pub class_key: HeaderClass,
    pub hops: Vec<TrajectoryHop>,
    pub terminal: Terminal,
}

/// Where traffic from `device` enters: its first host port, or the local pseudo-port.
pub fn default_ingress(topology: &Topology, device: DeviceId) -> Endpoint {
    topology
        .hosts_of(device)
        .next()
        .map_or(Endpoint(device, LOCAL_PORT), |h| h.endpoint())
}

/// Propagates `header` through the replica's tables using data-plane lookup semantics.
pub fn expected_trajectory(
    replica: &VirtualReplica,
    header: PacketHeader,
    ingress: Endpoint,
) -> Result<Trajectory> {
    expected_trajectory_at(replica, header, ingress, 0)
}

pub fn expected_trajectory_at(
    replica: &VirtualReplica,
    header: PacketHeader,
    ingress: Endpoint,
    start: SimTime,
) -> Result<Trajectory> {
    let (t, _) = propagate(&replica.topology, header, ingress, start, |d, h| {
        honest_step(replica.tables.get(&d), h)
    })?;
    Ok(t)
}

/// A header that the replica delivers from `source` to a host prefix on `destination`.
/// Uses the lowest address of the first such prefix; `None` if none is reachable.
pub fn find_packet(
    replica: &VirtualReplica,
    source: DeviceId,
    destination: DeviceId,
    proto: u8,
) -> Option<PacketHeader> {
    let topo = &replica.topology;
    if !topo.has_device(source) {
        return None;
    }
    let ingress = default_ingress(topo, source);
    let src_addr = topo
        .hosts_of(source)
        .next()
        .map_or(Ipv4Addr::UNSPECIFIED, |h| h.prefix.network());
    topo.hosts_of(destination).find_map(|h| {
        let header = PacketHeader::new(src_addr, h.prefix.network(), proto, 0);
        let t = expected_trajectory(replica, header, ingress).ok()?;
        let last = t.hops.last()?;
        (t.terminal == Terminal::Delivered
            && last.device == destination
            && last.out_port == Some(h.port))
        .then_some(header)
    })
}

/// Same devices, ports, headers and terminal; timestamps ignored.
pub fn same_path(a: &Trajectory, b: &Trajectory) -> bool {
    a.terminal == b.terminal
        && a.hops.len() == b.hops.len()
        && a.hops.iter().zip(&b.hops).all(|(x, y)| {
            x.device == y.device
                && x.in_port == y.in_port
                && x.out_port == y.out_port
                && x.observed_header == y.observed_header
        })
}
