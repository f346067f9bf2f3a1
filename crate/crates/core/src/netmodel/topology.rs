// SPDX-License-Identifier: Apache-2.0

//! Devices, symmetric links and host prefix attachments.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::header::Ipv4Prefix;
use super::rule::PortNo;
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// A `(device, port)` pair. Serialized as `[device, port]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint(pub DeviceId, pub PortNo);

impl Endpoint {
    pub fn device(&self) -> DeviceId {
        self.0
    }

    pub fn port(&self) -> PortNo {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HostAttachment {
    pub prefix: Ipv4Prefix,
    pub device: DeviceId,
    pub port: PortNo,
}

impl HostAttachment {
    pub fn endpoint(&self) -> Endpoint {
        Endpoint(self.device, self.port)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    devices: BTreeMap<DeviceId, PortNo>,
    // Both directions are stored.
    links: BTreeMap<Endpoint, Endpoint>,
    hosts: Vec<HostAttachment>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_device(&mut self, id: DeviceId, port_count: PortNo) -> Result<(), Error> {
        if self.devices.insert(id, port_count).is_some() {
            return Err(Error::InvalidTopology(format!("duplicate device {id}")));
        }
        Ok(())
    }

    /// Grows a device's port count and returns the new highest port.
    pub fn add_port(&mut self, id: DeviceId) -> Result<PortNo, Error> {
        let count = self.devices.get_mut(&id).ok_or(Error::UnknownDevice(id))?;
        *count += 1;
        Ok(*count)
    }

    fn check_free(&self, ep: Endpoint) -> Result<(), Error> {
        let ports = *self.devices.get(&ep.0).ok_or(Error::UnknownDevice(ep.0))?;
        if ep.1 == 0 || ep.1 > ports {
            return Err(Error::InvalidTopology(format!("{} has no port {}", ep.0, ep.1)));
        }
        if self.links.contains_key(&ep) || self.host_at(ep).is_some() {
            return Err(Error::InvalidTopology(format!("port {}:{} already in use", ep.0, ep.1)));
        }
        Ok(())
    }

    pub fn add_link(&mut self, a: Endpoint, b: Endpoint) -> Result<(), Error> {
        if a.0 == b.0 {
            return Err(Error::InvalidTopology(format!("self-link on {}", a.0)));
        }
        self.check_free(a)?;
        self.check_free(b)?;
        self.links.insert(a, b);
        self.links.insert(b, a);
        Ok(())
    }

    /// Adds a fresh port on each side and links them.
    pub fn connect(&mut self, a: DeviceId, b: DeviceId) -> Result<(PortNo, PortNo), Error> {
        let pa = self.add_port(a)?;
        let pb = self.add_port(b)?;
        self.add_link(Endpoint(a, pa), Endpoint(b, pb))?;
        Ok((pa, pb))
    }

    pub fn attach_host(&mut self, prefix: Ipv4Prefix, device: DeviceId, port: PortNo) -> Result<(), Error> {
        if self.hosts.iter().any(|h| h.prefix == prefix) {
            return Err(Error::InvalidTopology(format!("prefix {prefix} attached twice")));
        }
        let ep = Endpoint(device, port);
        if self.host_at(ep).is_none() {
            self.check_free(ep)?;
        }
        self.hosts.push(HostAttachment { prefix, device, port });
        Ok(())
    }

    pub fn has_device(&self, id: DeviceId) -> bool {
        self.devices.contains_key(&id)
    }

    pub fn port_count(&self, id: DeviceId) -> Option<PortNo> {
        self.devices.get(&id).copied()
    }

    pub fn device_ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices.keys().copied()
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn has_endpoint(&self, ep: Endpoint) -> bool {
        self.devices
            .get(&ep.0)
            .is_some_and(|&n| ep.1 == super::rule::LOCAL_PORT || ep.1 <= n)
    }

    pub fn peer(&self, ep: Endpoint) -> Option<Endpoint> {
        self.links.get(&ep).copied()
    }

    /// Each link once, lower endpoint first.
    pub fn links(&self) -> impl Iterator<Item = (Endpoint, Endpoint)> + '_ {
        self.links.iter().filter(|(a, b)| a < b).map(|(a, b)| (*a, *b))
    }

    pub fn num_links(&self) -> usize {
        self.links.len() / 2
    }

    /// `(local port, neighbor endpoint)` pairs in port order.
    pub fn neighbors(&self, id: DeviceId) -> Vec<(PortNo, Endpoint)> {
        self.links
            .range(Endpoint(id, 0)..=Endpoint(id, PortNo::MAX))
            .map(|(a, b)| (a.1, *b))
            .collect()
    }

    /// Lowest port of `from` linked to `to`.
    pub fn port_toward(&self, from: DeviceId, to: DeviceId) -> Option<PortNo> {
        self.neighbors(from)
            .into_iter()
            .find(|(_, n)| n.0 == to)
            .map(|(p, _)| p)
    }

    pub fn hosts(&self) -> &[HostAttachment] {
        &self.hosts
    }

    pub fn host_at(&self, ep: Endpoint) -> Option<&HostAttachment> {
        self.hosts.iter().find(|h| h.endpoint() == ep)
    }

    pub fn hosts_of(&self, id: DeviceId) -> impl Iterator<Item = &HostAttachment> + '_ {
        self.hosts.iter().filter(move |h| h.device == id)
    }

    /// Longest attached prefix containing `addr`.
    pub fn attachment_of(&self, addr: Ipv4Addr) -> Option<&HostAttachment> {
        self.hosts
            .iter()
            .filter(|h| h.prefix.contains(addr))
            .max_by_key(|h| h.prefix.len())
    }

    /// Breadth-first hop distances from `from`.
    pub fn distances_from(&self, from: DeviceId) -> BTreeMap<DeviceId, usize> {
        let mut dist = BTreeMap::new();
        if !self.has_device(from) {
            return dist;
        }
        dist.insert(from, 0);
        let mut queue = VecDeque::from([from]);
        while let Some(d) = queue.pop_front() {
            let next = dist[&d] + 1;
            for (_, n) in self.neighbors(d) {
                if !dist.contains_key(&n.0) {
                    dist.insert(n.0, next);
                    queue.push_back(n.0);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        match self.devices.keys().next() {
            None => true,
            Some(&first) => self.distances_from(first).len() == self.devices.len(),
        }
    }

    /// Connected components of the subgraph induced by `members`.
    pub fn components(&self, members: &BTreeSet<DeviceId>) -> Vec<BTreeSet<DeviceId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in members {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some(d) = queue.pop_front() {
                for (_, n) in self.neighbors(d) {
                    if members.contains(&n.0) && seen.insert(n.0) {
                        comp.insert(n.0);
                        queue.push_back(n.0);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            devices: self
                .devices
                .iter()
                .map(|(&id, &port_count)| DeviceEntry { id, port_count })
                .collect(),
            links: self.links().map(|(a, b)| [a, b]).collect(),
            hosts: self.hosts.clone(),
        }
    }

    pub fn from_file(file: &TopologyFile) -> Result<Self, Error> {
        let mut t = Topology::new();
        for d in &file.devices {
            t.add_device(d.id, d.port_count)?;
        }
        for [a, b] in &file.links {
            t.add_link(*a, *b)?;
        }
        for h in &file.hosts {
            t.attach_host(h.prefix, h.device, h.port)?;
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("topology serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let file: TopologyFile = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_file(&file)
    }
}

/// On-disk topology schema.
///
/// ```json
/// { "devices": [{"id": 1, "port_count": 3}],
///   "links":   [[[1, 2], [2, 1]]],
///   "hosts":   [{"prefix": "10.1.0.0/16", "device": 1, "port": 1}] }
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub devices: Vec<DeviceEntry>,
    pub links: Vec<[Endpoint; 2]>,
    #[serde(default)]
    pub hosts: Vec<HostAttachment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub id: DeviceId,
    pub port_count: PortNo,
}
