// SPDX-License-Identifier: Apache-2.0

//! Seeded benign traffic between host prefixes.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netmodel::{Endpoint, HostAttachment, Ipv4Prefix, PacketHeader, SimTime, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    /// Packets injected per time unit.
    pub rate: u32,
    pub protos: Vec<u8>,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            rate: 40,
            protos: vec![6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficPacket {
    pub time: SimTime,
    pub header: PacketHeader,
    pub ingress: Endpoint,
}

fn random_member(prefix: Ipv4Prefix, rng: &mut ChaCha8Rng) -> Ipv4Addr {
    let lo = u32::from(prefix.network());
    let hi = u32::from(prefix.broadcast());
    Ipv4Addr::from(rng.gen_range(lo..=hi))
}

/// Uniform source and destination attachments, distinct from each other when possible.
#[derive(Debug, Clone)]
pub struct TrafficGen {
    hosts: Vec<HostAttachment>,
    config: TrafficConfig,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl TrafficGen {
    pub fn new(topology: &Topology, config: TrafficConfig, seed: u64) -> Self {
        Self {
            hosts: topology.hosts().to_vec(),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 1,
        }
    }

    pub fn config(&self) -> &TrafficConfig {
        &self.config
    }

    fn packet(&mut self, time: SimTime) -> TrafficPacket {
        let n = self.hosts.len();
        let s = self.rng.gen_range(0..n);
        let d = if n > 1 {
            (s + self.rng.gen_range(1..n)) % n
        } else {
            s
        };
        let proto = if self.config.protos.is_empty() {
            6
        } else {
            self.config.protos[self.rng.gen_range(0..self.config.protos.len())]
        };
        let src = random_member(self.hosts[s].prefix, &mut self.rng);
        let dst = random_member(self.hosts[d].prefix, &mut self.rng);
        let id = self.next_id;
        self.next_id += 1;
        TrafficPacket {
            time,
            header: PacketHeader::new(src, dst, proto, id),
            ingress: self.hosts[s].endpoint(),
        }
    }

    /// Packets for one time unit.
    pub fn tick(&mut self, time: SimTime) -> Vec<TrafficPacket> {
        if self.hosts.is_empty() {
            return Vec::new();
        }
        (0..self.config.rate).map(|_| self.packet(time)).collect()
    }
}

/// Every packet sent during `[start, start + duration)`.
pub fn generate_traffic(topology: &Topology, config: &TrafficConfig, start: SimTime, duration: SimTime, seed: u64) -> Vec<TrafficPacket> {
    let mut g = TrafficGen::new(topology, config.clone(), seed);
    (start..start + duration).flat_map(|t| g.tick(t)).collect()
}
