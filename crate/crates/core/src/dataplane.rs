// SPDX-License-Identifier: Apache-2.0

//! Simulated data plane: flow-table forwarding, per-hop trajectory recording and
//! implantable malicious device behaviors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    DeviceId, Endpoint, FlowMod, FlowTable, HeaderField, HeaderSpace, PacketHeader, PortNo,
    SimTime, Tables, Topology,
};
use crate::southbound::{Origin, SouthboundChannel, SouthboundMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaliciousKind {
    Drop,
    Replay,
    Misroute { wrong_port: PortNo },
    Modify { field: HeaderField, value: u64 },
}

/// What a compromised device does to packets inside `selector`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaliciousBehavior {
    pub kind: MaliciousKind,
    pub selector: HeaderSpace,
    pub probability: f64,
}

impl MaliciousBehavior {
    /// Deterministic behavior on all traffic.
    pub fn universal(kind: MaliciousKind) -> Self {
        Self {
            kind,
            selector: HeaderSpace::universal(),
            probability: 1.0,
        }
    }

    pub fn selective(kind: MaliciousKind, selector: HeaderSpace) -> Self {
        Self {
            kind,
            selector,
            probability: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrajectoryHop {
    pub device: DeviceId,
    pub in_port: PortNo,
    /// `None` when the packet ended here without being forwarded.
    pub out_port: Option<PortNo>,
    /// Header as it arrived at this device.
    pub observed_header: PacketHeader,
    pub time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Delivered,
    Dropped,
    Looped,
    InFlight,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub packet_id: u64,
    pub hops: Vec<TrajectoryHop>,
    pub terminal: Terminal,
}

impl Trajectory {
    pub fn devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.hops.iter().map(|h| h.device)
    }

    /// Header at the ingress hop.
    pub fn header(&self) -> Option<&PacketHeader> {
        self.hops.first().map(|h| &h.observed_header)
    }

    pub fn ingress(&self) -> Option<Endpoint> {
        self.hops.first().map(|h| Endpoint(h.device, h.in_port))
    }

    pub fn injected_at(&self) -> SimTime {
        self.hops.first().map_or(0, |h| h.time)
    }

    pub fn is_complete(&self) -> bool {
        self.terminal != Terminal::InFlight
    }
}

/// Per-hop forwarding decision handed to [`propagate`].
#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub out_port: Option<PortNo>,
    pub header_out: PacketHeader,
    pub replay: bool,
}

/// Walks a packet hop by hop, asking `decide` at each device. Stops on drop, host delivery,
/// an unconnected port, or after `2 * |devices|` hops (flagged `Looped`).
///
/// Returns the trajectory and, for hops whose decision asked for a replay, the index of that hop.
pub fn propagate(
    topology: &Topology,
    header: PacketHeader,
    ingress: Endpoint,
    start: SimTime,
    mut decide: impl FnMut(DeviceId, &PacketHeader) -> Step,
) -> Result<(Trajectory, Vec<usize>)> {
    if !topology.has_endpoint(ingress) {
        return Err(Error::UnknownIngress(ingress));
    }
    let max_hops = 2 * topology.num_devices();
    let mut hops = Vec::new();
    let mut replays = Vec::new();
    let mut at = ingress;
    let mut hdr = header;
    let mut time = start;
    let terminal = loop {
        if hops.len() >= max_hops {
            break Terminal::Looped;
        }
        let step = decide(at.0, &hdr);
        hops.push(TrajectoryHop {
            device: at.0,
            in_port: at.1,
            out_port: step.out_port,
            observed_header: hdr,
            time,
        });
        if step.replay {
            replays.push(hops.len() - 1);
        }
        let Some(port) = step.out_port else {
            break Terminal::Dropped;
        };
        let out = Endpoint(at.0, port);
        if topology.host_at(out).is_some() {
            break Terminal::Delivered;
        }
        match topology.peer(out) {
            Some(next) => {
                at = next;
                hdr = step.header_out;
                time += 1;
            }
            None => break Terminal::Dropped,
        }
    };
    Ok((
        Trajectory {
            packet_id: header.packet_id,
            hops,
            terminal,
        },
        replays,
    ))
}

/// Honest single-table lookup. A table miss drops.
pub fn honest_step(table: Option<&FlowTable>, header: &PacketHeader) -> Step {
    match table.and_then(|t| t.lookup(header)) {
        Some(rule) => {
            let (out_port, header_out) = rule.apply(header);
            Step {
                out_port,
                header_out,
                replay: false,
            }
        }
        None => Step {
            out_port: None,
            header_out: *header,
            replay: false,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardingDevice {
    pub id: DeviceId,
    pub table: FlowTable,
    pub compromise: Option<MaliciousBehavior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowModAck {
    pub device: DeviceId,
    pub changed: bool,
}

#[derive(Debug, Clone)]
pub struct DataPlane {
    topology: Topology,
    devices: BTreeMap<DeviceId, ForwardingDevice>,
    loss_probability: f64,
    rng: ChaCha8Rng,
    now: SimTime,
    channel: SouthboundChannel,
    pending_replays: Vec<Trajectory>,
}

impl DataPlane {
    pub fn new(topology: Topology, seed: u64) -> Self {
        let devices = topology
            .device_ids()
            .map(|id| {
                (
                    id,
                    ForwardingDevice {
                        id,
                        table: FlowTable::new(),
                        compromise: None,
                    },
                )
            })
            .collect();
        Self {
            topology,
            devices,
            loss_probability: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            channel: SouthboundChannel::default(),
            pending_replays: Vec::new(),
        }
    }

    /// I.i.d. per-hop loss probability emulating congestion.
    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_probability = p.clamp(0.0, 1.0);
        self
    }

    pub fn set_loss(&mut self, p: f64) {
        self.loss_probability = p.clamp(0.0, 1.0);
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn set_time(&mut self, t: SimTime) {
        self.now = t;
    }

    pub fn channel(&self) -> &SouthboundChannel {
        &self.channel
    }

    pub fn device(&self, id: DeviceId) -> Option<&ForwardingDevice> {
        self.devices.get(&id)
    }

    pub fn apply_flow_mod(&mut self, m: &FlowMod, origin: Origin) -> Result<FlowModAck> {
        let dev = self
            .devices
            .get_mut(&m.device)
            .ok_or(Error::UnknownDevice(m.device))?;
        let changed = dev.table.apply(m.command, &m.rule);
        self.channel
            .push(self.now, origin, SouthboundMessage::FlowMod(m.clone()));
        Ok(FlowModAck {
            device: m.device,
            changed,
        })
    }

    /// Silent: nothing appears on the southbound channel.
    pub fn implant_behavior(&mut self, device: DeviceId, behavior: MaliciousBehavior) -> Result<()> {
        let dev = self
            .devices
            .get_mut(&device)
            .ok_or(Error::UnknownDevice(device))?;
        dev.compromise = Some(behavior);
        Ok(())
    }

    pub fn clear_behavior(&mut self, device: DeviceId) -> Result<()> {
        let dev = self
            .devices
            .get_mut(&device)
            .ok_or(Error::UnknownDevice(device))?;
        dev.compromise = None;
        Ok(())
    }

    pub fn snapshot_tables(&self) -> Tables {
        self.devices
            .iter()
            .map(|(&id, d)| (id, d.table.clone()))
            .collect()
    }

    /// Injects a packet at `ingress` at the current time. Replayed copies are queued and can be
    /// collected with [`DataPlane::drain_replays`].
    pub fn inject_packet(&mut self, header: PacketHeader, ingress: Endpoint) -> Result<Trajectory> {
        let (trajectory, replays) = self.inject_with_replays(header, ingress)?;
        self.pending_replays.extend(replays);
        Ok(trajectory)
    }

    /// Like [`DataPlane::inject_packet`] but returns replayed copies directly.
    pub fn inject_with_replays(
        &mut self,
        header: PacketHeader,
        ingress: Endpoint,
    ) -> Result<(Trajectory, Vec<Trajectory>)> {
        let devices = &self.devices;
        let rng = &mut self.rng;
        let loss = self.loss_probability;
        let mut misses = Vec::new();
        let (trajectory, replay_at) = propagate(&self.topology, header, ingress, self.now, |id, hdr| {
            let dev = devices.get(&id);
            let table = dev.map(|d| &d.table);
            if table.and_then(|t| t.lookup(hdr)).is_none() {
                misses.push((id, *hdr));
            }
            let mut step = honest_step(table, hdr);
            if let Some(b) = dev.and_then(|d| d.compromise.as_ref()) {
                let fires = b.selector.contains(hdr)
                    && (b.probability >= 1.0 || rng.gen_bool(b.probability.max(0.0)));
                if fires {
                    match b.kind {
                        MaliciousKind::Drop => step.out_port = None,
                        MaliciousKind::Replay => step.replay = step.out_port.is_some(),
                        MaliciousKind::Misroute { wrong_port } => step.out_port = Some(wrong_port),
                        MaliciousKind::Modify { field, value } => step.header_out.set_field(field, value),
                    }
                }
            }
            if step.out_port.is_some() && loss > 0.0 && rng.gen_bool(loss) {
                step.out_port = None;
            }
            step
        })?;
        for (device, header) in misses {
            self.channel
                .push(self.now, Origin::Switch, SouthboundMessage::PacketIn { device, header });
        }
        let replays = replay_at
            .into_iter()
            .map(|i| Trajectory {
                packet_id: trajectory.packet_id,
                hops: trajectory.hops[i..]
                    .iter()
                    .map(|h| TrajectoryHop {
                        time: h.time + 1,
                        ..h.clone()
                    })
                    .collect(),
                terminal: trajectory.terminal,
            })
            .collect();
        Ok((trajectory, replays))
    }

    pub fn drain_replays(&mut self) -> Vec<Trajectory> {
        std::mem::take(&mut self.pending_replays)
    }
}
