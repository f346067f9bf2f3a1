// SPDX-License-Identifier: Apache-2.0

//! Test-only oracles. Nothing here calls library forwarding, lookup, routing or model code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gwardar::controller::CompromiseMode;
use gwardar::dataplane::{Terminal, Trajectory};
use gwardar::detection::{DetectionEvent, NosInspectionReason};
use gwardar::harness::{generate_topology, TopologyKind};
use gwardar::interceptor::Interceptor;
use gwardar::netmodel::{
    Action, CookieNamespace, DeviceId, FlowTable, Endpoint, FlowRule, HeaderField, HeaderSpace, Ipv4Prefix, PacketHeader, PortNo, SimTime, Tables,
    Topology,
};
use gwardar::dataplane::{MaliciousBehavior, MaliciousKind};
use gwardar::interceptor::VirtualReplica;
use gwardar::normal::{identify_scanning_regions, NormalModel, ScanningRegion, TimeWindow};
use gwardar::sdn::Sdn;
use gwardar::trajectory::TrajectoryStore;

pub fn in_prefix(p: &Ipv4Prefix, a: Ipv4Addr) -> bool {
    let len = u32::from(p.len());
    if len == 0 {
        return true;
    }
    let mask = u32::MAX << (32 - len);
    u32::from(a) & mask == u32::from(p.network()) & mask
}

pub fn space_has(s: &HeaderSpace, h: &PacketHeader) -> bool {
    in_prefix(&s.src, h.src_addr)
        && in_prefix(&s.dst, h.dst_addr)
        && s.src_port.is_none_or(|p| p == h.src_port)
        && s.dst_port.is_none_or(|p| p == h.dst_port)
        && s.proto.is_none_or(|p| p == h.proto)
}

/// Linear scan keeping the maximum of (priority, cookie, install_time), smaller match on a full tie.
pub fn best_rule<'a>(rules: &'a [FlowRule], h: &PacketHeader) -> Option<&'a FlowRule> {
    let mut best: Option<&FlowRule> = None;
    for r in rules.iter().filter(|r| space_has(&r.match_, h)) {
        best = Some(match best {
            None => r,
            Some(b) => {
                let ka = (r.priority, r.cookie, r.install_time);
                let kb = (b.priority, b.cookie, b.install_time);
                if ka > kb || (ka == kb && r.match_ < b.match_) {
                    r
                } else {
                    b
                }
            }
        });
    }
    best
}

fn rewrite(h: &mut PacketHeader, field: HeaderField, value: u64) {
    match field {
        HeaderField::SrcAddr => h.src_addr = Ipv4Addr::from(value as u32),
        HeaderField::DstAddr => h.dst_addr = Ipv4Addr::from(value as u32),
        HeaderField::SrcPort => h.src_port = value as u16,
        HeaderField::DstPort => h.dst_port = value as u16,
        HeaderField::Proto => h.proto = value as u8,
        HeaderField::PayloadTag => h.payload_tag = value,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleHop {
    pub device: DeviceId,
    pub in_port: PortNo,
    pub out_port: Option<PortNo>,
    pub header: PacketHeader,
}

/// Wiring read once from the topology's link and host lists.
pub struct Wiring {
    peer: BTreeMap<(u32, PortNo), (u32, PortNo)>,
    host_ports: BTreeSet<(u32, PortNo)>,
    devices: usize,
}

impl Wiring {
    pub fn of(topo: &Topology) -> Self {
        let mut peer = BTreeMap::new();
        for (a, b) in topo.links() {
            peer.insert((a.0 .0, a.1), (b.0 .0, b.1));
            peer.insert((b.0 .0, b.1), (a.0 .0, a.1));
        }
        let host_ports = topo.hosts().iter().map(|h| (h.device.0, h.port)).collect();
        Self {
            peer,
            host_ports,
            devices: topo.num_devices(),
        }
    }
}

/// Per-hop interpreter. Returns hops and terminal.
pub fn walk(tables: &Tables, wiring: &Wiring, header: PacketHeader, ingress: Endpoint) -> (Vec<OracleHop>, Terminal) {
    let mut hops = Vec::new();
    let (mut dev, mut port) = (ingress.0 .0, ingress.1);
    let mut h = header;
    loop {
        if hops.len() == 2 * wiring.devices {
            return (hops, Terminal::Looped);
        }
        let rule = tables.get(&DeviceId(dev)).and_then(|t| best_rule(t.rules(), &h));
        let mut out = h;
        let mut out_port = None;
        if let Some(r) = rule {
            for a in &r.actions {
                match *a {
                    Action::Rewrite { field, value } => rewrite(&mut out, field, value),
                    Action::Forward(p) => {
                        out_port = Some(p);
                        break;
                    }
                    Action::Drop => break,
                }
            }
        }
        hops.push(OracleHop {
            device: DeviceId(dev),
            in_port: port,
            out_port,
            header: h,
        });
        let Some(p) = out_port else {
            return (hops, Terminal::Dropped);
        };
        if wiring.host_ports.contains(&(dev, p)) {
            return (hops, Terminal::Delivered);
        }
        match wiring.peer.get(&(dev, p)) {
            Some(&(d, q)) => {
                dev = d;
                port = q;
                h = out;
            }
            None => return (hops, Terminal::Dropped),
        }
    }
}

pub fn same_as_oracle(t: &Trajectory, hops: &[OracleHop], terminal: Terminal) -> bool {
    t.terminal == terminal
        && t.hops.len() == hops.len()
        && t.hops.iter().zip(hops).all(|(a, b)| {
            a.device == b.device && a.in_port == b.in_port && a.out_port == b.out_port && a.observed_header == b.header
        })
}

pub fn bfs(topo: &Topology, from: DeviceId) -> BTreeMap<DeviceId, usize> {
    let mut adj: BTreeMap<DeviceId, Vec<DeviceId>> = BTreeMap::new();
    for (a, b) in topo.links() {
        adj.entry(a.0).or_default().push(b.0);
        adj.entry(b.0).or_default().push(a.0);
    }
    let mut dist = BTreeMap::from([(from, 0)]);
    let mut q = VecDeque::from([from]);
    while let Some(d) = q.pop_front() {
        for &n in adj.get(&d).into_iter().flatten() {
            if !dist.contains_key(&n) {
                dist.insert(n, dist[&d] + 1);
                q.push_back(n);
            }
        }
    }
    dist
}

/// (src attachment prefix, dst attachment prefix, proto), by scanning the host list.
pub fn class_of(topo: &Topology, h: &PacketHeader) -> (Ipv4Prefix, Ipv4Prefix, u8) {
    let mask = |a: Ipv4Addr| {
        topo.hosts()
            .iter()
            .filter(|x| in_prefix(&x.prefix, a))
            .max_by_key(|x| x.prefix.len())
            .map_or_else(|| Ipv4Prefix::host(a), |x| x.prefix)
    };
    (mask(h.src_addr), mask(h.dst_addr), h.proto)
}

pub fn random_topology(n: usize, degree: usize, seed: u64) -> Topology {
    generate_topology(&TopologyKind::Random { n: n as u32, degree: degree as u32 }, seed, None).unwrap()
}

/// Routed SDN with an interceptor synced to it.
pub fn routed(topo: Topology, seed: u64) -> (Sdn, Interceptor) {
    let mut sdn = Sdn::new(topo.clone(), seed);
    sdn.install_shortest_paths().unwrap();
    let mut icp = Interceptor::new(topo, 32);
    icp.sync(sdn.dataplane.channel());
    (sdn, icp)
}

pub fn random_header(topo: &Topology, rng: &mut ChaCha8Rng, id: u64) -> (PacketHeader, Endpoint) {
    let hosts = topo.hosts();
    let s = &hosts[rng.gen_range(0..hosts.len())];
    let d = &hosts[rng.gen_range(0..hosts.len())];
    let pick = |p: &Ipv4Prefix, rng: &mut ChaCha8Rng| {
        let lo = u32::from(p.network());
        let span = if p.len() == 0 { u32::MAX } else { (1u32 << (32 - u32::from(p.len()))) - 1 };
        Ipv4Addr::from(lo + rng.gen_range(0..=span))
    };
    let mut h = PacketHeader::new(pick(&s.prefix, rng), pick(&d.prefix, rng), [6, 17][rng.gen_range(0..2)], id);
    h.src_port = rng.gen();
    h.dst_port = rng.gen();
    (h, s.endpoint())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replays honest traffic into a fresh actual store.
pub fn honest_store(sdn: &mut Sdn, packets: usize, seed: u64) -> TrajectoryStore {
    let topo = sdn.topology().clone();
    let mut store = TrajectoryStore::new(gwardar::trajectory::StoreRole::ActualDb, topo.clone());
    let mut r = rng(seed);
    for i in 0..packets {
        sdn.set_time(i as SimTime / 4);
        let (h, ing) = random_header(&topo, &mut r, i as u64 + 1);
        store.record_actual(sdn.dataplane.inject_packet(h, ing).unwrap()).unwrap();
    }
    store
}

/// Lowest-address header from x's first host prefix to the first of y's prefixes that the
/// tables deliver at y, using [`walk`].
pub fn oracle_find_packet(tables: &Tables, topo: &Topology, x: DeviceId, y: DeviceId, proto: u8) -> Option<PacketHeader> {
    let wiring = Wiring::of(topo);
    let src_hosts: Vec<_> = topo.hosts().iter().filter(|h| h.device == x).collect();
    let src = src_hosts.first().map_or(Ipv4Addr::UNSPECIFIED, |h| h.prefix.network());
    let ingress = src_hosts.first().map_or(Endpoint(x, 0), |h| h.endpoint());
    topo.hosts().iter().filter(|h| h.device == y).find_map(|h| {
        let header = PacketHeader::new(src, h.prefix.network(), proto, 0);
        let (hops, term) = walk(tables, &wiring, header, ingress);
        let last = hops.last()?;
        (term == Terminal::Delivered && last.device == y && last.out_port == Some(h.port)).then_some(header)
    })
}

/// Direct transcription of the per-trajectory extractor, no caches or indexes:
///
/// ```text
/// for T_i in region, injected in window:
///   Normal(T_i) = devices(T_i)
///   for FD(x) in T_i:
///     L = { FD(y) in T_i : dist(x, y) >= 2 }
///     for FD(y) in L:
///       Pck = find_packet(x, y)
///       Normal(T_i) += devices of actual trajectories of class(Pck) in window
///   per_class[class(T_i)] += Normal(T_i)
/// ```
pub fn algorithm1(
    region: &ScanningRegion,
    store: &TrajectoryStore,
    tables: &Tables,
    window: TimeWindow,
) -> BTreeMap<(Ipv4Prefix, Ipv4Prefix, u8), BTreeSet<DeviceId>> {
    let topo = store.topology();
    let in_window = |t: &Trajectory| {
        let at = t.hops[0].time;
        at >= window.start && at < window.start + window.length
    };
    let mut out: BTreeMap<_, BTreeSet<DeviceId>> = BTreeMap::new();
    for t in store.iter() {
        if !region.member_trajectories.contains(&t.packet_id) || !in_window(t) {
            continue;
        }
        let class = class_of(topo, &t.hops[0].observed_header);
        let own: BTreeSet<DeviceId> = t.hops.iter().map(|h| h.device).collect();
        let mut normal = own.clone();
        for &x in &own {
            let dist = bfs(topo, x);
            for &y in &own {
                if dist.get(&y).copied().unwrap_or(0) < 2 {
                    continue;
                }
                let Some(pck) = oracle_find_packet(tables, topo, x, y, class.2) else {
                    continue;
                };
                let want = class_of(topo, &pck);
                for u in store.iter() {
                    if in_window(u) && class_of(topo, &u.hops[0].observed_header) == want {
                        normal.extend(u.hops.iter().map(|h| h.device));
                    }
                }
            }
        }
        out.entry(class).or_default().extend(normal);
    }
    out
}

pub fn model_sets(m: &NormalModel) -> BTreeMap<(Ipv4Prefix, Ipv4Prefix, u8), BTreeSet<DeviceId>> {
    m.per_class.iter().map(|(c, s)| ((c.src, c.dst, c.proto), s.clone())).collect()
}

/// Devices whose share of traversals is at least `threshold` of the maximum, grouped by
/// connectivity through eligible devices only.
pub fn exhaustive_regions(store: &TrajectoryStore, threshold: f64) -> Vec<BTreeSet<DeviceId>> {
    let mut counts: BTreeMap<DeviceId, u64> = BTreeMap::new();
    for t in store.iter() {
        let seen: BTreeSet<DeviceId> = t.hops.iter().map(|h| h.device).collect();
        for d in seen {
            *counts.entry(d).or_default() += 1;
        }
    }
    let max = counts.values().copied().max().unwrap_or(0) as f64;
    let eligible: BTreeSet<DeviceId> = counts.iter().filter(|(_, &c)| c as f64 >= threshold * max).map(|(&d, _)| d).collect();
    let mut adj: BTreeMap<DeviceId, Vec<DeviceId>> = BTreeMap::new();
    for (a, b) in store.topology().links() {
        if eligible.contains(&a.0) && eligible.contains(&b.0) {
            adj.entry(a.0).or_default().push(b.0);
            adj.entry(b.0).or_default().push(a.0);
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &d in &eligible {
        if !seen.insert(d) {
            continue;
        }
        let mut comp = BTreeSet::from([d]);
        let mut stack = vec![d];
        while let Some(x) = stack.pop() {
            for &n in adj.get(&x).into_iter().flatten() {
                if seen.insert(n) {
                    comp.insert(n);
                    stack.push(n);
                }
            }
        }
        out.push(comp);
    }
    out.sort();
    out
}

/// A misroute rule on `device` for `dst`, toward a neighbor that is not the routed next hop.
pub fn misroute_rule(sdn: &Sdn, device: DeviceId, dst: Ipv4Prefix) -> Option<FlowRule> {
    let topo = sdn.topology();
    let table = sdn.dataplane.device(device)?.table.clone();
    let probe = PacketHeader::new(Ipv4Addr::UNSPECIFIED, dst.network(), 6, 0);
    let routed = best_rule(table.rules(), &probe)?.out_port()?;
    let (port, _) = topo.neighbors(device).into_iter().find(|(p, _)| *p != routed)?;
    Some(
        FlowRule::forward(
            HeaderSpace::dst(dst),
            40_000,
            port,
            gwardar::netmodel::CookieNamespace::Controller.tag(7),
        )
        .installed_at(sdn.now()),
    )
}

pub fn compromise_with(sdn: &mut Sdn, concealed: bool, rules: Vec<(DeviceId, FlowRule)>) {
    let targets = rules.iter().map(|(d, _)| *d).collect();
    let mode = if concealed {
        CompromiseMode::MaliciousRulesConcealed { targets, rules }
    } else {
        CompromiseMode::MaliciousRules { targets, rules }
    };
    sdn.compromise(mode);
}

/// Every NOS inspection in `events` follows a data-plane inspection of the same anomaly that
/// either escalated, or came back inconclusive with recurrence at or above `threshold`.
pub fn phase_order_holds(events: &[DetectionEvent], threshold: u32) -> Result<usize, String> {
    let mut outcome: BTreeMap<u64, &str> = BTreeMap::new();
    let mut checked = 0;
    for e in events {
        match e {
            DetectionEvent::DataPlaneInspected { anomaly_id, outcome: o, .. } => {
                outcome.insert(*anomaly_id, o.as_str());
            }
            DetectionEvent::NosInspected { anomaly_id, reason, recurrence_count, .. } => {
                let ok = match (outcome.get(anomaly_id), reason) {
                    (Some(&"escalate"), NosInspectionReason::Escalate) => true,
                    (Some(&"inconclusive"), NosInspectionReason::Recurrence) => *recurrence_count >= threshold,
                    _ => false,
                };
                if !ok {
                    return Err(format!("anomaly {anomaly_id}: {reason:?} after {:?}", outcome.get(anomaly_id)));
                }
                checked += 1;
            }
            _ => {}
        }
    }
    Ok(checked)
}

/// Shortest-path routes toward every host prefix over the devices not in `avoid`, on the
/// ports of the full topology. Devices in `avoid` get empty tables.
pub fn routes_avoiding(topo: &Topology, avoid: &BTreeSet<DeviceId>) -> Tables {
    let mut rules: BTreeMap<DeviceId, Vec<FlowRule>> = topo.device_ids().map(|d| (d, Vec::new())).collect();
    for host in topo.hosts() {
        if avoid.contains(&host.device) {
            continue;
        }
        let mut parent: BTreeMap<DeviceId, DeviceId> = BTreeMap::new();
        let mut queue = VecDeque::from([host.device]);
        let mut seen = BTreeSet::from([host.device]);
        while let Some(d) = queue.pop_front() {
            let mut next: Vec<DeviceId> = topo.neighbors(d).into_iter().map(|(_, ep)| ep.0).collect();
            next.sort();
            for n in next {
                if !avoid.contains(&n) && seen.insert(n) {
                    parent.insert(n, d);
                    queue.push_back(n);
                }
            }
        }
        let priority = 1000 + u32::from(host.prefix.len());
        let cookie = CookieNamespace::Controller.tag(0xE0);
        for &d in &seen {
            let port = match parent.get(&d) {
                Some(&p) => topo.port_toward(d, p).unwrap(),
                None => host.port,
            };
            rules.get_mut(&d).unwrap().push(FlowRule::forward(HeaderSpace::dst(host.prefix), priority, port, cookie));
        }
    }
    rules.into_iter().map(|(d, r)| (d, FlowTable::from_rules(r))).collect()
}

/// Ring of six with a host on every device except the transit device 2.
pub fn transit_ring() -> Topology {
    let mut t = Topology::new();
    for i in 0..6 {
        t.add_device(DeviceId(i), 0).unwrap();
    }
    for i in 0..6 {
        t.connect(DeviceId(i), DeviceId((i + 1) % 6)).unwrap();
    }
    for i in [0, 1, 3, 4, 5] {
        let p = t.add_port(DeviceId(i)).unwrap();
        t.attach_host(format!("10.0.{i}.0/24").parse().unwrap(), DeviceId(i), p).unwrap();
    }
    t
}

/// (ingress, prefix, black hole?, stopping device) for every host-facing device and prefix
/// whose probe does not reach the prefix's attachment.
pub fn consistency_oracle(tables: &Tables, topo: &Topology, prefixes: &[Ipv4Prefix]) -> Vec<(DeviceId, Ipv4Prefix, bool, DeviceId)> {
    let wiring = Wiring::of(topo);
    let mut edge: Vec<DeviceId> = topo.hosts().iter().map(|h| h.device).collect();
    edge.sort();
    edge.dedup();
    let mut out = Vec::new();
    for d in edge {
        let ingress = topo.hosts().iter().find(|h| h.device == d).unwrap().endpoint();
        for &p in prefixes {
            let header = PacketHeader::new(Ipv4Addr::UNSPECIFIED, p.network(), 6, 0);
            let (hops, term) = walk(tables, &wiring, header, ingress);
            let last = hops.last().unwrap();
            let reached = term == Terminal::Delivered
                && topo.hosts().iter().any(|h| h.device == last.device && Some(h.port) == last.out_port && h.prefix == p);
            if !reached {
                out.push((d, p, term != Terminal::Looped, last.device));
            }
        }
    }
    out
}

/// Seeded instance: random topology of at most 12 devices, honest traffic, and sometimes a
/// misbehaving device so actual and replica disagree.
pub fn normal_instance(seed: u64) -> (TrajectoryStore, VirtualReplica, Vec<ScanningRegion>) {
    let n = 4 + (seed as usize % 9);
    let topo = random_topology(n, 2 + seed as usize % 2, seed);
    let (mut sdn, icp) = routed(topo.clone(), seed);
    if seed % 2 == 1 {
        let d = DeviceId((seed % n as u64) as u32);
        let (port, _) = topo.neighbors(d)[0];
        sdn.dataplane
            .implant_behavior(d, MaliciousBehavior::universal(MaliciousKind::Misroute { wrong_port: port }))
            .unwrap();
    }
    let store = honest_store(&mut sdn, 120, seed);
    let mut regions = identify_scanning_regions(&store, 0.3, 1.0, seed).unwrap();
    regions.push(ScanningRegion::whole_network(&store));
    (store, icp.replica().clone(), regions)
}
