// SPDX-License-Identifier: Apache-2.0

//! Synthetic topologies with one host prefix per device.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netmodel::{DeviceId, Ipv4Prefix, Topology};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyKind {
    Line(u32),
    Ring(u32),
    Random { n: u32, degree: u32 },
    File(PathBuf),
}

impl FromStr for TopologyKind {
    type Err = Error;

    /// `gen:line:N`, `gen:ring:N`, `gen:random:N:DEGREE`, or a file path.
    fn from_str(s: &str) -> Result<Self> {
        let Some(spec) = s.strip_prefix("gen:") else {
            return Ok(TopologyKind::File(PathBuf::from(s)));
        };
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |i: usize| -> Result<u32> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad topology spec {s:?}")))
        };
        match parts[0] {
            "line" => Ok(TopologyKind::Line(num(1)?)),
            "ring" => Ok(TopologyKind::Ring(num(1)?)),
            "random" => Ok(TopologyKind::Random {
                n: num(1)?,
                degree: num(2)?,
            }),
            other => Err(Error::Parse(format!("unknown topology generator {other:?}"))),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Line(n) => write!(f, "gen:line:{n}"),
            TopologyKind::Ring(n) => write!(f, "gen:ring:{n}"),
            TopologyKind::Random { n, degree } => write!(f, "gen:random:{n}:{degree}"),
            TopologyKind::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// `10.hi.lo.0/24` for device `i`.
pub fn default_prefix(i: u32) -> Ipv4Prefix {
    Ipv4Prefix::new(Ipv4Addr::new(10, (i >> 8) as u8, i as u8, 0), 24).expect("valid /24")
}

/// Reads one prefix per line; blank lines and `#` comments are skipped.
pub fn read_prefix_list(path: &Path) -> Result<Vec<Ipv4Prefix>> {
    std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

fn with_devices(n: u32) -> Topology {
    let mut t = Topology::new();
    for i in 0..n {
        t.add_device(DeviceId(i), 0).expect("fresh ids");
    }
    t
}

fn attach_hosts(t: &mut Topology, prefixes: Option<&[Ipv4Prefix]>) -> Result<()> {
    let ids: Vec<DeviceId> = t.device_ids().collect();
    if let Some(list) = prefixes {
        if list.len() < ids.len() {
            return Err(Error::InvalidConfig(format!(
                "prefix list has {} entries for {} devices",
                list.len(),
                ids.len()
            )));
        }
    }
    for (i, d) in ids.into_iter().enumerate() {
        let prefix = prefixes.map_or_else(|| default_prefix(d.0), |l| l[i]);
        let port = t.add_port(d)?;
        t.attach_host(prefix, d, port)?;
    }
    Ok(())
}

/// Random spanning tree plus extra random edges up to roughly `n * degree / 2` links.
fn random_graph(n: u32, degree: u32, rng: &mut ChaCha8Rng) -> Result<Topology> {
    let mut t = with_devices(n);
    let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut order: Vec<u32> = (0..n).collect();
    order.shuffle(rng);
    for i in 1..order.len() {
        let a = order[i];
        let b = order[rng.gen_range(0..i)];
        edges.insert((a.min(b), a.max(b)));
    }
    let max_edges = u64::from(n) * u64::from(n - 1) / 2;
    let target = (u64::from(n) * u64::from(degree) / 2).clamp(u64::from(n - 1), max_edges);
    while (edges.len() as u64) < target {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    for (a, b) in edges {
        t.connect(DeviceId(a), DeviceId(b))?;
    }
    Ok(t)
}

/// Builds a topology. Generated kinds get one host prefix per device, from `prefixes` if given.
pub fn generate_topology(kind: &TopologyKind, seed: u64, prefixes: Option<&[Ipv4Prefix]>) -> Result<Topology> {
    let n = match kind {
        TopologyKind::Line(n) | TopologyKind::Ring(n) | TopologyKind::Random { n, .. } => *n,
        TopologyKind::File(path) => return Topology::from_json(&std::fs::read_to_string(path)?),
    };
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 devices, got {n}")));
    }
    let mut t = match kind {
        TopologyKind::Line(_) | TopologyKind::Ring(_) => {
            let mut t = with_devices(n);
            for i in 1..n {
                t.connect(DeviceId(i - 1), DeviceId(i))?;
            }
            if matches!(kind, TopologyKind::Ring(_)) && n > 2 {
                t.connect(DeviceId(n - 1), DeviceId(0))?;
            }
            t
        }
        TopologyKind::Random { degree, .. } => random_graph(n, *degree, &mut ChaCha8Rng::seed_from_u64(seed))?,
        TopologyKind::File(_) => unreachable!(),
    };
    attach_hosts(&mut t, prefixes)?;
    Ok(t)
}
