// SPDX-License-Identifier: Apache-2.0

//! Learning phase: dense scanning regions and the per-class normal forwarding-device sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataplane::Trajectory;
use crate::error::{Error, Result};
use crate::interceptor::VirtualReplica;
use crate::netmodel::{DeviceId, SimTime, Topology};
use crate::trajectory::{default_ingress, expected_trajectory, find_packet, HeaderClass, TrajectoryStore};

pub const DEFAULT_WINDOW_LENGTH: SimTime = 100;
pub const DEFAULT_REGION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SAMPLE_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: SimTime,
    pub length: SimTime,
}

impl TimeWindow {
    pub fn new(start: SimTime, length: SimTime) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidConfig("window length must be positive".into()));
        }
        Ok(Self { start, length })
    }

    /// Window covering `[0, end)`, at least one unit long.
    pub fn until(end: SimTime) -> Self {
        Self {
            start: 0,
            length: end.max(1),
        }
    }

    pub fn end(&self) -> SimTime {
        self.start.saturating_add(self.length)
    }

    pub fn contains(&self, t: SimTime) -> bool {
        (self.start..self.end()).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanningRegion {
    pub id: u32,
    pub devices: BTreeSet<DeviceId>,
    pub member_trajectories: BTreeSet<u64>,
    pub density_score: f64,
}

impl ScanningRegion {
    /// A region over every device, with every stored trajectory as a member.
    pub fn whole_network(store: &TrajectoryStore) -> Self {
        Self {
            id: 0,
            devices: store.topology().device_ids().collect(),
            member_trajectories: store.iter().map(|t| t.packet_id).collect(),
            density_score: 1.0,
        }
    }
}

/// Per-device traversal counts over the sampled trajectories. A device counts once per trajectory.
pub fn traversal_counts<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> BTreeMap<DeviceId, u64> {
    let mut counts = BTreeMap::new();
    for t in trajectories {
        let devices: BTreeSet<_> = t.devices().collect();
        for d in devices {
            *counts.entry(d).or_insert(0) += 1;
        }
    }
    counts
}

/// Samples the store, keeps devices whose frequency reaches `threshold * max`, and groups them
/// into topology-connected regions.
pub fn identify_scanning_regions(
    store: &TrajectoryStore,
    threshold: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<Vec<ScanningRegion>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} must be positive")));
    }
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("sample rate {sample_rate} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled: Vec<&Trajectory> = store.iter().filter(|_| rng.gen_bool(sample_rate)).collect();
    let counts = traversal_counts(sampled);
    let Some(&max) = counts.values().max() else {
        return Ok(Vec::new());
    };
    let eligible: BTreeSet<DeviceId> = counts
        .iter()
        .filter(|(_, &c)| c as f64 >= threshold * max as f64)
        .map(|(&d, _)| d)
        .collect();
    let regions = store
        .topology()
        .components(&eligible)
        .into_iter()
        .enumerate()
        .map(|(i, devices)| {
            let density_score =
                devices.iter().map(|d| counts[d] as f64 / max as f64).sum::<f64>() / devices.len() as f64;
            let member_trajectories = store
                .iter()
                .filter(|t| t.devices().any(|d| devices.contains(&d)))
                .map(|t| t.packet_id)
                .collect();
            ScanningRegion {
                id: i as u32,
                devices,
                member_trajectories,
                density_score,
            }
        })
        .collect();
    Ok(regions)
}

/// Learned normal forwarding devices per class for one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalModel {
    pub region: u32,
    pub window: TimeWindow,
    pub per_class: BTreeMap<HeaderClass, BTreeSet<DeviceId>>,
    pub built_at: SimTime,
}

impl NormalModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownClassPolicy {
    /// Fail closed: a class never seen while learning is anomalous.
    #[default]
    NotNormal,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalCheck {
    Normal,
    NotNormal,
    UnknownClass,
}

impl NormalCheck {
    pub fn is_normal(self, policy: UnknownClassPolicy) -> bool {
        match self {
            NormalCheck::Normal => true,
            NormalCheck::NotNormal => false,
            NormalCheck::UnknownClass => policy == UnknownClassPolicy::Normal,
        }
    }
}

pub fn is_normal(model: &NormalModel, class: &HeaderClass, device: DeviceId) -> NormalCheck {
    check_models(std::slice::from_ref(model), class, device)
}

/// Checks against several region models at once: a class is known if any model has it.
pub fn check_models(models: &[NormalModel], class: &HeaderClass, device: DeviceId) -> NormalCheck {
    let mut known = false;
    for m in models {
        if let Some(set) = m.per_class.get(class) {
            if set.contains(&device) {
                return NormalCheck::Normal;
            }
            known = true;
        }
    }
    if known {
        NormalCheck::NotNormal
    } else {
        NormalCheck::UnknownClass
    }
}

/// Devices of `T_i` at topology distance two or more from `x`.
fn far_devices(topology: &Topology, trajectory_devices: &BTreeSet<DeviceId>, x: DeviceId) -> Vec<DeviceId> {
    let dist = topology.distances_from(x);
    trajectory_devices
        .iter()
        .copied()
        .filter(|y| dist.get(y).is_some_and(|&d| d >= 2))
        .collect()
}

/// Runs the per-trajectory extractor over every region member in the window and unions the
/// results per class. `sub_trajectory` yields the devices a packet from `x` to `y` traversed.
fn extract(
    region: &ScanningRegion,
    members: impl Iterator<Item = Trajectory>,
    topology: &Topology,
    window: TimeWindow,
    built_at: SimTime,
    mut sub_trajectory: impl FnMut(DeviceId, DeviceId, u8) -> BTreeSet<DeviceId>,
) -> NormalModel {
    let mut cache: HashMap<(DeviceId, DeviceId, u8), BTreeSet<DeviceId>> = HashMap::new();
    let mut per_class: BTreeMap<HeaderClass, BTreeSet<DeviceId>> = BTreeMap::new();
    for t in members {
        let Some(header) = t.header() else { continue };
        let class = HeaderClass::of(topology, header);
        let own: BTreeSet<DeviceId> = t.devices().collect();
        let mut normal = own.clone();
        for &x in &own {
            for y in far_devices(topology, &own, x) {
                let devices = cache
                    .entry((x, y, class.proto))
                    .or_insert_with(|| sub_trajectory(x, y, class.proto));
                normal.extend(devices.iter().copied());
            }
        }
        per_class.entry(class).or_default().extend(normal);
    }
    NormalModel {
        region: region.id,
        window,
        per_class,
        built_at,
    }
}

/// Normal model from actual trajectories. Region members injected inside `window` are
/// decomposed pairwise; each pair contributes the devices of the actual trajectories recorded
/// in the window for the class `find_packet` returns.
pub fn build_normal_model(
    region: &ScanningRegion,
    store: &TrajectoryStore,
    replica: &VirtualReplica,
    window: TimeWindow,
) -> NormalModel {
    let members = region
        .member_trajectories
        .iter()
        .filter_map(|id| store.get(*id))
        .filter(|t| window.contains(t.injected_at()))
        .cloned();
    let topology = store.topology();
    extract(region, members, topology, window, window.end(), |x, y, proto| {
        let Some(pck) = find_packet(replica, x, y, proto) else {
            return BTreeSet::new();
        };
        let class = HeaderClass::of(topology, &pck);
        store
            .in_window(&class, window.start, window.end())
            .flat_map(|t| t.devices())
            .collect()
    })
}

/// Normal model from expected trajectories over the replica. `expected` holds the region
/// members' expected trajectories; pair sub-trajectories are recomputed on the replica.
pub fn build_expected_normal(
    region: &ScanningRegion,
    expected: &TrajectoryStore,
    replica: &VirtualReplica,
    window: TimeWindow,
) -> NormalModel {
    let members = region
        .member_trajectories
        .iter()
        .filter_map(|id| expected.get(*id))
        .filter(|t| window.contains(t.injected_at()))
        .cloned();
    extract(region, members, &replica.topology, window, window.end(), |x, y, proto| {
        let Some(pck) = find_packet(replica, x, y, proto) else {
            return BTreeSet::new();
        };
        expected_trajectory(replica, pck, default_ingress(&replica.topology, x))
            .map(|t| t.devices().collect())
            .unwrap_or_default()
    })
}
