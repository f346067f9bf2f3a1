// SPDX-License-Identifier: Apache-2.0

//! Core domain types: headers, header spaces, flow rules and topology.

mod header;
mod rule;
mod topology;

pub use header::{header_matches, HeaderField, HeaderSpace, Ipv4Prefix, PacketHeader};
pub use rule::{
    highest_priority_rule, Action, CookieNamespace, FlowMod, FlowModCommand, FlowRule, FlowTable,
    PortNo, SimTime, LOCAL_PORT,
};
pub use topology::{DeviceEntry, DeviceId, Endpoint, HostAttachment, Topology, TopologyFile};

use std::collections::BTreeMap;

/// Per-device flow tables, as held by the data plane, the replica or the NOS view.
pub type Tables = BTreeMap<DeviceId, FlowTable>;
