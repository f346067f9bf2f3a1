// SPDX-License-Identifier: Apache-2.0

use crate::netmodel::{DeviceId, Endpoint};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown ingress {}:{}", .0.0, .0.1)]
    UnknownIngress(Endpoint),
    #[error("topology is not connected")]
    DisconnectedTopology,
    #[error("packet id {0} already recorded")]
    DuplicatePacketId(u64),
    #[error("trajectory for packet {0} is still in flight")]
    IncompleteTrajectory(u64),
    #[error("trajectory store is empty")]
    EmptyStore,
    #[error("no trusted snapshot available")]
    NoTrustedSnapshot,
    #[error("restore incomplete on devices {0:?}")]
    PartialRestore(Vec<DeviceId>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
