// SPDX-License-Identifier: Apache-2.0

//! Ordered controller/switch message stream, persisted as newline-delimited JSON.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{DeviceId, FlowMod, PacketHeader, SimTime};

/// Who put a message on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Controller,
    Gwardar,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SouthboundMessage {
    FlowMod(FlowMod),
    PacketIn { device: DeviceId, header: PacketHeader },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SouthboundRecord {
    pub seq: u64,
    pub time: SimTime,
    pub origin: Origin,
    #[serde(flatten)]
    pub message: SouthboundMessage,
}

impl SouthboundRecord {
    pub fn flow_mod(&self) -> Option<&FlowMod> {
        match &self.message {
            SouthboundMessage::FlowMod(m) => Some(m),
            SouthboundMessage::PacketIn { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SouthboundChannel {
    records: Vec<SouthboundRecord>,
}

impl SouthboundChannel {
    pub fn push(&mut self, time: SimTime, origin: Origin, message: SouthboundMessage) {
        let seq = self.records.len() as u64;
        self.records.push(SouthboundRecord {
            seq,
            time,
            origin,
            message,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records from position `cursor` onward.
    pub fn since(&self, cursor: usize) -> &[SouthboundRecord] {
        &self.records[cursor.min(self.records.len())..]
    }

    pub fn records(&self) -> &[SouthboundRecord] {
        &self.records
    }
}

pub fn write_ndjson<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a SouthboundRecord>,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<SouthboundRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
