// SPDX-License-Identifier: Apache-2.0

//! Flow rules, single-table lookup, and southbound FlowMod semantics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::header::{HeaderField, HeaderSpace, PacketHeader};
use super::topology::DeviceId;

pub type PortNo = u16;

/// Pseudo-port used for packets originating at the device itself.
pub const LOCAL_PORT: PortNo = 0;

/// Simulated time, one unit per hop.
pub type SimTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward(PortNo),
    Drop,
    Rewrite { field: HeaderField, value: u64 },
}

/// Origin tag carried in the upper 16 bits of a rule cookie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CookieNamespace {
    /// Anything the NOS emitted, including attacker rules pushed through a compromised NOS.
    Controller,
    /// Inspection and protective rules authored by Gwardar.
    Gwardar,
    Unknown,
}

impl CookieNamespace {
    const SHIFT: u32 = 48;

    pub fn tag(self, seq: u64) -> u64 {
        let ns: u64 = match self {
            CookieNamespace::Controller => 0x0001,
            CookieNamespace::Gwardar => 0x0002,
            CookieNamespace::Unknown => 0xffff,
        };
        (ns << Self::SHIFT) | (seq & ((1 << Self::SHIFT) - 1))
    }

    pub fn of(cookie: u64) -> Self {
        match cookie >> Self::SHIFT {
            0x0001 => CookieNamespace::Controller,
            0x0002 => CookieNamespace::Gwardar,
            _ => CookieNamespace::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowRule {
    #[serde(rename = "match")]
    pub match_: HeaderSpace,
    /// Higher wins.
    pub priority: u32,
    pub actions: Vec<Action>,
    pub cookie: u64,
    pub install_time: SimTime,
}

impl FlowRule {
    pub fn forward(match_: HeaderSpace, priority: u32, port: PortNo, cookie: u64) -> Self {
        Self {
            match_,
            priority,
            actions: vec![Action::Forward(port)],
            cookie,
            install_time: 0,
        }
    }

    pub fn drop(match_: HeaderSpace, priority: u32, cookie: u64) -> Self {
        Self {
            match_,
            priority,
            actions: vec![Action::Drop],
            cookie,
            install_time: 0,
        }
    }

    pub fn installed_at(mut self, t: SimTime) -> Self {
        self.install_time = t;
        self
    }

    /// Lookup precedence: `(priority, cookie, install_time)`.
    pub fn precedence(&self) -> (u32, u64, SimTime) {
        (self.priority, self.cookie, self.install_time)
    }

    pub fn key(&self) -> (HeaderSpace, u32) {
        (self.match_, self.priority)
    }

    /// First `Forward` port, if any action forwards.
    pub fn out_port(&self) -> Option<PortNo> {
        self.actions.iter().find_map(|a| match a {
            Action::Forward(p) => Some(*p),
            _ => None,
        })
    }

    /// Applies rewrites in order up to the first forward or drop; returns the output port
    /// (`None` means drop) and the header as it leaves the device.
    pub fn apply(&self, header: &PacketHeader) -> (Option<PortNo>, PacketHeader) {
        let mut out = *header;
        for action in &self.actions {
            match *action {
                Action::Rewrite { field, value } => out.set_field(field, value),
                Action::Forward(p) => return (Some(p), out),
                Action::Drop => return (None, out),
            }
        }
        (None, out)
    }
}

// Descending precedence, match as a final tie-break so the order is total.
fn table_order(a: &FlowRule, b: &FlowRule) -> Ordering {
    b.precedence()
        .cmp(&a.precedence())
        .then_with(|| a.match_.cmp(&b.match_))
}

/// Returns the matching rule with maximal `(priority, cookie, install_time)`.
pub fn highest_priority_rule<'a>(
    rules: impl IntoIterator<Item = &'a FlowRule>,
    header: &PacketHeader,
) -> Option<&'a FlowRule> {
    rules
        .into_iter()
        .filter(|r| r.match_.contains(header))
        .min_by(|a, b| table_order(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowModCommand {
    /// Insert, overwriting any rule with equal `(match, priority)`.
    Add,
    /// Replace the rule with equal `(match, priority)`; no-op if absent.
    Modify,
    /// Remove every rule whose match lies inside the given match.
    Delete,
    /// Remove the rule with equal `(match, priority)`.
    DeleteStrict,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowMod {
    pub device: DeviceId,
    pub command: FlowModCommand,
    pub rule: FlowRule,
}

impl FlowMod {
    pub fn add(device: DeviceId, rule: FlowRule) -> Self {
        Self {
            device,
            command: FlowModCommand::Add,
            rule,
        }
    }

    pub fn delete_all(device: DeviceId) -> Self {
        Self {
            device,
            command: FlowModCommand::Delete,
            rule: FlowRule {
                match_: HeaderSpace::universal(),
                priority: 0,
                actions: vec![Action::Drop],
                cookie: 0,
                install_time: 0,
            },
        }
    }

    pub fn delete_strict(device: DeviceId, rule: FlowRule) -> Self {
        Self {
            device,
            command: FlowModCommand::DeleteStrict,
            rule,
        }
    }
}

/// One device's rule set, kept sorted by lookup precedence and unique on `(match, priority)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: impl IntoIterator<Item = FlowRule>) -> Self {
        let mut t = Self::new();
        for r in rules {
            t.insert(r);
        }
        t
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn contains(&self, rule: &FlowRule) -> bool {
        self.rules.iter().any(|r| r == rule)
    }

    pub fn get(&self, key: &(HeaderSpace, u32)) -> Option<&FlowRule> {
        self.rules.iter().find(|r| &r.key() == key)
    }

    pub fn lookup(&self, header: &PacketHeader) -> Option<&FlowRule> {
        // Sorted by precedence, so the first hit is the winner.
        self.rules.iter().find(|r| r.match_.contains(header))
    }

    fn insert(&mut self, rule: FlowRule) {
        let key = rule.key();
        self.rules.retain(|r| r.key() != key);
        let pos = self
            .rules
            .binary_search_by(|probe| table_order(probe, &rule))
            .unwrap_or_else(|e| e);
        self.rules.insert(pos, rule);
    }

    pub fn clear(&mut self) {
        self.rules.clear();
    }

    /// Applies one FlowMod command; returns true if the table changed.
    pub fn apply(&mut self, command: FlowModCommand, rule: &FlowRule) -> bool {
        let before = self.rules.len();
        match command {
            FlowModCommand::Add => {
                let changed = !self.contains(rule);
                self.insert(rule.clone());
                changed
            }
            FlowModCommand::Modify => {
                let key = rule.key();
                match self.get(&key) {
                    Some(existing) if existing != rule => {
                        self.insert(rule.clone());
                        true
                    }
                    _ => false,
                }
            }
            FlowModCommand::Delete => {
                let m = rule.match_;
                self.rules.retain(|r| !m.covers(&r.match_));
                self.rules.len() != before
            }
            FlowModCommand::DeleteStrict => {
                let key = rule.key();
                self.rules.retain(|r| r.key() != key);
                self.rules.len() != before
            }
        }
    }
}
