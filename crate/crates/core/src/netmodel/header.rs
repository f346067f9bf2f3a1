// SPDX-License-Identifier: Apache-2.0

//! Packet headers and the wildcard-capable spaces rules match against.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// An IPv4 network in CIDR form. Host bits are always cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Prefix {
    addr: u32,
    len: u8,
}

impl Ipv4Prefix {
    /// The universal prefix `0.0.0.0/0`.
    pub const ANY: Ipv4Prefix = Ipv4Prefix { addr: 0, len: 0 };

    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, Error> {
        if len > 32 {
            return Err(Error::Parse(format!("prefix length {len} exceeds 32")));
        }
        Ok(Self {
            addr: u32::from(addr) & mask(len),
            len,
        })
    }

    /// A `/32` host prefix.
    pub fn host(addr: Ipv4Addr) -> Self {
        Self {
            addr: u32::from(addr),
            len: 32,
        }
    }

    pub fn network(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr)
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_universal(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & mask(self.len) == self.addr
    }

    /// True if every address of `other` lies inside `self`.
    pub fn covers(&self, other: &Ipv4Prefix) -> bool {
        self.len <= other.len && other.addr & mask(self.len) == self.addr
    }

    /// Prefixes are either nested or disjoint, so the intersection is the longer one or empty.
    pub fn intersect(&self, other: &Ipv4Prefix) -> Option<Ipv4Prefix> {
        if self.covers(other) {
            Some(*other)
        } else if other.covers(self) {
            Some(*self)
        } else {
            None
        }
    }

    /// The last address inside the prefix.
    pub fn broadcast(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr | !mask(self.len))
    }
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.len)
    }
}

impl FromStr for Ipv4Prefix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = match s.split_once('/') {
            Some((a, l)) => (
                a,
                l.parse::<u8>()
                    .map_err(|_| Error::Parse(format!("bad prefix length in {s:?}")))?,
            ),
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr
            .parse()
            .map_err(|_| Error::Parse(format!("bad address in {s:?}")))?;
        Ipv4Prefix::new(addr, len)
    }
}

impl Serialize for Ipv4Prefix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv4Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Concrete identity of one packet as observed at a hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketHeader {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
    /// Stand-in for the payload; any change reveals tampering.
    pub payload_tag: u64,
    /// Unique per injected packet; a second sighting is a replay.
    pub packet_id: u64,
}

impl PacketHeader {
    pub fn new(src_addr: Ipv4Addr, dst_addr: Ipv4Addr, proto: u8, packet_id: u64) -> Self {
        Self {
            src_addr,
            dst_addr,
            src_port: 0,
            dst_port: 0,
            proto,
            payload_tag: packet_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            packet_id,
        }
    }

    pub fn field(&self, field: HeaderField) -> u64 {
        match field {
            HeaderField::SrcAddr => u64::from(u32::from(self.src_addr)),
            HeaderField::DstAddr => u64::from(u32::from(self.dst_addr)),
            HeaderField::SrcPort => u64::from(self.src_port),
            HeaderField::DstPort => u64::from(self.dst_port),
            HeaderField::Proto => u64::from(self.proto),
            HeaderField::PayloadTag => self.payload_tag,
        }
    }

    /// Overwrites one field; values are truncated to the field width.
    pub fn set_field(&mut self, field: HeaderField, value: u64) {
        match field {
            HeaderField::SrcAddr => self.src_addr = Ipv4Addr::from(value as u32),
            HeaderField::DstAddr => self.dst_addr = Ipv4Addr::from(value as u32),
            HeaderField::SrcPort => self.src_port = value as u16,
            HeaderField::DstPort => self.dst_port = value as u16,
            HeaderField::Proto => self.proto = value as u8,
            HeaderField::PayloadTag => self.payload_tag = value,
        }
    }

    pub fn with_field(mut self, field: HeaderField, value: u64) -> Self {
        self.set_field(field, value);
        self
    }
}

/// Header fields a rule or a malicious device may rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderField {
    SrcAddr,
    DstAddr,
    SrcPort,
    DstPort,
    Proto,
    PayloadTag,
}

/// Ternary match over [`PacketHeader`] fields: prefixes on addresses, exact-or-any elsewhere.
///
/// `payload_tag` and `packet_id` are never matched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeaderSpace {
    pub src: Ipv4Prefix,
    pub dst: Ipv4Prefix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<u8>,
}

impl Default for HeaderSpace {
    fn default() -> Self {
        Self::universal()
    }
}

impl HeaderSpace {
    pub const fn universal() -> Self {
        Self {
            src: Ipv4Prefix::ANY,
            dst: Ipv4Prefix::ANY,
            src_port: None,
            dst_port: None,
            proto: None,
        }
    }

    pub fn dst(prefix: Ipv4Prefix) -> Self {
        Self {
            dst: prefix,
            ..Self::universal()
        }
    }

    pub fn is_universal(&self) -> bool {
        *self == Self::universal()
    }

    /// Membership test.
    pub fn contains(&self, header: &PacketHeader) -> bool {
        self.src.contains(header.src_addr)
            && self.dst.contains(header.dst_addr)
            && exact_ok(self.src_port, header.src_port)
            && exact_ok(self.dst_port, header.dst_port)
            && exact_ok(self.proto, header.proto)
    }

    /// True if `other` is a subset of `self`.
    pub fn covers(&self, other: &HeaderSpace) -> bool {
        self.src.covers(&other.src)
            && self.dst.covers(&other.dst)
            && covers_exact(self.src_port, other.src_port)
            && covers_exact(self.dst_port, other.dst_port)
            && covers_exact(self.proto, other.proto)
    }

    pub fn intersect(&self, other: &HeaderSpace) -> Option<HeaderSpace> {
        Some(HeaderSpace {
            src: self.src.intersect(&other.src)?,
            dst: self.dst.intersect(&other.dst)?,
            src_port: meet_exact(self.src_port, other.src_port)?,
            dst_port: meet_exact(self.dst_port, other.dst_port)?,
            proto: meet_exact(self.proto, other.proto)?,
        })
    }
}

fn exact_ok<T: PartialEq>(m: Option<T>, v: T) -> bool {
    m.map_or(true, |m| m == v)
}

fn covers_exact<T: PartialEq>(outer: Option<T>, inner: Option<T>) -> bool {
    match (outer, inner) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(a), Some(b)) => a == b,
    }
}

// Outer `None` means empty intersection.
fn meet_exact<T: PartialEq + Copy>(a: Option<T>, b: Option<T>) -> Option<Option<T>> {
    match (a, b) {
        (None, x) | (x, None) => Some(x),
        (Some(x), Some(y)) if x == y => Some(Some(x)),
        _ => None,
    }
}

/// Exact-match convenience for tests and callers.
pub fn header_matches(rule_match: &HeaderSpace, header: &PacketHeader) -> bool {
    rule_match.contains(header)
}
