//! Identifier/locator addressing and stateless NAT.
//!
//! A 128-bit address is split into a 64-bit locator (upper half) and a 64-bit
//! identifier (lower half). UEs keep a private address whose locator is the
//! canonical `fc00::/7` prefix; each base station rewrites only the locator on
//! the way out and back, so no per-flow table is needed.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

/// Canonical private locator: the 7-bit `fc00::/7` pattern, remaining bits zero.
pub const PRIVATE_LOCATOR: u64 = 0xfc00_0000_0000_0000;

const PRIVATE_MASK: u64 = 0xfe00_0000_0000_0000;

/// Default lifetime of a recently-moved entry.
pub const DEFAULT_MOVED_TTL: SimTime = SimTime::from_secs(2);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("subscriber id must be nonzero")]
    ZeroSubscriber,
    #[error("locator {0:#018x} lies in the private range")]
    PrivateLocator(u64),
    #[error("malformed address {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Addr128(u128);

impl Addr128 {
    pub const fn from_parts(locator: u64, identifier: u64) -> Self {
        Addr128(((locator as u128) << 64) | identifier as u128)
    }

    pub const fn from_bits(bits: u128) -> Self {
        Addr128(bits)
    }

    pub const fn bits(self) -> u128 {
        self.0
    }

    pub const fn locator(self) -> u64 {
        (self.0 >> 64) as u64
    }

    pub const fn identifier(self) -> u64 {
        self.0 as u64
    }

    pub const fn with_locator(self, locator: u64) -> Self {
        Self::from_parts(locator, self.identifier())
    }

    pub const fn is_private(self) -> bool {
        is_private_locator(self.locator())
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

pub const fn is_private_locator(locator: u64) -> bool {
    locator & PRIVATE_MASK == PRIVATE_LOCATOR
}

impl fmt::Display for Addr128 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = format!("{:032x}", self.0);
        for (i, group) in hex.as_bytes().chunks(4).enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            f.write_str(std::str::from_utf8(group).expect("hex is ascii"))?;
        }
        Ok(())
    }
}

impl FromStr for Addr128 {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let groups: Vec<&str> = s.split(':').collect();
        if groups.len() != 8 || groups.iter().any(|g| g.len() != 4) {
            return Err(AddressError::Malformed(s.to_string()));
        }
        u128::from_str_radix(&groups.concat(), 16)
            .map(Addr128)
            .map_err(|_| AddressError::Malformed(s.to_string()))
    }
}

/// A UE's private address. The identifier is the subscriber id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UePrivateAddr(Addr128);

impl UePrivateAddr {
    pub fn addr(self) -> Addr128 {
        self.0
    }

    pub fn identifier(self) -> u64 {
        self.0.identifier()
    }
}

/// Publicly routable 64-bit locator owned by one base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InbPrefix(u64);

impl InbPrefix {
    pub fn new(locator: u64) -> Result<Self, AddressError> {
        if is_private_locator(locator) {
            return Err(AddressError::PrivateLocator(locator));
        }
        Ok(InbPrefix(locator))
    }

    /// Deterministic documentation-range prefix for base station `index`.
    pub fn for_index(index: u32) -> Self {
        InbPrefix(0x2001_0db8_0000_0000 | index as u64)
    }

    pub fn locator(self) -> u64 {
        self.0
    }

    pub fn public_addr(self, identifier: u64) -> Addr128 {
        Addr128::from_parts(self.0, identifier)
    }
}

pub fn assign_private_addr(subscriber: u64) -> Result<UePrivateAddr, AddressError> {
    if subscriber == 0 {
        return Err(AddressError::ZeroSubscriber);
    }
    Ok(UePrivateAddr(Addr128::from_parts(PRIVATE_LOCATOR, subscriber)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UplinkRewrite {
    Translated(Addr128),
    /// Source was not private; left untouched.
    PassThrough(Addr128),
}

impl UplinkRewrite {
    pub fn addr(self) -> Addr128 {
        match self {
            UplinkRewrite::Translated(a) | UplinkRewrite::PassThrough(a) => a,
        }
    }
}

/// Replaces the locator of a private source address with the base station's.
pub fn nat_uplink(source: Addr128, inb: InbPrefix) -> UplinkRewrite {
    if source.is_private() {
        UplinkRewrite::Translated(source.with_locator(inb.locator()))
    } else {
        UplinkRewrite::PassThrough(source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownlinkDecision {
    /// Deliver to an attached UE with the private locator restored.
    Deliver(Addr128),
    /// Send back into the network towards the UE's new base station.
    Forward(Addr128),
    Drop,
}

/// Decides what to do with a downlink packet addressed to this base station.
pub fn nat_downlink(
    dest: Addr128,
    is_attached: impl Fn(u64) -> bool,
    moved: &RecentlyMovedTable,
    now: SimTime,
) -> DownlinkDecision {
    let id = dest.identifier();
    if is_attached(id) {
        DownlinkDecision::Deliver(dest.with_locator(PRIVATE_LOCATOR))
    } else if let Some(target) = moved.lookup(id, now) {
        DownlinkDecision::Forward(dest.with_locator(target.locator()))
    } else {
        DownlinkDecision::Drop
    }
}

/// Short-lived map from UE identifier to the locator it moved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecentlyMovedTable {
    entries: HashMap<u64, (InbPrefix, SimTime)>,
    ttl: SimTime,
    max_entries: Option<usize>,
}

impl Default for RecentlyMovedTable {
    fn default() -> Self {
        Self::new(DEFAULT_MOVED_TTL)
    }
}

impl RecentlyMovedTable {
    pub fn new(ttl: SimTime) -> Self {
        Self {
            entries: HashMap::new(),
            ttl,
            max_entries: None,
        }
    }

    /// Caps the table; when full, the entry closest to expiry is evicted.
    pub fn with_capacity_limit(mut self, max_entries: usize) -> Self {
        self.max_entries = Some(max_entries.max(1));
        self
    }

    pub fn ttl(&self) -> SimTime {
        self.ttl
    }

    pub fn record_move(&mut self, identifier: u64, target: InbPrefix, now: SimTime) {
        let ttl = self.ttl;
        self.record_move_with_ttl(identifier, target, now, ttl);
    }

    pub fn record_move_with_ttl(
        &mut self,
        identifier: u64,
        target: InbPrefix,
        now: SimTime,
        ttl: SimTime,
    ) {
        self.purge_expired(now);
        if let Some(cap) = self.max_entries {
            if !self.entries.contains_key(&identifier) && self.entries.len() >= cap {
                let victim = self
                    .entries
                    .iter()
                    .min_by_key(|(id, (_, expiry))| (*expiry, **id))
                    .map(|(id, _)| *id);
                if let Some(v) = victim {
                    self.entries.remove(&v);
                }
            }
        }
        self.entries.insert(identifier, (target, now.saturating_add(ttl)));
    }

    /// Live entry for `identifier`; an entry expires exactly at `now + ttl`.
    pub fn lookup(&self, identifier: u64, now: SimTime) -> Option<InbPrefix> {
        match self.entries.get(&identifier) {
            Some(&(target, expiry)) if now < expiry => Some(target),
            _ => None,
        }
    }

    pub fn purge_expired(&mut self, now: SimTime) {
        self.entries.retain(|_, (_, expiry)| now < *expiry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Minimal packet: source, destination and opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: Addr128,
    pub dst: Addr128,
    pub payload: Vec<u8>,
}

impl Packet {
    /// Wire layout: 16-byte source, 16-byte destination, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.payload.len());
        out.extend_from_slice(&self.src.to_bytes());
        out.extend_from_slice(&self.dst.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownlinkOutcome {
    Deliver(Packet),
    Forward(Packet),
    Dropped,
}

/// Per-base-station NAT with its recently-moved table and counters.
#[derive(Debug, Clone)]
pub struct InbNat {
    pub prefix: InbPrefix,
    pub moved: RecentlyMovedTable,
    pub forwarding_enabled: bool,
    pub passthrough_warnings: u64,
    pub dropped: u64,
    pub forwarded: u64,
}

impl InbNat {
    pub fn new(prefix: InbPrefix, moved: RecentlyMovedTable) -> Self {
        Self {
            prefix,
            moved,
            forwarding_enabled: true,
            passthrough_warnings: 0,
            dropped: 0,
            forwarded: 0,
        }
    }

    pub fn uplink(&mut self, mut pkt: Packet) -> Packet {
        match nat_uplink(pkt.src, self.prefix) {
            UplinkRewrite::Translated(a) => pkt.src = a,
            UplinkRewrite::PassThrough(_) => self.passthrough_warnings += 1,
        }
        pkt
    }

    pub fn downlink(
        &mut self,
        mut pkt: Packet,
        is_attached: impl Fn(u64) -> bool,
        now: SimTime,
    ) -> DownlinkOutcome {
        let decision = if self.forwarding_enabled {
            nat_downlink(pkt.dst, is_attached, &self.moved, now)
        } else {
            nat_downlink(pkt.dst, is_attached, &RecentlyMovedTable::new(SimTime::ZERO), now)
        };
        match decision {
            DownlinkDecision::Deliver(a) => {
                pkt.dst = a;
                DownlinkOutcome::Deliver(pkt)
            }
            DownlinkDecision::Forward(a) => {
                self.forwarded += 1;
                pkt.dst = a;
                DownlinkOutcome::Forward(pkt)
            }
            DownlinkDecision::Drop => {
                self.dropped += 1;
                DownlinkOutcome::Dropped
            }
        }
    }

    pub fn record_move(&mut self, identifier: u64, target: InbPrefix, now: SimTime) {
        self.moved.record_move(identifier, target, now);
    }
}
