//! Abstracted AKA mutual authentication and session-key lifecycle.
//!
//! Every derivation is HMAC-SHA256 over a domain-separated label followed by
//! length-prefixed fields. This keeps 3GPP AKA semantics (shared permanent
//! key, replay counter, derived anchor key, chained base-station keys) without
//! reproducing MILENAGE.

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub type Key128 = [u8; 16];
pub type Key256 = [u8; 32];
pub type Nonce = [u8; 16];
pub type Res = [u8; 8];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("AUTN sequence number {got} already used (last accepted {last})")]
    Replay { got: u64, last: u64 },
    #[error("AUTN sequence number {got} outside window (expected {expected})")]
    OutOfWindow { got: u64, expected: u64 },
    #[error("network authentication failed: bad MAC")]
    MacFailure,
    #[error("QCI {0} outside 1..=9")]
    InvalidQci(u8),
}

/// Keyed PRF over a label and length-prefixed fields.
pub fn prf(key: &[u8], label: &str, fields: &[&[u8]]) -> Key256 {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&[label.len() as u8]);
    mac.update(label.as_bytes());
    for f in fields {
        mac.update(&(f.len() as u16).to_be_bytes());
        mac.update(f);
    }
    mac.finalize().into_bytes().into()
}

fn truncate8(full: Key256) -> [u8; 8] {
    let mut out = [0u8; 8];
    out.copy_from_slice(&full[..8]);
    out
}

/// QoS class identifier, 1 through 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Qci(u8);

impl Qci {
    pub fn new(value: u8) -> Result<Self, AuthError> {
        if (1..=9).contains(&value) {
            Ok(Qci(value))
        } else {
            Err(AuthError::InvalidQci(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl Default for Qci {
    fn default() -> Self {
        Qci(9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuotaPolicy {
    VolumeBytes(u64),
    /// Enforced by the radio scheduler as a per-UE rate limit.
    ThroughputCapBps(u64),
    Unlimited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriberRecord {
    pub imsi: u64,
    pub k: Key128,
    /// Last sequence number issued by the network.
    pub sqn: u64,
    pub qci: Qci,
    pub quota_policy: QuotaPolicy,
}

impl SubscriberRecord {
    pub fn new(imsi: u64, k: Key128) -> Self {
        Self {
            imsi,
            k,
            sqn: 0,
            qci: Qci::default(),
            quota_policy: QuotaPolicy::Unlimited,
        }
    }

    /// Test-friendly key derived from the IMSI.
    pub fn with_derived_key(imsi: u64) -> Self {
        let full = prf(b"subscriber-provisioning", "k", &[&imsi.to_be_bytes()]);
        let mut k = [0u8; 16];
        k.copy_from_slice(&full[..16]);
        Self::new(imsi, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Autn {
    pub sqn: u64,
    pub mac: [u8; 8],
}

impl Autn {
    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.sqn.to_be_bytes());
        out[8..].copy_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        let mut sqn = [0u8; 8];
        sqn.copy_from_slice(&b[..8]);
        let mut mac = [0u8; 8];
        mac.copy_from_slice(&b[8..]);
        Autn {
            sqn: u64::from_be_bytes(sqn),
            mac,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthVector {
    pub rand: Nonce,
    pub xres: Res,
    pub autn: Autn,
    pub k_asme: Key256,
}

fn auth_mac(k: &Key128, rand: &Nonce, sqn: u64) -> [u8; 8] {
    truncate8(prf(k, "mac", &[rand, &sqn.to_be_bytes()]))
}

fn auth_res(k: &Key128, rand: &Nonce) -> Res {
    truncate8(prf(k, "res", &[rand]))
}

fn auth_kasme(k: &Key128, rand: &Nonce, sqn: u64) -> Key256 {
    prf(k, "asme", &[rand, &sqn.to_be_bytes()])
}

/// Issues the next authentication vector and advances the record's SQN.
pub fn generate_auth_vector(rec: &mut SubscriberRecord, rand: Nonce) -> AuthVector {
    rec.sqn += 1;
    let sqn = rec.sqn;
    AuthVector {
        rand,
        xres: auth_res(&rec.k, &rand),
        autn: Autn {
            sqn,
            mac: auth_mac(&rec.k, &rand, sqn),
        },
        k_asme: auth_kasme(&rec.k, &rand, sqn),
    }
}

/// SIM-side state: the permanent key and the last accepted SQN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeSecurity {
    pub k: Key128,
    pub sqn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChallengeResponse {
    pub res: Res,
    pub k_asme: Key256,
}

impl UeSecurity {
    pub fn new(k: Key128) -> Self {
        Self { k, sqn: 0 }
    }

    /// Verifies the network and answers the challenge. Only the exact next
    /// sequence number is accepted.
    pub fn process_challenge(
        &mut self,
        rand: Nonce,
        autn: Autn,
    ) -> Result<ChallengeResponse, AuthError> {
        if autn.mac != auth_mac(&self.k, &rand, autn.sqn) {
            return Err(AuthError::MacFailure);
        }
        if autn.sqn <= self.sqn {
            return Err(AuthError::Replay {
                got: autn.sqn,
                last: self.sqn,
            });
        }
        if autn.sqn != self.sqn + 1 {
            return Err(AuthError::OutOfWindow {
                got: autn.sqn,
                expected: self.sqn + 1,
            });
        }
        self.sqn = autn.sqn;
        Ok(ChallengeResponse {
            res: auth_res(&self.k, &rand),
            k_asme: auth_kasme(&self.k, &rand, autn.sqn),
        })
    }
}

/// Key shared by a UE and its serving base station. Holds no history, so
/// an earlier key cannot be recovered from a later one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKeys {
    pub k_enb: Key256,
    pub ncc: u32,
}

pub fn derive_k_enb(k_asme: &Key256, counter: u32) -> SessionKeys {
    SessionKeys {
        k_enb: prf(k_asme, "kenb", &[&counter.to_be_bytes()]),
        ncc: 0,
    }
}

pub fn chain_k_enb(keys: &SessionKeys) -> SessionKeys {
    let ncc = keys.ncc + 1;
    SessionKeys {
        k_enb: prf(&keys.k_enb, "nh", &[&ncc.to_be_bytes()]),
        ncc,
    }
}
