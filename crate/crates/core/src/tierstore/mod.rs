//! Three-tier keyed tensor store: Hot (training-path resident), Host
//! (worker-accessible) and Cold (file backed).
//!
//! Hot and Host are capacity-accounted regions of process memory; Cold is a
//! single append-managed file with checksummed records. Residency is tracked
//! to the byte, and every public call leaves each tier at or under its
//! capacity. Prefetches are queued to a dedicated transfer worker and only
//! become visible when the training thread drains them.

mod cold;
mod store;

pub use cold::{scan_cold_file, ColdRecordHeader, COLD_HEADER_LEN, COLD_MAGIC, COLD_RECORD_HEADER_LEN, COLD_VERSION};
pub use store::{StoreCounters, StoreEntry, Ticket, TierStore};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residency class. Ordered from hottest to coldest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TierTag {
    Hot,
    Host,
    Cold,
}

impl TierTag {
    pub fn colder(self) -> Option<TierTag> {
        match self {
            TierTag::Hot => Some(TierTag::Host),
            TierTag::Host => Some(TierTag::Cold),
            TierTag::Cold => None,
        }
    }

    pub(crate) fn slot(self) -> Option<usize> {
        match self {
            TierTag::Hot => Some(0),
            TierTag::Host => Some(1),
            TierTag::Cold => None,
        }
    }
}

/// Which tensor of a preconditioner block an entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorRole {
    FactorL,
    FactorR,
    InvL,
    InvR,
    BasisL,
    BasisR,
    MomentM,
    MomentV,
}

impl TensorRole {
    pub const ALL: [TensorRole; 8] = [
        TensorRole::FactorL,
        TensorRole::FactorR,
        TensorRole::InvL,
        TensorRole::InvR,
        TensorRole::BasisL,
        TensorRole::BasisR,
        TensorRole::MomentM,
        TensorRole::MomentV,
    ];

    fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorKey {
    pub block: u32,
    pub role: TensorRole,
}

impl TensorKey {
    pub fn new(block: u32, role: TensorRole) -> Self {
        Self { block, role }
    }

    /// Injective 64-bit code written into Cold record headers.
    pub fn code(&self) -> u64 {
        ((self.block as u64) << 8) | self.role.code() as u64
    }
}

impl fmt::Display for TensorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.block, self.role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub hot_capacity_bytes: u64,
    pub host_capacity_bytes: u64,
    /// Cold-tier file. An anonymous temporary file is used when unset.
    pub cold_path: Option<PathBuf>,
    /// Zero means unlimited.
    pub transfer_bandwidth_bytes_per_sec: u64,
    pub transfer_latency_us: u64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            hot_capacity_bytes: 64 << 20,
            host_capacity_bytes: 256 << 20,
            cold_path: None,
            transfer_bandwidth_bytes_per_sec: 0,
            transfer_latency_us: 0,
        }
    }
}

impl TierConfig {
    /// Modeled time to move `bytes` between tiers.
    pub fn transfer_time_us(&self, bytes: u64) -> u64 {
        let bw = if self.transfer_bandwidth_bytes_per_sec == 0 {
            0
        } else {
            ((bytes as u128 * 1_000_000) / self.transfer_bandwidth_bytes_per_sec as u128) as u64
        };
        self.transfer_latency_us + bw
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TierError {
    #[error("{tier:?} tier cannot fit {needed} bytes ({available} evictable/free)")]
    CapacityExhausted {
        tier: TierTag,
        needed: u64,
        available: u64,
    },
    #[error("no entry for key {0}")]
    MissingKey(TensorKey),
    #[error("refusing to store an empty tensor under {0}")]
    EmptyTensor(TensorKey),
    #[error("entry {0} is pinned")]
    PinnedEntry(TensorKey),
    #[error("entry {0} is dirty and has no persisted Cold copy")]
    DirtyNotPersisted(TensorKey),
    #[error("cannot move {key} from {from:?} to {to:?}")]
    InvalidMove {
        key: TensorKey,
        from: TierTag,
        to: TierTag,
    },
    #[error("checksum mismatch for {key}: header {expected:#018x}, payload {found:#018x}")]
    ChecksumMismatch {
        key: TensorKey,
        expected: u64,
        found: u64,
    },
    #[error("malformed cold file: {0}")]
    BadColdFile(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("residency audit failed: {0}")]
    AuditMismatch(String),
}

impl From<std::io::Error> for TierError {
    fn from(e: std::io::Error) -> Self {
        TierError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TierError>;
