use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use fnv::FnvHasher;

use super::{Result, TensorKey, TierError};

pub const COLD_MAGIC: &[u8; 8] = b"ASTRCOLD";
pub const COLD_VERSION: u32 = 1;
/// Magic plus version.
pub const COLD_HEADER_LEN: u64 = 12;
/// key code, payload length, checksum; each u64 little-endian.
pub const COLD_RECORD_HEADER_LEN: u64 = 24;

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Where a record lives in the Cold file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ColdLoc {
    pub record_offset: u64,
    pub len: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColdRecordHeader {
    pub offset: u64,
    pub key_code: u64,
    pub len: u64,
    pub checksum: u64,
}

pub(crate) struct ColdFile {
    file: File,
    end: u64,
}

impl ColdFile {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let mut file = match path {
            Some(p) => OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(true)
                .open(p)?,
            None => tempfile::tempfile()?,
        };
        file.write_all(COLD_MAGIC)?;
        file.write_all(&COLD_VERSION.to_le_bytes())?;
        Ok(Self {
            file,
            end: COLD_HEADER_LEN,
        })
    }

    pub fn append(&mut self, key: &TensorKey, payload: &[u8]) -> Result<ColdLoc> {
        let sum = checksum(payload);
        let mut header = [0u8; COLD_RECORD_HEADER_LEN as usize];
        header[0..8].copy_from_slice(&key.code().to_le_bytes());
        header[8..16].copy_from_slice(&(payload.len() as u64).to_le_bytes());
        header[16..24].copy_from_slice(&sum.to_le_bytes());
        let offset = self.end;
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.write_all(&header)?;
        self.file.write_all(payload)?;
        self.end += COLD_RECORD_HEADER_LEN + payload.len() as u64;
        Ok(ColdLoc {
            record_offset: offset,
            len: payload.len() as u64,
            checksum: sum,
        })
    }

    /// Reads a record back and verifies key, length and checksum.
    pub fn read(&mut self, key: &TensorKey, loc: &ColdLoc) -> Result<Vec<u8>> {
        self.file.seek(SeekFrom::Start(loc.record_offset))?;
        let mut header = [0u8; COLD_RECORD_HEADER_LEN as usize];
        self.file.read_exact(&mut header)?;
        let h = parse_header(loc.record_offset, &header);
        if h.key_code != key.code() || h.len != loc.len {
            return Err(TierError::BadColdFile(format!(
                "record at {} holds key {:#x} len {}, expected {:#x} len {}",
                loc.record_offset,
                h.key_code,
                h.len,
                key.code(),
                loc.len
            )));
        }
        let mut payload = vec![0u8; h.len as usize];
        self.file.read_exact(&mut payload)?;
        let found = checksum(&payload);
        if found != h.checksum || found != loc.checksum {
            return Err(TierError::ChecksumMismatch {
                key: *key,
                expected: h.checksum,
                found,
            });
        }
        Ok(payload)
    }

    #[cfg(test)]
    pub fn corrupt_byte(&mut self, offset: u64) -> Result<()> {
        let mut b = [0u8; 1];
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.read_exact(&mut b)?;
        b[0] ^= 0xff;
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.write_all(&b)?;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

fn parse_header(offset: u64, h: &[u8; COLD_RECORD_HEADER_LEN as usize]) -> ColdRecordHeader {
    let word = |i: usize| u64::from_le_bytes(h[i..i + 8].try_into().unwrap());
    ColdRecordHeader {
        offset,
        key_code: word(0),
        len: word(8),
        checksum: word(16),
    }
}

/// Walks every record of a Cold file, verifying the file header and each
/// payload checksum.
pub fn scan_cold_file(path: &Path) -> Result<Vec<ColdRecordHeader>> {
    let mut file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut head = [0u8; COLD_HEADER_LEN as usize];
    file.read_exact(&mut head)
        .map_err(|_| TierError::BadColdFile("truncated file header".into()))?;
    if &head[0..8] != COLD_MAGIC {
        return Err(TierError::BadColdFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != COLD_VERSION {
        return Err(TierError::BadColdFile(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    let mut offset = COLD_HEADER_LEN;
    while offset < total {
        let mut h = [0u8; COLD_RECORD_HEADER_LEN as usize];
        file.read_exact(&mut h)
            .map_err(|_| TierError::BadColdFile(format!("truncated record header at {offset}")))?;
        let rec = parse_header(offset, &h);
        let mut payload = vec![0u8; rec.len as usize];
        file.read_exact(&mut payload)
            .map_err(|_| TierError::BadColdFile(format!("truncated payload at {offset}")))?;
        if checksum(&payload) != rec.checksum {
            return Err(TierError::BadColdFile(format!("checksum mismatch at {offset}")));
        }
        offset += COLD_RECORD_HEADER_LEN + rec.len;
        out.push(rec);
    }
    Ok(out)
}
