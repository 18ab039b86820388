//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` section count, then per
//! section a `u32` name length, the UTF-8 name, a `u64` payload length and
//! the payload; finally the SHA-256 of everything before it. Integers are
//! little-endian.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::report::write_atomic;

pub const MAGIC: &[u8; 8] = b"CHPRUNE\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Named binary sections in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_raw(&mut self, name: &str, payload: Vec<u8>) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = payload,
            None => self.sections.push((name.to_string(), payload)),
        }
    }

    pub fn put<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = bincode::serialize(value).map_err(|e| Error::Checkpoint(format!("encode `{name}`: {e}")))?;
        self.put_raw(name, bytes);
        Ok(())
    }

    pub fn raw(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn get<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        bincode::deserialize(self.raw(name)?).map_err(|e| Error::Checkpoint(format!("decode `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch (truncated or corrupted)"));
        }
        let mut at = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(at..at + n).ok_or_else(|| bad("truncated section table"))?;
            at += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("section name is not UTF-8"))?
                .to_string();
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            sections.push((name, take(len)?.to_vec()));
        }
        if at != body.len() {
            return Err(bad("trailing bytes after the last section"));
        }
        Ok(Checkpoint { sections })
    }
}

/// Atomic write (temporary file, then rename).
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
