//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"HVAECKPT"                 magic
//! u32                         format version
//! u32 + bytes                 architecture descriptor, UTF-8 `key=value` lines
//! u64                         number of f64 values
//! f64 * n                     parameters in declaration order
//! ```
//!
//! A sidecar `<file>.manifest` lists every parameter name and shape plus the
//! SHA-256 of the binary file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

pub type Descriptor = Vec<(String, String)>;

pub fn encode(descriptor: &Descriptor, store: &ParamStore) -> Vec<u8> {
    let mut text = String::new();
    for (k, v) in descriptor {
        writeln!(text, "{k}={v}").expect("string write");
    }
    let numel = store.numel();
    let mut out = Vec::with_capacity(24 + text.len() + 8 * numel);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(numel as u64).to_le_bytes());
    for entry in store.entries() {
        for &x in entry.value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Descriptor, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated checkpoint"));
    if take(0, 8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let text_len = u32::from_le_bytes(take(12, 4)?.try_into().expect("4 bytes")) as usize;
    let text = std::str::from_utf8(take(16, text_len)?).map_err(|_| bad("descriptor is not UTF-8"))?;
    let mut descriptor = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed descriptor line"))?;
        descriptor.push((k.to_string(), v.to_string()));
    }
    let mut at = 16 + text_len;
    let numel = u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes")) as usize;
    at += 8;
    if bytes.len() != at + 8 * numel {
        return Err(Error::Checkpoint(format!(
            "payload length {} does not match {} parameters",
            bytes.len() - at,
            numel
        )));
    }
    let values = bytes[at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((descriptor, values))
}

/// Copies a flat value vector into `store` in declaration order.
pub fn fill(store: &mut ParamStore, values: &[f64]) -> Result<()> {
    if values.len() != store.numel() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} values, architecture needs {}",
            values.len(),
            store.numel()
        )));
    }
    let mut at = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let m = store.value_mut(id);
        let n = m.len();
        for (dst, &src) in m.iter_mut().zip(&values[at..at + n]) {
            *dst = src;
        }
        at += n;
    }
    Ok(())
}

pub fn manifest(store: &ParamStore, bytes: &[u8]) -> String {
    let mut text = String::new();
    writeln!(text, "# hvae checkpoint manifest, format {FORMAT_VERSION}").unwrap();
    writeln!(text, "sha256 {}", hex(&Sha256::digest(bytes))).unwrap();
    writeln!(text, "parameters {}", store.numel()).unwrap();
    for e in store.entries() {
        let (r, c) = e.value.dim();
        writeln!(text, "{} {}x{}", e.name, r, c).unwrap();
    }
    text
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, descriptor: &Descriptor, store: &ParamStore) -> Result<()> {
    let bytes = encode(descriptor, store);
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), manifest(store, &bytes).as_bytes())
}

pub fn load(path: &Path) -> Result<(Descriptor, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
