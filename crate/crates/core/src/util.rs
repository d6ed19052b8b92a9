//! Small shared helpers: stable hashing, canonical JSON, atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

/// 64-bit FNV-1a. Used wherever a hash must be stable across runs,
/// platforms, and library versions (state fingerprints, derived seeds).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Folds a sequence of byte strings into one stable 64-bit value, with a
/// length prefix per part so `["ab","c"]` and `["a","bc"]` differ.
pub fn fnv1a64_parts<I, B>(parts: I) -> u64
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut step = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for part in parts {
        let part = part.as_ref();
        step(&(part.len() as u64).to_le_bytes());
        step(part);
    }
    h
}

/// Serializes any `Serialize` value to canonical JSON: object keys sorted,
/// no insignificant whitespace, shortest round-trip float formatting.
/// Two structurally equal values always produce byte-identical output.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String, serde_json::Error> {
    // serde_json's Value keeps object keys in a BTreeMap, so a round-trip
    // through Value is what sorts the keys.
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Pretty variant of [`canonical_json`] for files meant to be read by people.
pub fn canonical_json_pretty<T: serde::Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Writes `bytes` to `path` atomically: a temp file in the same directory is
/// written, flushed, then renamed over the target. Readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.flush()?;
    drop(tmp.1);
    fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path) -> std::io::Result<(std::path::PathBuf, fs::File)> {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nonce = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    for attempt in 0..64u128 {
        let candidate = dir.join(format!(".tmp-{:x}-{:x}", nonce, attempt));
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&candidate)
        {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    Err(std::io::Error::new(
        std::io::ErrorKind::AlreadyExists,
        "could not create temp file",
    ))
}
