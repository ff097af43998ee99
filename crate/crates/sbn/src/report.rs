//! Run artifacts: manifest JSON with a stable configuration hash, and plain
//! CSV writing. Metric CSVs contain no timestamps or paths, so a rerun of
//! the same configuration and seed reproduces them byte for byte.

use crate::error::Result;
use std::fs;
use std::path::Path;

/// FNV-1a over the canonical JSON of the semantic configuration (seeds and
/// output locations excluded), hex-encoded. Every CSV row carries it, so any
/// row is traceable to its exact configuration.
pub fn manifest_hash(semantic: &serde_json::Value) -> String {
    let text = semantic.to_string();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Drop the keys that vary between equivalent runs (seed fan-out) before
/// hashing.
pub fn semantic_view(full_config: &serde_json::Value) -> serde_json::Value {
    let mut v = full_config.clone();
    if let Some(map) = v.as_object_mut() {
        map.remove("seeds");
        map.remove("seed");
    }
    v
}

pub fn write_manifest(path: &Path, manifest: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Concatenate per-worker CSVs under a single header, in the given order.
pub fn merge_csv(dest: &Path, sources: &[std::path::PathBuf]) -> Result<()> {
    let mut header: Option<String> = None;
    let mut rows: Vec<String> = Vec::new();
    for source in sources {
        let text = fs::read_to_string(source)?;
        let mut lines = text.lines();
        let Some(first) = lines.next() else { continue };
        match &header {
            None => header = Some(first.to_string()),
            Some(h) => {
                if h != first {
                    return Err(crate::error::Error::invalid(
                        "csv",
                        format!("header mismatch in {}", source.display()),
                    ));
                }
            }
        }
        rows.extend(lines.map(str::to_string));
    }
    if let Some(header) = header {
        write_csv(dest, &header, &rows)?;
    }
    Ok(())
}

/// Format a float with shortest round-trip precision; identical bits give
/// identical text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
