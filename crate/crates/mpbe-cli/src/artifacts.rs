//! Config-hash stamping and per-directory manifests.

use std::fs;
use std::path::Path;

use mpbe::griddata::Grid2D;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn grid_hash(grid: &Grid2D) -> String {
    sha256_hex(grid.fingerprint().as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T, hash: &str) -> Result<()> {
    let mut v = serde_json::to_value(value).expect("serializable");
    if let Value::Object(m) = &mut v {
        m.insert("config_hash".into(), Value::String(hash.into()));
    }
    write_text(path, &(serde_json::to_string_pretty(&v).expect("json") + "\n"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Prefixes every CSV and adds a `config_hash` key to every JSON object in
/// `dir` (non-recursive) that does not carry one yet.
pub fn stamp_dir(dir: &Path, hash: &str) -> Result<()> {
    let marker = format!("# config_hash={hash}\n");
    for path in sorted_files(dir)? {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "csv" => {
                let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                if !text.starts_with("# config_hash=") {
                    write_text(&path, &(marker.clone() + &text))?;
                }
            }
            "json" => {
                let mut v: Value = read_json(&path)?;
                if let Value::Object(m) = &mut v {
                    if !m.contains_key("config_hash") {
                        m.insert("config_hash".into(), Value::String(hash.into()));
                        write_text(&path, &(serde_json::to_string_pretty(&v).expect("json") + "\n"))?;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn sorted_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// `manifest.json`: config hash plus a digest of every file in `dir`.
pub fn write_manifest(dir: &Path, hash: &str) -> Result<()> {
    let mut files = serde_json::Map::new();
    for path in sorted_files(dir)? {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name == "manifest.json" {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        files.insert(name, Value::String(sha256_hex(&bytes)));
    }
    let v = serde_json::json!({ "config_hash": hash, "files": files });
    write_text(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&v).expect("json") + "\n"),
    )
}

/// Stamps and manifests `dir` in one go.
pub fn seal(dir: &Path, hash: &str) -> Result<()> {
    stamp_dir(dir, hash)?;
    write_manifest(dir, hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamping_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        write_text(&dir.path().join("a.csv"), "x\n1\n").unwrap();
        write_text(&dir.path().join("b.json"), "{\"k\": 1}").unwrap();
        write_text(&dir.path().join("c.json"), "[1, 2]").unwrap();
        seal(dir.path(), "abc").unwrap();
        let first = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        seal(dir.path(), "abc").unwrap();
        assert_eq!(first, fs::read_to_string(dir.path().join("manifest.json")).unwrap());
        let csv = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv, "# config_hash=abc\nx\n1\n");
        let b: Value = read_json(&dir.path().join("b.json")).unwrap();
        assert_eq!(b["config_hash"], "abc");
        let c: Value = read_json(&dir.path().join("c.json")).unwrap();
        assert_eq!(c, serde_json::json!([1, 2]));
    }
}
