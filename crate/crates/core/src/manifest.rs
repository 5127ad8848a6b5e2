//! Run manifests: the resolved configuration, output checksums and report.
//! Only `timestamp` differs between two identical runs.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub verb: String,
    pub config: Vec<(String, String)>,
    /// File name (relative to the output directory) to sha256 hex.
    pub checksums: Vec<(String, String)>,
    pub report: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(verb: &str) -> Self {
        Manifest {
            verb: verb.to_string(),
            ..Default::default()
        }
    }

    /// Hashes every file in `dir` except the manifest itself, recursively.
    pub fn checksum_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut files = Vec::new();
        collect(dir, dir, &mut files)?;
        files.sort();
        for rel in files {
            if rel == MANIFEST_NAME {
                continue;
            }
            let sum = sha256_file(dir.join(&rel))?;
            self.checksums.push((rel, sum));
        }
        Ok(())
    }

    pub fn to_json(&self, timestamp: u64) -> Value {
        let map = |pairs: &[(String, String)]| {
            Value::Object(pairs.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect::<Map<_, _>>())
        };
        let mut top = Map::new();
        top.insert("verb".into(), Value::String(self.verb.clone()));
        top.insert("config".into(), map(&self.config));
        top.insert("checksums".into(), map(&self.checksums));
        top.insert("report".into(), map(&self.report));
        top.insert("timestamp".into(), Value::from(timestamp));
        Value::Object(top)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = dir.as_ref().join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self.to_json(ts)).expect("json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Reads back the checksum table of a manifest.
pub fn read_checksums(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let sums = v
        .get("checksums")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Format(format!("{}: no checksums", path.display())))?;
    sums.iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|s| (k.clone(), s.to_string()))
                .ok_or_else(|| Error::Format(format!("{}: checksum of {k} is not a string", path.display())))
        })
        .collect()
}
