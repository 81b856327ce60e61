//! Per-run manifest: what ran, with which inputs, and the SHA-256 of every
//! artifact written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bevkit_core::formats::write_output;
use bevkit_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// File name relative to `out_dir` → hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; the only field that varies across
    /// identical reruns.
    pub created_unix: u64,
}

/// Collects artifacts for one run and writes them into the output
/// directory.
pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(subcommand: &str, config: Option<&Path>, seed: u64, out_dir: &Path) -> Self {
        Recorder {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                args: std::env::args().skip(1).collect(),
                config: config.map(Path::to_path_buf),
                seed,
                out_dir: out_dir.to_path_buf(),
                artifacts: BTreeMap::new(),
                created_unix: 0,
            },
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.manifest.out_dir
    }

    /// Writes `bytes` to `name` under the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.manifest.out_dir.join(name);
        write_output(&path, bytes)?;
        self.manifest.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        text.push(b'\n');
        let path = self.manifest.out_dir.join(MANIFEST_FILE);
        write_output(&path, &text)?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
