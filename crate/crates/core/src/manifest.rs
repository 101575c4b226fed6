//! Machine-readable record of a command run: enough to regenerate every
//! output from the configuration alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub experiment: String,
    /// Hex SHA-256 of the configuration text as given.
    pub config_sha256: String,
    pub config_path: String,
    pub seed: u64,
    pub crate_version: String,
    pub workers: Option<usize>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_time: f64,
    /// Headline numbers of the run.
    #[serde(default)]
    pub summary: serde_json::Map<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, experiment: &str, config_text: &str, config_path: &Path, seed: u64) -> Self {
        Self {
            command: command.into(),
            experiment: experiment.into(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            config_path: config_path.display().to_string(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            workers: None,
            outputs: Vec::new(),
            wall_time: 0.0,
            summary: serde_json::Map::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.into(), value.into());
    }

    /// Writes `manifest_<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<std::path::PathBuf> {
        let path = dir.join(format!("manifest_{}.json", self.command.replace('-', "_")));
        std::fs::write(&path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn writes_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("verify-bounds", "duffing", "x = 1\n", Path::new("c.toml"), 4);
        m.record("violations", 0);
        let p = m.write(dir.path()).unwrap();
        assert!(p.ends_with("manifest_verify_bounds.json"));
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
