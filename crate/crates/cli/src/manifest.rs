//! Run manifest: config and artifact hashes per completed phase, used to
//! skip phases whose inputs and outputs are unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tpkd_core::error::Error;

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub config_hash: String,
    pub wall_ms: u128,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub phases: BTreeMap<String, PhaseRecord>,
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(Error::Io)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hash_str(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> RunManifest {
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, out_dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))
            .map_err(Error::Io)?;
        Ok(())
    }

    /// A phase is up to date when it ran under the same config hash and
    /// every recorded input and output file still exists with the same
    /// content hash.
    pub fn is_up_to_date(&self, phase: &str, config_hash: &str) -> bool {
        let Some(rec) = self.phases.get(phase) else {
            return false;
        };
        if rec.config_hash != config_hash {
            return false;
        }
        for (path, hash) in rec.inputs.iter().chain(rec.outputs.iter()) {
            match file_sha256(Path::new(path)) {
                Ok(h) if &h == hash => {}
                _ => return false,
            }
        }
        true
    }

    pub fn record(
        &mut self,
        phase: &str,
        config_hash: &str,
        wall_ms: u128,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> CliResult<()> {
        let hash_all = |paths: &[PathBuf]| -> CliResult<BTreeMap<String, String>> {
            let mut map = BTreeMap::new();
            for p in paths {
                map.insert(p.display().to_string(), file_sha256(p)?);
            }
            Ok(map)
        };
        self.phases.insert(
            phase.to_string(),
            PhaseRecord {
                config_hash: config_hash.to_string(),
                wall_ms,
                inputs: hash_all(inputs)?,
                outputs: hash_all(outputs)?,
            },
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn up_to_date_tracks_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("f.txt");
        std::fs::write(&out, "hello").unwrap();
        let mut m = RunManifest::default();
        m.record("phase", "cfg", 5, &[], &[out.clone()]).unwrap();
        assert!(m.is_up_to_date("phase", "cfg"));
        assert!(!m.is_up_to_date("phase", "other-cfg"));
        assert!(!m.is_up_to_date("missing", "cfg"));
        std::fs::write(&out, "changed").unwrap();
        assert!(!m.is_up_to_date("phase", "cfg"));
        std::fs::remove_file(&out).unwrap();
        assert!(!m.is_up_to_date("phase", "cfg"));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::default();
        m.record("p", "c", 1, &[], &[]).unwrap();
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(dir.path());
        assert_eq!(back.phases.len(), 1);
        assert!(back.phases.contains_key("p"));
    }
}
