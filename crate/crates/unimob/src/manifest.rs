//! Run manifests: every artifact-producing command records its resolved
//! config, seeds, input digests, and output digests, atomically at run end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FORMAT: &str = "unimob-manifest-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub argv: Vec<String>,
    pub resolved_config: Vec<String>,
    pub seed: u64,
    /// Content hashes of consumed files.
    pub input_digests: BTreeMap<String, String>,
    /// Content hashes of produced files.
    pub output_digests: BTreeMap<String, String>,
    pub code_version: String,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write via a temp file + rename so readers never see a partial manifest.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Builder tracking a run's inputs/outputs until the final write.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: Vec<String>, resolved_config: Vec<String>, seed: u64) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                format: MANIFEST_FORMAT.to_string(),
                command: command.to_string(),
                argv,
                resolved_config,
                seed,
                input_digests: BTreeMap::new(),
                output_digests: BTreeMap::new(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                duration_secs: 0.0,
            },
            started: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .input_digests
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hash all recorded outputs and write `manifest.json` in `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        for path in &self.outputs {
            self.manifest
                .output_digests
                .insert(path.display().to_string(), sha256_file(path)?);
        }
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_output_digests() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data.csv");
        std::fs::write(&out, "hello\n").unwrap();
        let mut b = ManifestBuilder::new("generate", vec!["x".into()], vec!["a=1".into()], 42);
        b.record_output(&out);
        let mpath = b.finish(dir.path()).unwrap();
        let m = RunManifest::load(&mpath).unwrap();
        assert_eq!(m.format, MANIFEST_FORMAT);
        assert_eq!(m.seed, 42);
        let digest = m.output_digests.get(&out.display().to_string()).unwrap();
        assert_eq!(digest, &sha256_file(&out).unwrap());
    }
}
