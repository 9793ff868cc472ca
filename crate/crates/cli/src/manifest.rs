//! Run manifests: every command and every sweep cell writes one, carrying
//! the config hash, seed, and tool version needed to reproduce the run.
//! Sweeps use them to skip cells that are already complete.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// FNV-1a, 64-bit. Stable across platforms and versions of this tool.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Scalar results of the cell, keyed by metric name. BTreeMap keeps the
    /// serialization order stable.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock runtime. Excluded from metric CSVs so reruns stay
    /// byte-identical.
    pub runtime_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_canonical: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: format!("{:016x}", fnv1a64(config_canonical.as_bytes())),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            metrics: BTreeMap::new(),
            runtime_s: 0.0,
        }
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// True when `dir` holds a completed cell for the same command, config,
    /// and seed.
    pub fn matches_completed(dir: &Path, command: &str, config_canonical: &str, seed: u64) -> Option<RunManifest> {
        let loaded = RunManifest::load(dir).ok()?;
        let want = RunManifest::new(command, config_canonical, seed);
        (loaded.command == want.command
            && loaded.config_hash == want.config_hash
            && loaded.seed == want.seed)
            .then_some(loaded)
    }
}
