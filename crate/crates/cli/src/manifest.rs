use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pklbench_core::io::scene_to_string;
use pklbench_core::planner::sha256_hex;
use pklbench_core::{Error, Result, Scene};

/// Provenance record written next to the outputs of every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub command_line: Vec<String>,
    /// SHA-256 of each input: parsed arguments, scenes, detections, configs.
    pub config_hashes: BTreeMap<String, String>,
    pub checkpoint_hash: Option<String>,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, command_line: Vec<String>) -> Self {
        Self {
            tool: "pklbench".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            command_line,
            config_hashes: BTreeMap::new(),
            checkpoint_hash: None,
            seed: None,
            wall_time_s: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn hash(&mut self, name: &str, bytes: &[u8]) {
        self.config_hashes.insert(name.into(), sha256_hex(bytes));
    }

    pub fn hash_scenes(&mut self, scenes: &[Scene]) {
        let mut all = String::new();
        for s in scenes {
            all.push_str(&scene_to_string(s));
        }
        self.hash("scenes", all.as_bytes());
    }

    /// Writes `<command>.run.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.run.json", self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
