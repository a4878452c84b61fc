//! Run manifests: everything needed to reproduce a command bit-for-bit in
//! single-process mode, written next to the outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config_text: String,
    pub seed: Option<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    pub config_hash: String,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: BTreeMap::new(),
            config_text: config_text.to_string(),
            seed: None,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
            config_hash: sha256_hex(config_text.as_bytes()),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) {
        if let Ok(data) = std::fs::read(path) {
            self.input_hashes
                .insert(label.to_string(), sha256_hex(&data));
        }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), body)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
