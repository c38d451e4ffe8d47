//! Sidecar `<output>.manifest.json` recording how an output was made.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::Failure;

pub struct Manifest {
    fields: Map<String, Value>,
    inputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut fields = Map::new();
        fields.insert("tool".into(), json!(env!("CARGO_PKG_NAME")));
        fields.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        fields.insert("command".into(), json!(command));
        Manifest {
            fields,
            inputs: Vec::new(),
        }
    }

    pub fn inputs(mut self, paths: &[PathBuf]) -> Self {
        self.inputs.extend_from_slice(paths);
        self
    }

    pub fn seed(self, seed: u64) -> Self {
        self.value("seed", seed)
    }

    pub fn flag(self, name: &str, on: bool) -> Self {
        self.value(name, on)
    }

    pub fn value(mut self, name: &str, v: impl Into<Value>) -> Self {
        self.fields.insert(name.into(), v.into());
        self
    }

    /// Write next to `output`, hashing every input.
    pub fn write(mut self, output: &Path) -> Result<(), Failure> {
        let mut digests = Map::new();
        if self.inputs.is_empty() {
            digests.insert("<bundled grammar>".into(), json!(sha256_hex(metatemplate::DEFAULT_GRAMMAR_JSON.as_bytes())));
        }
        for p in &self.inputs {
            let bytes = std::fs::read(p)
                .map_err(|e| Failure::io(anyhow::anyhow!("hashing {}: {e}", p.display())))?;
            digests.insert(p.display().to_string(), json!(sha256_hex(&bytes)));
        }
        self.fields.insert("inputs".into(), Value::Object(digests));
        self.fields
            .insert("output".into(), json!(output.display().to_string()));
        let path = crate::with_suffix(output, ".manifest.json");
        let text = serde_json::to_string_pretty(&Value::Object(self.fields)).expect("json");
        std::fs::write(&path, text + "\n")
            .map_err(|e| Failure::io(anyhow::anyhow!("writing {}: {e}", path.display())))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
