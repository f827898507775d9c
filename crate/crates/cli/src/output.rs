//! Output directory with a JSON sidecar next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes artifacts into one directory. Each file `name.ext` gets a sidecar
/// `name.meta.json` holding the shared metadata plus the file's own digest.
pub struct Artifacts {
    dir: PathBuf,
    meta: Value,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, meta: Value) -> Result<Artifacts, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Artifacts { dir: dir.to_path_buf(), meta, written: Vec::new() })
    }

    fn sidecar_name(name: &str) -> String {
        match name.rsplit_once('.') {
            Some((stem, _)) => format!("{stem}.meta.json"),
            None => format!("{name}.meta.json"),
        }
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        let mut meta = self.meta.clone();
        if let Value::Object(m) = &mut meta {
            m.insert("file".into(), json!(name));
            m.insert("file_sha256".into(), json!(sha256_hex(bytes)));
        }
        let side = self.dir.join(Self::sidecar_name(name));
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
        fs::write(&side, text).map_err(|e| CliError::io(&side, e))?;
        self.written.push(path);
        self.written.push(side);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        self.put(name, body.as_bytes())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        self.put(name, text.as_bytes())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(Artifacts::sidecar_name("levels.csv"), "levels.meta.json");
        assert_eq!(Artifacts::sidecar_name("measure_0.csv"), "measure_0.meta.json");
        assert_eq!(Artifacts::sidecar_name("plain"), "plain.meta.json");
    }
}
