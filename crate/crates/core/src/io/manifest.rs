//! Run manifests written next to every output of a randomized command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::FormatError;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command_line: Vec<String>, seed: Option<u64>) -> Self {
        Self {
            command_line,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_seconds: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), FormatError> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Paths of inputs whose current digest differs from the recorded one.
    pub fn stale_inputs(&self) -> Result<Vec<String>, FormatError> {
        let mut stale = Vec::new();
        for input in &self.inputs {
            let bytes = std::fs::read(&input.path)?;
            if format!("{:016x}", fnv1a64(&bytes)) != input.fnv1a64 {
                stale.push(input.path.clone());
            }
        }
        Ok(stale)
    }

    /// `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| FormatError::Io(std::io::Error::other(e)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn digests_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        std::fs::write(&input, b"hello").unwrap();
        let mut m = RunManifest::new(vec!["qflow".into()], Some(3));
        m.add_input(&input).unwrap();
        let mpath = RunManifest::path_for(&dir.path().join("out.qbf"));
        assert!(mpath.to_string_lossy().ends_with("out.qbf.manifest.json"));
        m.write(&mpath).unwrap();
        let back = RunManifest::read(&mpath).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_inputs().unwrap().is_empty());
        std::fs::write(&input, b"changed").unwrap();
        assert_eq!(back.stale_inputs().unwrap(), vec![input.display().to_string()]);
    }
}
