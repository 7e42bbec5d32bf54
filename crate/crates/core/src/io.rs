//! Structured-text (JSON) persistence for networks, datasets, fingerprints
//! and transcripts. Floats are written in shortest round-trip form and read
//! back exactly.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ArchSpec, Network};

    #[test]
    fn network_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(&ArchSpec::new(5, &[7, 3], 4, Activation::Tanh), 99).unwrap();
        let path = dir.path().join("nested/net.json");
        save_json(&path, &net).unwrap();
        let back: Network = load_json(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn malformed_file_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"arch_id\": 3}").unwrap();
        assert!(matches!(load_json::<Network>(&path), Err(Error::Schema { .. })));
        assert!(matches!(
            load_json::<Network>(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}
