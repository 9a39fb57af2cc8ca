//! Run manifests: a flat TOML table of what produced an artifact, with
//! SHA-256 digests of every input.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::tensor::ImagePatch;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Digest over image sizes and pixels, in order.
pub fn hash_images(images: &[ImagePatch]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.height() as u64).to_le_bytes());
        h.update(img.to_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    table: Table,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.table.insert(key.to_string(), value.into());
        self
    }

    /// Stores a `u64` as a string; TOML integers are signed.
    pub fn set_u64(&mut self, key: &str, value: u64) -> &mut Self {
        self.set(key, value.to_string())
    }

    /// Adds `[section]` from any serializable value.
    pub fn set_section<T: serde::Serialize>(&mut self, key: &str, value: &T) -> Result<&mut Self> {
        let v = Value::try_from(value).map_err(|e| Error::Malformed(format!("manifest section {key}: {e}")))?;
        Ok(self.set(key, v))
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.table.get(key).and_then(Value::as_str)
    }

    pub fn section<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.table.get(key).ok_or_else(|| Error::Malformed(format!("manifest lacks [{key}]")))?;
        v.clone().try_into().map_err(|e| Error::Malformed(format!("manifest section {key}: {e}")))
    }

    pub fn add_input(&mut self, name: &str, digest: String) -> &mut Self {
        let inputs = self
            .table
            .entry("inputs")
            .or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(t) = inputs {
            t.insert(name.to_string(), Value::String(digest));
        }
        self
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.table).expect("a toml table always serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table = text.parse::<Table>().map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
        Ok(Manifest { table })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn roundtrip() {
        let mut m = Manifest::new("pretrain");
        m.set("lambda", 512.0).set_u64("seed", u64::MAX).add_input("dataset", "00ff".into());
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get_str("seed"), Some("18446744073709551615"));
        assert_eq!(back.get("inputs").unwrap().get("dataset").unwrap().as_str(), Some("00ff"));
    }
}
