//! Run manifests: what a command read, what it wrote, and the hashes of
//! both.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> io::Result<FileHash> {
        Ok(FileHash { path: path.display().to_string(), sha256: hash_file(path)? })
    }
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<FileHash>,
    /// Defaults, config file, NCPP_SEED and flags merged.
    pub effective_config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub seed: Option<u64>,
    pub artifacts: Vec<FileHash>,
    /// Seconds.
    pub wall_time: f64,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(Self::file_name(&self.command));
        fs::write(&path, serde_json::to_string_pretty(self).map_err(io::Error::other)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> io::Result<RunManifest> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(io::Error::other)
    }

    /// Paths whose current hash differs from the recorded one (or that no
    /// longer exist).
    pub fn stale(&self) -> Vec<String> {
        self.artifacts
            .iter()
            .chain(&self.inputs)
            .chain(&self.config)
            .filter(|f| hash_file(Path::new(&f.path)).map_or(true, |h| h != f.sha256))
            .map(|f| f.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "abc").unwrap();
        assert_eq!(hash_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        fs::write(&p, "x\n1\n").unwrap();
        let m = RunManifest {
            command: "train".into(),
            version: "0.1.0".into(),
            config: None,
            effective_config: serde_json::json!({"epochs": 3}),
            inputs: vec![],
            seed: Some(5),
            artifacts: vec![FileHash::of(&p).unwrap()],
            wall_time: 0.5,
        };
        let path = m.write(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "train.manifest.json");
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert!(m.stale().is_empty());
        fs::write(&p, "x\n2\n").unwrap();
        assert_eq!(m.stale(), vec![p.display().to_string()]);
    }
}
