use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const LOCK_NAME: &str = ".carss.lock";

/// Written next to every command's outputs. Contains nothing that varies
/// between identical runs, so equal manifests mean equal outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub arguments: serde_json::Value,
    pub config: RunConfig,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, by role.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, arguments: serde_json::Value, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            arguments,
            config: config.clone(),
            seed: config.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        self.outputs.push(name);
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.outputs.sort();
        carss::io::write_json(&dir.join("run_manifest.json"), &self)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(anyhow!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
