//! The per-command record written as `manifest.txt`.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use sha2::{Digest, Sha256};

pub struct RunManifest {
    pub command: String,
    pub config_toml: String,
    pub seed: u64,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    /// Content hash of the checkpoint read, if any.
    pub checkpoint_hash: Option<String>,
    pub extra: Vec<(String, String)>,
    pub started: u64,
    pub finished: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the file.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let len = f.metadata()?.len();
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config_toml: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_toml,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_hash: None,
            extra: Vec::new(),
            started: unix_now(),
            finished: 0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.into(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.push((name.into(), path.to_path_buf()));
    }

    pub fn extra(&mut self, key: &str, value: impl ToString) {
        self.extra.push((key.into(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command: {}", self.command);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "started: {}", self.started);
        let _ = writeln!(s, "finished: {}", self.finished);
        if let Some(h) = &self.checkpoint_hash {
            let _ = writeln!(s, "checkpoint_hash: sha256:{h}");
        }
        for (k, p) in &self.inputs {
            let _ = writeln!(s, "input.{k}: {}", p.display());
        }
        for (k, p) in &self.outputs {
            let _ = writeln!(s, "output.{k}: {}", p.display());
        }
        for (k, v) in &self.extra {
            if v.contains('\n') {
                let _ = writeln!(s, "\n[{k}]\n{}", v.trim_end());
            } else {
                let _ = writeln!(s, "{k}: {v}");
            }
        }
        let _ = writeln!(s, "\n[config]\n{}", self.config_toml.trim_end());
        s
    }

    pub fn write(mut self, out: &Path) -> Result<()> {
        self.finished = unix_now();
        std::fs::write(out.join("manifest.txt"), self.to_text())?;
        Ok(())
    }
}
