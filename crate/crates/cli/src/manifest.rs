use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use nmt_simplify::config::KvConfig;
use nmt_simplify::io::write_atomic;
use sha2::{Digest, Sha256};

/// Record of one invocation, written as `key=value` text.
#[derive(Debug)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: KvConfig,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| path.display().to_string())?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).with_context(|| path.display().to_string())?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn new(subcommand: &'static str, seed: Option<u64>, threads: usize) -> Self {
        Self {
            subcommand,
            config: KvConfig::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            threads,
            started: Instant::now(),
        }
    }

    /// Hashes `path` and records it; fails with the path if it cannot be read.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn render(&self) -> String {
        let mut kv = KvConfig::new();
        kv.set("subcommand", self.subcommand);
        kv.set("seed", self.seed.map_or("none".to_string(), |s| s.to_string()));
        kv.set("threads", self.threads);
        for (k, v) in self.config.iter() {
            kv.set(format!("config.{k}"), v);
        }
        for (i, (path, digest)) in self.inputs.iter().enumerate() {
            kv.set(format!("input.{i:02}.path"), path.display());
            kv.set(format!("input.{i:02}.sha256"), digest);
        }
        for (i, path) in self.outputs.iter().enumerate() {
            kv.set(format!("output.{i:02}"), path.display());
        }
        kv.set("wall_clock_secs", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        kv.render()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())?;
        Ok(())
    }
}
