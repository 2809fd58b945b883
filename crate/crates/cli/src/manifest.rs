use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "run_manifest.json";

/// One per run, written next to the run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: serde_json::Value,
    pub resolved: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub threads: Option<usize>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub out_dir: PathBuf,
    /// sha256 of every output file, keyed by path relative to `out_dir`
    pub artifact_hashes: BTreeMap<String, String>,
    pub wall_clock_s: f64,
}

pub struct Recorder {
    started: Instant,
    m: RunManifest,
}

impl Recorder {
    pub fn new(subcommand: &str, args: &impl Serialize, out_dir: &Path, threads: Option<usize>) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            started: Instant::now(),
            m: RunManifest {
                subcommand: subcommand.into(),
                args: serde_json::to_value(args)?,
                resolved: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                threads,
                inputs: BTreeMap::new(),
                out_dir: out_dir.to_path_buf(),
                artifact_hashes: BTreeMap::new(),
                wall_clock_s: 0.0,
            },
        })
    }

    pub fn seed(&mut self, label: &str, seed: u64) {
        self.m.seeds.insert(label.into(), seed);
    }

    pub fn input(&mut self, label: &str, path: &Path) {
        self.m.inputs.insert(label.into(), path.to_path_buf());
    }

    pub fn resolved(&mut self, v: &impl Serialize) -> Result<()> {
        self.m.resolved = serde_json::to_value(v)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.m.artifact_hashes = hash_tree(&self.m.out_dir)?;
        self.m.wall_clock_s = self.started.elapsed().as_secs_f64();
        let path = self.m.out_dir.join(FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self.m)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of every file under `dir` except the manifest itself.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
            if rel == FILE {
                continue;
            }
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(out)
}
