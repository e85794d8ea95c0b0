//! Output directory bookkeeping: fixed-precision JSON, content hashes, and a
//! manifest of stage inputs so unchanged stages are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Significant digits kept for every float written to an artifact.
pub const DIGITS: usize = 12;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn round(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", DIGITS - 1, x).parse().unwrap_or(x)
}

fn fix(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(fix).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, fix(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with every float rounded to [`DIGITS`] significant digits.
pub fn fixed_json<T: Serialize>(value: &T) -> Result<String> {
    let v = fix(serde_json::to_value(value)?);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// A float for CSV cells, at the same precision as the JSON.
pub fn cell(x: f64) -> String {
    format!("{:.*e}", DIGITS - 1, x)
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
struct StageEntry {
    input: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageEntry>,
}

pub struct Workspace {
    dir: PathBuf,
    manifest: Manifest,
}

const MANIFEST: &str = "stages.json";

impl Workspace {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST);
        let manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .with_context(|| format!("reading {}", path.display()))?,
            Err(_) => Manifest::default(),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn file_hash(&self, name: &str) -> Option<String> {
        fs::read(self.path(name)).ok().map(|b| sha256_hex(&b))
    }

    /// Input hash recorded for `stage`, if its outputs are still intact.
    pub fn recorded_input(&self, stage: &str) -> Option<&str> {
        let e = self.manifest.stages.get(stage)?;
        let intact = e
            .outputs
            .iter()
            .all(|(name, hash)| self.file_hash(name).as_deref() == Some(hash.as_str()));
        intact.then_some(e.input.as_str())
    }

    pub fn up_to_date(&self, stage: &str, input: &str) -> bool {
        self.recorded_input(stage) == Some(input)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Records the stage as done with `input`, hashing `outputs` as they are now.
    pub fn commit(&mut self, stage: &str, input: &str, outputs: &[&str]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            let hash = self
                .file_hash(name)
                .with_context(|| format!("missing output {name}"))?;
            hashes.insert(name.to_string(), hash);
        }
        self.manifest.stages.insert(
            stage.into(),
            StageEntry {
                input: input.into(),
                outputs: hashes,
            },
        );
        self.write(MANIFEST, &serde_json::to_string_pretty(&self.manifest)?)
    }
}
