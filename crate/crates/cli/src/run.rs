//! Run metadata and exit-status mapping.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use lipvli_core::svm::SvmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Bad or missing parameters.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError::new(msg).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        match cause.downcast_ref::<SvmError>() {
            Some(SvmError::NonConvergence { .. }) => return EXIT_NUMERICAL,
            // Every cell failed and the solver is to blame for all of them.
            Some(SvmError::NoValidCell { cells, non_convergent }) if cells == non_convergent && *cells > 0 => {
                return EXIT_NUMERICAL
            }
            _ => {}
        }
    }
    EXIT_DATA
}

#[derive(Debug, Serialize)]
struct Versions {
    lipvli: &'static str,
    manifest: u32,
    model: u32,
    report: u32,
    tensor: u16,
}

const VERSIONS: Versions = Versions {
    lipvli: env!("CARGO_PKG_VERSION"),
    manifest: lipvli_core::dataset::MANIFEST_VERSION,
    model: lipvli_core::svm::multiclass::MODEL_VERSION,
    report: lipvli_core::eval::REPORT_VERSION,
    tensor: lipvli_core::preprocess::LBTF_VERSION,
};

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: Option<u64>,
    config_hash: String,
    versions: Versions,
    parameters: &'a Value,
    outputs: Vec<String>,
}

/// SHA-256 of the compact JSON encoding (object keys sorted).
pub fn config_hash(parameters: &Value) -> String {
    let digest = Sha256::digest(parameters.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outputs of one subcommand, collected while it runs.
#[derive(Debug)]
pub struct Run {
    pub out_dir: PathBuf,
    command: &'static str,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: &'static str, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self { out_dir, command, outputs: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(&path);
        Ok(path)
    }

    /// Writes `run_<command>.json`. Output paths are relative to the output
    /// directory and the file has no timestamps, so reruns are byte-identical.
    pub fn finish(mut self, seed: Option<u64>, parameters: &Value) -> Result<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(&self.out_dir).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        let meta = RunMeta {
            command: self.command,
            seed,
            config_hash: config_hash(parameters),
            versions: VERSIONS,
            parameters,
            outputs,
        };
        let json = serde_json::to_string_pretty(&meta).expect("run metadata serializes");
        let name = format!("run_{}.json", self.command);
        self.outputs.clear();
        self.write(&name, &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&usage("x")), EXIT_USAGE);
        assert_eq!(exit_code(&usage("x").context("outer")), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow::anyhow!("data")), EXIT_DATA);
        let cells = |cells, non_convergent| anyhow::Error::from(SvmError::NoValidCell { cells, non_convergent });
        assert_eq!(exit_code(&cells(4, 1)), EXIT_DATA);
        assert_eq!(exit_code(&cells(4, 4)), EXIT_NUMERICAL);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":[2,3]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":[2,3],"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn metadata_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let params = serde_json::json!({"seed": 4});
        let mut run = Run::new("demo", dir.path().to_path_buf()).unwrap();
        run.write("x.txt", "x").unwrap();
        let p = run.finish(Some(4), &params).unwrap();
        let first = std::fs::read_to_string(&p).unwrap();
        let v: Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["outputs"], serde_json::json!(["x.txt"]));
        assert_eq!(v["seed"], 4);
        let mut run = Run::new("demo", dir.path().to_path_buf()).unwrap();
        run.write("x.txt", "x").unwrap();
        run.finish(Some(4), &params).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), first);
    }
}
