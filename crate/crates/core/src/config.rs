//! Flat run configuration with layered overrides.
//!
//! Sources are applied in increasing precedence: built-in defaults, the
//! config file, `HIERENV_<KEY>` environment variables, then explicit
//! `key=value` overrides (command-line flags).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env_infer::Stage1Config;
use crate::error::{Error, Result};
use crate::invariant::Stage2Config;
use crate::subgraph::HierarchyConfig;
use crate::synthetic::SyntheticConfig;

pub const ENV_PREFIX: &str = "HIERENV_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset manifest; when absent, commands use `<out>/data/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,

    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub label_flip_prob: f64,
    pub data_seed: u64,

    /// Number of hierarchy levels K; must equal `env_counts.len()`.
    pub hierarchies: usize,
    pub env_counts: Vec<usize>,
    pub threshold: f64,
    pub tau_gumbel: f64,
    pub tau_contrastive: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub collapse_guard: f64,

    pub hidden: usize,
    pub proj: usize,
    pub layers_env: usize,
    pub layers_inv: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs_env: usize,
    pub epochs_inv: usize,
    pub patience: usize,
    pub dropout: f64,

    /// Environment strategy: `hier`, `erm`, `real`, `rand#k` or `infer-flat#k`.
    pub strategy: String,
    pub seeds: Vec<u64>,
    /// Train stage two on the invariant subgraph instead of the full graph.
    pub invariant_adjacency: bool,
    /// Write per-graph selected edges during assignment.
    pub dump_edges: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        let data = SyntheticConfig::default();
        Self {
            seed: 1,
            manifest: None,
            out: PathBuf::from("runs/default"),
            n_train: data.n_train,
            n_val: data.n_val,
            n_test: data.n_test,
            rho_train: data.rho_train,
            rho_test: data.rho_test,
            label_flip_prob: data.label_flip_prob,
            data_seed: data.seed,
            hierarchies: s1.hierarchy.env_counts.len(),
            env_counts: s1.hierarchy.env_counts.clone(),
            threshold: s1.hierarchy.threshold,
            tau_gumbel: s1.hierarchy.tau_gumbel,
            tau_contrastive: s1.hierarchy.tau_contrastive,
            alpha: s1.hierarchy.alpha,
            beta: s1.hierarchy.beta,
            lambda: s1.hierarchy.lambda,
            collapse_guard: s1.collapse_guard,
            hidden: s1.hidden,
            proj: s1.proj,
            layers_env: s1.layers,
            layers_inv: s2.layers,
            lr: s1.lr,
            batch_size: s1.batch_size,
            epochs_env: s1.epochs,
            epochs_inv: s2.epochs,
            patience: s1.patience,
            dropout: s2.dropout,
            strategy: "hier".into(),
            seeds: vec![1, 2, 3, 4, 5],
            invariant_adjacency: false,
            dump_edges: false,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then `file`, then the process environment, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::load_with_env(file, &env, overrides)
    }

    pub fn load_with_env(file: Option<&Path>, env: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let known: Vec<String> = table.keys().cloned().chain(["manifest".to_string()]).collect();
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.to_path_buf()));
            }
            let text = fs::read_to_string(path)?;
            let parsed: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in parsed {
                if !known.contains(&k) {
                    return Err(Error::Config(format!("unknown key {k} in {}", path.display())));
                }
                table.insert(k, v);
            }
        }
        for (name, raw) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if known.contains(&key) {
                    table.insert(key, parse_value(raw));
                }
            }
        }
        for (k, raw) in overrides {
            if !known.contains(k) {
                return Err(Error::Config(format!("unknown key {k}")));
            }
            table.insert(k.clone(), parse_value(raw));
        }
        // Paths given as bare strings stay strings after parse_value.
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hierarchies != self.env_counts.len() {
            return Err(Error::Config(format!(
                "hierarchies = {} but env_counts has {} entries",
                self.hierarchies,
                self.env_counts.len()
            )));
        }
        self.synthetic().validate()?;
        self.stage1().validate()?;
        self.stage2().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        crate::pipeline::Strategy::parse(&self.strategy)?;
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            rho_train: self.rho_train,
            rho_test: self.rho_test,
            label_flip_prob: self.label_flip_prob,
            seed: self.data_seed,
        }
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            env_counts: self.env_counts.clone(),
            threshold: self.threshold,
            tau_gumbel: self.tau_gumbel,
            tau_contrastive: self.tau_contrastive,
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            hierarchy: self.hierarchy(),
            hidden: self.hidden,
            proj: self.proj,
            layers: self.layers_env,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs_env,
            patience: self.patience,
            collapse_guard: self.collapse_guard,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            hidden: self.hidden,
            layers: self.layers_inv,
            dropout: self.dropout,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs_inv,
            patience: self.patience,
            lambda: self.lambda,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out.join("data").join("manifest.json"))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
