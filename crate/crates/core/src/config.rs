//! Run configuration: structured key-value file (TOML) with CLI
//! overrides applied before validation. The config hash keys every
//! output directory so identical configs land in identical places.

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Hypergraph propagation flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Two-stage pass through the incidence matrix.
    Full,
    /// One-matrix approximation from truncated similarities.
    Simplified,
}

/// Structural ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drop the multi-behavior hyperedges.
    NoMbHyper,
    /// Drop the metric-learned semantic hyperedges.
    NoMlHyper,
    /// Drop the hypergraph view entirely.
    NoHypergraph,
    /// Replace multi-scale attention with vanilla multi-head attention.
    NoMsAttention,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub behaviors: Vec<String>,
    pub target: String,
    #[serde(default)]
    pub strict: bool,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub j: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub c: usize,
    pub p1: usize,
    pub p2: usize,
    pub k: usize,
    pub w0: f64,
    pub q1: usize,
    pub q2: usize,
    /// FFN inner width; 0 means the conventional 4*d.
    pub d_h: usize,
    pub dropout: f64,
    pub conv_mode: ConvMode,
    pub metric_channels: usize,
    pub ablation: Ablation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            j: 20,
            d: 64,
            layers: 2,
            heads: 2,
            c: 20,
            p1: 4,
            p2: 20,
            k: 8,
            w0: 0.1,
            q1: 2,
            q2: 2,
            d_h: 0,
            dropout: 0.2,
            conv_mode: ConvMode::Simplified,
            metric_channels: 2,
            ablation: Ablation::None,
        }
    }
}

impl ModelSection {
    pub fn ffn_width(&self) -> usize {
        if self.d_h == 0 {
            4 * self.d
        } else {
            self.d_h
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 30,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ns: Vec<usize>,
    pub n_neg: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ns: vec![5, 10], n_neg: 100 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    /// Output root; empty falls back to $MBREC_OUT, then ./out.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse a TOML config file and apply `section.key=value` overrides
    /// (overrides win over file values).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("TOML parse: {e}")))?;
        for entry in overrides {
            apply_override(&mut doc, entry)?;
        }
        let config: RunConfig =
            doc.try_into().map_err(|e| Error::Config(format!("config shape: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Check every structural invariant, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.j < 2 {
            return Err(Error::Config(format!("J must be >= 2, got {}", m.j)));
        }
        if m.c == 0 || m.j % m.c != 0 {
            return Err(Error::Config(format!("J not divisible by C ({} % {})", m.j, m.c)));
        }
        if m.p1 == 0 || m.j % m.p1 != 0 {
            return Err(Error::Config(format!("J not divisible by p1 ({} % {})", m.j, m.p1)));
        }
        if m.p2 == 0 || m.j % m.p2 != 0 {
            return Err(Error::Config(format!("J not divisible by p2 ({} % {})", m.j, m.p2)));
        }
        if m.heads == 0 || m.d % m.heads != 0 {
            return Err(Error::Config(format!("d not divisible by N ({} % {})", m.d, m.heads)));
        }
        if m.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if m.metric_channels == 0 {
            return Err(Error::Config("metric_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", m.dropout)));
        }
        if self.dataset.behaviors.is_empty() {
            return Err(Error::Config("behavior vocabulary is empty".into()));
        }
        let target_hits =
            self.dataset.behaviors.iter().filter(|b| **b == self.dataset.target).count();
        if target_hits != 1 {
            return Err(Error::Config(format!(
                "exactly one TARGET behavior required, '{}' matches {target_hits}",
                self.dataset.target
            )));
        }
        if self.eval.ns.is_empty() {
            return Err(Error::Config("eval.ns must name at least one cutoff".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn behavior_schema(&self) -> Result<crate::data::BehaviorSchema> {
        crate::data::BehaviorSchema::new(
            self.dataset.behaviors.clone(),
            &self.dataset.target,
            self.dataset.delimiter,
            self.dataset.strict,
        )
    }

    /// Stable hash over semantic fields; key order in the source file
    /// cannot affect it because hashing happens after deserialization.
    pub fn hash(&self) -> u64 {
        let canonical = self.canonical_string();
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    fn canonical_string(&self) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        format!(
            "dataset.path={}\ndataset.delimiter={}\ndataset.behaviors={}\ndataset.target={}\n\
             dataset.strict={}\nmodel.j={}\nmodel.d={}\nmodel.layers={}\nmodel.heads={}\n\
             model.c={}\nmodel.p1={}\nmodel.p2={}\nmodel.k={}\nmodel.w0={}\nmodel.q1={}\n\
             model.q2={}\nmodel.d_h={}\nmodel.dropout={}\nmodel.conv_mode={:?}\n\
             model.metric_channels={}\nmodel.ablation={:?}\ntrain.lr={}\ntrain.beta1={}\n\
             train.beta2={}\ntrain.eps={}\ntrain.batch_size={}\ntrain.epochs={}\n\
             train.patience={}\ntrain.seed={}\neval.ns={:?}\neval.n_neg={}\n",
            d.path.display(),
            d.delimiter,
            d.behaviors.join("|"),
            d.target,
            d.strict,
            m.j,
            m.d,
            m.layers,
            m.heads,
            m.c,
            m.p1,
            m.p2,
            m.k,
            m.w0,
            m.q1,
            m.q2,
            m.d_h,
            m.dropout,
            m.conv_mode,
            m.metric_channels,
            m.ablation,
            t.lr,
            t.beta1,
            t.beta2,
            t.eps,
            t.batch_size,
            t.epochs,
            t.patience,
            t.seed,
            e.ns,
            e.n_neg,
        )
    }

    /// Output root: explicit config value, else $MBREC_OUT, else ./out.
    pub fn output_root(&self) -> PathBuf {
        if let Some(dir) = &self.output.dir {
            return dir.clone();
        }
        if let Ok(env) = std::env::var("MBREC_OUT") {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from("out")
    }

    /// Directory all artifacts of this config land in.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(self.hash_hex())
    }
}

fn apply_override(doc: &mut toml::Value, entry: &str) -> Result<()> {
    let (key_path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{entry}' must be key=value")))?;
    let parts: Vec<&str> = key_path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key_path}'")));
    }
    // Parse the value as TOML when possible, else treat as string.
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(table) => table.get("v").cloned().unwrap(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("cannot descend into '{part}'")))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("cannot set '{key_path}'")))?
        .insert(parts.last().unwrap().to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[dataset]
path = "events.csv"
behaviors = ["pv", "fav", "cart", "buy"]
target = "buy"

[model]
j = 16
d = 32
c = 4
p1 = 2
p2 = 8
"#;

    #[test]
    fn loads_with_defaults() {
        let cfg = RunConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(cfg.model.j, 16);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.eval.n_neg, 100);
        assert_eq!(cfg.model.ffn_width(), 128);
    }

    #[test]
    fn rejects_indivisible_p1_with_named_invariant() {
        let bad = BASE.replace("j = 16", "j = 100").replace("p1 = 2", "p1 = 8");
        // 100 % 8 != 0 -> named violation; c and p2 also adjusted to pass.
        let bad = bad.replace("c = 4", "c = 4").replace("p2 = 8", "p2 = 4");
        let err = RunConfig::from_toml(&bad, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("J not divisible by p1"), "got: {msg}");
    }

    #[test]
    fn rejects_missing_target_behavior() {
        let bad = BASE.replace("target = \"buy\"", "target = \"click\"");
        assert!(RunConfig::from_toml(&bad, &[]).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let cfg =
            RunConfig::from_toml(BASE, &["train.seed=7".into(), "model.dropout=0.0".into()])
                .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.dropout, 0.0);
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let reordered = r#"
[model]
p2 = 8
p1 = 2
d = 32
c = 4
j = 16

[dataset]
target = "buy"
behaviors = ["pv", "fav", "cart", "buy"]
path = "events.csv"
"#;
        let a = RunConfig::from_toml(BASE, &[]).unwrap();
        let b = RunConfig::from_toml(reordered, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 16);
    }

    #[test]
    fn hash_changes_with_semantics() {
        let a = RunConfig::from_toml(BASE, &[]).unwrap();
        let b = RunConfig::from_toml(BASE, &["train.seed=99".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn ablation_parses_from_snake_case() {
        let cfg =
            RunConfig::from_toml(BASE, &["model.ablation=\"no_ms_attention\"".into()]).unwrap();
        assert_eq!(cfg.model.ablation, Ablation::NoMsAttention);
        let cfg2 = RunConfig::from_toml(BASE, &["model.conv_mode=\"full\"".into()]).unwrap();
        assert_eq!(cfg2.model.conv_mode, ConvMode::Full);
    }
}
