//! Run configuration: a flat TOML file whose keys mirror the pipeline
//! hyperparameters, plus seed derivation and a stable fingerprint.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::classifier::GbdtConfig;
use crate::error::{Error, Result};
use crate::ingest::CleanConfig;
use crate::structural::{EdgeSource, RepresentationConfig};
use crate::temporal_edge::Featurization;

/// How many of a pair's most recent transactions the sequence encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeqLength {
    #[default]
    Variable,
    Fixed(usize),
}

impl SeqLength {
    pub fn max_len(self) -> Option<usize> {
        match self {
            SeqLength::Variable => None,
            SeqLength::Fixed(n) => Some(n),
        }
    }
}

impl fmt::Display for SeqLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeqLength::Variable => f.write_str("variable"),
            SeqLength::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for SeqLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variable" => Ok(SeqLength::Variable),
            other => match other.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(SeqLength::Fixed(n)),
                _ => Err(Error::Config(format!(
                    "sequence length must be \"variable\" or a positive integer, got {other:?}"
                ))),
            },
        }
    }
}

impl Serialize for SeqLength {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SeqLength {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Int(n) => n.to_string(),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // cleaning
    pub cutoff: i64,
    pub min_records: usize,
    pub max_records: usize,

    // sampling
    pub subgraph_nodes: usize,
    pub max_walk_len: usize,

    // representation
    pub embedding_dim: usize,
    pub attention_heads: usize,
    pub gcn_hidden: usize,
    pub lr_sequence: f64,
    pub lr_attention: f64,
    pub lr_gcn: f64,
    pub epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub seq_length: SeqLength,
    pub featurization: Featurization,
    pub recon_self_loops: bool,

    // classifier
    pub num_leaves: usize,
    pub boost_rate: f64,
    pub num_trees: usize,
    pub min_leaf: usize,
    pub max_depth: usize,
    pub early_stopping_rounds: Option<usize>,
    pub upsample_ratio: usize,
    pub train_fraction: f64,
    pub threshold: f64,

    // paths, excluded from the fingerprint
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transactions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let clean = CleanConfig::default();
        let repr = RepresentationConfig::default();
        let gbdt = GbdtConfig::default();
        RunConfig {
            seed: 0,
            cutoff: clean.cutoff,
            min_records: clean.min_records,
            max_records: clean.max_records,
            subgraph_nodes: 2000,
            max_walk_len: 100,
            embedding_dim: repr.embedding_dim,
            attention_heads: repr.attention_heads,
            gcn_hidden: repr.gcn_hidden,
            lr_sequence: repr.lr_sequence,
            lr_attention: repr.lr_attention,
            lr_gcn: repr.lr_gcn,
            epochs: repr.epochs,
            patience: repr.patience,
            min_improvement: repr.min_improvement,
            seq_length: SeqLength::Variable,
            featurization: repr.featurization,
            recon_self_loops: repr.target_self_loops,
            num_leaves: gbdt.num_leaves,
            boost_rate: gbdt.learning_rate,
            num_trees: gbdt.num_trees,
            min_leaf: gbdt.min_leaf,
            max_depth: gbdt.max_depth,
            early_stopping_rounds: gbdt.early_stopping_rounds,
            upsample_ratio: 50,
            train_fraction: 0.8,
            threshold: 0.5,
            transactions: None,
            labels: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.min_records > self.max_records {
            return bad(format!(
                "min_records {} exceeds max_records {}",
                self.min_records, self.max_records
            ));
        }
        if self.subgraph_nodes == 0 || self.max_walk_len == 0 {
            return bad("subgraph_nodes and max_walk_len must be positive".into());
        }
        if self.embedding_dim == 0 || self.gcn_hidden == 0 {
            return bad("embedding_dim and gcn_hidden must be positive".into());
        }
        if self.attention_heads == 0 || self.embedding_dim % self.attention_heads != 0 {
            return bad(format!(
                "attention_heads {} must divide embedding_dim {}",
                self.attention_heads, self.embedding_dim
            ));
        }
        for (name, lr) in [
            ("lr_sequence", self.lr_sequence),
            ("lr_attention", self.lr_attention),
            ("lr_gcn", self.lr_gcn),
        ] {
            if !(lr > 0.0 && lr < 1.0) {
                return bad(format!("{name} {lr} outside (0, 1)"));
            }
        }
        if !(self.min_improvement >= 0.0) {
            return bad("min_improvement must be non-negative".into());
        }
        if let SeqLength::Fixed(0) = self.seq_length {
            return bad("fixed sequence length must be positive".into());
        }
        if self.num_leaves < 2 || self.min_leaf == 0 || self.max_depth == 0 {
            return bad("num_leaves >= 2, min_leaf >= 1 and max_depth >= 1 required".into());
        }
        if !(self.boost_rate > 0.0 && self.boost_rate <= 1.0) {
            return bad(format!("boost_rate {} outside (0, 1]", self.boost_rate));
        }
        if self.upsample_ratio == 0 {
            return bad("upsample_ratio must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }

    /// Hyperparameters only, as a sorted-key JSON object.
    pub fn canonical_json(&self) -> String {
        let mut stripped = self.clone();
        stripped.transactions = None;
        stripped.labels = None;
        stripped.output_dir = None;
        let value = serde_json::to_value(&stripped).expect("run config serializes");
        serde_json::to_string(&value).expect("json value serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Seed for a named stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn clean_config(&self) -> CleanConfig {
        CleanConfig {
            cutoff: self.cutoff,
            min_records: self.min_records,
            max_records: self.max_records,
        }
    }

    pub fn representation_config(&self) -> RepresentationConfig {
        RepresentationConfig {
            embedding_dim: self.embedding_dim,
            attention_heads: self.attention_heads,
            gcn_hidden: self.gcn_hidden,
            lr_sequence: self.lr_sequence,
            lr_attention: self.lr_attention,
            lr_gcn: self.lr_gcn,
            epochs: self.epochs,
            patience: self.patience,
            min_improvement: self.min_improvement,
            featurization: self.featurization,
            max_seq_len: self.seq_length.max_len(),
            target_self_loops: self.recon_self_loops,
            edge_source: EdgeSource::Learned,
            structural: true,
            seed: self.stage_seed("representation"),
        }
    }

    pub fn gbdt_config(&self) -> GbdtConfig {
        GbdtConfig {
            num_leaves: self.num_leaves,
            learning_rate: self.boost_rate,
            num_trees: self.num_trees,
            min_leaf: self.min_leaf,
            max_depth: self.max_depth,
            early_stopping_rounds: self.early_stopping_rounds,
            ..GbdtConfig::default()
        }
    }
}

/// First eight bytes (little endian) of `SHA-256(seed_le ‖ stage)`.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("epochs = 3\nlearning_rte = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn values_are_range_checked() {
        assert!(RunConfig::from_toml("attention_heads = 3").is_err());
        assert!(RunConfig::from_toml("train_fraction = 1.0").is_err());
        assert!(RunConfig::from_toml("seq_length = 0").is_err());
        assert!(RunConfig::from_toml("attention_heads = 5").is_ok());
    }

    #[test]
    fn seq_length_accepts_both_spellings() {
        let c = RunConfig::from_toml("seq_length = 5").unwrap();
        assert_eq!(c.seq_length, SeqLength::Fixed(5));
        let c = RunConfig::from_toml("seq_length = \"20\"").unwrap();
        assert_eq!(c.seq_length, SeqLength::Fixed(20));
        let c = RunConfig::from_toml("seq_length = \"variable\"").unwrap();
        assert_eq!(c.seq_length, SeqLength::Variable);
        assert!("fixed".parse::<SeqLength>().is_err());
    }

    #[test]
    fn fingerprint_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/elsewhere".into());
        b.transactions = Some("tx.tsv".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.epochs = 199;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("sample"), c.stage_seed("split"));
        assert_eq!(c.stage_seed("sample"), derive_seed(0, "sample"));
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.stage_seed("sample"), d.stage_seed("sample"));
    }
}
