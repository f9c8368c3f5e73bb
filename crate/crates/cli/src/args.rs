use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phishgraph::evaluation::AblationVariant;
use phishgraph::temporal_edge::Featurization;
use phishgraph::{RunConfig, SeqLength};

/// Phishing address detection on transaction graphs.
///
/// Stages read and write files in one working directory (`--dir`). Settings
/// come from built-in defaults, then `--config`, then command-line flags.
#[derive(Debug, Parser)]
#[command(name = "phishgraph", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic network with planted phishing nodes
    Synth(SynthArgs),
    /// Load transactions and labels, apply the cleaning rules
    Ingest(IngestArgs),
    /// Build the graph from cleaned records and sample a subgraph
    Sample,
    /// Learn node representations and fit the classifier
    Train(TrainArgs),
    /// Score the held-out split with a trained model
    Evaluate,
    /// Score every node of the representation table
    Predict(PredictArgs),
    /// Compare ablation variants over several seeds
    Ablate(AblateArgs),
    /// Vary one hyperparameter over several seeds
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of addresses [default: 2000]
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Share of phishing addresses [default: 0.02]
    #[arg(long)]
    pub phishing_fraction: Option<f64>,
    /// JSON file with further generator settings
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
    /// Transaction file format
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Transaction file format [default: from the file extension]
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Skip malformed rows instead of failing
    #[arg(long)]
    pub skip_malformed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoTemporal,
    NoEdge2node,
    NoStructural,
    FeaturesOnly,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => AblationVariant::Full,
            VariantArg::NoTemporal => AblationVariant::NoTemporal,
            VariantArg::NoEdge2node => AblationVariant::NoEdge2node,
            VariantArg::NoStructural => AblationVariant::NoStructural,
            VariantArg::FeaturesOnly => AblationVariant::FeaturesOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Representation table to score [default: <dir>/representations.tsv]
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Variants to run [default: all]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub variants: Vec<VariantArg>,
    /// Root seeds, one run per seed and variant [default: --seed]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParamArg {
    SeqLength,
    AttentionSize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParamArg,
    /// Values to try [default: 1,2,5,10,20,variable or 1,2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Root seeds [default: --seed]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeaturizationArg {
    Log,
    Raw,
}

/// Settings shared by every stage.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// TOML file with run settings
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Working directory for inputs and artifacts [default: output_dir or .]
    #[arg(long, global = true)]
    pub dir: Option<PathBuf>,
    /// Transaction file [default: <dir>/transactions.tsv]
    #[arg(long, global = true)]
    pub transactions: Option<PathBuf>,
    /// Label file [default: <dir>/labels.tsv]
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,

    /// Root seed; every stage derives its own stream from it [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Drop records before this epoch second [default: 1470096000]
    #[arg(long, global = true)]
    pub cutoff: Option<i64>,
    /// Fewest records an address may keep [default: 5]
    #[arg(long, global = true)]
    pub min_records: Option<usize>,
    /// Most records an address may keep [default: 1000]
    #[arg(long, global = true)]
    pub max_records: Option<usize>,
    /// Subgraph size [default: 2000]
    #[arg(long, global = true)]
    pub subgraph_nodes: Option<usize>,
    /// Walk steps before a restart [default: 100]
    #[arg(long, global = true)]
    pub max_walk_len: Option<usize>,
    /// Edge embedding and trading feature size [default: 10]
    #[arg(long, global = true)]
    pub embedding_dim: Option<usize>,
    /// Attention heads; must divide the embedding size [default: 2]
    #[arg(long, global = true)]
    pub attention_heads: Option<usize>,
    /// Hidden width of the graph encoder [default: 16]
    #[arg(long, global = true)]
    pub gcn_hidden: Option<usize>,
    /// Sequence encoder learning rate [default: 0.001]
    #[arg(long, global = true)]
    pub lr_sequence: Option<f64>,
    /// Attention learning rate [default: 0.01]
    #[arg(long, global = true)]
    pub lr_attention: Option<f64>,
    /// Graph encoder learning rate [default: 0.001]
    #[arg(long, global = true)]
    pub lr_gcn: Option<f64>,
    /// Representation training epochs [default: 200]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Epochs without improvement before stopping [default: 20]
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Smallest loss decrease that counts as improvement [default: 1e-5]
    #[arg(long, global = true)]
    pub min_improvement: Option<f64>,
    /// Transactions per pair fed to the encoder: a count or "variable" [default: variable]
    #[arg(long, global = true)]
    pub seq_length: Option<SeqLength>,
    /// Encoder input transform [default: log]
    #[arg(long, global = true, value_enum)]
    pub featurization: Option<FeaturizationArg>,
    /// Count self-links as targets in the reconstruction loss [default: true]
    #[arg(long, global = true)]
    pub recon_self_loops: Option<bool>,
    /// Leaves per tree [default: 50]
    #[arg(long, global = true)]
    pub num_leaves: Option<usize>,
    /// Boosting shrinkage [default: 0.03]
    #[arg(long, global = true)]
    pub boost_rate: Option<f64>,
    /// Boosting rounds [default: 200]
    #[arg(long, global = true)]
    pub num_trees: Option<usize>,
    /// Fewest rows per leaf [default: 5]
    #[arg(long, global = true)]
    pub min_leaf: Option<usize>,
    /// Deepest split level [default: 12]
    #[arg(long, global = true)]
    pub max_depth: Option<usize>,
    /// Stop boosting after this many rounds without validation gain [default: off]
    #[arg(long, global = true)]
    pub early_stopping_rounds: Option<usize>,
    /// Minority upsampling factor [default: 50]
    #[arg(long, global = true)]
    pub upsample_ratio: Option<usize>,
    /// Share of labeled nodes used for training [default: 0.8]
    #[arg(long, global = true)]
    pub train_fraction: Option<f64>,
    /// Score at or above which a node is called phishing [default: 0.5]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

impl Common {
    /// Writes every flag that was given into `c`.
    pub fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        set!(
            seed, cutoff, min_records, max_records, subgraph_nodes, max_walk_len, embedding_dim,
            attention_heads, gcn_hidden, lr_sequence, lr_attention, lr_gcn, epochs, patience,
            min_improvement, seq_length, recon_self_loops, num_leaves, boost_rate, num_trees,
            min_leaf, max_depth, upsample_ratio, train_fraction, threshold
        );
        if let Some(f) = self.featurization {
            c.featurization = match f {
                FeaturizationArg::Log => Featurization::Log,
                FeaturizationArg::Raw => Featurization::Raw,
            };
        }
        if self.early_stopping_rounds.is_some() {
            c.early_stopping_rounds = self.early_stopping_rounds;
        }
        if let Some(p) = &self.transactions {
            c.transactions = Some(p.clone());
        }
        if let Some(p) = &self.labels {
            c.labels = Some(p.clone());
        }
        if let Some(p) = &self.dir {
            c.output_dir = Some(p.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_setting_flag_documents_its_default() {
        let cmd = Cli::command();
        for arg in cmd.get_arguments() {
            let id = arg.get_id().as_str();
            if matches!(id, "config" | "help" | "version") {
                continue;
            }
            let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
            assert!(help.contains("[default:"), "--{id} lacks a default in its help");
        }
    }

    #[test]
    fn documented_defaults_match_the_config() {
        let cmd = Cli::command();
        let d = RunConfig::default();
        let expect = [
            ("seed", d.seed.to_string()),
            ("epochs", d.epochs.to_string()),
            ("attention_heads", d.attention_heads.to_string()),
            ("embedding_dim", d.embedding_dim.to_string()),
            ("num_leaves", d.num_leaves.to_string()),
            ("boost_rate", d.boost_rate.to_string()),
            ("num_trees", d.num_trees.to_string()),
            ("upsample_ratio", d.upsample_ratio.to_string()),
            ("train_fraction", d.train_fraction.to_string()),
            ("threshold", d.threshold.to_string()),
            ("lr_gcn", d.lr_gcn.to_string()),
            ("lr_attention", d.lr_attention.to_string()),
            ("cutoff", d.cutoff.to_string()),
            ("min_leaf", d.min_leaf.to_string()),
            ("max_depth", d.max_depth.to_string()),
            ("gcn_hidden", d.gcn_hidden.to_string()),
            ("subgraph_nodes", d.subgraph_nodes.to_string()),
        ];
        for (id, value) in expect {
            let arg = cmd.get_arguments().find(|a| a.get_id() == id).unwrap();
            let help = arg.get_help().unwrap().to_string();
            assert!(help.contains(&format!("[default: {value}]")), "--{id}: {help}");
        }
    }

    #[test]
    fn flags_override_settings() {
        let cli = Cli::try_parse_from(["phishgraph", "train", "--epochs", "7", "--seq-length", "5", "--variant", "no-temporal"]).unwrap();
        let mut c = RunConfig::default();
        cli.common.apply(&mut c);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.seq_length, SeqLength::Fixed(5));
        assert_eq!(c.attention_heads, RunConfig::default().attention_heads);
        match cli.command {
            Command::Train(t) => assert_eq!(t.variant, VariantArg::NoTemporal),
            other => panic!("{other:?}"),
        }
    }
}
