//! Benchmark fixtures.

use phishgraph::classifier::{assemble_table, LabeledDataset};
use phishgraph::config::RunConfig;
use phishgraph::evaluation::prepare_subgraph;
use phishgraph::synthgen::{generate, SynthConfig, SynthOutput};
use phishgraph::txgraph::stat_feature_table;
use phishgraph::{LabelSet, TxMultiGraph};

pub struct Fixture {
    pub synth: SynthOutput,
    pub graph: TxMultiGraph,
    pub labels: LabelSet,
    pub config: RunConfig,
}

/// A cleaned synthetic network with `nodes` addresses.
pub fn fixture(nodes: usize, seed: u64) -> Fixture {
    let synth = generate(&SynthConfig {
        n_nodes: nodes,
        phishing_fraction: 0.05,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic network");
    let config = RunConfig::default();
    let (graph, _) = prepare_subgraph(&synth.records, &synth.labels, &config).expect("subgraph");
    let labels = synth.labels.clone();
    Fixture { synth, graph, labels, config }
}

/// Statistics-only rows, enough to exercise the classifier.
pub fn stat_dataset(f: &Fixture) -> LabeledDataset {
    let rows: Vec<(String, Vec<f64>)> = f
        .graph
        .addresses()
        .iter()
        .zip(stat_feature_table(&f.graph))
        .map(|(a, s)| (a.clone(), s.as_slice().to_vec()))
        .collect();
    assemble_table(&rows, &f.labels, f.config.train_fraction, 1).expect("dataset")
}
