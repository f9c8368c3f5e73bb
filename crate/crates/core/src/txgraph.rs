//! Directed transaction multigraph, random-walk subgraph sampling and the
//! ten per-address statistical features.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{normalize_address, TransactionRecord};

/// Number of statistical features per address.
pub const STAT_DIM: usize = 10;

pub const STAT_FEATURE_NAMES: [&str; STAT_DIM] = [
    "total_degree",
    "out_degree",
    "in_degree",
    "total_amount",
    "out_amount",
    "in_amount",
    "counterparties",
    "mean_interval",
    "zero_counterparty_fraction",
    "max_counterparty_txs",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxEdge {
    pub src: usize,
    pub dst: usize,
    pub amount: f64,
    pub timestamp: i64,
}

impl TxEdge {
    pub fn is_self_loop(&self) -> bool {
        self.src == self.dst
    }

    /// Endpoint opposite to `node`.
    pub fn other(&self, node: usize) -> usize {
        if self.src == node {
            self.dst
        } else {
            self.src
        }
    }
}

/// Directed multigraph over addresses. Node indices follow lexicographic
/// address order; edges keep the order of the records they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TxMultiGraph {
    addresses: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<TxEdge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl TxMultiGraph {
    pub fn build(records: &[TransactionRecord]) -> Self {
        Self::with_nodes(std::iter::empty::<&str>(), records)
    }

    /// Like [`TxMultiGraph::build`], additionally inserting `extra_nodes`
    /// (which may end up isolated).
    pub fn with_nodes<'a, I>(extra_nodes: I, records: &[TransactionRecord]) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut names: BTreeSet<&str> = extra_nodes.into_iter().collect();
        for r in records {
            names.insert(&r.from);
            names.insert(&r.to);
        }
        let addresses: Vec<String> = names.into_iter().map(str::to_owned).collect();
        let index: HashMap<String, usize> = addresses
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        let edges: Vec<TxEdge> = records
            .iter()
            .map(|r| TxEdge {
                src: index[&r.from],
                dst: index[&r.to],
                amount: r.amount,
                timestamp: r.timestamp,
            })
            .collect();
        let mut out_edges = vec![Vec::new(); addresses.len()];
        let mut in_edges = vec![Vec::new(); addresses.len()];
        for (e, edge) in edges.iter().enumerate() {
            out_edges[edge.src].push(e);
            in_edges[edge.dst].push(e);
        }
        TxMultiGraph {
            addresses,
            index,
            edges,
            out_edges,
            in_edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.addresses.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn addresses(&self) -> &[String] {
        &self.addresses
    }

    pub fn address(&self, node: usize) -> &str {
        &self.addresses[node]
    }

    pub fn node_index(&self, address: &str) -> Option<usize> {
        self.index.get(address).copied()
    }

    pub fn edges(&self) -> &[TxEdge] {
        &self.edges
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    /// Incident edge ids: out-edges first, then in-edges. A self-loop shows up in both.
    pub fn incident_edges(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.out_edges[node]
            .iter()
            .chain(self.in_edges[node].iter())
            .copied()
    }

    pub fn records(&self) -> Vec<TransactionRecord> {
        self.edges
            .iter()
            .map(|e| TransactionRecord {
                from: self.addresses[e.src].clone(),
                to: self.addresses[e.dst].clone(),
                amount: e.amount,
                timestamp: e.timestamp,
            })
            .collect()
    }

    /// Subgraph induced by `nodes` (all edges with both endpoints inside).
    pub fn induced(&self, nodes: &BTreeSet<usize>) -> TxMultiGraph {
        let records: Vec<TransactionRecord> = self
            .edges
            .iter()
            .filter(|e| nodes.contains(&e.src) && nodes.contains(&e.dst))
            .map(|e| TransactionRecord {
                from: self.addresses[e.src].clone(),
                to: self.addresses[e.dst].clone(),
                amount: e.amount,
                timestamp: e.timestamp,
            })
            .collect();
        TxMultiGraph::with_nodes(nodes.iter().map(|&n| self.addresses[n].as_str()), &records)
    }

    /// Counterparty multiset of `node` (one entry per non-self incident edge).
    fn walk_neighbors(&self, node: usize) -> Vec<usize> {
        self.incident_edges(node)
            .map(|e| &self.edges[e])
            .filter(|e| !e.is_self_loop())
            .map(|e| e.other(node))
            .collect()
    }

    /// Edge list in the `ingest` TSV format.
    pub fn write_edges_tsv<W: Write>(&self, out: W) -> std::io::Result<()> {
        crate::ingest::write_transactions_tsv(out, &self.records())
    }

    pub fn write_nodes<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for a in &self.addresses {
            writeln!(out, "{a}")?;
        }
        Ok(())
    }
}

/// Reads a node list file (one address per line).
pub fn parse_node_list<R: BufRead>(reader: R) -> Result<Vec<String>> {
    let mut nodes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        nodes.push(normalize_address(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(nodes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub target_nodes: usize,
    /// Steps before the walk jumps to a fresh start node.
    pub max_walk_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            target_nodes: 2000,
            max_walk_len: 100,
        }
    }
}

/// Grows a node set with a seeded random walk and returns the induced subgraph.
///
/// The walk ignores direction and picks counterparties in proportion to the
/// number of transactions with them. It restarts from a uniformly chosen
/// unvisited node when stuck or after `max_walk_len` steps.
pub fn sample_subgraph(g: &TxMultiGraph, config: &SampleConfig, seed: u64) -> Result<TxMultiGraph> {
    if g.is_empty() {
        return Err(Error::Empty("cannot sample from an empty graph"));
    }
    if config.target_nodes == 0 {
        return Err(Error::Config("target_nodes must be at least 1".into()));
    }
    let n = g.node_count();
    let target = config.target_nodes.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = BTreeSet::new();
    let mut unvisited: Vec<usize> = (0..n).collect();
    let mut position = vec![0usize; n];
    for (i, p) in position.iter_mut().enumerate() {
        *p = i;
    }
    let mut mark = |node: usize, visited: &mut BTreeSet<usize>, unvisited: &mut Vec<usize>| {
        if visited.insert(node) {
            let pos = position[node];
            let last = *unvisited.last().expect("unvisited non-empty");
            unvisited.swap_remove(pos);
            if last != node {
                position[last] = pos;
            }
        }
    };

    while visited.len() < target {
        let start = unvisited[rng.random_range(0..unvisited.len())];
        mark(start, &mut visited, &mut unvisited);
        let mut current = start;
        for _ in 0..config.max_walk_len {
            if visited.len() >= target {
                break;
            }
            let neighbors = g.walk_neighbors(current);
            if neighbors.is_empty() {
                break;
            }
            current = neighbors[rng.random_range(0..neighbors.len())];
            mark(current, &mut visited, &mut unvisited);
        }
    }
    Ok(g.induced(&visited))
}

/// The ten statistical features of one address, in [`STAT_FEATURE_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeStatFeatures(pub [f64; STAT_DIM]);

impl NodeStatFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn stat_features(g: &TxMultiGraph, address: &str) -> Result<NodeStatFeatures> {
    let node = g
        .node_index(address)
        .ok_or_else(|| Error::UnknownNode(address.to_string()))?;
    Ok(stat_features_at(g, node))
}

pub fn stat_features_at(g: &TxMultiGraph, node: usize) -> NodeStatFeatures {
    let out = g.out_edges(node);
    let inc = g.in_edges(node);
    let out_degree = out.len() as f64;
    let in_degree = inc.len() as f64;
    let total_degree = out_degree + in_degree;
    let out_amount: f64 = out.iter().map(|&e| g.edges[e].amount).sum();
    let in_amount: f64 = inc.iter().map(|&e| g.edges[e].amount).sum();

    // counterparty -> (transactions, all amounts zero)
    let mut per_counterparty: HashMap<usize, (usize, bool)> = HashMap::new();
    let mut first = i64::MAX;
    let mut last = i64::MIN;
    for e in g.incident_edges(node) {
        let edge = &g.edges[e];
        first = first.min(edge.timestamp);
        last = last.max(edge.timestamp);
        if edge.is_self_loop() {
            continue;
        }
        let entry = per_counterparty.entry(edge.other(node)).or_insert((0, true));
        entry.0 += 1;
        entry.1 &= edge.amount == 0.0;
    }
    let counterparties = per_counterparty.len();
    let mean_interval = if total_degree <= 1.0 {
        0.0
    } else {
        (last - first) as f64 / (total_degree - 1.0).max(1.0)
    };
    let zero_fraction = if counterparties == 0 {
        0.0
    } else {
        per_counterparty.values().filter(|(_, zero)| *zero).count() as f64 / counterparties as f64
    };
    let max_counterparty = per_counterparty.values().map(|(c, _)| *c).max().unwrap_or(0);

    NodeStatFeatures([
        total_degree,
        out_degree,
        in_degree,
        out_amount + in_amount,
        out_amount,
        in_amount,
        counterparties as f64,
        mean_interval,
        zero_fraction,
        max_counterparty as f64,
    ])
}

/// Features for every node, indexed by node id.
pub fn stat_feature_table(g: &TxMultiGraph) -> Vec<NodeStatFeatures> {
    (0..g.node_count())
        .into_par_iter()
        .map(|n| stat_features_at(g, n))
        .collect()
}

pub fn write_feature_tsv<W: Write>(
    mut out: W,
    g: &TxMultiGraph,
    table: &[NodeStatFeatures],
) -> std::io::Result<()> {
    for (node, f) in table.iter().enumerate() {
        write!(out, "{}", g.address(node))?;
        for v in f.0 {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-dimension z-scoring. Constant dimensions are centred but not scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut count = 0usize;
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
