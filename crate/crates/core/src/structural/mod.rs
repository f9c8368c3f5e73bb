//! Graph autoencoder: a two-layer spectral convolution encoder, an
//! inner-product decoder and the Frobenius reconstruction loss, plus the
//! joint training loop in [`training`].

mod training;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge2node::AttentionCoefficients;
use crate::error::{Error, Result};
use crate::ingest::LabelSet;
use crate::nncore::ops::{relu, sigmoid};
use crate::nncore::{Grads, Matrix, ParamStore};
use crate::temporal_edge::EdgeSequenceSet;
use crate::txgraph::TxMultiGraph;

pub use training::{
    summary_edge_features, train_representation, EdgeSource, RepresentationConfig,
    Inference, RepresentationModel, TrainOutput,
};

pub const W0: &str = "gcn.w0";
pub const W1: &str = "gcn.w1";
pub const GROUP: &str = "gcn";

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for a binary symmetric adjacency `A`.
///
/// Stored row-sparse; [`NormalizedAdjacency::dense`] materialises it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    /// Sorted neighbour lists of `A` (no self entries).
    neighbors: Vec<Vec<usize>>,
    /// Rows of the normalised matrix as (column, weight), self entry included, sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let inv_sqrt_deg: Vec<f64> = neighbors
            .iter()
            .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
            .collect();
        let rows = neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut row: Vec<(usize, f64)> = nb
                    .iter()
                    .map(|&j| (j, inv_sqrt_deg[i] * inv_sqrt_deg[j]))
                    .collect();
                row.push((i, inv_sqrt_deg[i] * inv_sqrt_deg[i]));
                row.sort_by_key(|(j, _)| *j);
                row
            })
            .collect();
        NormalizedAdjacency { n, neighbors, rows }
    }

    /// Binarised, symmetrised adjacency of a transaction graph (self-transfers ignored).
    pub fn from_graph(g: &TxMultiGraph) -> Self {
        let mut neighbors = vec![Vec::new(); g.node_count()];
        for e in g.edges() {
            if !e.is_self_loop() {
                neighbors[e.src].push(e.dst);
                neighbors[e.dst].push(e.src);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Self::from_neighbors(neighbors)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m.set(i, j, w);
            }
        }
        m
    }

    /// Binary adjacency, with ones on the diagonal when `self_loops`.
    pub fn target(&self, self_loops: bool) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                m.set(i, j, 1.0);
            }
            if self_loops {
                m.set(i, i, 1.0);
            }
        }
        m
    }

    /// `Ã_norm · x`.
    pub fn propagate(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.rows(), self.n, "propagate shape mismatch");
        let cols = x.cols();
        let data: Vec<f64> = self
            .rows
            .par_iter()
            .flat_map_iter(|row| {
                let mut out = vec![0.0; cols];
                for &(j, w) in row {
                    for (o, v) in out.iter_mut().zip(x.row(j)) {
                        *o += w * v;
                    }
                }
                out
            })
            .collect();
        Matrix::from_vec(self.n, cols, data).expect("propagate output shape")
    }
}

/// Normalises a dense binary symmetric adjacency with zero diagonal.
pub fn normalize_adjacency(a: &Matrix) -> Result<NormalizedAdjacency> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::Shape(format!("adjacency must be square, got {n}x{m}")));
    }
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != a.get(j, i) {
                return Err(Error::Data(format!("adjacency not symmetric at ({i}, {j})")));
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!("adjacency entry ({i}, {j}) = {v} is not binary")));
            }
            if i == j && v != 0.0 {
                return Err(Error::Data(format!("adjacency has a self loop at {i}")));
            }
            if v == 1.0 {
                neighbors[i].push(j);
            }
        }
    }
    Ok(NormalizedAdjacency::from_neighbors(neighbors))
}

pub fn init_gcn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(W0, GROUP, Matrix::glorot(input_dim, hidden_dim, rng))?;
    store.insert(W1, GROUP, Matrix::glorot(hidden_dim, output_dim, rng))
}

/// Intermediate activations of [`encode`].
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    propagated_input: Matrix,
    hidden_pre: Matrix,
    propagated_hidden: Matrix,
}

/// `Z = Ã_norm · ReLU(Ã_norm · X · W0) · W1`.
pub fn encode(x: &Matrix, adj: &NormalizedAdjacency, store: &ParamStore) -> Result<(Matrix, EncodeTrace)> {
    let w0 = store.value(W0);
    let w1 = store.value(W1);
    if x.rows() != adj.node_count() || x.cols() != w0.rows() {
        return Err(Error::Shape(format!(
            "encoder input is {}x{}, expected {}x{}",
            x.rows(),
            x.cols(),
            adj.node_count(),
            w0.rows()
        )));
    }
    let propagated_input = adj.propagate(x);
    let hidden_pre = propagated_input.dot(w0);
    let hidden = hidden_pre.map(relu);
    let propagated_hidden = adj.propagate(&hidden);
    let z = propagated_hidden.dot(w1);
    Ok((
        z,
        EncodeTrace {
            propagated_input,
            hidden_pre,
            propagated_hidden,
        },
    ))
}

/// Gradients of the encoder weights go to `grads`; returns `dL/dX`.
pub fn encode_backward(
    adj: &NormalizedAdjacency,
    store: &ParamStore,
    trace: &EncodeTrace,
    d_z: &Matrix,
    grads: &mut Grads,
) -> Matrix {
    let w0 = store.value(W0);
    let w1 = store.value(W1);
    grads
        .entry(W1, w1.rows(), w1.cols())
        .add_assign(&trace.propagated_hidden.t_dot(d_z));
    let d_propagated_hidden = d_z.dot_t(w1);
    let mut d_hidden_pre = adj.propagate(&d_propagated_hidden);
    for (d, pre) in d_hidden_pre
        .as_mut_slice()
        .iter_mut()
        .zip(trace.hidden_pre.as_slice())
    {
        if *pre <= 0.0 {
            *d = 0.0;
        }
    }
    grads
        .entry(W0, w0.rows(), w0.cols())
        .add_assign(&trace.propagated_input.t_dot(&d_hidden_pre));
    adj.propagate(&d_hidden_pre.dot_t(w0))
}

/// `Â = σ(Z Zᵀ)`.
pub fn decode(z: &Matrix) -> Matrix {
    z.dot_t(z).map(sigmoid)
}

/// `‖Â − target‖²_F / n`.
pub fn recon_loss(reconstructed: &Matrix, target: &Matrix) -> Result<f64> {
    if reconstructed.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            reconstructed.shape(),
            target.shape()
        )));
    }
    let n = reconstructed.rows().max(1) as f64;
    Ok(reconstructed
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Reconstruction loss and `dL/dZ` without materialising `Â`.
pub fn recon_loss_and_grad(z: &Matrix, adj: &NormalizedAdjacency, self_loops: bool) -> (f64, Matrix) {
    let n = z.rows();
    let d = z.cols();
    let scale = 1.0 / n.max(1) as f64;
    let per_row: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let nb = adj.neighbors(i);
            let mut cursor = 0;
            let mut loss = 0.0;
            let mut grad = vec![0.0; d];
            for j in 0..n {
                let zj = z.row(j);
                let s: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
                let a = sigmoid(s);
                while cursor < nb.len() && nb[cursor] < j {
                    cursor += 1;
                }
                let linked = (cursor < nb.len() && nb[cursor] == j) || (self_loops && i == j);
                let diff = a - if linked { 1.0 } else { 0.0 };
                loss += diff * diff;
                // d/dz_i of Σ_{p,q} (σ(z_p·z_q) − t)² = 2 Σ_j f'(s_ij) z_j
                let coef = 2.0 * (2.0 * diff * a * (1.0 - a)) * scale;
                if coef != 0.0 {
                    for (g, v) in grad.iter_mut().zip(zj) {
                        *g += coef * v;
                    }
                }
            }
            (loss, grad)
        })
        .collect();
    let mut d_z = Matrix::zeros(n, d);
    let mut loss = 0.0;
    for (i, (l, g)) in per_row.into_iter().enumerate() {
        loss += l;
        d_z.row_mut(i).copy_from_slice(&g);
    }
    (loss * scale, d_z)
}

/// Final per-address representation: statistical ‖ trading ‖ structural.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRepresentation {
    pub address: String,
    pub statistical: Vec<f64>,
    pub trading: Vec<f64>,
    pub structural: Vec<f64>,
}

impl NodeRepresentation {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.statistical.len() + self.trading.len() + self.structural.len());
        v.extend_from_slice(&self.statistical);
        v.extend_from_slice(&self.trading);
        v.extend_from_slice(&self.structural);
        v
    }
}

/// One line per node: address, the concatenated features, then the label.
pub fn write_representation_table<W: Write>(
    mut out: W,
    representations: &[NodeRepresentation],
    labels: &LabelSet,
) -> std::io::Result<()> {
    for r in representations {
        write!(out, "{}", r.address)?;
        for v in r.concat() {
            write!(out, "\t{v}")?;
        }
        writeln!(out, "\t{}", labels.get(&r.address).as_str())?;
    }
    Ok(())
}

/// Reads a table written by [`write_representation_table`]; the label column is dropped.
pub fn parse_representation_table<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows = Vec::new();
    let mut dim = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(parse_err("expected address, features and label".into()));
        }
        let features = cols[1..cols.len() - 1]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(format!("malformed feature {c:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if *dim.get_or_insert(features.len()) != features.len() {
            return Err(parse_err(format!("{} features, expected {}", features.len(), dim.unwrap_or(0))));
        }
        rows.push((cols[0].to_string(), features));
    }
    Ok(rows)
}

/// Per node, per counterparty, the attention weight of every head.
pub fn attention_diagnostics(
    g: &TxMultiGraph,
    sequences: &EdgeSequenceSet,
    coefficients: &[AttentionCoefficients],
) -> BTreeMap<String, BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (node, coef) in coefficients.iter().enumerate() {
        if coef.heads.is_empty() {
            continue;
        }
        let mut per_pair = BTreeMap::new();
        for (slot, &e) in sequences.by_node[node].iter().enumerate() {
            let (a, b) = sequences.sequences[e].pair;
            let other = if a == node { b } else { a };
            per_pair.insert(
                g.address(other).to_string(),
                coef.heads.iter().map(|h| h[slot]).collect(),
            );
        }
        out.insert(g.address(node).to_string(), per_pair);
    }
    out
}
