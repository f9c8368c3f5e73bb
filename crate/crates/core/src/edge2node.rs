//! Multi-head additive attention that pools a node's incident edge
//! embeddings into its trading features.
//!
//! For head `k` with projection `P_k` and attention vector `a_k`:
//!
//! ```text
//! p_v     = P_k e_v
//! logit_v = LeakyReLU(a_k · [h_u ‖ p_v])
//! alpha   = softmax(logits)
//! head_k  = ELU(Σ_v alpha_v p_v)
//! z_u     = head_1 ‖ … ‖ head_K
//! ```

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::ops::{elu, elu_grad, leaky_relu, leaky_relu_grad, softmax, softmax_backward};
use crate::nncore::{Grads, Matrix, ParamStore};

pub const GROUP: &str = "attention";

pub fn proj_name(head: usize) -> String {
    format!("attn.proj.{head}")
}

pub fn vec_name(head: usize) -> String {
    format!("attn.vec.{head}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    /// Width of the node feature block `h_u`.
    pub node_dim: usize,
    /// Edge embedding width, also the output width.
    pub edge_dim: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn new(node_dim: usize, edge_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || edge_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({heads}) must divide the embedding size ({edge_dim})"
            )));
        }
        Ok(AttentionShape {
            node_dim,
            edge_dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.edge_dim / self.heads
    }

    /// Reads the shape back from registered parameters.
    pub fn from_store(store: &ParamStore, node_dim: usize) -> Result<Self> {
        let mut heads = 0;
        while store.contains(&proj_name(heads)) {
            heads += 1;
        }
        if heads == 0 {
            return Err(Error::Config("no attention parameters registered".into()));
        }
        let p = store.value(&proj_name(0));
        AttentionShape::new(node_dim, p.cols(), heads)
    }
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    shape: &AttentionShape,
    rng: &mut R,
) -> Result<()> {
    let dh = shape.head_dim();
    for k in 0..shape.heads {
        store.insert(&proj_name(k), GROUP, Matrix::glorot(dh, shape.edge_dim, rng))?;
        store.insert(&vec_name(k), GROUP, Matrix::glorot(1, shape.node_dim + dh, rng))?;
    }
    Ok(())
}

/// Attention weights of one node, per head, in incident-edge order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionCoefficients {
    pub heads: Vec<Vec<f64>>,
}

/// Forward state of one node's aggregation.
#[derive(Clone, Debug)]
pub struct AggregateTrace {
    projected: Vec<Vec<Vec<f64>>>,
    pre_logits: Vec<Vec<f64>>,
    alphas: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
}

/// Projected edges `P_k e_v` for one head.
fn project(store: &ParamStore, head: usize, edges: &[&[f64]]) -> Vec<Vec<f64>> {
    let p = store.value(&proj_name(head));
    edges.iter().map(|e| p.mul_vec(e)).collect()
}

fn pre_logits(a: &[f64], h_u: &[f64], projected: &[Vec<f64>]) -> Vec<f64> {
    let (a_node, a_edge) = a.split_at(h_u.len());
    let node_term: f64 = a_node.iter().zip(h_u).map(|(x, y)| x * y).sum();
    projected
        .iter()
        .map(|p| node_term + a_edge.iter().zip(p).map(|(x, y)| x * y).sum::<f64>())
        .collect()
}

/// Attention logits of head `head` for every incident edge.
pub fn attention_logits(
    h_u: &[f64],
    edges: &[&[f64]],
    store: &ParamStore,
    head: usize,
) -> Vec<f64> {
    let projected = project(store, head, edges);
    pre_logits(store.value(&vec_name(head)).as_slice(), h_u, &projected)
        .into_iter()
        .map(leaky_relu)
        .collect()
}

/// Pools the incident edge embeddings of one node. A node without incident
/// edges gets the zero vector and no coefficients.
pub fn aggregate(
    h_u: &[f64],
    edges: &[&[f64]],
    store: &ParamStore,
    shape: &AttentionShape,
) -> Result<(Vec<f64>, AttentionCoefficients, Option<AggregateTrace>)> {
    if h_u.len() != shape.node_dim {
        return Err(Error::Shape(format!(
            "node features have {} dims, expected {}",
            h_u.len(),
            shape.node_dim
        )));
    }
    if let Some(bad) = edges.iter().find(|e| e.len() != shape.edge_dim) {
        return Err(Error::Shape(format!(
            "edge embedding has {} dims, expected {}",
            bad.len(),
            shape.edge_dim
        )));
    }
    if edges.is_empty() {
        return Ok((vec![0.0; shape.edge_dim], AttentionCoefficients::default(), None));
    }
    let dh = shape.head_dim();
    let mut out = Vec::with_capacity(shape.edge_dim);
    let mut trace = AggregateTrace {
        projected: Vec::with_capacity(shape.heads),
        pre_logits: Vec::with_capacity(shape.heads),
        alphas: Vec::with_capacity(shape.heads),
        pooled: Vec::with_capacity(shape.heads),
    };
    for k in 0..shape.heads {
        let projected = project(store, k, edges);
        let pre = pre_logits(store.value(&vec_name(k)).as_slice(), h_u, &projected);
        let logits: Vec<f64> = pre.iter().map(|&x| leaky_relu(x)).collect();
        let alpha = softmax(&logits)?;
        let mut pooled = vec![0.0; dh];
        for (a, p) in alpha.iter().zip(&projected) {
            for (s, x) in pooled.iter_mut().zip(p) {
                *s += a * x;
            }
        }
        out.extend(pooled.iter().map(|&s| elu(s)));
        trace.projected.push(projected);
        trace.pre_logits.push(pre);
        trace.alphas.push(alpha);
        trace.pooled.push(pooled);
    }
    let coefficients = AttentionCoefficients {
        heads: trace.alphas.clone(),
    };
    Ok((out, coefficients, Some(trace)))
}

/// Back-propagates `d_out` through one node's aggregation. Parameter
/// gradients go to `grads`; edge-embedding gradients are added to `d_edges`
/// (same order as the forward `edges`).
pub fn aggregate_backward(
    h_u: &[f64],
    edges: &[&[f64]],
    store: &ParamStore,
    shape: &AttentionShape,
    trace: &AggregateTrace,
    d_out: &[f64],
    grads: &mut Grads,
    d_edges: &mut [Vec<f64>],
) {
    let dh = shape.head_dim();
    let node_dim = shape.node_dim;
    for k in 0..shape.heads {
        let p_mat = store.value(&proj_name(k));
        let a = store.value(&vec_name(k)).as_slice();
        let a_edge = &a[node_dim..];
        let projected = &trace.projected[k];
        let alpha = &trace.alphas[k];
        let d_pooled: Vec<f64> = trace.pooled[k]
            .iter()
            .zip(&d_out[k * dh..(k + 1) * dh])
            .map(|(&s, &g)| g * elu_grad(s))
            .collect();

        let mut d_projected: Vec<Vec<f64>> = alpha
            .iter()
            .map(|&al| d_pooled.iter().map(|g| al * g).collect())
            .collect();
        let d_alpha: Vec<f64> = projected
            .iter()
            .map(|p| p.iter().zip(&d_pooled).map(|(x, g)| x * g).sum())
            .collect();
        let d_logits = softmax_backward(alpha, &d_alpha);

        let d_vec = grads.entry(&vec_name(k), 1, node_dim + dh);
        for (v, (&dl, &pre)) in d_logits.iter().zip(&trace.pre_logits[k]).enumerate() {
            let d_pre = dl * leaky_relu_grad(pre);
            if d_pre == 0.0 {
                continue;
            }
            let row = d_vec.row_mut(0);
            for (g, h) in row[..node_dim].iter_mut().zip(h_u) {
                *g += d_pre * h;
            }
            for (g, p) in row[node_dim..].iter_mut().zip(&projected[v]) {
                *g += d_pre * p;
            }
            for (dp, ae) in d_projected[v].iter_mut().zip(a_edge) {
                *dp += d_pre * ae;
            }
        }

        let d_proj = grads.entry(&proj_name(k), dh, shape.edge_dim);
        for (v, dp) in d_projected.iter().enumerate() {
            d_proj.add_outer(dp, edges[v]);
            let de = p_mat.t_mul_vec(dp);
            for (acc, x) in d_edges[v].iter_mut().zip(de) {
                *acc += x;
            }
        }
    }
}

/// Diagnostic export of attention weights for one node, keyed by counterparty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub node: String,
    /// head index -> counterparty address -> weight
    pub heads: Vec<BTreeMap<String, f64>>,
}
