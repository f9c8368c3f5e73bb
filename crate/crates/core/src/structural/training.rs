use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode, encode_backward, init_gcn, recon_loss_and_grad, EncodeTrace, NodeRepresentation, NormalizedAdjacency};
use crate::edge2node::{self, aggregate, aggregate_backward, AggregateTrace, AttentionCoefficients, AttentionShape};
use crate::error::{Error, Result};
use crate::nncore::{AdamConfig, Grads, Matrix, ParamStore};
use crate::temporal_edge::{
    self, edge_sequences, featurize_sequence, lstm_backward, lstm_forward, EdgeSequence, EdgeSequenceSet,
    Featurization, LstmTrace, GAP_SCALE_SECONDS,
};
use crate::txgraph::{NodeStatFeatures, Standardizer, TxMultiGraph, STAT_DIM};

/// Where edge embeddings come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    /// LSTM over the pair's transaction sequence.
    #[default]
    Learned,
    /// Fixed per-pair summary statistics; the sequence encoder is never run.
    Summary,
    /// No edge embeddings and no attention; the trading block is zero.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationConfig {
    pub embedding_dim: usize,
    pub attention_heads: usize,
    pub gcn_hidden: usize,
    pub lr_sequence: f64,
    pub lr_attention: f64,
    pub lr_gcn: f64,
    pub epochs: usize,
    /// Early stop after this many consecutive epochs improving by less than `min_improvement`.
    pub patience: usize,
    pub min_improvement: f64,
    pub featurization: Featurization,
    /// Keep only the most recent items of each pair sequence.
    pub max_seq_len: Option<usize>,
    /// Reconstruct `A + I` rather than `A`.
    pub target_self_loops: bool,
    pub edge_source: EdgeSource,
    /// When false the autoencoder is skipped: no training, zero structural block.
    pub structural: bool,
    pub seed: u64,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        RepresentationConfig {
            embedding_dim: 10,
            attention_heads: 2,
            gcn_hidden: 16,
            lr_sequence: 0.001,
            lr_attention: 0.01,
            lr_gcn: 0.001,
            epochs: 200,
            patience: 20,
            min_improvement: 1e-5,
            featurization: Featurization::Log,
            max_seq_len: None,
            target_self_loops: true,
            edge_source: EdgeSource::Learned,
            structural: true,
            seed: 0,
        }
    }
}

/// Fixed 10-slot summary of a pair sequence used when the temporal encoder is
/// ablated: log count, signed log of net/mean/min/max amount, log gross
/// volume and log-normalised active span. Padded (or cut) to `dim`.
pub fn summary_edge_features(seq: &EdgeSequence, dim: usize) -> Vec<f64> {
    let slog = |x: f64| x.signum() * x.abs().ln_1p();
    let n = seq.items.len() as f64;
    let amounts = seq.items.iter().map(|i| i.signed_amount);
    let net: f64 = amounts.clone().sum();
    let gross: f64 = amounts.clone().map(f64::abs).sum();
    let min = amounts.clone().fold(f64::INFINITY, f64::min);
    let max = amounts.fold(f64::NEG_INFINITY, f64::max);
    let span = match (seq.items.first(), seq.items.last()) {
        (Some(a), Some(b)) => (b.timestamp - a.timestamp) as f64,
        _ => 0.0,
    };
    let mut v = vec![
        n.ln_1p(),
        slog(net),
        gross.ln_1p(),
        slog(net / n.max(1.0)),
        if n > 0.0 { slog(min) } else { 0.0 },
        if n > 0.0 { slog(max) } else { 0.0 },
        span.ln_1p() / GAP_SCALE_SECONDS.ln_1p(),
    ];
    v.resize(dim, 0.0);
    v
}

/// Everything the joint model needs from one graph, precomputed once.
pub struct RepresentationModel {
    config: RepresentationConfig,
    addresses: Vec<String>,
    stat_raw: Vec<NodeStatFeatures>,
    /// Standardised statistical features (`h_u`).
    stat_std: Vec<Vec<f64>>,
    sequences: EdgeSequenceSet,
    seq_inputs: Vec<Vec<[f64; 2]>>,
    fixed_edges: Option<Vec<Vec<f64>>>,
    adj: NormalizedAdjacency,
    attention: AttentionShape,
    encoder_invocations: AtomicUsize,
}

struct Forward {
    lstm_traces: Vec<LstmTrace>,
    edge_embeddings: Vec<Vec<f64>>,
    trading: Vec<Vec<f64>>,
    agg_traces: Vec<Option<AggregateTrace>>,
    coefficients: Vec<AttentionCoefficients>,
    z: Option<(Matrix, EncodeTrace)>,
}

impl RepresentationModel {
    pub fn new(g: &TxMultiGraph, stat: &[NodeStatFeatures], config: RepresentationConfig) -> Result<Self> {
        if stat.len() != g.node_count() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} nodes",
                stat.len(),
                g.node_count()
            )));
        }
        let attention = AttentionShape::new(STAT_DIM, config.embedding_dim, config.attention_heads)?;
        let standardizer = Standardizer::fit(stat.iter().map(|f| f.as_slice()), STAT_DIM);
        let stat_std = stat.iter().map(|f| standardizer.transform(f.as_slice())).collect();
        let sequences = edge_sequences(g);
        let seq_inputs = match config.edge_source {
            EdgeSource::Learned => sequences
                .sequences
                .iter()
                .map(|s| featurize_sequence(s.truncated(config.max_seq_len), config.featurization))
                .collect(),
            _ => Vec::new(),
        };
        let fixed_edges = match config.edge_source {
            EdgeSource::Summary => Some(
                sequences
                    .sequences
                    .iter()
                    .map(|s| summary_edge_features(s, config.embedding_dim))
                    .collect(),
            ),
            _ => None,
        };
        Ok(RepresentationModel {
            adj: NormalizedAdjacency::from_graph(g),
            addresses: g.addresses().to_vec(),
            stat_raw: stat.to_vec(),
            stat_std,
            sequences,
            seq_inputs,
            fixed_edges,
            attention,
            config,
            encoder_invocations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RepresentationConfig {
        &self.config
    }

    pub fn sequences(&self) -> &EdgeSequenceSet {
        &self.sequences
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adj
    }

    /// Number of sequences pushed through the LSTM so far.
    pub fn encoder_invocations(&self) -> usize {
        self.encoder_invocations.load(Ordering::Relaxed)
    }

    fn gcn_input_dim(&self) -> usize {
        STAT_DIM + self.config.embedding_dim
    }

    pub fn init_params(&self) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::new();
        if self.config.edge_source == EdgeSource::Learned {
            temporal_edge::init_lstm(&mut store, self.config.embedding_dim, &mut rng)?;
        }
        if self.config.edge_source != EdgeSource::Disabled {
            edge2node::init_attention(&mut store, &self.attention, &mut rng)?;
        }
        if self.config.structural {
            init_gcn(
                &mut store,
                self.gcn_input_dim(),
                self.config.gcn_hidden,
                self.config.embedding_dim,
                &mut rng,
            )?;
        }
        Ok(store)
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::default()
            .with_group(temporal_edge::GROUP, self.config.lr_sequence)
            .with_group(edge2node::GROUP, self.config.lr_attention)
            .with_group(super::GROUP, self.config.lr_gcn)
    }

    fn incident(&self, node: usize) -> &[usize] {
        &self.sequences.by_node[node]
    }

    fn forward(&self, store: &ParamStore) -> Result<Forward> {
        let dim = self.config.embedding_dim;
        let n = self.addresses.len();
        let (lstm_traces, edge_embeddings) = match self.config.edge_source {
            EdgeSource::Learned => {
                let traces: Vec<LstmTrace> = self
                    .seq_inputs
                    .par_iter()
                    .map(|x| lstm_forward(store, x))
                    .collect::<Result<_>>()?;
                self.encoder_invocations
                    .fetch_add(traces.len(), Ordering::Relaxed);
                let emb = traces.iter().map(|t| t.output().to_vec()).collect();
                (traces, emb)
            }
            EdgeSource::Summary => (Vec::new(), self.fixed_edges.clone().unwrap_or_default()),
            EdgeSource::Disabled => (Vec::new(), Vec::new()),
        };

        let (trading, agg_traces, coefficients) = if self.config.edge_source == EdgeSource::Disabled {
            (vec![vec![0.0; dim]; n], Vec::new(), Vec::new())
        } else {
            let per_node: Vec<_> = (0..n)
                .into_par_iter()
                .map(|u| {
                    let refs: Vec<&[f64]> = self
                        .incident(u)
                        .iter()
                        .map(|&s| edge_embeddings[s].as_slice())
                        .collect();
                    aggregate(&self.stat_std[u], &refs, store, &self.attention)
                })
                .collect::<Result<_>>()?;
            let mut trading = Vec::with_capacity(n);
            let mut traces = Vec::with_capacity(n);
            let mut coefficients = Vec::with_capacity(n);
            for (t, c, tr) in per_node {
                trading.push(t);
                coefficients.push(c);
                traces.push(tr);
            }
            (trading, traces, coefficients)
        };

        let z = if self.config.structural {
            let x = Matrix::from_fn(n, self.gcn_input_dim(), |r, c| {
                if c < STAT_DIM {
                    self.stat_std[r][c]
                } else {
                    trading[r][c - STAT_DIM]
                }
            });
            Some(encode(&x, &self.adj, store)?)
        } else {
            None
        };

        Ok(Forward {
            lstm_traces,
            edge_embeddings,
            trading,
            agg_traces,
            coefficients,
            z,
        })
    }

    /// Reconstruction loss for the parameters in `store`.
    pub fn loss(&self, store: &ParamStore) -> Result<f64> {
        let fwd = self.forward(store)?;
        let (z, _) = fwd
            .z
            .as_ref()
            .ok_or_else(|| Error::Config("structural module disabled".into()))?;
        Ok(recon_loss_and_grad(z, &self.adj, self.config.target_self_loops).0)
    }

    /// Loss and gradients for every parameter group.
    pub fn loss_and_grads(&self, store: &ParamStore) -> Result<(f64, Grads)> {
        let fwd = self.forward(store)?;
        let (z, enc_trace) = fwd
            .z
            .as_ref()
            .ok_or_else(|| Error::Config("structural module disabled".into()))?;
        let (loss, d_z) = recon_loss_and_grad(z, &self.adj, self.config.target_self_loops);
        let mut grads = Grads::new();
        let d_x = encode_backward(&self.adj, store, enc_trace, &d_z, &mut grads);
        if self.config.edge_source == EdgeSource::Disabled {
            return Ok((loss, grads));
        }

        let dim = self.config.embedding_dim;
        let mut d_edges = vec![vec![0.0; dim]; fwd.edge_embeddings.len()];
        for (u, trace) in fwd.agg_traces.iter().enumerate() {
            let Some(trace) = trace else { continue };
            let incident = self.incident(u);
            let refs: Vec<&[f64]> = incident
                .iter()
                .map(|&s| fwd.edge_embeddings[s].as_slice())
                .collect();
            let d_trading = &d_x.row(u)[STAT_DIM..];
            let mut local = vec![vec![0.0; dim]; incident.len()];
            aggregate_backward(
                &self.stat_std[u],
                &refs,
                store,
                &self.attention,
                trace,
                d_trading,
                &mut grads,
                &mut local,
            );
            for (&s, d) in incident.iter().zip(local) {
                for (acc, v) in d_edges[s].iter_mut().zip(d) {
                    *acc += v;
                }
            }
        }
        if self.config.edge_source == EdgeSource::Learned {
            for (trace, d) in fwd.lstm_traces.iter().zip(&d_edges) {
                lstm_backward(store, trace, d, &mut grads);
            }
        }
        Ok((loss, grads))
    }

    /// Final per-node representations plus edge embeddings and attention weights.
    pub fn representations(&self, store: &ParamStore) -> Result<Inference> {
        let fwd = self.forward(store)?;
        let dim = self.config.embedding_dim;
        let representations = self
            .addresses
            .iter()
            .enumerate()
            .map(|(u, address)| NodeRepresentation {
                address: address.clone(),
                statistical: self.stat_raw[u].0.to_vec(),
                trading: fwd.trading[u].clone(),
                structural: match &fwd.z {
                    Some((z, _)) => z.row(u).to_vec(),
                    None => vec![0.0; dim],
                },
            })
            .collect();
        Ok(Inference {
            representations,
            edge_embeddings: fwd.edge_embeddings,
            coefficients: fwd.coefficients,
        })
    }
}

pub struct Inference {
    pub representations: Vec<NodeRepresentation>,
    pub edge_embeddings: Vec<Vec<f64>>,
    /// Per node, empty when the attention module is disabled.
    pub coefficients: Vec<AttentionCoefficients>,
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub representations: Vec<NodeRepresentation>,
    /// Loss at the start of every epoch that ran.
    pub loss_curve: Vec<f64>,
    pub edge_embeddings: Vec<Vec<f64>>,
    pub coefficients: Vec<AttentionCoefficients>,
    pub sequences: EdgeSequenceSet,
    pub encoder_invocations: usize,
}

/// Jointly fits the sequence encoder, attention and graph autoencoder by
/// minimising the reconstruction loss, then returns the representations.
pub fn train_representation(
    g: &TxMultiGraph,
    stat: &[NodeStatFeatures],
    config: &RepresentationConfig,
) -> Result<TrainOutput> {
    if config.structural && g.node_count() < 2 {
        return Err(Error::Data("representation training needs at least 2 nodes".into()));
    }
    let model = RepresentationModel::new(g, stat, config.clone())?;
    let mut store = model.init_params()?;
    let adam = model.adam_config();
    let mut loss_curve = Vec::new();
    if config.structural {
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        for epoch in 0..config.epochs {
            let (loss, grads) = model.loss_and_grads(&store)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_curve.push(loss);
            if best - loss < config.min_improvement {
                stalled += 1;
            } else {
                stalled = 0;
            }
            best = best.min(loss);
            if stalled >= config.patience {
                break;
            }
            store.accumulate(&grads)?;
            store.adam_step(&adam);
            if !store.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
    }
    let inference = model.representations(&store)?;
    Ok(TrainOutput {
        params: store,
        representations: inference.representations,
        loss_curve,
        edge_embeddings: inference.edge_embeddings,
        coefficients: inference.coefficients,
        encoder_invocations: model.encoder_invocations(),
        sequences: model.sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TransactionRecord;
    use crate::structural::decode;
    use crate::txgraph::stat_feature_table;

    fn addr(n: u32) -> String {
        format!("0x{n:040x}")
    }

    fn rec(from: u32, to: u32, amount: f64, ts: i64) -> TransactionRecord {
        TransactionRecord::new(&addr(from), &addr(to), amount, ts).unwrap()
    }

    pub(crate) fn toy_graph() -> TxMultiGraph {
        let t = 1_600_000_000;
        TxMultiGraph::build(&[
            rec(1, 2, 1.5, t),
            rec(2, 1, 0.3, t + 600),
            rec(1, 3, 4.0, t + 1200),
            rec(3, 4, 2.2, t + 5000),
            rec(4, 3, 0.1, t + 9000),
            rec(4, 5, 7.0, t + 20_000),
            rec(5, 6, 0.0, t + 30_000),
            rec(6, 1, 3.3, t + 31_000),
            rec(2, 5, 0.9, t + 50_000),
            rec(2, 5, 1.1, t + 50_100),
            rec(6, 4, 0.6, t + 80_000),
            rec(3, 6, 2.5, t + 90_000),
        ])
    }

    #[test]
    fn summary_features_layout() {
        let seq = EdgeSequence {
            pair: (0, 1),
            items: vec![
                temporal_edge::SeqItem { signed_amount: 2.0, timestamp: 10 },
                temporal_edge::SeqItem { signed_amount: -1.0, timestamp: 10 + 86_400 },
            ],
        };
        let f = summary_edge_features(&seq, 10);
        assert_eq!(f.len(), 10);
        assert!((f[0] - 3f64.ln()).abs() < 1e-15);
        assert!((f[1] - 2f64.ln()).abs() < 1e-15);
        assert!((f[4] + 2f64.ln()).abs() < 1e-15);
        assert!((f[6] - 1.0).abs() < 1e-15);
        assert_eq!(&f[7..], &[0.0; 3]);
    }

    /// Central differences at eps 1e-5 on a loss of order one carry about
    /// 1e-11 of rounding noise, so coordinates are compared with a relative
    /// tolerance plus a small absolute slack.
    #[test]
    fn full_gradient_matches_finite_differences() {
        let g = toy_graph();
        let stat = stat_feature_table(&g);
        let eps = 1e-5;
        for seed in 0..5 {
            let model = RepresentationModel::new(
                &g,
                &stat,
                RepresentationConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let store = model.init_params().unwrap();
            let (_, grads) = model.loss_and_grads(&store).unwrap();
            let mut probe = store.clone();
            for (name, grad) in &grads.0 {
                for (i, &an) in grad.as_slice().iter().enumerate() {
                    let original = store.value(name).as_slice()[i];
                    probe.value_mut(name).as_mut_slice()[i] = original + eps;
                    let plus = model.loss(&probe).unwrap();
                    probe.value_mut(name).as_mut_slice()[i] = original - eps;
                    let minus = model.loss(&probe).unwrap();
                    probe.value_mut(name).as_mut_slice()[i] = original;
                    let fd = (plus - minus) / (2.0 * eps);
                    assert!(
                        (fd - an).abs() <= 1e-4 * (fd.abs() + an.abs()) + 1e-10,
                        "seed {seed} {name}[{i}]: fd {fd:e} analytic {an:e}"
                    );
                }
            }
            let covered: usize = grads.0.values().map(Matrix::len).sum();
            assert_eq!(covered, store.coordinate_count());
        }
    }

    #[test]
    fn summary_variant_never_runs_encoder() {
        let g = toy_graph();
        let stat = stat_feature_table(&g);
        let out = train_representation(
            &g,
            &stat,
            &RepresentationConfig {
                edge_source: EdgeSource::Summary,
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.encoder_invocations, 0);
        assert!(!out.params.contains(temporal_edge::W_INPUT));
    }

    #[test]
    fn toy_training_reduces_loss() {
        let g = toy_graph();
        let stat = stat_feature_table(&g);
        let out = train_representation(
            &g,
            &stat,
            &RepresentationConfig {
                epochs: 50,
                seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.loss_curve.last().unwrap() < &out.loss_curve[0]);
        assert_eq!(out.representations.len(), 6);
        assert!(out.representations.iter().all(|r| r.concat().len() == 30));
    }

    #[test]
    fn complete_triangle_is_reconstructed() {
        let t = 1_600_000_000;
        let g = TxMultiGraph::build(&[
            rec(1, 2, 1.0, t),
            rec(2, 3, 2.0, t + 100),
            rec(3, 1, 0.5, t + 500),
            rec(1, 3, 0.2, t + 900),
        ]);
        let stat = stat_feature_table(&g);
        let out = train_representation(
            &g,
            &stat,
            &RepresentationConfig {
                epochs: 200,
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let last = *out.loss_curve.last().unwrap();
        assert!(last < 0.05, "loss after 200 epochs = {last}");
    }

    #[test]
    fn disconnected_dyads_are_separated() {
        let t = 1_600_000_000;
        let g = TxMultiGraph::build(&[
            rec(1, 2, 1.0, t),
            rec(2, 1, 2.0, t + 100),
            rec(3, 4, 0.5, t + 500),
            rec(4, 3, 0.7, t + 700),
            rec(3, 4, 1.5, t + 900),
        ]);
        let stat = stat_feature_table(&g);
        let mut wins = 0;
        for seed in 0..5 {
            let out = train_representation(
                &g,
                &stat,
                &RepresentationConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let z = Matrix::from_rows(
                &out.representations
                    .iter()
                    .map(|r| r.structural.clone())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let a = decode(&z);
            let within = (a.get(0, 1) + a.get(2, 3)) / 2.0;
            let across = (a.get(0, 2) + a.get(0, 3) + a.get(1, 2) + a.get(1, 3)) / 4.0;
            if within > across {
                wins += 1;
            }
        }
        assert!(wins >= 3, "within-dyad > cross-dyad in {wins}/5 seeds");
    }
}
