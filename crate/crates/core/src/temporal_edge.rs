//! Per-pair transaction sequences and their LSTM encoding.
//!
//! Every unordered address pair with at least one transaction gets one
//! sequence, sorted by time. Amounts are signed from the point of view of the
//! lexicographically smaller address: positive when it is the sender.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::ops::sigmoid;
use crate::nncore::{Grads, Matrix, ParamStore};
use crate::txgraph::TxMultiGraph;

pub const INPUT_DIM: usize = 2;
/// Gap normaliser for log-featurised inter-arrival times: one day.
pub const GAP_SCALE_SECONDS: f64 = 86_400.0;

pub const W_INPUT: &str = "lstm.w_input";
pub const W_RECURRENT: &str = "lstm.w_recurrent";
pub const BIAS: &str = "lstm.bias";
pub const GROUP: &str = "sequence";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqItem {
    pub signed_amount: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSequence {
    /// Node ids with `pair.0 <= pair.1`; ids follow address order so `pair.0` is the canonical endpoint.
    pub pair: (usize, usize),
    pub items: Vec<SeqItem>,
}

impl EdgeSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The most recent `max_len` items (all of them for `None`).
    pub fn truncated(&self, max_len: Option<usize>) -> &[SeqItem] {
        match max_len {
            Some(l) if l < self.items.len() => &self.items[self.items.len() - l..],
            _ => &self.items,
        }
    }
}

/// All pair sequences of a graph plus a node → sequence incidence index.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSequenceSet {
    pub sequences: Vec<EdgeSequence>,
    /// For each node, indices into `sequences` of the pairs it belongs to.
    pub by_node: Vec<Vec<usize>>,
}

impl EdgeSequenceSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn find(&self, u: usize, v: usize) -> Option<&EdgeSequence> {
        let key = (u.min(v), u.max(v));
        self.sequences
            .binary_search_by(|s| s.pair.cmp(&key))
            .ok()
            .map(|i| &self.sequences[i])
    }
}

pub fn edge_sequences(g: &TxMultiGraph) -> EdgeSequenceSet {
    // (signed amount, timestamp, input order)
    let mut grouped: BTreeMap<(usize, usize), Vec<(f64, i64, usize)>> = BTreeMap::new();
    for (order, e) in g.edges().iter().enumerate() {
        let key = (e.src.min(e.dst), e.src.max(e.dst));
        let sign = if e.src == key.0 { 1.0 } else { -1.0 };
        grouped
            .entry(key)
            .or_default()
            .push((sign * e.amount, e.timestamp, order));
    }
    let mut by_node = vec![Vec::new(); g.node_count()];
    let sequences: Vec<EdgeSequence> = grouped
        .into_iter()
        .enumerate()
        .map(|(idx, (pair, mut items))| {
            items.sort_by(|a, b| {
                a.1.cmp(&b.1)
                    .then(a.0.total_cmp(&b.0))
                    .then(a.2.cmp(&b.2))
            });
            by_node[pair.0].push(idx);
            if pair.1 != pair.0 {
                by_node[pair.1].push(idx);
            }
            EdgeSequence {
                pair,
                items: items
                    .into_iter()
                    .map(|(signed_amount, timestamp, _)| SeqItem {
                        signed_amount,
                        timestamp,
                    })
                    .collect(),
            }
        })
        .collect();
    EdgeSequenceSet { sequences, by_node }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Featurization {
    /// Signed log-amount and log-normalised gap.
    #[default]
    Log,
    /// Amount and absolute timestamp as they are.
    Raw,
}

/// Maps one sequence item to the two encoder inputs.
pub fn featurize_item(item: &SeqItem, prev_timestamp: Option<i64>, mode: Featurization) -> [f64; 2] {
    match mode {
        Featurization::Log => {
            let a = item.signed_amount;
            let x1 = a.signum() * a.abs().ln_1p();
            let x1 = if a == 0.0 { 0.0 } else { x1 };
            let gap = prev_timestamp.map_or(0, |p| (item.timestamp - p).max(0)) as f64;
            [x1, gap.ln_1p() / GAP_SCALE_SECONDS.ln_1p()]
        }
        Featurization::Raw => [item.signed_amount, item.timestamp as f64],
    }
}

pub fn featurize_sequence(items: &[SeqItem], mode: Featurization) -> Vec<[f64; 2]> {
    let mut prev = None;
    items
        .iter()
        .map(|item| {
            let x = featurize_item(item, prev, mode);
            prev = Some(item.timestamp);
            x
        })
        .collect()
}

/// Registers the encoder parameters. Gate order in the stacked matrices is
/// input, forget, candidate, output.
pub fn init_lstm<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<()> {
    let limit = 1.0 / (hidden as f64).sqrt();
    store.insert(W_INPUT, GROUP, Matrix::uniform(4 * hidden, INPUT_DIM, limit, rng))?;
    store.insert(W_RECURRENT, GROUP, Matrix::uniform(4 * hidden, hidden, limit, rng))?;
    let bias = Matrix::from_fn(4 * hidden, 1, |r, _| {
        if (hidden..2 * hidden).contains(&r) {
            1.0
        } else {
            0.0
        }
    });
    store.insert(BIAS, GROUP, bias)
}

pub fn lstm_hidden(store: &ParamStore) -> usize {
    store.value(W_RECURRENT).cols()
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    inputs: Vec<[f64; 2]>,
    /// Per step: activated gates (i, f, g, o) stacked, length 4·hidden.
    gates: Vec<Vec<f64>>,
    /// Cell states c_0..c_n.
    cells: Vec<Vec<f64>>,
    /// Hidden states h_0..h_n.
    hiddens: Vec<Vec<f64>>,
}

impl LstmTrace {
    pub fn output(&self) -> &[f64] {
        self.hiddens.last().expect("h_0 always present")
    }
}

pub fn lstm_forward(store: &ParamStore, inputs: &[[f64; 2]]) -> Result<LstmTrace> {
    if inputs.is_empty() {
        return Err(Error::Empty("cannot encode an empty sequence"));
    }
    let w = store.value(W_INPUT);
    let u = store.value(W_RECURRENT);
    let b = store.value(BIAS).as_slice();
    let d = u.cols();
    let mut trace = LstmTrace {
        inputs: inputs.to_vec(),
        gates: Vec::with_capacity(inputs.len()),
        cells: vec![vec![0.0; d]],
        hiddens: vec![vec![0.0; d]],
    };
    for x in inputs {
        let h_prev = trace.hiddens.last().unwrap();
        let c_prev = trace.cells.last().unwrap();
        let mut pre = u.mul_vec(h_prev);
        for (r, p) in pre.iter_mut().enumerate() {
            *p += b[r] + w.get(r, 0) * x[0] + w.get(r, 1) * x[1];
        }
        let mut gates = vec![0.0; 4 * d];
        let mut c = vec![0.0; d];
        let mut h = vec![0.0; d];
        for j in 0..d {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[d + j]);
            let g_g = pre[2 * d + j].tanh();
            let o_g = sigmoid(pre[3 * d + j]);
            gates[j] = i_g;
            gates[d + j] = f_g;
            gates[2 * d + j] = g_g;
            gates[3 * d + j] = o_g;
            c[j] = f_g * c_prev[j] + i_g * g_g;
            h[j] = o_g * c[j].tanh();
        }
        trace.gates.push(gates);
        trace.cells.push(c);
        trace.hiddens.push(h);
    }
    Ok(trace)
}

/// Back-propagates `d_output` (gradient w.r.t. the final hidden state) through time.
pub fn lstm_backward(store: &ParamStore, trace: &LstmTrace, d_output: &[f64], grads: &mut Grads) {
    let u = store.value(W_RECURRENT);
    let d = u.cols();
    let mut dh = d_output.to_vec();
    let mut dc = vec![0.0; d];
    let mut d_pre = vec![0.0; 4 * d];
    let n = trace.inputs.len();
    let mut dw = Matrix::zeros(4 * d, INPUT_DIM);
    let mut du = Matrix::zeros(4 * d, d);
    let mut db = Matrix::zeros(4 * d, 1);
    for t in (0..n).rev() {
        let gates = &trace.gates[t];
        let c = &trace.cells[t + 1];
        let c_prev = &trace.cells[t];
        let h_prev = &trace.hiddens[t];
        for j in 0..d {
            let (i_g, f_g, g_g, o_g) = (gates[j], gates[d + j], gates[2 * d + j], gates[3 * d + j]);
            let tanh_c = c[j].tanh();
            let d_o = dh[j] * tanh_c;
            let dc_total = dc[j] + dh[j] * o_g * (1.0 - tanh_c * tanh_c);
            let d_i = dc_total * g_g;
            let d_f = dc_total * c_prev[j];
            let d_g = dc_total * i_g;
            d_pre[j] = d_i * i_g * (1.0 - i_g);
            d_pre[d + j] = d_f * f_g * (1.0 - f_g);
            d_pre[2 * d + j] = d_g * (1.0 - g_g * g_g);
            d_pre[3 * d + j] = d_o * o_g * (1.0 - o_g);
            dc[j] = dc_total * f_g;
        }
        let x = trace.inputs[t];
        dw.add_outer(&d_pre, &x);
        du.add_outer(&d_pre, h_prev);
        for (bj, dp) in db.as_mut_slice().iter_mut().zip(&d_pre) {
            *bj += dp;
        }
        dh = u.t_mul_vec(&d_pre);
    }
    grads.entry(W_INPUT, 4 * d, INPUT_DIM).add_assign(&dw);
    grads.entry(W_RECURRENT, 4 * d, d).add_assign(&du);
    grads.entry(BIAS, 4 * d, 1).add_assign(&db);
}

/// Encodes one sequence into its final hidden state.
pub fn lstm_encode(
    seq: &EdgeSequence,
    store: &ParamStore,
    mode: Featurization,
    max_len: Option<usize>,
) -> Result<Vec<f64>> {
    let items = seq.truncated(max_len);
    Ok(lstm_forward(store, &featurize_sequence(items, mode))?
        .output()
        .to_vec())
}

pub fn write_edge_embeddings<W: Write>(
    mut out: W,
    g: &TxMultiGraph,
    sequences: &EdgeSequenceSet,
    embeddings: &[Vec<f64>],
) -> std::io::Result<()> {
    for (seq, emb) in sequences.sequences.iter().zip(embeddings) {
        write!(out, "{}\t{}", g.address(seq.pair.0), g.address(seq.pair.1))?;
        for v in emb {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TransactionRecord;
    use crate::nncore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn addr(n: u32) -> String {
        format!("0x{n:040x}")
    }

    fn rec(from: u32, to: u32, amount: f64, ts: i64) -> TransactionRecord {
        TransactionRecord::new(&addr(from), &addr(to), amount, ts).unwrap()
    }

    fn store(seed: u64, d: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_lstm(&mut s, d, &mut rng).unwrap();
        s
    }

    fn items(values: &[(f64, i64)]) -> Vec<SeqItem> {
        values
            .iter()
            .map(|&(signed_amount, timestamp)| SeqItem {
                signed_amount,
                timestamp,
            })
            .collect()
    }

    #[test]
    fn direction_sign_follows_canonical_endpoint() {
        let g = TxMultiGraph::build(&[rec(2, 1, 2.0, 20), rec(1, 2, 1.0, 10)]);
        let set = edge_sequences(&g);
        assert_eq!(set.len(), 1);
        assert_eq!(set.sequences[0].items, items(&[(1.0, 10), (-2.0, 20)]));
        assert_eq!(set.by_node, vec![vec![0], vec![0]]);
    }

    #[test]
    fn single_transaction_sequence() {
        let g = TxMultiGraph::build(&[rec(1, 2, 1.0, 10)]);
        assert_eq!(edge_sequences(&g).sequences[0].len(), 1);
    }

    #[test]
    fn equal_timestamps_are_stable() {
        let records = vec![rec(1, 2, 3.0, 10), rec(2, 1, 1.0, 10), rec(1, 2, 0.5, 10)];
        let first = edge_sequences(&TxMultiGraph::build(&records));
        assert_eq!(
            first.sequences[0].items,
            items(&[(-1.0, 10), (0.5, 10), (3.0, 10)])
        );
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(edge_sequences(&TxMultiGraph::build(&reversed)), first);
    }

    #[test]
    fn sequence_lengths_cover_every_edge() {
        let records: Vec<_> = (0..40u32)
            .map(|i| rec(i % 5, (i * 3) % 7, i as f64, 100 + (i as i64 * 37) % 11))
            .collect();
        let g = TxMultiGraph::build(&records);
        let set = edge_sequences(&g);
        assert_eq!(set.sequences.iter().map(EdgeSequence::len).sum::<usize>(), g.edge_count());
        for s in &set.sequences {
            assert!(s.items.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }

    #[test]
    fn featurization_closed_forms() {
        let zero = SeqItem { signed_amount: 0.0, timestamp: 5 };
        assert_eq!(featurize_item(&zero, None, Featurization::Log), [0.0, 0.0]);

        let e_minus_one = SeqItem { signed_amount: std::f64::consts::E - 1.0, timestamp: 5 };
        let x = featurize_item(&e_minus_one, Some(5), Featurization::Log);
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1] == 0.0);

        let neg = SeqItem { signed_amount: -1.0, timestamp: 86_400 + 7 };
        let x = featurize_item(&neg, Some(7), Featurization::Log);
        assert!((x[0] + 2f64.ln()).abs() < 1e-15);
        assert!((x[1] - 1.0).abs() < 1e-15);

        let raw = featurize_item(&neg, Some(7), Featurization::Raw);
        assert_eq!(raw, [-1.0, 86_407.0]);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut s = store(1, 4);
        for name in [W_INPUT, W_RECURRENT, BIAS] {
            s.value_mut(name).fill(0.0);
        }
        let trace = lstm_forward(&s, &[[1.0, 0.3], [-2.0, 0.9]]).unwrap();
        assert_eq!(trace.output(), &[0.0; 4]);
    }

    #[test]
    fn scalar_cell_matches_hand_recurrence() {
        let mut s = store(1, 1);
        // rows: i, f, g, o; cols: x1, x2
        *s.value_mut(W_INPUT) = Matrix::from_vec(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        *s.value_mut(W_RECURRENT) = Matrix::from_vec(4, 1, vec![0.9, -0.1, 0.2, 0.3]).unwrap();
        *s.value_mut(BIAS) = Matrix::from_vec(4, 1, vec![0.05, 1.0, -0.05, 0.0]).unwrap();
        let x = [0.7, 0.2];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.1 * 0.7 + 0.2 * 0.2 + 0.05);
        let f = sig(-0.3 * 0.7 + 0.4 * 0.2 + 1.0);
        let g = (0.5 * 0.7 - 0.6 * 0.2 - 0.05f64).tanh();
        let o = sig(0.7 * 0.7 + 0.8 * 0.2);
        let c = f * 0.0 + i * g;
        let h = o * c.tanh();
        let trace = lstm_forward(&s, &[x]).unwrap();
        assert!((trace.output()[0] - h).abs() < 1e-12);
    }

    #[test]
    fn length_and_order_sensitivity() {
        for seed in 0..5 {
            let s = store(seed, 10);
            let one = lstm_forward(&s, &[[0.5, 0.0]]).unwrap().output().to_vec();
            let two = lstm_forward(&s, &[[0.5, 0.0], [0.5, 0.0]]).unwrap().output().to_vec();
            assert_ne!(one, two);
            let fwd = lstm_forward(&s, &[[0.1, 0.0], [1.0, 0.3], [-0.4, 0.9]]).unwrap().output().to_vec();
            let rev = lstm_forward(&s, &[[-0.4, 0.0], [1.0, 0.9], [0.1, 0.3]]).unwrap().output().to_vec();
            let diff: f64 = fwd.iter().zip(&rev).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn empty_sequence_is_error() {
        assert!(lstm_forward(&store(0, 3), &[]).is_err());
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let seq = EdgeSequence {
            pair: (0, 1),
            items: items(&[(1.0, 1), (2.0, 2), (3.0, 3)]),
        };
        assert_eq!(seq.truncated(Some(2)), &seq.items[1..]);
        let s = store(3, 10);
        let full = lstm_encode(&seq, &s, Featurization::Log, None).unwrap();
        assert_eq!(lstm_encode(&seq, &s, Featurization::Log, Some(3)).unwrap(), full);
        assert_eq!(lstm_encode(&seq, &s, Featurization::Log, Some(30)).unwrap(), full);
        assert_ne!(lstm_encode(&seq, &s, Featurization::Log, Some(1)).unwrap(), full);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for len in [1usize, 2, 7] {
            let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
            let mut s = store(len as u64 + 10, 5);
            let inputs: Vec<[f64; 2]> = (0..len)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(0.0..1.2)])
                .collect();
            let weights: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |p: &ParamStore| -> f64 {
                let h = lstm_forward(p, &inputs).unwrap();
                h.output().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
            };
            let trace = lstm_forward(&s, &inputs).unwrap();
            let mut grads = Grads::new();
            lstm_backward(&s, &trace, &weights, &mut grads);
            s.accumulate(&grads).unwrap();
            let report = grad_check(&s, 1e-5, loss).unwrap();
            assert!(report.max_rel_err < 1e-4, "len {len}: {report:?}");
        }
    }
}
