//! Node classification: feature assembly, stratified train/test split,
//! minority upsampling and a gradient-boosted tree ensemble.

mod gbdt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Label, LabelSet};
use crate::structural::NodeRepresentation;

pub use gbdt::{train_gbdt, train_gbdt_traced, GbdtConfig, GbdtModel, Tree, TreeNode};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_UPSAMPLE_RATIO: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub address: String,
    pub features: Vec<f64>,
    /// 1 = phishing.
    pub label: u8,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    rows: Vec<LabeledRow>,
    dim: usize,
}

impl LabeledDataset {
    pub fn rows(&self) -> &[LabeledRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn train(&self) -> Vec<LabeledRow> {
        self.split(Split::Train).into_iter().cloned().collect()
    }

    pub fn test(&self) -> Vec<LabeledRow> {
        self.split(Split::Test).into_iter().cloned().collect()
    }

    /// Zeroes the feature columns in `range` for every row.
    pub fn zero_columns(&mut self, range: std::ops::Range<usize>) {
        for row in &mut self.rows {
            for v in &mut row.features[range.clone()] {
                *v = 0.0;
            }
        }
    }
}

/// Joins the three feature blocks of every labeled node and assigns a
/// stratified train/test split.
///
/// Each block is a list of `(address, vector)` in the same node order.
/// Nodes whose label is neither phishing nor normal are dropped.
/// Builds a dataset from already concatenated feature rows.
pub fn assemble_table(
    rows: &[(String, Vec<f64>)],
    labels: &LabelSet,
    train_fraction: f64,
    split_seed: u64,
) -> Result<LabeledDataset> {
    let empty: Vec<(String, Vec<f64>)> = rows.iter().map(|(a, _)| (a.clone(), Vec::new())).collect();
    assemble_blocks(rows, &empty, &empty, labels, train_fraction, split_seed)
}

pub fn assemble_blocks(
    statistical: &[(String, Vec<f64>)],
    trading: &[(String, Vec<f64>)],
    structural: &[(String, Vec<f64>)],
    labels: &LabelSet,
    train_fraction: f64,
    split_seed: u64,
) -> Result<LabeledDataset> {
    if statistical.len() != trading.len() || statistical.len() != structural.len() {
        return Err(Error::Data(format!(
            "feature blocks cover {} / {} / {} nodes",
            statistical.len(),
            trading.len(),
            structural.len()
        )));
    }
    let mut rows = Vec::new();
    let mut dim = None;
    for ((s, t), z) in statistical.iter().zip(trading).zip(structural) {
        if s.0 != t.0 || s.0 != z.0 {
            return Err(Error::Data(format!(
                "feature blocks disagree on node order: {} / {} / {}",
                s.0, t.0, z.0
            )));
        }
        let label = match labels.get(&s.0) {
            Label::Phishing => 1,
            Label::Normal => 0,
            Label::Unlabeled => continue,
        };
        let features: Vec<f64> = s.1.iter().chain(&t.1).chain(&z.1).copied().collect();
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::Shape(format!(
                    "node {} has {} features, expected {d}",
                    s.0,
                    features.len()
                )))
            }
            _ => {}
        }
        rows.push(LabeledRow {
            address: s.0.clone(),
            features,
            label,
            split: Split::Train,
        });
    }
    let dim = dim.ok_or(Error::Empty("labeled nodes"))?;
    assign_split(&mut rows, train_fraction, split_seed)?;
    Ok(LabeledDataset { rows, dim })
}

/// Same as [`assemble_blocks`] over finished representations.
pub fn assemble(
    representations: &[NodeRepresentation],
    labels: &LabelSet,
    train_fraction: f64,
    split_seed: u64,
) -> Result<LabeledDataset> {
    let block = |f: fn(&NodeRepresentation) -> &Vec<f64>| -> Vec<(String, Vec<f64>)> {
        representations
            .iter()
            .map(|r| (r.address.clone(), f(r).clone()))
            .collect()
    };
    assemble_blocks(
        &block(|r| &r.statistical),
        &block(|r| &r.trading),
        &block(|r| &r.structural),
        labels,
        train_fraction,
        split_seed,
    )
}

/// Per-class train counts: the positive count is rounded from the fraction
/// and kept in `[1, count-1]` when the class has at least two rows; the
/// negative class takes the rest of the overall train budget.
fn train_counts(pos: usize, neg: usize, fraction: f64) -> (usize, usize) {
    let clamp = |k: usize, count: usize| {
        if count >= 2 {
            k.clamp(1, count - 1)
        } else {
            k.min(count)
        }
    };
    let total = ((pos + neg) as f64 * fraction).round() as usize;
    let pos_train = clamp((pos as f64 * fraction).round() as usize, pos);
    let neg_train = clamp(total.saturating_sub(pos_train), neg);
    (pos_train, neg_train)
}

fn assign_split(rows: &mut [LabeledRow], fraction: f64, seed: u64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, row) in rows.iter().enumerate() {
        by_class[row.label as usize].push(i);
    }
    let (pos_train, neg_train) = train_counts(by_class[1].len(), by_class[0].len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, keep) in [(1, pos_train), (0, neg_train)] {
        let idx = &mut by_class[class];
        idx.sort_by(|&a, &b| rows[a].address.cmp(&rows[b].address));
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            rows[i].split = if k < keep { Split::Train } else { Split::Test };
        }
    }
    Ok(())
}

/// Replicates minority-class rows in order, cycling, until the minority
/// count reaches `min(ratio × original, majority)`. Original rows keep
/// their positions; copies are appended.
pub fn upsample(rows: &[LabeledRow], ratio: usize) -> Result<Vec<LabeledRow>> {
    if ratio < 1 {
        return Err(Error::Config("upsample ratio must be at least 1".into()));
    }
    let positives: Vec<&LabeledRow> = rows.iter().filter(|r| r.label == 1).collect();
    let negatives: Vec<&LabeledRow> = rows.iter().filter(|r| r.label == 0).collect();
    let (minority, majority) = if positives.len() <= negatives.len() {
        (positives, negatives.len())
    } else {
        (negatives, positives.len())
    };
    if minority.is_empty() {
        return Err(Error::Data("no minority-class rows to upsample".into()));
    }
    let target = (ratio * minority.len()).min(majority).max(minority.len());
    let mut out = rows.to_vec();
    out.extend(
        minority
            .iter()
            .cycle()
            .take(target - minority.len())
            .map(|r| (*r).clone()),
    );
    Ok(out)
}

/// Feature rows and labels of a row set.
pub fn to_xy(rows: &[LabeledRow]) -> (Vec<Vec<f64>>, Vec<u8>) {
    rows.iter().map(|r| (r.features.clone(), r.label)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn addr(i: usize) -> String {
        format!("0x{i:040x}")
    }

    fn blocks(n: usize) -> [Vec<(String, Vec<f64>)>; 3] {
        let mk = |off: f64| (0..n).map(|i| (addr(i), vec![i as f64 + off; 10])).collect();
        [mk(0.0), mk(0.25), mk(0.5)]
    }

    fn labels(n: usize, positives: usize) -> LabelSet {
        let mut l = LabelSet::default();
        for i in 0..n {
            let label = if i < positives { Label::Phishing } else { Label::Normal };
            l.insert(&addr(i), label).unwrap();
        }
        l
    }

    fn row(i: usize, label: u8) -> LabeledRow {
        LabeledRow {
            address: addr(i),
            features: vec![i as f64],
            label,
            split: Split::Train,
        }
    }

    #[test]
    fn blocks_are_concatenated_in_order() {
        let [s, t, z] = blocks(3);
        let ds = assemble_blocks(&s, &t, &z, &labels(3, 1), 0.8, 0).unwrap();
        assert_eq!(ds.dim(), 30);
        let r = &ds.rows()[1];
        assert_eq!(r.features[0], 1.0);
        assert_eq!(r.features[10], 1.25);
        assert_eq!(r.features[29], 1.5);
    }

    #[test]
    fn ten_nodes_two_positive() {
        let [s, t, z] = blocks(10);
        let ds = assemble_blocks(&s, &t, &z, &labels(10, 2), 0.8, 3).unwrap();
        let train = ds.train();
        let test = ds.test();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.iter().any(|r| r.label == 1));
        assert!(test.iter().any(|r| r.label == 1));
    }

    #[test]
    fn split_is_deterministic() {
        let [s, t, z] = blocks(40);
        let a = assemble_blocks(&s, &t, &z, &labels(40, 6), 0.8, 11).unwrap();
        let b = assemble_blocks(&s, &t, &z, &labels(40, 6), 0.8, 11).unwrap();
        assert_eq!(a, b);
        let c = assemble_blocks(&s, &t, &z, &labels(40, 6), 0.8, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unlabeled_nodes_are_dropped() {
        let [s, t, z] = blocks(5);
        let mut l = labels(4, 1);
        l.remove(&addr(2));
        let ds = assemble_blocks(&s, &t, &z, &l, 0.8, 0).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.rows().iter().all(|r| r.address != addr(2)));
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let [s, t, mut z] = blocks(4);
        z.pop();
        assert!(matches!(
            assemble_blocks(&s, &t, &z, &labels(4, 1), 0.8, 0),
            Err(Error::Data(_))
        ));
        let [s, mut t, z] = blocks(4);
        t.swap(0, 1);
        assert!(assemble_blocks(&s, &t, &z, &labels(4, 1), 0.8, 0).is_err());
    }

    #[test]
    fn upsample_to_ratio() {
        let mut rows: Vec<_> = (0..2).map(|i| row(i, 1)).collect();
        rows.extend((2..502).map(|i| row(i, 0)));
        let up = upsample(&rows, 50).unwrap();
        assert_eq!(up.iter().filter(|r| r.label == 1).count(), 100);
        assert_eq!(up.iter().filter(|r| r.label == 0).count(), 500);
        assert_eq!(&up[..rows.len()], &rows[..]);
    }

    #[test]
    fn upsample_caps_at_majority() {
        let mut rows: Vec<_> = (0..2).map(|i| row(i, 1)).collect();
        rows.extend((2..62).map(|i| row(i, 0)));
        let up = upsample(&rows, 50).unwrap();
        assert_eq!(up.iter().filter(|r| r.label == 1).count(), 60);
    }

    #[test]
    fn upsample_ratio_one_is_identity() {
        let rows: Vec<_> = (0..7).map(|i| row(i, (i % 3 == 0) as u8)).collect();
        assert_eq!(upsample(&rows, 1).unwrap(), rows);
    }

    #[test]
    fn upsample_without_minority_fails() {
        let rows: Vec<_> = (0..4).map(|i| row(i, 0)).collect();
        assert!(matches!(upsample(&rows, 50), Err(Error::Data(_))));
        assert!(matches!(upsample(&rows, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn upsample_preserves_distinct_minority_rows(pos in 1usize..8, neg in 1usize..60, ratio in 1usize..60) {
            let mut rows: Vec<_> = (0..pos).map(|i| row(i, 1)).collect();
            rows.extend((pos..pos + neg).map(|i| row(i, 0)));
            let up = upsample(&rows, ratio).unwrap();
            let (min_label, min_count, maj_count) = if pos <= neg { (1, pos, neg) } else { (0, neg, pos) };
            let distinct = |rs: &[LabeledRow]| -> BTreeSet<String> {
                rs.iter().filter(|r| r.label == min_label).map(|r| r.address.clone()).collect()
            };
            prop_assert_eq!(distinct(&up), distinct(&rows));
            let count = up.iter().filter(|r| r.label == min_label).count();
            prop_assert_eq!(count, (ratio * min_count).min(maj_count).max(min_count));
            prop_assert_eq!(up.iter().filter(|r| r.label != min_label).count(), maj_count);
        }

        #[test]
        fn split_keeps_both_classes_on_both_sides(pos in 2usize..30, neg in 2usize..200, seed in any::<u64>()) {
            let [s, t, z] = blocks(pos + neg);
            let ds = assemble_blocks(&s, &t, &z, &labels(pos + neg, pos), 0.8, seed).unwrap();
            for split in [Split::Train, Split::Test] {
                let part = ds.split(split);
                prop_assert!(part.iter().any(|r| r.label == 1));
                prop_assert!(part.iter().any(|r| r.label == 0));
            }
        }
    }
}
