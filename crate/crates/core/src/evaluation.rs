//! Metrics, ablation variants and hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{assemble, to_xy, train_gbdt, upsample, GbdtModel, LabeledDataset};
use crate::config::{RunConfig, SeqLength};
use crate::error::{Error, Result};
use crate::ingest::{clean, CleanReport, LabelSet, TransactionRecord};
use crate::structural::{train_representation, EdgeSource, NodeRepresentation, TrainOutput};
use crate::txgraph::{sample_subgraph, stat_feature_table, SampleConfig, TxMultiGraph};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    Ok(())
}

/// Rank-based area under the ROC curve; tied scores earn half credit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let p = group.iter().filter(|&&k| labels[k] == 1).count() as u64;
        let n = group.len() as u64 - p;
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// `(FPR, TPR)` points from the highest threshold down, one per distinct score.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Data("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            points.push((fp / neg, tp / pos));
        }
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// Precision, recall and F1 of `score >= threshold`. Empty denominators give 0.
pub fn prf1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Prf1> {
    check_scores(scores, labels)?;
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
        counts: c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Learned edge embeddings replaced by per-pair summary statistics.
    NoTemporal,
    /// No attention pooling; the trading block is zero.
    NoEdge2node,
    /// No autoencoder training; the structural block is zero.
    NoStructural,
    /// Classifier on the ten statistical features alone.
    FeaturesOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoTemporal,
        AblationVariant::NoEdge2node,
        AblationVariant::NoStructural,
        AblationVariant::FeaturesOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoTemporal => "no_temporal",
            AblationVariant::NoEdge2node => "no_edge2node",
            AblationVariant::NoStructural => "no_structural",
            AblationVariant::FeaturesOnly => "features_only",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: AblationVariant,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub counts: Counts,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Values recorded in `MetricsReport::params`.
pub fn report_params(config: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    let mut p = BTreeMap::new();
    p.insert("seq_length".into(), serde_json::json!(config.seq_length.to_string()));
    p.insert("attention_heads".into(), serde_json::json!(config.attention_heads));
    p.insert("embedding_dim".into(), serde_json::json!(config.embedding_dim));
    p.insert("epochs".into(), serde_json::json!(config.epochs));
    p.insert("num_trees".into(), serde_json::json!(config.num_trees));
    p.insert("upsample_ratio".into(), serde_json::json!(config.upsample_ratio));
    p
}

/// Everything a single run produced besides its metrics.
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub dataset: LabeledDataset,
    pub model: GbdtModel,
    pub representations: Vec<NodeRepresentation>,
    /// Representation training; `None` for [`AblationVariant::FeaturesOnly`].
    pub training: Option<TrainOutput>,
    /// Test-split scores in dataset order.
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<u8>,
}

/// Cleans, builds and samples the graph a run operates on.
pub fn prepare_subgraph(
    records: &[TransactionRecord],
    labels: &LabelSet,
    config: &RunConfig,
) -> Result<(TxMultiGraph, CleanReport)> {
    let (kept, report) = clean(records, labels, &config.clean_config());
    Ok((build_subgraph(&kept, labels, config)?, report))
}

/// Builds the graph from cleaned records and samples it down to
/// `subgraph_nodes`. Labeled phishing nodes stay in the graph even without records.
pub fn build_subgraph(cleaned: &[TransactionRecord], labels: &LabelSet, config: &RunConfig) -> Result<TxMultiGraph> {
    let phishing = labels
        .iter()
        .filter(|(_, l)| *l == crate::ingest::Label::Phishing)
        .map(|(a, _)| a);
    let g = TxMultiGraph::with_nodes(phishing, cleaned);
    if g.node_count() == 0 {
        return Err(Error::Empty("graph after cleaning"));
    }
    if config.subgraph_nodes >= g.node_count() {
        return Ok(g);
    }
    let sample = SampleConfig {
        target_nodes: config.subgraph_nodes,
        max_walk_len: config.max_walk_len,
    };
    sample_subgraph(&g, &sample, config.stage_seed("sample"))
}

/// Representations for a variant. `FeaturesOnly` yields empty blocks.
pub fn variant_representations(
    g: &TxMultiGraph,
    variant: AblationVariant,
    config: &RunConfig,
) -> Result<(Vec<NodeRepresentation>, Option<TrainOutput>)> {
    let stat = stat_feature_table(g);
    if variant == AblationVariant::FeaturesOnly {
        let reps = g
            .addresses()
            .iter()
            .zip(&stat)
            .map(|(a, s)| NodeRepresentation {
                address: a.clone(),
                statistical: s.0.to_vec(),
                trading: Vec::new(),
                structural: Vec::new(),
            })
            .collect();
        return Ok((reps, None));
    }
    let mut repr = config.representation_config();
    match variant {
        AblationVariant::NoTemporal => repr.edge_source = EdgeSource::Summary,
        AblationVariant::NoEdge2node => repr.edge_source = EdgeSource::Disabled,
        AblationVariant::NoStructural => repr.structural = false,
        _ => {}
    }
    let mut out = train_representation(g, &stat, &repr)?;
    let reps = std::mem::take(&mut out.representations);
    Ok((reps, Some(out)))
}

/// Runs one variant end to end on a prepared subgraph.
pub fn run_variant_detailed(
    g: &TxMultiGraph,
    labels: &LabelSet,
    variant: AblationVariant,
    config: &RunConfig,
) -> Result<RunArtifacts> {
    config.validate()?;
    let (representations, training) = variant_representations(g, variant, config)?;
    let dataset = assemble(&representations, labels, config.train_fraction, config.stage_seed("split"))?;
    let model = fit_classifier(&dataset, config)?;
    let (report, test_scores, test_labels) = evaluate_model(&model, &dataset, variant, config)?;
    Ok(RunArtifacts {
        report,
        dataset,
        model,
        representations,
        training,
        test_scores,
        test_labels,
    })
}

/// Upsamples the training split and fits the boosted trees.
pub fn fit_classifier(dataset: &LabeledDataset, config: &RunConfig) -> Result<GbdtModel> {
    let train = upsample(&dataset.train(), config.upsample_ratio)?;
    let (x, y) = to_xy(&train);
    train_gbdt(&x, &y, &config.gbdt_config())
}

/// Scores the test split. Returns the report with the test scores and labels.
pub fn evaluate_model(
    model: &GbdtModel,
    dataset: &LabeledDataset,
    variant: AblationVariant,
    config: &RunConfig,
) -> Result<(MetricsReport, Vec<f64>, Vec<u8>)> {
    let (tx, test_labels) = to_xy(&dataset.test());
    let test_scores = model.predict_all(&tx)?;
    let area = auc(&test_scores, &test_labels)?;
    let m = prf1(&test_scores, &test_labels, config.threshold)?;
    let report = MetricsReport {
        variant,
        params: report_params(config),
        seed: config.seed,
        auc: area,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        threshold: config.threshold,
        counts: m.counts,
        fingerprint: config.fingerprint(),
    };
    Ok((report, test_scores, test_labels))
}

pub fn run_variant(
    g: &TxMultiGraph,
    labels: &LabelSet,
    variant: AblationVariant,
    config: &RunConfig,
) -> Result<MetricsReport> {
    run_variant_detailed(g, labels, variant, config).map(|a| a.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "values", rename_all = "snake_case")]
pub enum SweepParam {
    SeqLength(Vec<SeqLength>),
    /// Number of attention heads; each must divide the embedding size.
    AttentionSize(Vec<usize>),
}

impl SweepParam {
    pub fn default_seq_length() -> Self {
        SweepParam::SeqLength(vec![
            SeqLength::Fixed(1),
            SeqLength::Fixed(2),
            SeqLength::Fixed(5),
            SeqLength::Fixed(10),
            SeqLength::Fixed(20),
            SeqLength::Variable,
        ])
    }

    pub fn default_attention_size() -> Self {
        SweepParam::AttentionSize(vec![1, 2, 5, 10])
    }

    /// One config per value, validated.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let configs: Vec<RunConfig> = match self {
            SweepParam::SeqLength(values) => values
                .iter()
                .map(|&v| RunConfig {
                    seq_length: v,
                    ..base.clone()
                })
                .collect(),
            SweepParam::AttentionSize(values) => values
                .iter()
                .map(|&k| RunConfig {
                    attention_heads: k,
                    ..base.clone()
                })
                .collect(),
        };
        if configs.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }
}

/// One report per (value, seed), values outer. Runs execute in parallel.
pub fn sweep(
    g: &TxMultiGraph,
    labels: &LabelSet,
    param: &SweepParam,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    let jobs: Vec<RunConfig> = param
        .configs(base)?
        .into_iter()
        .flat_map(|c| {
            seeds.iter().map(move |&s| RunConfig {
                seed: s,
                ..c.clone()
            })
        })
        .collect();
    jobs.par_iter()
        .map(|c| run_variant(g, labels, AblationVariant::Full, c))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub runs: usize,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn mean_metrics(reports: &[MetricsReport]) -> Option<MeanMetrics> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MeanMetrics {
        runs: reports.len(),
        auc: mean(|r| r.auc),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;
    use crate::synthgen::{generate, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &l) in labels.iter().enumerate() {
            for (j, &m) in labels.iter().enumerate() {
                if l == 1 && m == 0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.3, 0.4], &[1, 1]), Err(Error::Data(_))));
        assert!(auc(&[f64::NAN, 0.4], &[1, 0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut done = 0;
        while done < 200 {
            let n = rng.random_range(2..=20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            assert_eq!(auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
            done += 1;
        }
    }

    #[test]
    fn prf1_conventions() {
        let p = prf1(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = prf1(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        // TP=3, FP=1, FN=1
        let p = prf1(&[0.9, 0.9, 0.9, 0.9, 0.1, 0.1], &[1, 1, 1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.75, 0.75, 0.75));
        assert_eq!(
            p.counts,
            Counts {
                tp: 3,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        let p = prf1(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(p.counts.tp, 1);
    }

    #[test]
    fn roc_points_end_at_corners() {
        let pts = roc_points(&[0.9, 0.4, 0.4, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("no_gcn".parse::<AblationVariant>().is_err());
    }

    proptest! {
        #[test]
        fn auc_complements_under_negation(scores in prop::collection::hash_set(-1000i32..1000, 2..30), seed in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 7.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = (0..scores.len()).map(|_| rng.random_bool(0.5) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&neg, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            prop_assert_eq!(auc(&warped, &labels).unwrap(), a);
        }

        #[test]
        fn counts_add_up(scores in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>(), t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u8> = (0..scores.len()).map(|_| rng.random_bool(0.3) as u8).collect();
            let p = prf1(&scores, &labels, t).unwrap();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assert_eq!(p.counts.tp + p.counts.fn_, pos);
            prop_assert_eq!(p.counts.tn + p.counts.fp, labels.len() - pos);
        }
    }

    fn small_benchmark() -> (TxMultiGraph, LabelSet, RunConfig) {
        let synth = SynthConfig {
            n_nodes: 300,
            phishing_fraction: 0.05,
            seed: 9,
            ..Default::default()
        };
        let out = generate(&synth).unwrap();
        let config = RunConfig {
            epochs: 15,
            num_trees: 30,
            ..Default::default()
        };
        let (g, _) = prepare_subgraph(&out.records, &out.labels, &config).unwrap();
        (g, out.labels, config)
    }

    #[test]
    fn variants_shape_features() {
        let (g, labels, config) = small_benchmark();
        let full = run_variant_detailed(&g, &labels, AblationVariant::Full, &config).unwrap();
        assert_eq!(full.dataset.dim(), 30);
        assert!(full.training.as_ref().unwrap().encoder_invocations > 0);
        assert!(full.report.auc >= 0.0 && full.report.auc <= 1.0);

        let nt = run_variant_detailed(&g, &labels, AblationVariant::NoTemporal, &config).unwrap();
        assert_eq!(nt.training.as_ref().unwrap().encoder_invocations, 0);
        assert_eq!(nt.dataset.dim(), 30);

        let ns = run_variant_detailed(&g, &labels, AblationVariant::NoStructural, &config).unwrap();
        assert!(ns.training.as_ref().unwrap().loss_curve.is_empty());
        assert!(ns.dataset.rows().iter().all(|r| r.features[20..30].iter().all(|&v| v == 0.0)));
        assert!(ns.dataset.rows().iter().any(|r| r.features[10..20].iter().any(|&v| v != 0.0)));

        let ne = run_variant_detailed(&g, &labels, AblationVariant::NoEdge2node, &config).unwrap();
        assert!(ne.dataset.rows().iter().all(|r| r.features[10..20].iter().all(|&v| v == 0.0)));

        let fo = run_variant_detailed(&g, &labels, AblationVariant::FeaturesOnly, &config).unwrap();
        assert_eq!(fo.dataset.dim(), 10);
        assert!(fo.training.is_none());
        assert_eq!(
            fo.dataset.rows().iter().filter(|r| r.label == 1).count(),
            labels.count(Label::Phishing)
        );
    }

    #[test]
    fn full_run_is_reproducible() {
        let (g, labels, config) = small_benchmark();
        let a = run_variant(&g, &labels, AblationVariant::Full, &config).unwrap();
        let b = run_variant(&g, &labels, AblationVariant::Full, &config).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.fingerprint, config.fingerprint());
    }

    #[test]
    fn sweep_cardinality() {
        let (g, labels, mut config) = small_benchmark();
        config.epochs = 3;
        config.num_trees = 5;
        let param = SweepParam::SeqLength(vec![SeqLength::Fixed(1), SeqLength::Variable]);
        let reports = sweep(&g, &labels, &param, &config, &[1, 2]).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[0].params["seq_length"], "1");
        assert_eq!(reports[3].params["seq_length"], "variable");
        assert_eq!(reports[1].seed, 2);
        assert_ne!(reports[0].fingerprint, reports[2].fingerprint);
        let bad = SweepParam::AttentionSize(vec![3]);
        assert!(matches!(sweep(&g, &labels, &bad, &config, &[1]), Err(Error::Config(_))));
    }
}
