use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use phishgraph::classifier::{assemble, assemble_table};
use phishgraph::evaluation::{
    evaluate_model, fit_classifier, mean_metrics, roc_points, sweep, variant_representations, AblationVariant,
    MeanMetrics, MetricsReport, SweepParam,
};
use phishgraph::ingest::{
    clean, load_labels, load_transactions, parse_transactions, write_labels, write_transactions_jsonl,
    write_transactions_tsv, Strictness, TxFormat,
};
use phishgraph::nncore::{load_checkpoint, save_checkpoint, ParamStore};
use phishgraph::structural::{attention_diagnostics, parse_representation_table, write_representation_table};
use phishgraph::synthgen::{audit, generate, SynthConfig};
use phishgraph::temporal_edge::write_edge_embeddings;
use phishgraph::txgraph::{parse_node_list, stat_feature_table, write_feature_tsv, TxMultiGraph};
use phishgraph::{Error, GbdtModel, LabelSet, Result, RunConfig, SeqLength, TransactionRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{AblateArgs, FormatArg, IngestArgs, PredictArgs, SweepArgs, SweepParamArg, SynthArgs, TrainArgs};

pub const CLEAN: &str = "clean.tsv";
pub const CLEAN_REPORT: &str = "clean_report.json";
pub const SUBGRAPH: &str = "subgraph.tsv";
pub const NODES: &str = "nodes.txt";
pub const FEATURES: &str = "features.tsv";
pub const CHECKPOINT: &str = "checkpoint";
pub const MODEL: &str = "gbdt.json";
pub const REPRESENTATIONS: &str = "representations.tsv";
pub const MANIFEST: &str = "run_manifest.json";

pub struct Workspace {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn transactions(&self) -> PathBuf {
        self.config
            .transactions
            .clone()
            .unwrap_or_else(|| self.path("transactions.tsv"))
    }

    fn labels(&self) -> PathBuf {
        self.config.labels.clone().unwrap_or_else(|| self.path("labels.tsv"))
    }

    fn checkpoint(&self) -> PathBuf {
        self.path(CHECKPOINT)
    }

    /// Records a finished stage in the run manifest.
    fn record(&self, stage: &str, outputs: &[&str]) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut manifest: BTreeMap<String, serde_json::Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => BTreeMap::new(),
        };
        manifest.insert(
            stage.to_string(),
            serde_json::json!({
                "fingerprint": self.config.fingerprint(),
                "seed": self.config.seed,
                "outputs": outputs,
                "version": env!("CARGO_PKG_VERSION"),
            }),
        );
        write_json(&path, &manifest)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = create(path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_with(path, |out| writeln!(out, "{text}"))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} not found; {hint}", path.display())))
    }
}

fn load_graph(ws: &Workspace) -> Result<TxMultiGraph> {
    let edges = ws.path(SUBGRAPH);
    let nodes = ws.path(NODES);
    require(&edges, "run `sample` first")?;
    require(&nodes, "run `sample` first")?;
    let records = load_transactions(&edges, TxFormat::Tsv, Strictness::FailFast)?.records;
    let file = File::open(&nodes).map_err(|e| Error::io(&nodes, e))?;
    let names = parse_node_list(BufReader::new(file))?;
    Ok(TxMultiGraph::with_nodes(names.iter().map(String::as_str), &records))
}

fn load_label_file(ws: &Workspace) -> Result<LabelSet> {
    let path = ws.labels();
    require(&path, "pass --labels or run `ingest` first")?;
    load_labels(path)
}

pub fn synth(ws: &Workspace, args: &SynthArgs) -> Result<()> {
    let mut sc = match &args.synth_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(n) = args.nodes {
        sc.n_nodes = n;
    }
    if let Some(f) = args.phishing_fraction {
        sc.phishing_fraction = f;
    }
    sc.seed = ws.config.stage_seed("synth");
    let out = generate(&sc)?;
    let report = audit(&out, &sc);
    let tx_name = match args.format {
        FormatArg::Tsv => "transactions.tsv",
        FormatArg::Jsonl => "transactions.jsonl",
    };
    write_with(&ws.path(tx_name), |w| match args.format {
        FormatArg::Tsv => write_transactions_tsv(w, &out.records),
        FormatArg::Jsonl => write_transactions_jsonl(w, &out.records),
    })?;
    write_with(&ws.path("labels.tsv"), |w| write_labels(w, &out.labels))?;
    write_json(
        &ws.path("annotations.json"),
        &serde_json::json!({ "fingerprint": ws.config.fingerprint(), "annotations": out.annotations, "audit": report }),
    )?;
    eprintln!(
        "{} records, {} phishing of {} addresses, {} audit violations",
        out.records.len(),
        out.annotations.phishing.len(),
        sc.n_nodes,
        report.violations.len()
    );
    ws.record("synth", &[tx_name, "labels.tsv", "annotations.json"])
}

fn load_records(path: &Path, format: Option<FormatArg>, skip: bool) -> Result<Vec<TransactionRecord>> {
    let format = match format {
        Some(FormatArg::Tsv) => TxFormat::Tsv,
        Some(FormatArg::Jsonl) => TxFormat::Jsonl,
        None if path.extension().is_some_and(|e| e == "jsonl") => TxFormat::Jsonl,
        None => TxFormat::Tsv,
    };
    let strictness = if skip { Strictness::Skip } else { Strictness::FailFast };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let outcome = parse_transactions(BufReader::new(file), format, strictness)?;
    for e in outcome.skipped.iter().take(10) {
        eprintln!("skipped {e}");
    }
    if outcome.skipped.len() > 10 {
        eprintln!("... {} malformed rows skipped in total", outcome.skipped.len());
    }
    Ok(outcome.records)
}

pub fn ingest(ws: &Workspace, args: &IngestArgs) -> Result<()> {
    let path = ws.transactions();
    require(&path, "pass --transactions or run `synth` first")?;
    let records = load_records(&path, args.format, args.skip_malformed)?;
    let labels = load_label_file(ws)?;
    let (kept, report) = clean(&records, &labels, &ws.config.clean_config());
    write_with(&ws.path(CLEAN), |w| write_transactions_tsv(w, &kept))?;
    write_with(&ws.path("labels.tsv"), |w| write_labels(w, &labels))?;
    write_json(
        &ws.path(CLEAN_REPORT),
        &serde_json::json!({ "fingerprint": ws.config.fingerprint(), "report": report }),
    )?;
    eprintln!("kept {} of {} records", report.retained_records, report.input_records);
    ws.record("ingest", &[CLEAN, "labels.tsv", CLEAN_REPORT])
}

pub fn sample(ws: &Workspace) -> Result<()> {
    let path = ws.path(CLEAN);
    require(&path, "run `ingest` first")?;
    let records = load_transactions(&path, TxFormat::Tsv, Strictness::FailFast)?.records;
    let labels = load_label_file(ws)?;
    let g = phishgraph::evaluation::build_subgraph(&records, &labels, &ws.config)?;
    write_with(&ws.path(SUBGRAPH), |w| g.write_edges_tsv(w))?;
    write_with(&ws.path(NODES), |w| g.write_nodes(w))?;
    let table = stat_feature_table(&g);
    write_with(&ws.path(FEATURES), |w| write_feature_tsv(w, &g, &table))?;
    eprintln!("subgraph with {} nodes and {} transactions", g.node_count(), g.edge_count());
    ws.record("sample", &[SUBGRAPH, NODES, FEATURES])
}

pub fn train(ws: &Workspace, args: &TrainArgs) -> Result<()> {
    let variant: AblationVariant = args.variant.into();
    let g = load_graph(ws)?;
    let labels = load_label_file(ws)?;
    let config = &ws.config;
    let (representations, training) = variant_representations(&g, variant, config)?;
    let dataset = assemble(&representations, &labels, config.train_fraction, config.stage_seed("split"))?;
    let model = fit_classifier(&dataset, config)?;

    let hyper = serde_json::json!({
        "variant": variant,
        "fingerprint": config.fingerprint(),
        "config": serde_json::from_str::<serde_json::Value>(&config.canonical_json())?,
    });
    let empty = ParamStore::new();
    let params = training.as_ref().map_or(&empty, |t| &t.params);
    save_checkpoint(ws.checkpoint(), params, &hyper)?;
    let model_path = ws.checkpoint().join(MODEL);
    write_with(&model_path, |w| writeln!(w, "{}", model.to_json().map_err(std::io::Error::other)?))?;
    write_with(&ws.path(REPRESENTATIONS), |w| write_representation_table(w, &representations, &labels))?;

    let mut outputs = vec![CHECKPOINT, REPRESENTATIONS];
    if let Some(t) = &training {
        write_json(&ws.path("loss_curve.json"), &t.loss_curve)?;
        write_with(&ws.path("edge_embeddings.tsv"), |w| {
            write_edge_embeddings(w, &g, &t.sequences, &t.edge_embeddings)
        })?;
        write_json(
            &ws.path("attention.json"),
            &attention_diagnostics(&g, &t.sequences, &t.coefficients),
        )?;
        outputs.extend(["loss_curve.json", "edge_embeddings.tsv", "attention.json"]);
        eprintln!(
            "representation loss {:.6} -> {:.6} over {} epochs",
            t.loss_curve.first().copied().unwrap_or(f64::NAN),
            t.loss_curve.last().copied().unwrap_or(f64::NAN),
            t.loss_curve.len()
        );
    }
    eprintln!("{} trees over {} features", model.trees.len(), dataset.dim());
    ws.record("train", &outputs)
}

struct Trained {
    variant: AblationVariant,
    model: GbdtModel,
}

fn load_trained(ws: &Workspace) -> Result<Trained> {
    let dir = ws.checkpoint();
    require(&dir.join("manifest.json"), "run `train` first")?;
    let (_, hyper) = load_checkpoint(&dir)?;
    let fingerprint = hyper.get("fingerprint").and_then(|v| v.as_str()).unwrap_or_default();
    if fingerprint != ws.config.fingerprint() {
        return Err(Error::Data(format!(
            "checkpoint was trained with configuration {fingerprint}, current configuration is {}; rerun `train`",
            ws.config.fingerprint()
        )));
    }
    let variant = serde_json::from_value(hyper["variant"].clone())?;
    let model_path = dir.join(MODEL);
    require(&model_path, "run `train` first")?;
    let text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    Ok(Trained {
        variant,
        model: GbdtModel::from_json(&text)?,
    })
}

fn load_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    require(path, "run `train` first")?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_representation_table(BufReader::new(file))
}

pub fn evaluate(ws: &Workspace) -> Result<()> {
    let trained = load_trained(ws)?;
    let rows = load_table(&ws.path(REPRESENTATIONS))?;
    let labels = load_label_file(ws)?;
    let config = &ws.config;
    let dataset = assemble_table(&rows, &labels, config.train_fraction, config.stage_seed("split"))?;
    let (report, scores, test_labels) = evaluate_model(&trained.model, &dataset, trained.variant, config)?;
    write_json(&ws.path("metrics.json"), &report)?;
    write_json(&ws.path("roc.json"), &roc_points(&scores, &test_labels)?)?;
    println!("{}", report.to_json()?);
    ws.record("evaluate", &["metrics.json", "roc.json"])
}

pub fn predict(ws: &Workspace, args: &PredictArgs) -> Result<()> {
    let trained = load_trained(ws)?;
    let table = args.table.clone().unwrap_or_else(|| ws.path(REPRESENTATIONS));
    let rows = load_table(&table)?;
    let features: Vec<Vec<f64>> = rows.iter().map(|(_, f)| f.clone()).collect();
    let scores = trained.model.predict_all(&features)?;
    write_with(&ws.path("predictions.tsv"), |w| {
        for ((address, _), s) in rows.iter().zip(&scores) {
            writeln!(w, "{address}\t{s}")?;
        }
        Ok(())
    })?;
    eprintln!("scored {} addresses", rows.len());
    ws.record("predict", &["predictions.tsv"])
}

#[derive(Serialize)]
struct AblationOutput {
    reports: Vec<MetricsReport>,
    means: BTreeMap<AblationVariant, MeanMetrics>,
}

pub fn ablate(ws: &Workspace, args: &AblateArgs) -> Result<()> {
    let g = load_graph(ws)?;
    let labels = load_label_file(ws)?;
    let variants: Vec<AblationVariant> = if args.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        args.variants.iter().map(|&v| v.into()).collect()
    };
    let seeds = if args.seeds.is_empty() { vec![ws.config.seed] } else { args.seeds.clone() };
    let jobs: Vec<(AblationVariant, RunConfig)> = variants
        .iter()
        .flat_map(|&v| {
            seeds.iter().map(move |&s| {
                (
                    v,
                    RunConfig {
                        seed: s,
                        ..ws.config.clone()
                    },
                )
            })
        })
        .collect();
    let reports: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|(v, c)| phishgraph::evaluation::run_variant(&g, &labels, *v, c))
        .collect::<Result<_>>()?;
    let means = variants
        .iter()
        .filter_map(|&v| {
            let mine: Vec<MetricsReport> = reports.iter().filter(|r| r.variant == v).cloned().collect();
            mean_metrics(&mine).map(|m| (v, m))
        })
        .collect();
    let out = AblationOutput { reports, means };
    for (v, m) in &out.means {
        eprintln!("{v:14} AUC {:.4}  F1 {:.4}  ({} runs)", m.auc, m.f1, m.runs);
    }
    write_json(&ws.path("ablation.json"), &out)?;
    ws.record("ablate", &["ablation.json"])
}

fn sweep_param(args: &SweepArgs) -> Result<SweepParam> {
    Ok(match args.param {
        SweepParamArg::SeqLength if args.values.is_empty() => SweepParam::default_seq_length(),
        SweepParamArg::AttentionSize if args.values.is_empty() => SweepParam::default_attention_size(),
        SweepParamArg::SeqLength => SweepParam::SeqLength(
            args.values
                .iter()
                .map(|v| v.parse::<SeqLength>())
                .collect::<Result<_>>()?,
        ),
        SweepParamArg::AttentionSize => SweepParam::AttentionSize(
            args.values
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("attention size {v:?} is not a count")))
                })
                .collect::<Result<_>>()?,
        ),
    })
}

pub fn sweep_stage(ws: &Workspace, args: &SweepArgs) -> Result<()> {
    let param = sweep_param(args)?;
    let g = load_graph(ws)?;
    let labels = load_label_file(ws)?;
    let seeds = if args.seeds.is_empty() { vec![ws.config.seed] } else { args.seeds.clone() };
    let reports = sweep(&g, &labels, &param, &ws.config, &seeds)?;
    for r in &reports {
        let value = match args.param {
            SweepParamArg::SeqLength => &r.params["seq_length"],
            SweepParamArg::AttentionSize => &r.params["attention_heads"],
        };
        eprintln!("{value:>10}  seed {:<4} AUC {:.4}", r.seed, r.auc);
    }
    write_json(&ws.path("sweep.json"), &reports)?;
    ws.record("sweep", &["sweep.json"])
}
