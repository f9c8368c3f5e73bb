//! Transaction and label file parsing plus the cleaning rules applied before
//! graph construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2016-08-02T00:00:00Z.
pub const DEFAULT_CUTOFF: i64 = 1_470_096_000;
pub const DEFAULT_MIN_RECORDS: usize = 5;
pub const DEFAULT_MAX_RECORDS: usize = 1000;

/// One directed value transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub from: String,
    pub to: String,
    /// ETH.
    pub amount: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

impl TransactionRecord {
    pub fn new(from: &str, to: &str, amount: f64, timestamp: i64) -> Result<Self> {
        let record = TransactionRecord {
            from: normalize_address(from)?,
            to: normalize_address(to)?,
            amount,
            timestamp,
        };
        record.validate()?;
        Ok(record)
    }

    fn validate(&self) -> Result<()> {
        if !self.amount.is_finite() {
            return Err(Error::Data(format!("non-finite amount {}", self.amount)));
        }
        if self.amount < 0.0 {
            return Err(Error::Data("negative amount".into()));
        }
        if self.timestamp <= 0 {
            return Err(Error::Data(format!(
                "timestamp must be positive, got {}",
                self.timestamp
            )));
        }
        Ok(())
    }

    pub fn is_self_transfer(&self) -> bool {
        self.from == self.to
    }
}

/// Validates an address (`0x` followed by 40 hex digits) and lowercases it.
pub fn normalize_address(raw: &str) -> Result<String> {
    let raw = raw.trim();
    let hex = raw
        .strip_prefix("0x")
        .or_else(|| raw.strip_prefix("0X"))
        .ok_or_else(|| Error::Data(format!("malformed address {raw:?}")))?;
    if hex.len() != 40 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Data(format!("malformed address {raw:?}")));
    }
    Ok(format!("0x{}", hex.to_ascii_lowercase()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxFormat {
    Tsv,
    Jsonl,
}

impl FromStr for TxFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(TxFormat::Tsv),
            "jsonl" => Ok(TxFormat::Jsonl),
            other => Err(Error::Config(format!("unknown transaction format {other:?}"))),
        }
    }
}

/// Whether a malformed row aborts loading or is skipped and reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strictness {
    FailFast,
    Skip,
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub records: Vec<TransactionRecord>,
    /// Rows skipped under [`Strictness::Skip`], as parse errors carrying line numbers.
    pub skipped: Vec<Error>,
}

pub fn load_transactions(
    path: impl AsRef<Path>,
    format: TxFormat,
    strictness: Strictness,
) -> Result<LoadOutcome> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_transactions(BufReader::new(file), format, strictness)
}

pub fn parse_transactions<R: BufRead>(
    reader: R,
    format: TxFormat,
    strictness: Strictness,
) -> Result<LoadOutcome> {
    let mut outcome = LoadOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            TxFormat::Tsv => parse_tsv_row(&line),
            TxFormat::Jsonl => parse_jsonl_row(&line),
        }
        .map_err(|message| Error::Parse {
            line: line_no,
            message,
        });
        match (parsed, strictness) {
            (Ok(record), _) => outcome.records.push(record),
            (Err(e), Strictness::FailFast) => return Err(e),
            (Err(e), Strictness::Skip) => outcome.skipped.push(e),
        }
    }
    Ok(outcome)
}

fn build_record(from: &str, to: &str, amount: f64, timestamp: i64) -> Result<TransactionRecord, String> {
    if amount < 0.0 {
        return Err("negative amount".into());
    }
    TransactionRecord::new(from, to, amount, timestamp).map_err(|e| match e {
        Error::Data(msg) => msg,
        other => other.to_string(),
    })
}

fn parse_amount(raw: &str) -> Result<f64, String> {
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("malformed amount {raw:?}"))?;
    if !value.is_finite() {
        return Err(format!("malformed amount {raw:?}"));
    }
    Ok(value)
}

fn parse_timestamp(raw: &str) -> Result<i64, String> {
    raw.trim()
        .parse()
        .map_err(|_| format!("non-integer timestamp {raw:?}"))
}

fn parse_tsv_row(line: &str) -> Result<TransactionRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 {
        return Err(format!("expected 4 tab-separated columns, found {}", cols.len()));
    }
    build_record(cols[0], cols[1], parse_amount(cols[2])?, parse_timestamp(cols[3])?)
}

fn parse_jsonl_row(line: &str) -> Result<TransactionRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let field = |key: &str| {
        value
            .get(key)
            .ok_or_else(|| format!("missing key {key:?}"))
    };
    let text = |key: &str| -> Result<String, String> {
        match field(key)? {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            _ => Err(format!("key {key:?} must be a string or number")),
        }
    };
    let from = text("from")?;
    let to = text("to")?;
    let amount = parse_amount(&text("value")?)?;
    let timestamp = parse_timestamp(&text("timestamp")?)?;
    build_record(&from, &to, amount, timestamp)
}

pub fn write_transactions_tsv<W: Write>(mut out: W, records: &[TransactionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.from, r.to, r.amount, r.timestamp)?;
    }
    Ok(())
}

pub fn write_transactions_jsonl<W: Write>(mut out: W, records: &[TransactionRecord]) -> std::io::Result<()> {
    for r in records {
        let row = serde_json::json!({
            "from": r.from,
            "to": r.to,
            "value": r.amount,
            "timestamp": r.timestamp,
        });
        writeln!(out, "{row}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Phishing,
    Normal,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Phishing => "phishing",
            Label::Normal => "normal",
            Label::Unlabeled => "unlabeled",
        }
    }

    /// `Some(true)` for phishing, `Some(false)` for normal.
    pub fn as_target(self) -> Option<bool> {
        match self {
            Label::Phishing => Some(true),
            Label::Normal => Some(false),
            Label::Unlabeled => None,
        }
    }
}

/// Ground-truth labels keyed by address. Addresses not present are unlabeled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: BTreeMap<String, Label>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a label; re-inserting the same label is a no-op, a different one is an error.
    pub fn insert(&mut self, address: &str, label: Label) -> Result<()> {
        let address = normalize_address(address)?;
        if label == Label::Unlabeled {
            return Ok(());
        }
        match self.labels.get(&address) {
            Some(existing) if *existing != label => Err(Error::ConflictingLabel { address }),
            Some(_) => Ok(()),
            None => {
                self.labels.insert(address, label);
                Ok(())
            }
        }
    }

    pub fn get(&self, address: &str) -> Label {
        self.labels.get(address).copied().unwrap_or(Label::Unlabeled)
    }

    pub fn is_phishing(&self, address: &str) -> bool {
        self.get(address) == Label::Phishing
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Label)> {
        self.labels.iter().map(|(a, l)| (a.as_str(), *l))
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.values().filter(|l| **l == label).count()
    }

    pub fn remove(&mut self, address: &str) -> Option<Label> {
        self.labels.remove(address)
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_labels(BufReader::new(file))
}

pub fn parse_labels<R: BufRead>(reader: R) -> Result<LabelSet> {
    let mut set = LabelSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let (address, token) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected address<TAB>label".into(),
        })?;
        let label = match token.trim() {
            "phishing" => Label::Phishing,
            "normal" => Label::Normal,
            other => {
                return Err(Error::UnknownLabel {
                    line: line_no,
                    token: other.to_string(),
                })
            }
        };
        set.insert(address, label).map_err(|e| match e {
            Error::Data(message) => Error::Parse { line: line_no, message },
            other => other,
        })?;
    }
    Ok(set)
}

pub fn write_labels<W: Write>(mut out: W, labels: &LabelSet) -> std::io::Result<()> {
    for (address, label) in labels.iter() {
        writeln!(out, "{address}\t{}", label.as_str())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    /// Records strictly before this epoch second are dropped.
    pub cutoff: i64,
    pub min_records: usize,
    pub max_records: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            cutoff: DEFAULT_CUTOFF,
            min_records: DEFAULT_MIN_RECORDS,
            max_records: DEFAULT_MAX_RECORDS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_records: usize,
    pub removed_by_timestamp: usize,
    pub removed_by_degree: usize,
    pub retained_records: usize,
    pub removed_addresses_low_degree: usize,
    pub removed_addresses_high_degree: usize,
    /// Phishing addresses outside the degree window that were kept anyway.
    pub exempt_phishing_addresses: usize,
}

/// Applies the timestamp cutoff, then a single pass of the per-address
/// transaction-count window. Labeled phishing addresses are never removed by
/// the count rule.
pub fn clean(
    records: &[TransactionRecord],
    labels: &LabelSet,
    config: &CleanConfig,
) -> (Vec<TransactionRecord>, CleanReport) {
    let mut report = CleanReport {
        input_records: records.len(),
        ..Default::default()
    };

    let recent: Vec<&TransactionRecord> = records
        .iter()
        .filter(|r| r.timestamp >= config.cutoff)
        .collect();
    report.removed_by_timestamp = records.len() - recent.len();

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &recent {
        *counts.entry(r.from.as_str()).or_default() += 1;
        if !r.is_self_transfer() {
            *counts.entry(r.to.as_str()).or_default() += 1;
        }
    }

    let mut removed: HashSet<&str> = HashSet::new();
    for (&address, &count) in &counts {
        let low = count < config.min_records;
        let high = count > config.max_records;
        if !(low || high) {
            continue;
        }
        if labels.is_phishing(address) {
            report.exempt_phishing_addresses += 1;
            continue;
        }
        if low {
            report.removed_addresses_low_degree += 1;
        } else {
            report.removed_addresses_high_degree += 1;
        }
        removed.insert(address);
    }

    let kept: Vec<TransactionRecord> = recent
        .into_iter()
        .filter(|r| !removed.contains(r.from.as_str()) && !removed.contains(r.to.as_str()))
        .cloned()
        .collect();
    report.retained_records = kept.len();
    report.removed_by_degree = records.len() - report.removed_by_timestamp - kept.len();
    (kept, report)
}
