//! Seeded synthetic transaction networks with planted phishing behaviour.
//!
//! Background activity is a random counterparty graph with log-normal
//! amounts and uniformly spread timestamps. Each phishing node receives
//! short transaction runs from `victim_fan_in` distinct victims inside one
//! burst window and forwards most of the value to cash-out nodes before the
//! window closes. Every victim run has its short gaps first and one long
//! gap last. Phishing nodes take no part in background activity.
//!
//! Decoy nodes are normal nodes planted the same way and then reflected in
//! time inside their window: they pay out first, then collect, and each
//! customer run puts its long gap first. Node-level statistics and per-pair
//! summaries therefore match between phishing and decoy nodes; only the
//! order of events differs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::ingest::{Label, LabelSet, TransactionRecord};

const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub phishing_fraction: f64,
    /// Decoy nodes per phishing node.
    pub decoy_ratio: f64,
    /// Mean number of background counterparties per node.
    pub mean_counterparties: f64,
    /// Mean transactions per background pair.
    pub activity_rate: f64,
    pub victim_fan_in: usize,
    /// Transactions each victim sends.
    pub victim_txs: usize,
    pub burst_window: i64,
    /// Number of distinct cash-out nodes per phishing node.
    pub cashout_hops: usize,
    pub cashout_txs: usize,
    pub min_forward_share: f64,
    pub max_forward_share: f64,
    pub short_gap: (i64, i64),
    pub long_gap: (i64, i64),
    pub amount_mu: f64,
    pub amount_sigma: f64,
    pub victim_amount_mu: f64,
    pub victim_amount_sigma: f64,
    pub zero_amount_fraction: f64,
    pub start: i64,
    pub horizon: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 2000,
            phishing_fraction: 0.02,
            decoy_ratio: 10.0,
            mean_counterparties: 5.0,
            activity_rate: 3.0,
            victim_fan_in: 6,
            victim_txs: 4,
            burst_window: 3 * DAY,
            cashout_hops: 2,
            cashout_txs: 2,
            min_forward_share: 0.85,
            max_forward_share: 0.95,
            short_gap: (10, 600),
            long_gap: (DAY / 2, 3 * DAY / 2),
            amount_mu: 0.0,
            amount_sigma: 1.0,
            victim_amount_mu: -1.5,
            victim_amount_sigma: 0.5,
            zero_amount_fraction: 0.02,
            // 2017-01-01T00:00:00Z
            start: 1_483_228_800,
            horizon: 180 * DAY,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn phishing_count(&self) -> usize {
        (self.n_nodes as f64 * self.phishing_fraction).round() as usize
    }

    pub fn decoy_count(&self) -> usize {
        (self.phishing_count() as f64 * self.decoy_ratio).round() as usize
    }

    /// Latest offset from the burst start at which a victim run may begin.
    fn victim_spread(&self) -> i64 {
        self.burst_window / 5
    }

    fn victim_run_span(&self) -> i64 {
        (self.victim_txs.saturating_sub(2) as i64) * self.short_gap.1 + self.long_gap.1
    }

    fn cashout_run_span(&self) -> i64 {
        (self.cashout_txs.saturating_sub(1) as i64) * self.short_gap.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_nodes < 2 {
            return bad("need at least 2 nodes".into());
        }
        if !(self.phishing_fraction > 0.0 && self.phishing_fraction < 1.0) {
            return bad(format!("phishing_fraction {} outside (0, 1)", self.phishing_fraction));
        }
        if self.phishing_count() == 0 {
            return bad("phishing_fraction yields no phishing nodes".into());
        }
        if !(self.decoy_ratio >= 0.0) || !(self.mean_counterparties > 0.0) || !(self.activity_rate >= 1.0) {
            return bad("decoy_ratio >= 0, mean_counterparties > 0 and activity_rate >= 1 required".into());
        }
        if self.victim_fan_in == 0 || self.victim_txs == 0 || self.cashout_hops == 0 || self.cashout_txs == 0 {
            return bad("fan-in, victim_txs, cashout_hops and cashout_txs must be positive".into());
        }
        if !(0.8..=1.0).contains(&self.min_forward_share) || self.max_forward_share < self.min_forward_share || self.max_forward_share > 1.0 {
            return bad("forward shares must satisfy 0.8 <= min <= max <= 1".into());
        }
        if self.short_gap.0 < 1 || self.short_gap.1 < self.short_gap.0 || self.long_gap.1 < self.long_gap.0 || self.long_gap.0 < self.short_gap.1 {
            return bad("gap ranges must be ordered: 1 <= short <= long".into());
        }
        if !(self.zero_amount_fraction >= 0.0 && self.zero_amount_fraction < 1.0) || !(self.amount_sigma > 0.0) || !(self.victim_amount_sigma > 0.0) {
            return bad("invalid amount distribution".into());
        }
        let burst_needs = self.victim_spread() + self.victim_run_span() + 2 * self.short_gap.1 + self.cashout_run_span();
        if self.burst_window <= 0 || burst_needs > self.burst_window {
            return bad(format!(
                "burst window {}s cannot hold victim runs and cash-out ({}s needed)",
                self.burst_window, burst_needs
            ));
        }
        if self.horizon < self.burst_window || self.horizon < self.victim_run_span() || self.start <= 0 {
            return bad("horizon must cover the burst window".into());
        }
        let roles = self.phishing_count() + self.decoy_count();
        let partners = self.victim_fan_in + self.cashout_hops;
        if roles >= self.n_nodes || partners > self.n_nodes - roles {
            return bad(format!(
                "{} nodes cannot host {roles} phishing/decoy nodes with {partners} partners each",
                self.n_nodes
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhishingAnnotation {
    pub address: String,
    pub victims: Vec<String>,
    pub cashout: Vec<String>,
    pub burst_start: i64,
    pub burst_end: i64,
    pub received: f64,
    pub forwarded: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub config: SynthConfig,
    pub phishing: Vec<PhishingAnnotation>,
    pub decoys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    /// Sorted by timestamp, then sender, receiver and amount.
    pub records: Vec<TransactionRecord>,
    pub labels: LabelSet,
    pub annotations: Annotations,
}

fn address_for(seed: u64, index: usize) -> String {
    let mut h = Sha256::new();
    h.update(b"synthetic-address");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    format!("0x{}", hex(&h.finalize()[..20]))
}

/// Amounts are kept at nano-ETH resolution.
fn quantize(a: f64) -> f64 {
    (a * 1e9).round() / 1e9
}

struct Builder<'a> {
    config: &'a SynthConfig,
    rng: ChaCha8Rng,
    addresses: Vec<String>,
    adjacent: Vec<BTreeSet<usize>>,
    records: Vec<TransactionRecord>,
    background_amount: LogNormal<f64>,
    victim_amount: LogNormal<f64>,
}

impl Builder<'_> {
    fn push(&mut self, from: usize, to: usize, amount: f64, ts: i64) {
        let rec = TransactionRecord::new(&self.addresses[from], &self.addresses[to], quantize(amount), ts)
            .expect("generated records are valid");
        self.records.push(rec);
        self.adjacent[from].insert(to);
        self.adjacent[to].insert(from);
    }

    fn gap(&mut self, range: (i64, i64)) -> i64 {
        self.rng.random_range(range.0..=range.1)
    }

    /// Random counterparty pairs among `pool`; planted accounts stay single-purpose.
    fn background(&mut self, pool: &[usize]) -> Result<()> {
        let c = self.config;
        let n = pool.len();
        let max_pairs = n * n.saturating_sub(1) / 2;
        let target = ((n as f64 * c.mean_counterparties / 2.0).round() as usize).min(max_pairs);
        let mut pairs = BTreeSet::new();
        while pairs.len() < target {
            let u = pool[self.rng.random_range(0..n)];
            let v = pool[self.rng.random_range(0..n)];
            if u != v {
                pairs.insert((u.min(v), u.max(v)));
            }
        }
        let extra = Poisson::new(c.activity_rate - 1.0 + f64::MIN_POSITIVE)
            .map_err(|e| Error::Config(format!("activity rate: {e}")))?;
        for (u, v) in pairs {
            let count = 1 + extra.sample(&mut self.rng) as usize;
            let (a, b) = if self.rng.random_bool(0.5) { (u, v) } else { (v, u) };
            for _ in 0..count {
                let (from, to) = if self.rng.random_bool(0.8) { (a, b) } else { (b, a) };
                let ts = c.start + self.rng.random_range(0..c.horizon);
                let amount = if self.rng.random_bool(c.zero_amount_fraction) {
                    0.0
                } else {
                    self.background_amount.sample(&mut self.rng)
                };
                self.push(from, to, amount, ts);
            }
        }
        Ok(())
    }

    /// Distinct normal partners not yet adjacent to `node`.
    fn partners(&mut self, node: usize, pool: &[usize], count: usize) -> Result<Vec<usize>> {
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&p| p != node && !self.adjacent[node].contains(&p))
            .collect();
        if candidates.len() < count {
            return Err(Error::Config(format!(
                "node {} has only {} unconnected partners, {count} needed",
                self.addresses[node],
                candidates.len()
            )));
        }
        Ok(candidates.choose_multiple(&mut self.rng, count).copied().collect())
    }

    /// Gaps of one victim run: short gaps then a long one.
    fn run_gaps(&mut self) -> Vec<i64> {
        let m = self.config.victim_txs;
        let mut gaps: Vec<i64> = (0..m.saturating_sub(1))
            .map(|k| {
                let long = k + 2 == m;
                let range = if long { self.config.long_gap } else { self.config.short_gap };
                self.gap(range)
            })
            .collect();
        if m == 1 {
            gaps.clear();
        }
        gaps
    }

    fn victim_run(&mut self, from: usize, to: usize, first: i64) -> (f64, i64) {
        let gaps = self.run_gaps();
        let mut ts = first;
        let mut total = 0.0;
        for k in 0..self.config.victim_txs {
            if k > 0 {
                ts += gaps[k - 1];
            }
            let amount = quantize(self.victim_amount.sample(&mut self.rng));
            total += amount;
            self.push(from, to, amount, ts);
        }
        (total, ts)
    }

    /// Splits `value` over hops × txs and returns the amounts.
    fn forward_amounts(&mut self, value: f64) -> Vec<f64> {
        let c = self.config;
        let slots = c.cashout_hops * c.cashout_txs;
        let weights: Vec<f64> = (0..slots).map(|_| self.rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        // rounding down keeps the forwarded sum at or below the drawn share
        weights
            .iter()
            .map(|w| (value * w / total * 1e9).floor() / 1e9)
            .collect()
    }

    /// Plants one fan-in/cash-out instance. With `mirrored` every timestamp is
    /// reflected inside the burst window: payouts come first and each
    /// customer run has its gaps in reverse order.
    fn planted(&mut self, node: usize, pool: &[usize], mirrored: bool) -> Result<PhishingAnnotation> {
        let c = self.config;
        let first_record = self.records.len();
        let victims = self.partners(node, pool, c.victim_fan_in)?;
        let non_victims: Vec<usize> = pool.iter().copied().filter(|p| !victims.contains(p)).collect();
        let cashout = self.partners(node, &non_victims, c.cashout_hops)?;
        let burst_start = c.start + self.rng.random_range(0..=c.horizon - c.burst_window);
        let mut received = 0.0;
        let mut last = burst_start;
        for &v in &victims {
            let first = burst_start + self.rng.random_range(0..=c.victim_spread());
            let (sum, end) = self.victim_run(v, node, first);
            received += sum;
            last = last.max(end);
        }
        let share = self.rng.random_range(c.min_forward_share..=c.max_forward_share);
        let amounts = self.forward_amounts(received * share);
        let deadline = burst_start + c.burst_window - self.config.cashout_run_span();
        let mut forwarded = 0.0;
        let mut slot = 0;
        for &h in &cashout {
            let mut ts = self.rng.random_range(last + 1..=last.max(deadline - 1).max(last + 1));
            for k in 0..c.cashout_txs {
                if k > 0 {
                    ts += self.gap(c.short_gap);
                }
                forwarded += amounts[slot];
                self.push(node, h, amounts[slot], ts.min(burst_start + c.burst_window));
                slot += 1;
            }
        }
        if mirrored {
            let pivot = 2 * burst_start + c.burst_window;
            for r in &mut self.records[first_record..] {
                r.timestamp = pivot - r.timestamp;
            }
        }
        Ok(PhishingAnnotation {
            address: self.addresses[node].clone(),
            victims: victims.iter().map(|&v| self.addresses[v].clone()).collect(),
            cashout: cashout.iter().map(|&h| self.addresses[h].clone()).collect(),
            burst_start,
            burst_end: burst_start + c.burst_window,
            received,
            forwarded,
        })
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let n = config.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_phish = config.phishing_count();
    let n_decoy = config.decoy_count();
    let phishing: Vec<usize> = order[..n_phish].to_vec();
    let decoys: Vec<usize> = order[n_phish..n_phish + n_decoy].to_vec();
    let mut pool: Vec<usize> = order[n_phish + n_decoy..].to_vec();
    pool.sort_unstable();

    let mut b = Builder {
        config,
        rng,
        addresses: (0..n).map(|i| address_for(config.seed, i)).collect(),
        adjacent: vec![BTreeSet::new(); n],
        records: Vec::new(),
        background_amount: LogNormal::new(config.amount_mu, config.amount_sigma)
            .map_err(|e| Error::Config(format!("amount distribution: {e}")))?,
        victim_amount: LogNormal::new(config.victim_amount_mu, config.victim_amount_sigma)
            .map_err(|e| Error::Config(format!("victim amount distribution: {e}")))?,
    };
    b.background(&pool)?;
    let mut annotations = Vec::with_capacity(n_phish);
    for &p in &phishing {
        annotations.push(b.planted(p, &pool, false)?);
    }
    for &d in &decoys {
        b.planted(d, &pool, true)?;
    }

    let mut labels = LabelSet::default();
    for (i, a) in b.addresses.iter().enumerate() {
        let label = if phishing.contains(&i) { Label::Phishing } else { Label::Normal };
        labels.insert(a, label)?;
    }
    let mut records = b.records;
    records.sort_by(|x, y| {
        x.timestamp
            .cmp(&y.timestamp)
            .then_with(|| x.from.cmp(&y.from))
            .then_with(|| x.to.cmp(&y.to))
            .then_with(|| x.amount.total_cmp(&y.amount))
    });
    annotations.sort_by(|x, y| x.address.cmp(&y.address));
    let mut decoy_addresses: Vec<String> = decoys.iter().map(|&d| b.addresses[d].clone()).collect();
    decoy_addresses.sort();
    Ok(SynthOutput {
        records,
        labels,
        annotations: Annotations {
            config: config.clone(),
            phishing: annotations,
            decoys: decoy_addresses,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub address: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    /// At most one entry per phishing node: the first failed check.
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn audit_node(
    records: &[&TransactionRecord],
    ann: &PhishingAnnotation,
    config: &SynthConfig,
) -> std::result::Result<(), String> {
    let victims: BTreeSet<&str> = ann.victims.iter().map(String::as_str).collect();
    let cashout: BTreeSet<&str> = ann.cashout.iter().map(String::as_str).collect();
    let inflow: Vec<&&TransactionRecord> = records
        .iter()
        .filter(|r| r.to == ann.address && victims.contains(r.from.as_str()))
        .collect();
    let senders: BTreeSet<&str> = inflow.iter().map(|r| r.from.as_str()).collect();
    if senders.len() < config.victim_fan_in {
        return Err(format!(
            "{} distinct victims, expected at least {}",
            senders.len(),
            config.victim_fan_in
        ));
    }
    let first = inflow.iter().map(|r| r.timestamp).min().unwrap_or(0);
    let last = inflow.iter().map(|r| r.timestamp).max().unwrap_or(0);
    if last - first > config.burst_window {
        return Err(format!(
            "victim transfers span {}s, window is {}s",
            last - first,
            config.burst_window
        ));
    }
    let window_end = first + config.burst_window;
    let received: f64 = inflow.iter().map(|r| r.amount).sum();
    let forwarded: f64 = records
        .iter()
        .filter(|r| {
            r.from == ann.address
                && cashout.contains(r.to.as_str())
                && r.timestamp >= first
                && r.timestamp <= window_end
        })
        .map(|r| r.amount)
        .sum();
    if forwarded < 0.8 * received {
        return Err(format!(
            "forwarded {forwarded} of {received} received inside the window"
        ));
    }
    let windows = (config.horizon + config.burst_window - 1) / config.burst_window;
    let mut per_window = vec![0.0; windows.max(1) as usize];
    for r in records.iter().filter(|r| r.to == ann.address && !victims.contains(r.from.as_str())) {
        let k = (r.timestamp - config.start).div_euclid(config.burst_window);
        if (0..windows).contains(&k) {
            per_window[k as usize] += r.amount;
        }
    }
    let background = median(per_window);
    if received < 5.0 * background {
        return Err(format!(
            "burst inflow {received} is below 5x the background window median {background}"
        ));
    }
    Ok(())
}

/// Re-checks every planted-pattern invariant against the records.
pub fn audit(output: &SynthOutput, config: &SynthConfig) -> AuditReport {
    let mut by_address: BTreeMap<&str, Vec<&TransactionRecord>> = BTreeMap::new();
    for r in &output.records {
        by_address.entry(r.from.as_str()).or_default().push(r);
        if r.to != r.from {
            by_address.entry(r.to.as_str()).or_default().push(r);
        }
    }
    let annotated: BTreeMap<&str, &PhishingAnnotation> = output
        .annotations
        .phishing
        .iter()
        .map(|a| (a.address.as_str(), a))
        .collect();
    let mut report = AuditReport::default();
    for (address, label) in output.labels.iter() {
        if label != Label::Phishing {
            continue;
        }
        report.checked += 1;
        let outcome = match annotated.get(address) {
            None => Err("phishing label without a planted pattern".to_string()),
            Some(ann) => audit_node(
                by_address.get(address).map(Vec::as_slice).unwrap_or(&[]),
                ann,
                config,
            ),
        };
        if let Err(reason) = outcome {
            report.violations.push(Violation {
                address: address.to_string(),
                reason,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{clean, CleanConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_nodes: 400,
            phishing_fraction: 0.05,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.annotations, b.annotations);
        let mut other = small();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().records, a.records);
    }

    #[test]
    fn phishing_count_follows_fraction() {
        let out = generate(&SynthConfig {
            n_nodes: 1000,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(out.labels.count(Label::Phishing), 20);
        assert_eq!(out.labels.len(), 1000);
        assert_eq!(out.annotations.decoys.len(), 200);
    }

    #[test]
    fn fresh_output_audits_clean() {
        let c = small();
        let out = generate(&c).unwrap();
        let report = audit(&out, &c);
        assert_eq!(report.checked, 20);
        assert!(report.is_clean(), "{:?}", report.violations);
        for ann in &out.annotations.phishing {
            assert!(ann.forwarded >= 0.8 * ann.received);
        }
    }

    #[test]
    fn deleting_one_burst_gives_one_violation() {
        let c = small();
        let mut out = generate(&c).unwrap();
        let target = out.annotations.phishing[0].clone();
        out.records
            .retain(|r| !(r.to == target.address && target.victims.contains(&r.from)));
        let report = audit(&out, &c);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].address, target.address);
    }

    #[test]
    fn shuffled_burst_timestamps_still_audit_clean() {
        let c = small();
        let mut out = generate(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ann in &out.annotations.phishing {
            let idx: Vec<usize> = out
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.to == ann.address && ann.victims.contains(&r.from))
                .map(|(i, _)| i)
                .collect();
            let mut stamps: Vec<i64> = idx.iter().map(|&i| out.records[i].timestamp).collect();
            stamps.shuffle(&mut rng);
            for (&i, t) in idx.iter().zip(stamps) {
                out.records[i].timestamp = t;
            }
        }
        assert!(audit(&out, &c).is_clean());
    }

    #[test]
    fn cleaning_keeps_phishing_nodes() {
        let c = SynthConfig::default();
        let out = generate(&c).unwrap();
        let (kept, _) = clean(&out.records, &out.labels, &CleanConfig::default());
        let present: BTreeSet<&str> = kept.iter().flat_map(|r| [r.from.as_str(), r.to.as_str()]).collect();
        let lost = out
            .annotations
            .phishing
            .iter()
            .filter(|a| !present.contains(a.address.as_str()))
            .count();
        assert!((lost as f64) < 0.3 * c.phishing_count() as f64);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = SynthConfig {
            n_nodes: 10,
            phishing_fraction: 0.2,
            victim_fan_in: 20,
            ..Default::default()
        };
        assert!(matches!(generate(&too_many), Err(Error::Config(_))));
        let tight = SynthConfig {
            burst_window: 3_600,
            ..Default::default()
        };
        assert!(generate(&tight).is_err());
        let zero = SynthConfig {
            phishing_fraction: 0.0,
            ..Default::default()
        };
        assert!(generate(&zero).is_err());
    }

    /// Burst statistic: over windows opening at an incoming transaction,
    /// distinct senders times the share of that inflow sent on before the
    /// window closes.
    fn burst_score(records: &[TransactionRecord], window: i64) -> BTreeMap<String, f64> {
        let mut inflow: BTreeMap<&str, Vec<(i64, &str, f64)>> = BTreeMap::new();
        let mut outflow: BTreeMap<&str, Vec<(i64, f64)>> = BTreeMap::new();
        for r in records {
            inflow.entry(&r.to).or_default().push((r.timestamp, &r.from, r.amount));
            outflow.entry(&r.from).or_default().push((r.timestamp, r.amount));
        }
        let mut scores = BTreeMap::new();
        for (node, mut txs) in inflow {
            txs.sort_by(|a, b| a.0.cmp(&b.0));
            let out = outflow.get(node).map(Vec::as_slice).unwrap_or(&[]);
            let mut best = 0.0f64;
            for (i, &(t0, _, _)) in txs.iter().enumerate() {
                let inside: Vec<_> = txs[i..].iter().take_while(|(t, _, _)| *t - t0 <= window).collect();
                let senders: BTreeSet<&str> = inside.iter().map(|(_, s, _)| *s).collect();
                let received: f64 = inside.iter().map(|(_, _, a)| a).sum();
                let sent: f64 = out.iter().filter(|(t, _)| *t >= t0 && *t - t0 <= window).map(|(_, a)| a).sum();
                let share = if received > 0.0 { (sent / received).min(1.0) } else { 0.0 };
                best = best.max(senders.len() as f64 * share);
            }
            scores.insert(node.to_string(), best);
        }
        scores
    }

    #[test]
    fn burst_statistic_separates_classes() {
        let c = SynthConfig::default();
        let out = generate(&c).unwrap();
        let scores = burst_score(&out.records, c.burst_window);
        let score = |a: &str| scores.get(a).copied().unwrap_or(0.0);
        let (pos, neg): (Vec<_>, Vec<_>) = out.labels.iter().partition(|(_, l)| *l == Label::Phishing);
        let mut wins = 0.0;
        for (p, _) in &pos {
            for (q, _) in &neg {
                let (sp, sq) = (score(p), score(q));
                wins += if sp > sq { 1.0 } else if sp == sq { 0.5 } else { 0.0 };
            }
        }
        let auc = wins / (pos.len() * neg.len()) as f64;
        assert!(auc > 0.9, "burst-statistic AUC {auc}");
    }
}
