//! Query budgets and per-minibatch sample selection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{cer, CerValue};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetPolicy {
    pub budget_percent: f64,
    #[serde(default = "default_min_per_batch")]
    pub min_per_batch: usize,
}

fn default_min_per_batch() -> usize {
    1
}

impl BudgetPolicy {
    pub fn new(budget_percent: f64) -> Result<Self> {
        let p = BudgetPolicy {
            budget_percent,
            min_per_batch: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.budget_percent) {
            return Err(Error::InvalidArgument(format!(
                "budget_percent must lie in [0, 100], got {}",
                self.budget_percent
            )));
        }
        if self.min_per_batch == 0 {
            return Err(Error::InvalidArgument("min_per_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-batch query plan. Up to one query per sample, the strategy picks
/// `k_select` samples. Past that, every sample is queried `jitter_repeats`
/// times and the strategy picks `extra` of them for one more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub k_select: usize,
    pub jitter_repeats: usize,
    pub extra: usize,
    pub total_queries: usize,
}

impl BatchPlan {
    fn none() -> Self {
        BatchPlan {
            k_select: 0,
            jitter_repeats: 0,
            extra: 0,
            total_queries: 0,
        }
    }
}

/// `2nB/100` rounded half away from zero, computed in one division so that
/// budgets like 2.5% of 40 come out exact.
fn rounded_raw(percent: f64, batch_size: usize) -> usize {
    (2.0 * percent * batch_size as f64 / 100.0).round() as usize
}

pub fn compute_k(policy: &BudgetPolicy, batch_size: usize) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    policy.validate()?;
    if policy.budget_percent == 0.0 {
        return Ok(BatchPlan::none());
    }
    let total = rounded_raw(policy.budget_percent, batch_size).max(policy.min_per_batch).min(2 * batch_size);
    if total <= batch_size {
        return Ok(BatchPlan {
            k_select: total,
            jitter_repeats: 1,
            extra: 0,
            total_queries: total,
        });
    }
    let base = total / batch_size;
    Ok(BatchPlan {
        k_select: batch_size,
        jitter_repeats: base,
        extra: total - base * batch_size,
        total_queries: total,
    })
}

/// Upper bound on train-phase queries for one epoch over the given batch sizes.
pub fn epoch_query_ceiling(policy: &BudgetPolicy, batch_sizes: impl IntoIterator<Item = usize>) -> Result<usize> {
    batch_sizes.into_iter().map(|b| compute_k(policy, b).map(|p| p.total_queries)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    UniformCer,
    TopkCer,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Random, StrategyKind::UniformCer, StrategyKind::TopkCer];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::UniformCer => "uniform_cer",
            StrategyKind::TopkCer => "topk_cer",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StrategyKind::Random),
            "uniform_cer" | "uniformcer" => Ok(StrategyKind::UniformCer),
            "topk_cer" | "topkcer" => Ok(StrategyKind::TopkCer),
            other => Err(Error::InvalidArgument(format!("unknown selection strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub seed: u64,
}

impl SelectionStrategy {
    /// Picks `k` distinct batch positions given the batch's stored CERs.
    pub fn select<R: Rng + ?Sized>(&self, cers: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self.kind {
            StrategyKind::Random => select_random(cers.len(), k, rng),
            StrategyKind::UniformCer => select_uniform_cer(cers, k, rng),
            StrategyKind::TopkCer => select_topk_cer(cers, k),
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot select {k} samples from a batch of {n}")));
    }
    Ok(())
}

pub fn select_uniform_cer<R: Rng + ?Sized>(cers: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    select_uniform_cer_with(cers, k, |lo, hi| if lo < hi { rng.gen_range(lo..=hi) } else { lo })
}

/// UniformCER with the uniform draw supplied by the caller.
pub fn select_uniform_cer_with(cers: &[f64], k: usize, mut draw: impl FnMut(f64, f64) -> f64) -> Result<Vec<usize>> {
    check_k(k, cers.len())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let lo = cers.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut taken = vec![false; cers.len()];
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let target = draw(lo, hi);
        let mut best: Option<(f64, usize)> = None;
        for (j, &c) in cers.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = (c - target).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let (_, j) = best.expect("k <= batch size leaves a free sample");
        taken[j] = true;
        picked.push(j);
    }
    Ok(picked)
}

pub fn select_topk_cer(cers: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, cers.len())?;
    let mut order: Vec<usize> = (0..cers.len()).collect();
    order.sort_by(|&a, &b| cers[b].total_cmp(&cers[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

pub fn select_random<R: Rng + ?Sized>(batch_size: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_k(k, batch_size)?;
    Ok(sample(rng, batch_size, k).into_vec())
}

/// Expands a plan into the ordered list of batch positions to query.
pub fn plan_queries<R: Rng + ?Sized>(
    plan: &BatchPlan,
    strategy: &SelectionStrategy,
    cers: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let b = cers.len();
    if plan.total_queries == 0 {
        return Ok(Vec::new());
    }
    if plan.total_queries < b {
        return strategy.select(cers, plan.k_select, rng);
    }
    let mut out = Vec::with_capacity(plan.total_queries);
    for _ in 0..plan.jitter_repeats {
        out.extend(0..b);
    }
    if plan.extra > 0 {
        out.extend(strategy.select(cers, plan.extra, rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub cer: CerValue,
    pub epoch: u32,
}

/// Most recent CER estimate per training sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CerHistory {
    entries: BTreeMap<String, HistoryEntry>,
}

impl CerHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&HistoryEntry> {
        self.entries.get(sample_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &HistoryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set(&mut self, sample_id: impl Into<String>, cer: CerValue, epoch: u32) {
        self.entries.insert(sample_id.into(), HistoryEntry { cer, epoch });
    }

    /// Stored CERs for a batch, refusing values recorded in `epoch` or later.
    pub fn cers_before<S: AsRef<str>>(&self, batch_ids: &[S], epoch: u32) -> Result<Vec<f64>> {
        batch_ids
            .iter()
            .map(|id| {
                let id = id.as_ref();
                let e = self
                    .entries
                    .get(id)
                    .ok_or_else(|| Error::InvalidState(format!("no CER history for sample {id}")))?;
                if e.epoch >= epoch {
                    return Err(Error::InvalidState(format!(
                        "sample {id} holds a CER from epoch {} while selecting for epoch {epoch}",
                        e.epoch
                    )));
                }
                Ok(e.cer.value)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ctx = |e: csv::Error| Error::parse("cer history csv", e.to_string());
        w.write_record(["sample_id", "epoch", "cer"]).map_err(ctx)?;
        for (id, e) in &self.entries {
            w.write_record([id.as_str(), &e.epoch.to_string(), &e.cer.value.to_string()]).map_err(ctx)?;
        }
        w.flush().map_err(|e| Error::parse("cer history csv", e.to_string()))?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Seeds the history from pre-pass OCR outputs, stamped epoch 0.
pub fn initialize_history<'a>(
    samples: impl IntoIterator<Item = (&'a str, &'a str)>,
    prepass_outputs: &BTreeMap<String, String>,
) -> Result<CerHistory> {
    let mut h = CerHistory::default();
    for (id, truth) in samples {
        let out = prepass_outputs
            .get(id)
            .ok_or_else(|| Error::InvalidState(format!("missing pre-pass output for sample {id}")))?;
        h.set(id, cer(out, truth), 0);
    }
    Ok(h)
}

pub fn record_epoch_cers<S: AsRef<str>, P: AsRef<str>, T: AsRef<str>>(
    history: &mut CerHistory,
    batch_ids: &[S],
    predictions: &[P],
    ground_truths: &[T],
    epoch: u32,
) -> Result<()> {
    if batch_ids.len() != predictions.len() || batch_ids.len() != ground_truths.len() {
        return Err(Error::InvalidArgument("batch ids, predictions and labels differ in length".into()));
    }
    for ((id, p), t) in batch_ids.iter().zip(predictions).zip(ground_truths) {
        history.set(id.as_ref(), cer(p.as_ref(), t.as_ref()), epoch);
    }
    Ok(())
}
