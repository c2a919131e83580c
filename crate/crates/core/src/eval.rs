//! Timed top-K evaluation: per-event candidate ranking and ranking metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctdg::{Interaction, TemporalGraph};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::model::{score_items, ModelParams};
use crate::rng::{self, StreamRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSamples {
    Count(usize),
    All,
}

impl Default for NegativeSamples {
    fn default() -> Self {
        NegativeSamples::Count(500)
    }
}

impl FromStr for NegativeSamples {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(NegativeSamples::All);
        }
        match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(NegativeSamples::Count(n)),
            _ => Err(Error::InvalidArgument(format!(
                "negative samples must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for NegativeSamples {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeSamples::Count(n) => write!(f, "{n}"),
            NegativeSamples::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub negatives: NegativeSamples,
    pub seed: u64,
    /// Replay partitions preceding the evaluated one into memory first.
    pub warm_replay: bool,
    /// Include wall-clock seconds in the report.
    pub timings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![10, 20],
            negatives: NegativeSamples::default(),
            seed: 0,
            warm_replay: true,
            timings: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config(format!("k values must be >= 1, got {:?}", self.k_list)));
        }
        if self.negatives == NegativeSamples::Count(0) {
            return Err(Error::Config("negative samples must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// The positive plus negatives drawn without replacement from items `user`
/// had not interacted with strictly before `t`. The positive comes first,
/// negatives follow in ascending id order.
pub fn candidate_set<R: Rng + ?Sized>(
    graph: &TemporalGraph,
    user: usize,
    t: f64,
    positive: usize,
    negatives: NegativeSamples,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n_items = graph.dims().n_items;
    if positive >= n_items {
        return Err(Error::OutOfRange {
            index: positive,
            len: n_items,
        });
    }
    let seen = graph.items_seen_before(user, t);
    let pool: Vec<usize> = (0..n_items).filter(|&i| i != positive && !seen[i]).collect();
    let mut out = Vec::with_capacity(pool.len() + 1);
    out.push(positive);
    match negatives {
        NegativeSamples::Count(n) if n < pool.len() => {
            let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
            picked.sort_unstable();
            out.extend(picked);
        }
        _ => out.extend(pool),
    }
    Ok(out)
}

/// 1-based rank of `candidates[pos]` under descending score, ties broken by
/// ascending id.
pub fn rank_of(candidates: &[usize], scores: &[f64], pos: usize) -> usize {
    let (id, s) = (candidates[pos], scores[pos]);
    1 + candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &v)| v > s || (v == s && c < id))
        .count()
}

/// Source of candidate scores for the evaluation loop.
pub trait Scorer {
    fn score(&mut self, event: &Interaction, candidates: &[usize]) -> Result<Vec<f64>>;

    /// Absorb observed events, all sharing one timestamp.
    fn advance(&mut self, events: &[Interaction]) -> Result<()>;
}

pub struct ModelScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub graph: &'a TemporalGraph,
    pub memory: MemoryState<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, graph: &'a TemporalGraph, memory: MemoryState<T>) -> Self {
        ModelScorer { params, graph, memory }
    }

    pub fn into_memory(self) -> MemoryState<T> {
        self.memory
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn score(&mut self, event: &Interaction, candidates: &[usize]) -> Result<Vec<f64>> {
        let s = score_items(self.params, self.graph, &self.memory, event.user_id, candidates, event.timestamp)?;
        Ok(s.into_iter().map(|v| v.to_f64_lossy()).collect())
    }

    fn advance(&mut self, events: &[Interaction]) -> Result<()> {
        self.params.advance(&mut self.memory, events)
    }
}

/// Scores 1 for the true item and 0 otherwise.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&mut self, event: &Interaction, candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|&c| if c == event.item_id { 1.0 } else { 0.0 })
            .collect())
    }

    fn advance(&mut self, _events: &[Interaction]) -> Result<()> {
        Ok(())
    }
}

/// Independent uniform scores.
#[derive(Debug, Clone)]
pub struct RandomScorer {
    rng: StreamRng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        RandomScorer {
            rng: rng::stream(seed, "random-scorer", &[]),
        }
    }
}

impl Scorer for RandomScorer {
    fn score(&mut self, _event: &Interaction, candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|_| self.rng.gen::<f64>()).collect())
    }

    fn advance(&mut self, _events: &[Interaction]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub events: usize,
    pub seconds: BTreeMap<String, f64>,
    /// Events whose user had no eligible negative.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub degenerate: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRank {
    pub event_seq: usize,
    pub user: usize,
    pub item: usize,
    pub rank: usize,
    pub candidates: usize,
}

pub fn write_ranks_csv<W: Write>(ranks: &[EventRank], mut out: W) -> std::io::Result<()> {
    writeln!(out, "event_seq,user,item,rank")?;
    for r in ranks {
        writeln!(out, "{},{},{},{}", r.event_seq, r.user, r.item, r.rank)?;
    }
    Ok(())
}

/// Aggregate per-event ranks into means.
pub fn summarize(ranks: &[EventRank], k_list: &[usize]) -> MetricsReport {
    let n = ranks.len().max(1) as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|r| f(r.rank)).sum::<f64>() / n;
    MetricsReport {
        recall: k_list.iter().map(|&k| (k, mean(&|r| recall_at_k(r, k)))).collect(),
        ndcg: k_list.iter().map(|&k| (k, mean(&|r| ndcg_at_k(r, k)))).collect(),
        mrr: mean(&mrr),
        events: ranks.len(),
        seconds: BTreeMap::new(),
        degenerate: ranks.iter().filter(|r| r.candidates == 1).count(),
    }
}

/// Score every event, rank its positive, then let the scorer absorb it.
/// Events sharing a timestamp are all scored before any is absorbed.
pub fn evaluate<S: Scorer>(
    scorer: &mut S,
    graph: &TemporalGraph,
    eval_events: &[Interaction],
    config: &EvalConfig,
) -> Result<(MetricsReport, Vec<EventRank>)> {
    config.validate()?;
    if eval_events.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let started = Instant::now();
    let (mut score_secs, mut advance_secs) = (0.0, 0.0);
    let mut ranks = Vec::with_capacity(eval_events.len());
    let mut start = 0;
    while start < eval_events.len() {
        let t = eval_events[start].timestamp;
        let mut end = start + 1;
        while end < eval_events.len() && eval_events[end].timestamp == t {
            end += 1;
        }
        if start > 0 && eval_events[start - 1].timestamp > t {
            return Err(Error::OutOfOrder(format!("evaluation events not chronological at t={t}")));
        }
        let group = &eval_events[start..end];
        let clock = Instant::now();
        for e in group {
            let mut rng = rng::stream(config.seed, "eval-candidates", &[e.seq_no as u64]);
            let candidates = candidate_set(graph, e.user_id, e.timestamp, e.item_id, config.negatives, &mut rng)?;
            let scores = scorer.score(e, &candidates)?;
            if scores.len() != candidates.len() {
                return Err(Error::Shape(format!(
                    "{} scores for {} candidates",
                    scores.len(),
                    candidates.len()
                )));
            }
            if let Some(k) = scores.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "score of item {} for event {}",
                    candidates[k], e.seq_no
                )));
            }
            ranks.push(EventRank {
                event_seq: e.seq_no,
                user: e.user_id,
                item: e.item_id,
                rank: rank_of(&candidates, &scores, 0),
                candidates: candidates.len(),
            });
        }
        score_secs += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        scorer.advance(group)?;
        advance_secs += clock.elapsed().as_secs_f64();
        start = end;
    }
    let mut report = summarize(&ranks, &config.k_list);
    if config.timings {
        report.seconds.insert("score".into(), score_secs);
        report.seconds.insert("advance".into(), advance_secs);
        report.seconds.insert("total".into(), started.elapsed().as_secs_f64());
    }
    Ok((report, ranks))
}
