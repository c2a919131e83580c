//! End-to-end run: split, train, replay, evaluate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::ctdg::{
    build_graph, chronological_split, tie_aware_ranges, truncate_latest, GraphDims, Interaction, TemporalGraph,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EventRank, MetricsReport, ModelScorer};
use crate::memory::MemoryState;
use crate::model::{train_with, EpochStats, ModelParams, TrainReport};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Partition {
    Val,
    #[default]
    Test,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::InvalidArgument(format!("unknown partition {other:?}"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

/// Partitions of one log plus the graph over everything kept.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub graph: TemporalGraph,
}

impl Prepared {
    pub fn new(events: &[Interaction], dims: GraphDims, config: &TrainConfig) -> Result<Self> {
        let split = chronological_split(events, config.split)?;
        let train = truncate_latest(&split.train, config.train_proportion)?;
        let mut kept = train.clone();
        kept.extend_from_slice(&split.val);
        kept.extend_from_slice(&split.test);
        let graph = build_graph(&kept, dims)?;
        // rebuild the partitions from the graph so sequence numbers agree
        let all = graph.events();
        let (n_tr, n_va) = (train.len(), split.val.len());
        Ok(Prepared {
            train: all[..n_tr].to_vec(),
            val: all[n_tr..n_tr + n_va].to_vec(),
            test: all[n_tr + n_va..].to_vec(),
            graph,
        })
    }

    pub fn partition(&self, which: Partition) -> &[Interaction] {
        match which {
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Feed events into memory one timestamp group at a time, the same
/// granularity the evaluation loop uses.
pub fn replay<T: Scalar>(params: &ModelParams<T>, memory: &mut MemoryState<T>, events: &[Interaction]) -> Result<()> {
    for r in tie_aware_ranges(events, 1) {
        params.advance(memory, &events[r])?;
    }
    Ok(())
}

/// Memory and scores for one evaluation partition. `memory` must already
/// hold the training log.
pub fn evaluate_partition<T: Scalar>(
    params: &ModelParams<T>,
    data: &Prepared,
    memory: MemoryState<T>,
    which: Partition,
    eval: &EvalConfig,
) -> Result<(MetricsReport, Vec<EventRank>, MemoryState<T>)> {
    let mut memory = memory;
    if eval.warm_replay && which == Partition::Test {
        replay(params, &mut memory, &data.val)?;
    }
    let mut scorer = ModelScorer::new(params, &data.graph, memory);
    let (report, ranks) = evaluate(&mut scorer, &data.graph, data.partition(which), eval)?;
    Ok((report, ranks, scorer.into_memory()))
}

pub struct RunOutput<T> {
    pub params: ModelParams<T>,
    pub train: TrainReport<T>,
    pub metrics: MetricsReport,
    pub ranks: Vec<EventRank>,
    pub seconds: Vec<(String, f64)>,
}

/// Train from scratch on `data.train`, then evaluate `which`.
pub fn run<T: Scalar>(
    data: &Prepared,
    config: &TrainConfig,
    eval: &EvalConfig,
    which: Partition,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<RunOutput<T>> {
    let clock = Instant::now();
    let mut params = ModelParams::<T>::init(data.graph.dims(), config)?;
    let train = train_with(&mut params, &data.graph, &data.train, config, on_epoch)?;
    let train_secs = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let (metrics, ranks, _) = evaluate_partition(&params, data, train.memory.clone(), which, eval)?;
    let eval_secs = clock.elapsed().as_secs_f64();
    Ok(RunOutput {
        params,
        train,
        metrics,
        ranks,
        seconds: vec![("train".into(), train_secs), ("eval".into(), eval_secs)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthKind, SynthSpec};

    #[test]
    fn partitions_cover_kept_events() {
        let (events, dims) = generate(&SynthSpec::new(SynthKind::Periodic, 3, 4, 20, 0)).unwrap();
        let cfg = TrainConfig {
            train_proportion: 0.5,
            ..TrainConfig::default()
        };
        let p = Prepared::new(&events, dims, &cfg).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (24, 6, 6));
        assert_eq!(p.graph.events().len(), 36);
        assert!(p.train.last().unwrap().timestamp < p.val[0].timestamp);
        assert!(p.val.last().unwrap().timestamp < p.test[0].timestamp);
    }
}
