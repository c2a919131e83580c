//! Scoring, the pairwise ranking objective and the chronological training loop.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::ctdg::{chronological_batches, GraphDims, Interaction, SamplingStrategy, TemporalGraph};
use crate::dct::{DctLayer, EmbedContext, Embedder};
use crate::error::{Error, Result};
use crate::memory::{Aggregation, Gru, MemoryState};
use crate::nn::Ffn;
use crate::params::{Adam, Grads, ParamId, ParamStore, Tensor};
use crate::rng::{self, StreamRng};
use crate::scalar::{c, log_sigmoid, Scalar};
use crate::tape::{Tape, Var};
use crate::time_codec::TimeEncoder;

/// Pairs per tape when a batch is split across workers. Fixed so gradient
/// sums do not depend on the thread count.
const PAIRS_PER_CHUNK: usize = 8;

/// Inference-time knobs stored with the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub epsilon: usize,
    pub sampling: SamplingStrategy,
    pub aggregation: Aggregation,
    pub use_short_term: bool,
    pub seed: u64,
}

/// All trainable tensors plus the handles that locate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub store: ParamStore<T>,
    pub long_table: ParamId,
    pub time: TimeEncoder,
    pub gru: Gru,
    pub layers: Vec<DctLayer>,
    pub predictor: Ffn,
    pub dims: GraphDims,
    pub d: usize,
    pub d_t: usize,
    pub settings: Settings,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(dims: GraphDims, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "init", &[]);
        let mut store = ParamStore::new();
        let (d, d_t, d_e) = (config.d, config.d_t, dims.d_e);
        let long_table = store.add_row_sparse(
            "long_term",
            Tensor::xavier_uniform(dims.n_nodes(), d, &mut rng),
        );
        let time = TimeEncoder::build(config.time_variant, d_t, config.epsilon, &mut store, &mut rng)?;
        let gru = Gru::build("gru", 2 * d + d_e + d_t, d, &mut store, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                DctLayer::build(
                    &format!("layer{l}"),
                    d,
                    d_t,
                    d_e,
                    config.heads,
                    config.attention,
                    config.activation,
                    &mut store,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let predictor = Ffn::build("predictor", 2 * d, d, 1, config.activation, &mut store, &mut rng);
        Ok(ModelParams {
            store,
            long_table,
            time,
            gru,
            layers,
            predictor,
            dims,
            d,
            d_t,
            settings: Settings {
                epsilon: config.epsilon,
                sampling: config.sampling,
                aggregation: config.aggregation,
                use_short_term: config.use_short_term,
                seed: config.seed,
            },
        })
    }

    pub fn new_memory(&self) -> MemoryState<T> {
        MemoryState::new(self.dims.n_nodes(), self.d)
    }

    pub fn embed_context<'a>(&'a self, graph: &'a TemporalGraph, memory: &'a MemoryState<T>) -> EmbedContext<'a, T> {
        EmbedContext {
            graph,
            memory,
            long_table: self.long_table,
            time: &self.time,
            gru: &self.gru,
            layers: &self.layers,
            epsilon: self.settings.epsilon,
            strategy: self.settings.sampling,
            aggregation: self.settings.aggregation,
            use_short_term: self.settings.use_short_term,
            seed: self.settings.seed,
        }
    }

    /// Commit queued memory messages with the current parameters.
    pub fn flush_memory(&self, memory: &mut MemoryState<T>) -> Result<()> {
        memory.flush(&self.store, &self.gru, &self.time, self.settings.aggregation)
    }

    /// Absorb events into memory (no-op when short-term memory is disabled).
    pub fn advance(&self, memory: &mut MemoryState<T>, events: &[Interaction]) -> Result<()> {
        if !self.settings.use_short_term {
            return Ok(());
        }
        crate::memory::advance_memory(
            memory,
            &self.store,
            &self.gru,
            &self.time,
            self.settings.aggregation,
            &self.dims,
            events,
        )
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            store: self.store.cast(),
            long_table: self.long_table,
            time: self.time,
            gru: self.gru,
            layers: self.layers.clone(),
            predictor: self.predictor,
            dims: self.dims,
            d: self.d,
            d_t: self.d_t,
            settings: self.settings,
        }
    }
}

/// `FFN(h_u ‖ h_i)` on a tape.
pub fn score_on<T: Scalar>(
    tape: &mut Tape<'_, T>,
    embedder: &mut Embedder<'_, T>,
    params: &ModelParams<T>,
    user: usize,
    item: usize,
    t: f64,
) -> Var {
    let levels = params.layers.len();
    let hu = embedder.embed(tape, params.dims.user_node(user), t, levels);
    let hi = embedder.embed(tape, params.dims.item_node(item), t, levels);
    let x = tape.concat(&[hu, hi]);
    params.predictor.forward_on(tape, x)
}

fn check_ids(dims: &GraphDims, user: usize, item: usize) -> Result<()> {
    if user >= dims.n_users {
        return Err(Error::OutOfRange {
            index: user,
            len: dims.n_users,
        });
    }
    if item >= dims.n_items {
        return Err(Error::OutOfRange {
            index: item,
            len: dims.n_items,
        });
    }
    Ok(())
}

/// Affinity of `user` for `item` at time `t`.
pub fn score<T: Scalar>(
    params: &ModelParams<T>,
    graph: &TemporalGraph,
    memory: &MemoryState<T>,
    user: usize,
    item: usize,
    t: f64,
) -> Result<T> {
    check_ids(&params.dims, user, item)?;
    let mut tape = Tape::new(&params.store);
    let mut emb = Embedder::new(params.embed_context(graph, memory));
    let y = score_on(&mut tape, &mut emb, params, user, item, t);
    let v = tape.scalar(y);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("score for ({user}, {item}, {t})")));
    }
    Ok(v)
}

/// Scores of several items for one user, sharing the user embedding.
pub fn score_items<T: Scalar>(
    params: &ModelParams<T>,
    graph: &TemporalGraph,
    memory: &MemoryState<T>,
    user: usize,
    items: &[usize],
    t: f64,
) -> Result<Vec<T>> {
    for &i in items {
        check_ids(&params.dims, user, i)?;
    }
    let chunks: Vec<Vec<T>> = items
        .par_chunks(64)
        .map(|chunk| {
            let mut tape = Tape::new(&params.store);
            let mut emb = Embedder::new(params.embed_context(graph, memory));
            chunk
                .iter()
                .map(|&i| {
                    let y = score_on(&mut tape, &mut emb, params, user, i, t);
                    tape.scalar(y)
                })
                .collect()
        })
        .collect();
    let out: Vec<T> = chunks.into_iter().flatten().collect();
    if let Some(k) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score for ({user}, {}, {t})", items[k])));
    }
    Ok(out)
}

/// `Σ −ln σ(y⁺ − y⁻) + λ‖W_l‖²`.
pub fn bpr_loss<T: Scalar>(pos: &[T], neg: &[T], long_table: &Tensor<T>, lambda: T) -> Result<T> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!(
            "{} positive scores vs {} negative scores",
            pos.len(),
            neg.len()
        )));
    }
    let ranking: T = pos.iter().zip(neg).map(|(&p, &n)| -log_sigmoid(p - n)).sum();
    Ok(ranking + lambda * long_table.sq_norm())
}

/// Uniform draw over items `user` has not interacted with strictly before
/// `t`, excluding `positive`.
pub fn sample_negative<R: Rng + ?Sized>(
    graph: &TemporalGraph,
    user: usize,
    t: f64,
    positive: usize,
    rng: &mut R,
) -> Result<usize> {
    let n_items = graph.dims().n_items;
    let seen = graph.items_seen_before(user, t);
    let eligible = |i: usize| i != positive && !seen[i];
    // rejection first; the fallback enumeration keeps the draw uniform
    for _ in 0..32 {
        let i = rng.gen_range(0..n_items);
        if eligible(i) {
            return Ok(i);
        }
    }
    let pool: Vec<usize> = (0..n_items).filter(|&i| eligible(i)).collect();
    if pool.is_empty() {
        return Err(Error::NoNegative { user, time: t });
    }
    Ok(pool[rng.gen_range(0..pool.len())])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingPair {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
    pub timestamp: f64,
}

/// Objective and gradient of one batch against a fixed memory snapshot.
/// The L2 term is included.
pub fn batch_objective<T: Scalar>(
    params: &ModelParams<T>,
    graph: &TemporalGraph,
    memory: &MemoryState<T>,
    pairs: &[TrainingPair],
    lambda: T,
) -> (T, Grads<T>) {
    let parts: Vec<(T, Grads<T>)> = pairs
        .par_chunks(PAIRS_PER_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new(&params.store);
            let mut emb = Embedder::new(params.embed_context(graph, memory));
            let mut terms = Vec::with_capacity(chunk.len());
            for p in chunk {
                let yp = score_on(&mut tape, &mut emb, params, p.user, p.pos_item, p.timestamp);
                let yn = score_on(&mut tape, &mut emb, params, p.user, p.neg_item, p.timestamp);
                let diff = tape.sub(yp, yn);
                terms.push(tape.log_sigmoid(diff));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t);
            }
            let loss = tape.scale(total, -T::one());
            let mut grads = Grads::zeros_like(&params.store);
            tape.backward(loss, T::one(), &mut grads);
            (tape.scalar(loss), grads)
        })
        .collect();
    let mut grads = Grads::zeros_like(&params.store);
    let mut loss = T::zero();
    for (l, g) in &parts {
        loss = loss + *l;
        grads.accumulate(g);
    }
    let table = params.store.get(params.long_table);
    if lambda != T::zero() {
        let g = grads.dense_mut(params.long_table);
        for (a, &w) in g.iter_mut().zip(&table.data) {
            *a = *a + c::<T>(2.0) * lambda * w;
        }
        loss = loss + lambda * table.sq_norm();
    }
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-batch objective (ranking term plus L2).
    pub loss: f64,
    /// Mean ranking loss per training pair.
    pub pair_loss: f64,
    pub batches: usize,
    pub pairs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub epochs: Vec<EpochStats>,
    /// Memory after the final epoch, fully committed.
    pub memory: MemoryState<T>,
    pub optimizer: Adam<T>,
}

/// Refuse to score a batch whose endpoints already absorbed an event at or
/// after the batch start.
pub fn check_causality<T: Scalar>(memory: &MemoryState<T>, dims: &GraphDims, batch: &[Interaction]) -> Result<()> {
    let start = batch
        .iter()
        .map(|e| e.timestamp)
        .fold(f64::INFINITY, f64::min);
    for e in batch {
        for node in [dims.user_node(e.user_id), dims.item_node(e.item_id)] {
            let last = memory.effective_last_update(node);
            if last >= start {
                return Err(Error::Causality(format!(
                    "node {node} updated at t={last}, batch starts at t={start}"
                )));
            }
        }
    }
    Ok(())
}

fn draw_pairs(graph: &TemporalGraph, batch: &[Interaction], rng: &mut StreamRng) -> Result<Vec<TrainingPair>> {
    batch
        .iter()
        .map(|e| {
            Ok(TrainingPair {
                user: e.user_id,
                pos_item: e.item_id,
                neg_item: sample_negative(graph, e.user_id, e.timestamp, e.item_id, rng)?,
                timestamp: e.timestamp,
            })
        })
        .collect()
}

/// Chronological mini-batch training. Each epoch starts from empty memory;
/// every batch is scored against memory holding only earlier batches, then
/// one optimizer step is taken, then the batch is absorbed into memory.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    graph: &TemporalGraph,
    train_events: &[Interaction],
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    train_with(params, graph, train_events, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    params: &mut ModelParams<T>,
    graph: &TemporalGraph,
    train_events: &[Interaction],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport<T>> {
    if train_events.is_empty() {
        return Err(Error::Empty("training set"));
    }
    config.validate()?;
    let dims = params.dims;
    let lambda: T = c(config.lambda);
    let mut optimizer = Adam::new(&params.store, c(config.lr));
    let mut memory = params.new_memory();
    let batches = chronological_batches(train_events, config.batch_size);
    let mut stats = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        memory.reset();
        let mut neg_rng = rng::stream(config.seed, "negatives", &[epoch as u64]);
        let (mut loss_sum, mut pair_loss_sum) = (0.0, 0.0);
        for range in &batches {
            let batch = &train_events[range.clone()];
            check_causality(&memory, &dims, batch)?;
            let pairs = draw_pairs(graph, batch, &mut neg_rng)?;
            let (loss, grads) = batch_objective(params, graph, &memory, &pairs, lambda);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} in epoch {epoch}, batch starting at event {}",
                    batch[0].seq_no
                )));
            }
            optimizer.apply(&mut params.store, &grads);
            let reg = lambda * params.store.get(params.long_table).sq_norm();
            loss_sum += loss.to_f64_lossy();
            pair_loss_sum += (loss - reg).to_f64_lossy().max(0.0);
            if params.settings.use_short_term {
                params.flush_memory(&mut memory)?;
                memory.stage(batch, &dims)?;
            }
        }
        if params.settings.use_short_term {
            params.flush_memory(&mut memory)?;
        }
        let s = EpochStats {
            epoch,
            loss: loss_sum / batches.len() as f64,
            pair_loss: pair_loss_sum / train_events.len() as f64,
            batches: batches.len(),
            pairs: train_events.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(TrainReport {
        epochs: stats,
        memory,
        optimizer,
    })
}
