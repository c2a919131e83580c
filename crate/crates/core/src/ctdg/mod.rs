//! Continuous-time dynamic graph: the chronological event log, per-node
//! adjacency, time-bounded neighbor queries and chronological partitioning.

mod ingest;
mod split;

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{fingerprint, parse_event_csv, read_dense_events, write_events_csv, write_id_map, CsvFormat, ParsedLog};
pub use split::{chronological_batches, chronological_split, truncate_latest, Split};

/// Index into the combined node space: users occupy `0..n_users`, items
/// occupy `n_users..n_users + n_items`.
pub type NodeId = usize;

/// One timestamped user→item event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: usize,
    pub item_id: usize,
    pub timestamp: f64,
    pub edge_features: Vec<f64>,
    /// Position in the global chronological order.
    pub seq_no: usize,
}

impl Interaction {
    pub fn new(user_id: usize, item_id: usize, timestamp: f64, seq_no: usize) -> Self {
        Interaction {
            user_id,
            item_id,
            timestamp,
            edge_features: Vec::new(),
            seq_no,
        }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.edge_features = features;
        self
    }
}

/// Sort by `(timestamp, seq_no)` and renumber `seq_no` densely from 0.
pub fn sort_chronologically(events: &mut [Interaction]) {
    events.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.seq_no.cmp(&b.seq_no))
    });
    for (i, e) in events.iter_mut().enumerate() {
        e.seq_no = i;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDims {
    pub n_users: usize,
    pub n_items: usize,
    pub d_e: usize,
}

impl GraphDims {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn user_node(&self, user: usize) -> NodeId {
        user
    }

    pub fn item_node(&self, item: usize) -> NodeId {
        self.n_users + item
    }

    pub fn is_user(&self, node: NodeId) -> bool {
        node < self.n_users
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjEntry {
    pub counterpart: NodeId,
    pub timestamp: f64,
    pub seq_no: usize,
    /// Index of the originating event in [`TemporalGraph::events`].
    pub event: usize,
}

/// Immutable chronologically indexed bipartite multigraph.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    dims: GraphDims,
    events: Vec<Interaction>,
    adjacency: Vec<Vec<AdjEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    MostRecent,
    Uniform,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most_recent" | "most-recent" | "recent" => Ok(SamplingStrategy::MostRecent),
            "uniform" => Ok(SamplingStrategy::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling strategy '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: NodeId,
    pub timestamp: f64,
    pub seq_no: usize,
    pub event: usize,
}

/// Up to `capacity` neighbors, latest first; slots past `entries.len()` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
    pub capacity: usize,
}

impl NeighborSet {
    pub fn empty(capacity: usize) -> Self {
        NeighborSet {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.capacity).map(|i| i < self.entries.len()).collect()
    }
}

impl TemporalGraph {
    pub fn dims(&self) -> GraphDims {
        self.dims
    }

    pub fn events(&self) -> &[Interaction] {
        &self.events
    }

    pub fn event(&self, idx: usize) -> &Interaction {
        &self.events[idx]
    }

    pub fn adjacency(&self, node: NodeId) -> &[AdjEntry] {
        self.adjacency.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adjacency entries of `node` with timestamp strictly before `t`.
    pub fn history_before(&self, node: NodeId, t: f64) -> &[AdjEntry] {
        let adj = self.adjacency(node);
        let end = adj.partition_point(|e| e.timestamp < t);
        &adj[..end]
    }

    /// Items `user` interacted with strictly before `t`, as a membership mask.
    pub fn items_seen_before(&self, user: usize, t: f64) -> Vec<bool> {
        let mut seen = vec![false; self.dims.n_items];
        if user < self.dims.n_users {
            for e in self.history_before(user, t) {
                seen[e.counterpart - self.dims.n_users] = true;
            }
        }
        seen
    }

    pub fn total_adjacency(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }
}

/// Build the adjacency index. Events are re-sorted by `(timestamp, seq_no)`;
/// their `seq_no` values are kept.
pub fn build_graph(events: &[Interaction], dims: GraphDims) -> Result<TemporalGraph> {
    if events.is_empty() {
        return Err(Error::Empty("event list"));
    }
    let mut events = events.to_vec();
    events.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.seq_no.cmp(&b.seq_no))
    });
    let mut adjacency = vec![Vec::new(); dims.n_nodes()];
    for (idx, e) in events.iter().enumerate() {
        if e.user_id >= dims.n_users {
            return Err(Error::Graph(format!(
                "user id {} outside 0..{}",
                e.user_id, dims.n_users
            )));
        }
        if e.item_id >= dims.n_items {
            return Err(Error::Graph(format!(
                "item id {} outside 0..{}",
                e.item_id, dims.n_items
            )));
        }
        if e.edge_features.len() != dims.d_e {
            return Err(Error::Graph(format!(
                "event {} has {} edge features, expected {}",
                e.seq_no,
                e.edge_features.len(),
                dims.d_e
            )));
        }
        if !(e.timestamp >= 0.0) || !e.timestamp.is_finite() {
            return Err(Error::Graph(format!(
                "event {} has invalid timestamp {}",
                e.seq_no, e.timestamp
            )));
        }
        let u = dims.user_node(e.user_id);
        let i = dims.item_node(e.item_id);
        adjacency[u].push(AdjEntry {
            counterpart: i,
            timestamp: e.timestamp,
            seq_no: e.seq_no,
            event: idx,
        });
        adjacency[i].push(AdjEntry {
            counterpart: u,
            timestamp: e.timestamp,
            seq_no: e.seq_no,
            event: idx,
        });
    }
    Ok(TemporalGraph {
        dims,
        events,
        adjacency,
    })
}

/// Sample up to `epsilon` neighbors of `node` that interacted strictly before `t`.
///
/// `MostRecent` ignores `rng`. Unknown nodes yield an empty set.
pub fn neighbors_before<R: Rng + ?Sized>(
    graph: &TemporalGraph,
    node: NodeId,
    t: f64,
    epsilon: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> NeighborSet {
    let history = graph.history_before(node, t);
    let to_neighbor = |e: &AdjEntry| Neighbor {
        node: e.counterpart,
        timestamp: e.timestamp,
        seq_no: e.seq_no,
        event: e.event,
    };
    let entries = if history.len() <= epsilon {
        history.iter().rev().map(to_neighbor).collect()
    } else {
        match strategy {
            SamplingStrategy::MostRecent => history[history.len() - epsilon..]
                .iter()
                .rev()
                .map(to_neighbor)
                .collect(),
            SamplingStrategy::Uniform => {
                let mut picked = index::sample(rng, history.len(), epsilon).into_vec();
                picked.sort_unstable_by(|a, b| b.cmp(a));
                picked.into_iter().map(|k| to_neighbor(&history[k])).collect()
            }
        }
    };
    NeighborSet {
        entries,
        capacity: epsilon,
    }
}

/// Ranges of `events` (already chronological) in chunks of roughly `batch_size`,
/// never splitting a run of equal timestamps across two chunks.
pub(crate) fn tie_aware_ranges(events: &[Interaction], batch_size: usize) -> Vec<Range<usize>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let mut end = (start + batch_size).min(events.len());
        while end < events.len() && events[end].timestamp == events[end - 1].timestamp {
            end += 1;
        }
        out.push(start..end);
        start = end;
    }
    out
}
