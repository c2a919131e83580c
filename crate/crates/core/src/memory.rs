//! Long-term ID embeddings and the short-term memory mechanism
//! (message construction, aggregation and GRU update).

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctdg::{GraphDims, Interaction, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Tensor};
use crate::scalar::{c, sigmoid, Scalar};
use crate::tape::{Tape, Var};
use crate::time_codec::TimeEncoder;

/// Row lookup in the `(n+r) × d` long-term table.
pub fn long_term<T: Scalar>(store: &ParamStore<T>, table: ParamId, node: NodeId) -> Result<Vec<T>> {
    let t = store.get(table);
    if node >= t.rows {
        return Err(Error::OutOfRange {
            index: node,
            len: t.rows,
        });
    }
    Ok(t.row(node).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Last,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Aggregation::Last),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::InvalidArgument(format!("unknown aggregation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<T> {
    /// `[s_self ‖ s_counterpart ‖ edge_features ‖ time_encoding]`
    pub payload: Vec<T>,
    pub source_time: f64,
    pub seq_no: usize,
}

fn latest<M>(items: &[M], key: impl Fn(&M) -> (f64, usize)) -> &M {
    items
        .iter()
        .max_by(|a, b| {
            let (ta, sa) = key(a);
            let (tb, sb) = key(b);
            ta.total_cmp(&tb).then(sa.cmp(&sb))
        })
        .expect("non-empty")
}

pub fn aggregate_messages<T: Scalar>(messages: &[Message<T>], mode: Aggregation) -> Result<Message<T>> {
    if messages.is_empty() {
        return Err(Error::Empty("message list"));
    }
    let last = latest(messages, |m| (m.source_time, m.seq_no));
    match mode {
        Aggregation::Last => Ok(last.clone()),
        Aggregation::Mean => {
            let len = messages[0].payload.len();
            if messages.iter().any(|m| m.payload.len() != len) {
                return Err(Error::Shape("messages with different payload lengths".into()));
            }
            let inv = T::one() / c::<T>(messages.len() as f64);
            let mut payload = vec![T::zero(); len];
            for m in messages {
                for (a, &b) in payload.iter_mut().zip(&m.payload) {
                    *a = *a + b;
                }
            }
            for a in payload.iter_mut() {
                *a = *a * inv;
            }
            Ok(Message {
                payload,
                source_time: last.source_time,
                seq_no: last.seq_no,
            })
        }
    }
}

/// GRU cell parameters:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gru {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, cols: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::xavier_uniform(hidden, cols, rng))
        };
        let (w_z, u_z) = (w("w_z", input_dim), w("u_z", hidden));
        let (w_r, u_r) = (w("w_r", input_dim), w("u_r", hidden));
        let (w_h, u_h) = (w("w_h", input_dim), w("u_h", hidden));
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(hidden, 1));
        Gru {
            w_z,
            u_z,
            b_z: b("b_z"),
            w_r,
            u_r,
            b_r: b("b_r"),
            w_h,
            u_h,
            b_h: b("b_h"),
            input_dim,
            hidden,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], h: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim || h.len() != self.hidden {
            return Err(Error::Shape(format!(
                "gru expects input {} / hidden {}, got {} / {}",
                self.input_dim,
                self.hidden,
                x.len(),
                h.len()
            )));
        }
        let gate = |w: ParamId, u: ParamId, b: ParamId, hh: &[T]| -> Vec<T> {
            let wx = store.get(w).matvec(x);
            let uh = store.get(u).matvec(hh);
            let bias = &store.get(b).data;
            (0..self.hidden).map(|k| wx[k] + uh[k] + bias[k]).collect()
        };
        let z: Vec<T> = gate(self.w_z, self.u_z, self.b_z, h).into_iter().map(sigmoid).collect();
        let r: Vec<T> = gate(self.w_r, self.u_r, self.b_r, h).into_iter().map(sigmoid).collect();
        let rh: Vec<T> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
        let cand: Vec<T> = gate(self.w_h, self.u_h, self.b_h, &rh).into_iter().map(|v| v.tanh()).collect();
        Ok((0..self.hidden)
            .map(|k| (T::one() - z[k]) * h[k] + z[k] * cand[k])
            .collect())
    }

    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape<'_, T>, w: ParamId, u: ParamId, b: ParamId, hh: Var| {
            let wx = tape.matvec(w, x);
            let uh = tape.matvec(u, hh);
            let s = tape.add(wx, uh);
            let bias = tape.param(b);
            tape.add(s, bias)
        };
        let pre_z = gate(tape, self.w_z, self.u_z, self.b_z, h);
        let z = tape.sigmoid(pre_z);
        let pre_r = gate(tape, self.w_r, self.u_r, self.b_r, h);
        let r = tape.sigmoid(pre_r);
        let rh = tape.mul(r, h);
        let pre_c = gate(tape, self.w_h, self.u_h, self.b_h, rh);
        let cand = tape.tanh(pre_c);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, h);
        let b = tape.mul(z, cand);
        tape.add(a, b)
    }
}

pub fn gru_update<T: Scalar>(store: &ParamStore<T>, gru: &Gru, msg: &Message<T>, prev: &[T]) -> Result<Vec<T>> {
    gru.forward(store, &msg.payload, prev)
}

/// Raw inputs of a message whose GRU application has not been committed yet.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingMessage<T> {
    /// `[s_self ‖ s_counterpart ‖ edge_features]` at staging time.
    pub prefix: Vec<T>,
    /// Elapsed time since the recipient's last memory update (0 for fresh nodes).
    pub delta: f64,
    pub source_time: f64,
    pub seq_no: usize,
}

/// Per-node short-term state.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    dim: usize,
    states: Vec<T>,
    last_update: Vec<f64>,
    pending: Vec<Vec<PendingMessage<T>>>,
    dirty: Vec<NodeId>,
    updates: Vec<u64>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        MemoryState {
            dim,
            states: vec![T::zero(); n_nodes * dim],
            last_update: vec![f64::NEG_INFINITY; n_nodes],
            pending: vec![Vec::new(); n_nodes],
            dirty: Vec::new(),
            updates: vec![0; n_nodes],
        }
    }

    pub fn reset(&mut self) {
        self.states.iter_mut().for_each(|v| *v = T::zero());
        self.last_update.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for &n in &self.dirty {
            self.pending[n].clear();
        }
        self.dirty.clear();
        self.updates.iter_mut().for_each(|v| *v = 0);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.last_update.len()
    }

    /// Committed state of `node`.
    pub fn state(&self, node: NodeId) -> &[T] {
        &self.states[node * self.dim..(node + 1) * self.dim]
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn last_update(&self, node: NodeId) -> f64 {
        self.last_update[node]
    }

    /// Latest time this node has absorbed or staged an event.
    pub fn effective_last_update(&self, node: NodeId) -> f64 {
        self.pending[node]
            .iter()
            .map(|m| m.source_time)
            .fold(self.last_update[node], f64::max)
    }

    pub fn pending(&self, node: NodeId) -> &[PendingMessage<T>] {
        &self.pending[node]
    }

    pub fn has_pending(&self) -> bool {
        !self.dirty.is_empty()
    }

    /// Number of GRU applications committed for `node`.
    pub fn update_count(&self, node: NodeId) -> u64 {
        self.updates[node]
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if node >= self.n_nodes() {
            return Err(Error::OutOfRange {
                index: node,
                len: self.n_nodes(),
            });
        }
        Ok(())
    }

    fn pending_message(&self, node: NodeId, counterpart: NodeId, t_event: f64, features: &[f64], seq_no: usize) -> PendingMessage<T> {
        let mut prefix = Vec::with_capacity(2 * self.dim + features.len());
        prefix.extend_from_slice(self.state(node));
        prefix.extend_from_slice(self.state(counterpart));
        prefix.extend(features.iter().map(|&x| c::<T>(x)));
        let last = self.last_update[node];
        let delta = if last.is_finite() { (t_event - last).max(0.0) } else { 0.0 };
        PendingMessage {
            prefix,
            delta,
            source_time: t_event,
            seq_no,
        }
    }

    /// Queue messages for both endpoints of every event, built from the
    /// committed states. Nothing is applied until [`MemoryState::flush`].
    pub fn stage(&mut self, batch: &[Interaction], dims: &GraphDims) -> Result<()> {
        for w in batch.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::OutOfOrder(format!(
                    "event {} (t={}) follows event {} (t={})",
                    w[1].seq_no, w[1].timestamp, w[0].seq_no, w[0].timestamp
                )));
            }
        }
        let mut staged = Vec::with_capacity(2 * batch.len());
        for e in batch {
            let u = dims.user_node(e.user_id);
            let i = dims.item_node(e.item_id);
            self.check_node(u)?;
            self.check_node(i)?;
            for (node, other) in [(u, i), (i, u)] {
                let last = self.effective_last_update(node);
                if e.timestamp <= last {
                    return Err(Error::OutOfOrder(format!(
                        "event {} at t={} does not follow node {node}'s last update at t={last}",
                        e.seq_no, e.timestamp
                    )));
                }
                staged.push((node, self.pending_message(node, other, e.timestamp, &e.edge_features, e.seq_no)));
            }
        }
        for (node, msg) in staged {
            if self.pending[node].is_empty() {
                self.dirty.push(node);
            }
            self.pending[node].push(msg);
        }
        Ok(())
    }

    /// Apply one aggregated GRU update to every node with queued messages.
    pub fn flush(&mut self, store: &ParamStore<T>, gru: &Gru, time: &TimeEncoder, mode: Aggregation) -> Result<()> {
        let mut dirty = std::mem::take(&mut self.dirty);
        dirty.sort_unstable();
        for &node in &dirty {
            let msgs: Vec<Message<T>> = self.pending[node]
                .iter()
                .map(|p| materialize(store, time, p))
                .collect();
            let agg = aggregate_messages(&msgs, mode)?;
            let next = gru.forward(store, &agg.payload, self.state(node))?;
            self.states[node * self.dim..(node + 1) * self.dim].copy_from_slice(&next);
            self.last_update[node] = self.effective_last_update(node);
            self.updates[node] += 1;
            self.pending[node].clear();
        }
        Ok(())
    }

    /// Short-term embedding of `node` on a tape: the committed state, passed
    /// through the GRU for any queued messages.
    pub fn short_term_on(&self, tape: &mut Tape<'_, T>, gru: &Gru, time: &TimeEncoder, mode: Aggregation, node: NodeId) -> Var {
        let h = tape.input(self.state(node).to_vec());
        let pending = &self.pending[node];
        if pending.is_empty() {
            return h;
        }
        let to_var = |tape: &mut Tape<'_, T>, p: &PendingMessage<T>| {
            let prefix = tape.input(p.prefix.clone());
            let enc = time.encode_on(tape, c(p.delta), 0);
            tape.concat(&[prefix, enc])
        };
        let x = match mode {
            Aggregation::Last => {
                let p = latest(pending, |m| (m.source_time, m.seq_no));
                to_var(tape, p)
            }
            Aggregation::Mean => {
                let vars: Vec<Var> = pending.iter().map(|p| to_var(tape, p)).collect();
                tape.mean(&vars)
            }
        };
        gru.forward_on(tape, x, h)
    }

    /// Dump as CSV rows `node_id,last_update,s_0,...,s_{d-1}`; never-updated
    /// nodes carry `-inf`. Queued messages are not part of the snapshot.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<memory snapshot>", e);
        for node in 0..self.n_nodes() {
            write!(out, "{node},{}", fmt_time(self.last_update[node])).map_err(io)?;
            for v in self.state(node) {
                write!(out, ",{:?}", v.to_f64_lossy()).map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(input: R, n_nodes: usize, dim: usize) -> Result<Self> {
        let mut mem = MemoryState::new(n_nodes, dim);
        let mut seen = 0;
        for (k, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<memory snapshot>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                line: k as u64 + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(bad(format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let node: usize = fields[0].parse().map_err(|_| bad(format!("bad node id '{}'", fields[0])))?;
            if node >= n_nodes {
                return Err(bad(format!("node {node} outside 0..{n_nodes}")));
            }
            mem.last_update[node] = parse_time(fields[1]).ok_or_else(|| bad(format!("bad timestamp '{}'", fields[1])))?;
            for (j, f) in fields[2..].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| bad(format!("bad value '{f}'")))?;
                mem.states[node * dim + j] = c(v);
            }
            seen += 1;
        }
        if seen != n_nodes {
            return Err(Error::Parse {
                line: seen as u64,
                msg: format!("snapshot has {seen} rows, expected {n_nodes}"),
            });
        }
        Ok(mem)
    }
}

fn fmt_time(t: f64) -> String {
    if t == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{t:?}")
    }
}

fn parse_time(s: &str) -> Option<f64> {
    if s == "-inf" {
        Some(f64::NEG_INFINITY)
    } else {
        s.parse().ok()
    }
}

fn materialize<T: Scalar>(store: &ParamStore<T>, time: &TimeEncoder, p: &PendingMessage<T>) -> Message<T> {
    let mut payload = p.prefix.clone();
    payload.extend(time.encode(store, c(p.delta), 0));
    Message {
        payload,
        source_time: p.source_time,
        seq_no: p.seq_no,
    }
}

/// Message for `node` about an event with `counterpart` at `t_event`, using
/// the committed states from before the event.
#[allow(clippy::too_many_arguments)]
pub fn build_message<T: Scalar>(
    mem: &MemoryState<T>,
    store: &ParamStore<T>,
    time: &TimeEncoder,
    node: NodeId,
    counterpart: NodeId,
    t_event: f64,
    edge_features: &[f64],
    seq_no: usize,
) -> Result<Message<T>> {
    mem.check_node(node)?;
    mem.check_node(counterpart)?;
    let p = mem.pending_message(node, counterpart, t_event, edge_features, seq_no);
    Ok(materialize(store, time, &p))
}

/// Message → aggregate → GRU for every endpoint touched by `batch`.
pub fn advance_memory<T: Scalar>(
    mem: &mut MemoryState<T>,
    store: &ParamStore<T>,
    gru: &Gru,
    time: &TimeEncoder,
    mode: Aggregation,
    dims: &GraphDims,
    batch: &[Interaction],
) -> Result<()> {
    if mem.has_pending() {
        mem.flush(store, gru, time, mode)?;
    }
    mem.stage(batch, dims)?;
    mem.flush(store, gru, time, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::time_codec::TimeVariant;

    struct Fixture {
        store: ParamStore<f64>,
        gru: Gru,
        time: TimeEncoder,
        dims: GraphDims,
    }

    fn fixture(d: usize, d_e: usize, d_t: usize) -> Fixture {
        let mut rng = stream(2, "mem", &[]);
        let mut store = ParamStore::new();
        let time = TimeEncoder::build(TimeVariant::Bochner, d_t, 2, &mut store, &mut rng).unwrap();
        let gru = Gru::build("gru", 2 * d + d_e + d_t, d, &mut store, &mut rng);
        Fixture {
            store,
            gru,
            time,
            dims: GraphDims {
                n_users: 2,
                n_items: 3,
                d_e,
            },
        }
    }

    fn msg(payload: Vec<f64>, t: f64, seq: usize) -> Message<f64> {
        Message {
            payload,
            source_time: t,
            seq_no: seq,
        }
    }

    #[test]
    fn long_term_bounds() {
        let mut store = ParamStore::<f64>::new();
        let t = store.add("table", Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(long_term(&store, t, 0).unwrap(), vec![1., 2.]);
        store.get_mut(t).row_mut(2)[1] = 9.0;
        assert_eq!(long_term(&store, t, 2).unwrap(), vec![5., 9.]);
        assert!(long_term(&store, t, 3).is_err());
    }

    #[test]
    fn fresh_message_payload() {
        let mut store = ParamStore::<f64>::new();
        let freqs = store.add("f", Tensor::from_vec(1, 1, vec![0.0]).unwrap());
        let time = TimeEncoder::Bochner { frequencies: freqs };
        let mem = MemoryState::<f64>::new(3, 2);
        let m = build_message(&mem, &store, &time, 0, 1, 3.0, &[], 0).unwrap();
        assert_eq!(m.payload, vec![0., 0., 0., 0., 1., 0.]);
        assert_eq!(m.source_time, 3.0);
        assert!(build_message(&mem, &store, &time, 0, 5, 3.0, &[], 0).is_err());
    }

    #[test]
    fn payload_arity() {
        for (d, d_e, d_t) in [(3, 0, 2), (4, 5, 6), (1, 1, 8)] {
            let f = fixture(d, d_e, d_t);
            let mem = MemoryState::<f64>::new(5, d);
            let m = build_message(&mem, &f.store, &f.time, 0, 3, 1.0, &vec![0.5; d_e], 0).unwrap();
            assert_eq!(m.payload.len(), 2 * d + d_e + d_t);
        }
    }

    #[test]
    fn aggregation_modes() {
        let m1 = msg(vec![1.0, 2.0], 1.0, 0);
        let m2 = msg(vec![3.0, 6.0], 5.0, 1);
        let batch = [m1.clone(), m2.clone()];
        assert_eq!(aggregate_messages(&batch, Aggregation::Last).unwrap(), m2);
        let mean = aggregate_messages(&batch, Aggregation::Mean).unwrap();
        assert_eq!(mean.payload, vec![2.0, 4.0]);
        assert_eq!(mean.source_time, 5.0);
        for mode in [Aggregation::Last, Aggregation::Mean] {
            assert_eq!(aggregate_messages(&[m1.clone()], mode).unwrap(), m1);
        }
        assert!(aggregate_messages::<f64>(&[], Aggregation::Last).is_err());
        // equal times: later seq wins
        let m3 = msg(vec![0.0, 0.0], 5.0, 2);
        assert_eq!(aggregate_messages(&[m3.clone(), m2], Aggregation::Last).unwrap(), m3);
    }

    #[test]
    fn gru_closed_forms() {
        let f = fixture(2, 0, 2);
        let mut zero = f.store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            zero.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = msg(vec![0.3; 6], 0.0, 0);
        assert_eq!(gru_update(&zero, &f.gru, &x, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(gru_update(&zero, &f.gru, &x, &[0.4, -0.8]).unwrap(), vec![0.2, -0.4]);
        assert!(gru_update(&zero, &f.gru, &msg(vec![0.3; 5], 0.0, 0), &[0.0, 0.0]).is_err());
        assert!(gru_update(&zero, &f.gru, &x, &[0.0]).is_err());
    }

    #[test]
    fn advance_touches_only_endpoints() {
        let f = fixture(3, 0, 2);
        let mut mem = MemoryState::<f64>::new(f.dims.n_nodes(), 3);
        let warm = [Interaction::new(1, 2, 0.5, 0)];
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &warm).unwrap();
        let before = mem.clone();
        let batch = [Interaction::new(0, 1, 1.0, 1)];
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &batch).unwrap();
        let touched = [f.dims.user_node(0), f.dims.item_node(1)];
        for node in 0..f.dims.n_nodes() {
            if touched.contains(&node) {
                assert_ne!(mem.state(node), before.state(node));
                assert_eq!(mem.last_update(node), 1.0);
            } else {
                let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(mem.state(node)), bits(before.state(node)));
                assert_eq!(mem.last_update(node), before.last_update(node));
            }
        }
    }

    #[test]
    fn last_aggregation_uses_latest_event_once() {
        let f = fixture(3, 0, 2);
        let mut mem = MemoryState::<f64>::new(f.dims.n_nodes(), 3);
        let batch = [Interaction::new(0, 0, 1.0, 0), Interaction::new(0, 1, 2.0, 1)];
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &batch).unwrap();
        assert_eq!(mem.update_count(0), 1);
        let fresh = MemoryState::<f64>::new(f.dims.n_nodes(), 3);
        let m2 = build_message(&fresh, &f.store, &f.time, 0, f.dims.item_node(1), 2.0, &[], 1).unwrap();
        let expect = gru_update(&f.store, &f.gru, &m2, &[0.0; 3]).unwrap();
        assert_eq!(mem.state(0), expect.as_slice());
        assert_eq!(mem.last_update(0), 2.0);
    }

    #[test]
    fn messages_use_states_before_the_event() {
        // hand-stepped two-event replay
        let f = fixture(2, 1, 2);
        let dims = f.dims;
        let (u, i0, i1) = (dims.user_node(0), dims.item_node(0), dims.item_node(1));
        let mut mem = MemoryState::<f64>::new(dims.n_nodes(), 2);
        let e1 = Interaction::new(0, 0, 1.0, 0).with_features(vec![0.5]);
        let e2 = Interaction::new(0, 1, 3.0, 1).with_features(vec![-1.0]);
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &dims, &[e1]).unwrap();
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &dims, &[e2]).unwrap();

        let enc = |delta: f64| f.time.encode(&f.store, delta, 0);
        let step = |x: Vec<f64>, h: &[f64]| f.gru.forward(&f.store, &x, h).unwrap();
        let zero = vec![0.0; 2];
        let cat = |parts: &[&[f64]]| parts.concat();
        let s_u1 = step(cat(&[&zero, &zero, &[0.5], &enc(0.0)]), &zero);
        let s_i0 = step(cat(&[&zero, &zero, &[0.5], &enc(0.0)]), &zero);
        let s_u2 = step(cat(&[&s_u1, &zero, &[-1.0], &enc(2.0)]), &s_u1);
        let s_i1 = step(cat(&[&zero, &s_u1, &[-1.0], &enc(0.0)]), &zero);
        assert_eq!(mem.state(u), s_u2.as_slice());
        assert_eq!(mem.state(i0), s_i0.as_slice());
        assert_eq!(mem.state(i1), s_i1.as_slice());
    }

    #[test]
    fn out_of_order_rejected() {
        let f = fixture(2, 0, 2);
        let mut mem = MemoryState::<f64>::new(f.dims.n_nodes(), 2);
        let a = [Interaction::new(0, 0, 2.0, 0)];
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &a).unwrap();
        let b = [Interaction::new(0, 1, 1.0, 1)];
        assert!(matches!(
            advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &b),
            Err(Error::OutOfOrder(_))
        ));
        let c = [Interaction::new(1, 1, 5.0, 2), Interaction::new(1, 2, 4.0, 3)];
        assert!(advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &c).is_err());
    }

    #[test]
    fn pending_on_tape_matches_commit() {
        let f = fixture(3, 0, 4);
        let mut mem = MemoryState::<f64>::new(f.dims.n_nodes(), 3);
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &[Interaction::new(0, 0, 1.0, 0)]).unwrap();
        mem.stage(&[Interaction::new(0, 1, 2.0, 1), Interaction::new(0, 2, 4.0, 2)], &f.dims).unwrap();
        for mode in [Aggregation::Last, Aggregation::Mean] {
            let mut tape = Tape::new(&f.store);
            let v = mem.short_term_on(&mut tape, &f.gru, &f.time, mode, 0);
            let on_tape = tape.value(v).to_vec();
            let mut committed = mem.clone();
            committed.flush(&f.store, &f.gru, &f.time, mode).unwrap();
            assert_eq!(on_tape.as_slice(), committed.state(0));
            assert_eq!(committed.last_update(0), 4.0);
        }
    }

    #[test]
    fn snapshot_roundtrip() {
        let f = fixture(2, 0, 2);
        let mut mem = MemoryState::<f64>::new(f.dims.n_nodes(), 2);
        advance_memory(&mut mem, &f.store, &f.gru, &f.time, Aggregation::Last, &f.dims, &[Interaction::new(1, 2, 1.5, 0)]).unwrap();
        let mut buf = Vec::new();
        mem.write_snapshot(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("0,-inf,0.0,0.0\n"));
        let back = MemoryState::<f64>::read_snapshot(buf.as_slice(), f.dims.n_nodes(), 2).unwrap();
        assert_eq!(back.states(), mem.states());
        assert_eq!(back.last_update(1), 1.5);
        assert!(MemoryState::<f64>::read_snapshot("0,-inf,1\n".as_bytes(), 1, 2).is_err());
    }
}
