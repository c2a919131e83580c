//! Dynamic collaborative transformer: time-aware embeddings of a node and
//! its sampled neighbors, masked multi-head attention over the neighbors,
//! and the feed-forward combiner, stacked recursively over layers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctdg::{neighbors_before, NodeId, SamplingStrategy, TemporalGraph};
use crate::error::{Error, Result};
use crate::memory::{Aggregation, Gru, MemoryState};
use crate::nn::Ffn;
use crate::params::{ParamId, ParamStore, Tensor};
use crate::rng;
use crate::scalar::{c, Scalar};
use crate::tape::{softmax, Activation, Tape, Var};
use crate::time_codec::TimeEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Scaled dot-product attention over neighbors.
    #[default]
    Dsacf,
    /// Unweighted mean of the value projections.
    Sum,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsacf" | "attention" => Ok(AttentionKind::Dsacf),
            "sum" | "mean" => Ok(AttentionKind::Sum),
            other => Err(Error::InvalidArgument(format!("unknown attention kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// One transformer layer: per-head projections plus the combiner FFN
/// mapping `(d + d + d_t) → d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DctLayer {
    pub heads: Vec<Head>,
    pub ffn: Ffn,
    pub d: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub attention: AttentionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Center,
    Neighbor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicEmbedding<T> {
    pub vector: Vec<T>,
    pub role: Role,
}

impl DctLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        d: usize,
        d_t: usize,
        d_e: usize,
        heads: usize,
        attention: AttentionKind,
        act: Activation,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} must divide embedding size {d}"
            )));
        }
        let d_h = d / heads;
        let heads = (0..heads)
            .map(|h| Head {
                w_q: store.add(format!("{prefix}.head{h}.w_q"), Tensor::xavier_uniform(d_h, d + d_t, rng)),
                w_k: store.add(format!("{prefix}.head{h}.w_k"), Tensor::xavier_uniform(d_h, d + d_e + d_t, rng)),
                w_v: store.add(format!("{prefix}.head{h}.w_v"), Tensor::xavier_uniform(d_h, d + d_e + d_t, rng)),
            })
            .collect();
        let ffn = Ffn::build(&format!("{prefix}.ffn"), 2 * d + d_t, d, d, act, store, rng);
        Ok(DctLayer {
            heads,
            ffn,
            d,
            d_t,
            d_e,
            attention,
        })
    }

    pub fn center_len(&self) -> usize {
        self.d + self.d_t
    }

    pub fn neighbor_len(&self) -> usize {
        self.d + self.d_e + self.d_t
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / c::<T>((self.d + self.d_t) as f64).sqrt()
    }
}

/// `[h ‖ φ(t_q, t_q)]`, the zero-elapsed-time encoding appended.
pub fn center_embedding<T: Scalar>(h: &[T], store: &ParamStore<T>, time: &TimeEncoder) -> DynamicEmbedding<T> {
    let mut vector = h.to_vec();
    vector.extend(time.encode(store, T::zero(), 0));
    DynamicEmbedding {
        vector,
        role: Role::Center,
    }
}

/// `[h ‖ edge_features ‖ φ(t_q, t_p)]`; `rank` only matters for the position encoding.
pub fn neighbor_embedding<T: Scalar>(
    h: &[T],
    edge_features: &[f64],
    store: &ParamStore<T>,
    time: &TimeEncoder,
    t_q: f64,
    t_p: f64,
    rank: usize,
) -> DynamicEmbedding<T> {
    let mut vector = h.to_vec();
    vector.extend(edge_features.iter().map(|&x| c::<T>(x)));
    vector.extend(time.encode(store, c(t_q - t_p), rank));
    DynamicEmbedding {
        vector,
        role: Role::Neighbor,
    }
}

fn check_inputs<T>(layer: &DctLayer, z_center: &[T], z_neighbors: &[Vec<T>], mask: &[bool]) -> Result<()> {
    if z_center.len() != layer.center_len() {
        return Err(Error::Shape(format!(
            "center embedding has length {}, expected {}",
            z_center.len(),
            layer.center_len()
        )));
    }
    if mask.len() != z_neighbors.len() {
        return Err(Error::Shape(format!(
            "mask length {} does not match {} neighbor slots",
            mask.len(),
            z_neighbors.len()
        )));
    }
    for (z, &m) in z_neighbors.iter().zip(mask) {
        if m && z.len() != layer.neighbor_len() {
            return Err(Error::Shape(format!(
                "neighbor embedding has length {}, expected {}",
                z.len(),
                layer.neighbor_len()
            )));
        }
    }
    Ok(())
}

/// Raw scores `β_k = (W_k z_k)ᵀ(W_q z_c) / √(d+d_t)` for one head over the unmasked slots.
pub fn attention_logits<T: Scalar>(
    store: &ParamStore<T>,
    layer: &DctLayer,
    head: usize,
    z_center: &[T],
    z_neighbors: &[Vec<T>],
    mask: &[bool],
) -> Vec<T> {
    let hd = &layer.heads[head];
    let q = store.get(hd.w_q).matvec(z_center);
    let scale = layer.scale::<T>();
    z_neighbors
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(z, _)| crate::params::dot(&store.get(hd.w_k).matvec(z), &q) * scale)
        .collect()
}

/// Attention weights for every slot; masked slots get exactly 0.
pub fn attention_weights<T: Scalar>(
    store: &ParamStore<T>,
    layer: &DctLayer,
    head: usize,
    z_center: &[T],
    z_neighbors: &[Vec<T>],
    mask: &[bool],
) -> Result<Vec<T>> {
    check_inputs(layer, z_center, z_neighbors, mask)?;
    let alpha = match layer.attention {
        AttentionKind::Dsacf => softmax(&attention_logits(store, layer, head, z_center, z_neighbors, mask)),
        AttentionKind::Sum => {
            let n = mask.iter().filter(|&&m| m).count();
            vec![T::one() / c::<T>(n as f64); n]
        }
    };
    let mut it = alpha.into_iter();
    Ok(mask
        .iter()
        .map(|&m| if m { it.next().unwrap_or(T::zero()) } else { T::zero() })
        .collect())
}

/// Attention-weighted sum of value projections, heads concatenated to length `d`.
/// No unmasked neighbors gives the zero vector.
pub fn dsacf<T: Scalar>(
    store: &ParamStore<T>,
    layer: &DctLayer,
    z_center: &[T],
    z_neighbors: &[Vec<T>],
    mask: &[bool],
) -> Result<Vec<T>> {
    check_inputs(layer, z_center, z_neighbors, mask)?;
    let mut out = Vec::with_capacity(layer.d);
    for (h, hd) in layer.heads.iter().enumerate() {
        let alpha = attention_weights(store, layer, h, z_center, z_neighbors, mask)?;
        let wv = store.get(hd.w_v);
        let mut acc = vec![T::zero(); wv.rows];
        for ((z, &m), &a) in z_neighbors.iter().zip(mask).zip(&alpha) {
            if !m {
                continue;
            }
            for (o, v) in acc.iter_mut().zip(wv.matvec(z)) {
                *o = *o + a * v;
            }
        }
        out.extend(acc);
    }
    Ok(out)
}

/// `FFN(z_N ‖ z_center)`.
pub fn dct_layer<T: Scalar>(store: &ParamStore<T>, layer: &DctLayer, z_center: &[T], z_n: &[T]) -> Result<Vec<T>> {
    if z_n.len() != layer.d || z_center.len() != layer.center_len() {
        return Err(Error::Shape(format!(
            "dct layer expects ({}, {}), got ({}, {})",
            layer.d,
            layer.center_len(),
            z_n.len(),
            z_center.len()
        )));
    }
    let mut x = z_n.to_vec();
    x.extend_from_slice(z_center);
    layer.ffn.forward(store, &x)
}

/// Tape counterpart of [`dsacf`]; `z_neighbors` holds only the real neighbors.
pub fn dsacf_on<T: Scalar>(tape: &mut Tape<'_, T>, layer: &DctLayer, z_center: Var, z_neighbors: &[Var]) -> Var {
    if z_neighbors.is_empty() {
        return tape.input(vec![T::zero(); layer.d]);
    }
    let scale = layer.scale::<T>();
    let mut head_outs = Vec::with_capacity(layer.heads.len());
    for hd in &layer.heads {
        let values: Vec<Var> = z_neighbors.iter().map(|&z| tape.matvec(hd.w_v, z)).collect();
        let out = match layer.attention {
            AttentionKind::Dsacf => {
                let q = tape.matvec(hd.w_q, z_center);
                let logits: Vec<Var> = z_neighbors
                    .iter()
                    .map(|&z| {
                        let k = tape.matvec(hd.w_k, z);
                        let s = tape.dot(k, q);
                        tape.scale(s, scale)
                    })
                    .collect();
                let logits = tape.concat(&logits);
                let alpha = tape.softmax(logits);
                tape.weighted_sum(alpha, &values)
            }
            AttentionKind::Sum => tape.mean(&values),
        };
        head_outs.push(out);
    }
    if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat(&head_outs)
    }
}

pub fn dct_layer_on<T: Scalar>(tape: &mut Tape<'_, T>, layer: &DctLayer, z_center: Var, z_n: Var) -> Var {
    let x = tape.concat(&[z_n, z_center]);
    layer.ffn.forward_on(tape, x)
}

/// Everything the recursive embedding needs besides the tape.
#[derive(Clone, Copy)]
pub struct EmbedContext<'a, T> {
    pub graph: &'a TemporalGraph,
    pub memory: &'a MemoryState<T>,
    pub long_table: ParamId,
    pub time: &'a TimeEncoder,
    pub gru: &'a Gru,
    pub layers: &'a [DctLayer],
    pub epsilon: usize,
    pub strategy: SamplingStrategy,
    pub aggregation: Aggregation,
    pub use_short_term: bool,
    pub seed: u64,
}

/// Builds `h^{(ℓ)}` for nodes on a tape, memoizing repeated sub-embeddings.
pub struct Embedder<'a, T> {
    ctx: EmbedContext<'a, T>,
    base: HashMap<NodeId, Var>,
    layered: HashMap<(NodeId, u64, usize), Var>,
}

impl<'a, T: Scalar> Embedder<'a, T> {
    pub fn new(ctx: EmbedContext<'a, T>) -> Self {
        Embedder {
            ctx,
            base: HashMap::new(),
            layered: HashMap::new(),
        }
    }

    /// `s_v + l_v`.
    fn base(&mut self, tape: &mut Tape<'_, T>, node: NodeId) -> Var {
        if let Some(&v) = self.base.get(&node) {
            return v;
        }
        let long = tape.row(self.ctx.long_table, node);
        let v = if self.ctx.use_short_term {
            let short = self
                .ctx
                .memory
                .short_term_on(tape, self.ctx.gru, self.ctx.time, self.ctx.aggregation, node);
            tape.add(short, long)
        } else {
            long
        };
        self.base.insert(node, v);
        v
    }

    /// Representation of `node` at time `t` after `level` layers.
    pub fn embed(&mut self, tape: &mut Tape<'_, T>, node: NodeId, t: f64, level: usize) -> Var {
        if level == 0 {
            return self.base(tape, node);
        }
        let key = (node, t.to_bits(), level);
        if let Some(&v) = self.layered.get(&key) {
            return v;
        }
        let ctx = self.ctx;
        let layer = &ctx.layers[level - 1];
        let h_center = self.embed(tape, node, t, level - 1);
        let self_enc = ctx.time.encode_on(tape, T::zero(), 0);
        let z_center = tape.concat(&[h_center, self_enc]);

        let mut sampler = rng::stream(ctx.seed, "neighbors", &[node as u64, t.to_bits(), level as u64]);
        let neigh = neighbors_before(ctx.graph, node, t, ctx.epsilon, ctx.strategy, &mut sampler);
        let mut z_neighbors = Vec::with_capacity(neigh.len());
        for (k, nb) in neigh.entries.iter().enumerate() {
            let h = self.embed(tape, nb.node, nb.timestamp, level - 1);
            let mut parts = vec![h];
            let feats = &ctx.graph.event(nb.event).edge_features;
            if !feats.is_empty() {
                parts.push(tape.input(feats.iter().map(|&x| c::<T>(x)).collect()));
            }
            parts.push(ctx.time.encode_on(tape, c(t - nb.timestamp), k + 1));
            z_neighbors.push(tape.concat(&parts));
        }
        let z_n = dsacf_on(tape, layer, z_center, &z_neighbors);
        let out = dct_layer_on(tape, layer, z_center, z_n);
        self.layered.insert(key, out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::time_codec::TimeVariant;
    use rand::Rng;

    fn layer(d: usize, d_t: usize, d_e: usize, heads: usize) -> (ParamStore<f64>, DctLayer, TimeEncoder) {
        let mut rng = stream(4, "dct", &[]);
        let mut store = ParamStore::new();
        let time = TimeEncoder::build(TimeVariant::Bochner, d_t, 3, &mut store, &mut rng).unwrap();
        let l = DctLayer::build("l0", d, d_t, d_e, heads, AttentionKind::Dsacf, Activation::Silu, &mut store, &mut rng).unwrap();
        (store, l, time)
    }

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn center_and_neighbor_layout() {
        let mut store = ParamStore::<f64>::new();
        let f = store.add("f", Tensor::from_vec(1, 1, vec![0.0]).unwrap());
        let time = TimeEncoder::Bochner { frequencies: f };
        let z = center_embedding(&[1.0, 2.0], &store, &time);
        assert_eq!(z.vector, vec![1.0, 2.0, 1.0, 0.0]);
        assert_eq!(z.role, Role::Center);
        let z = neighbor_embedding(&[0.0, 0.0], &[5.0], &store, &time, 9.0, 2.0, 1);
        assert_eq!(z.vector, vec![0.0, 0.0, 5.0, 1.0, 0.0]);
        let z = neighbor_embedding(&[0.0, 0.0], &[], &store, &time, 9.0, 2.0, 1);
        assert_eq!(z.vector.len(), 4);
    }

    #[test]
    fn center_ignores_absolute_time() {
        let (store, _, time) = layer(4, 4, 0, 1);
        let a = center_embedding(&[0.1, 0.2, 0.3, 0.4], &store, &time);
        let b = center_embedding(&[0.1, 0.2, 0.3, 0.4], &store, &time);
        assert_eq!(a, b);
        let n1 = neighbor_embedding(&[0.1; 4], &[], &store, &time, 10.0, 3.0, 1);
        let n2 = neighbor_embedding(&[0.1; 4], &[], &store, &time, 10.0, 7.0, 1);
        assert_eq!(n1.vector[..4], n2.vector[..4]);
        assert_ne!(n1.vector[4..], n2.vector[4..]);
    }

    #[test]
    fn single_neighbor_gets_all_weight() {
        let (store, l, _) = layer(4, 2, 1, 2);
        let mut rng = stream(0, "x", &[]);
        let zc = rand_vec(&mut rng, 6);
        let zk = rand_vec(&mut rng, 7);
        let out = dsacf(&store, &l, &zc, &[zk.clone()], &[true]).unwrap();
        let mut expect = store.get(l.heads[0].w_v).matvec(&zk);
        expect.extend(store.get(l.heads[1].w_v).matvec(&zk));
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(attention_weights(&store, &l, 0, &zc, &[zk], &[true]).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let (store, l, _) = layer(4, 2, 0, 1);
        let mut rng = stream(1, "x", &[]);
        let zc = rand_vec(&mut rng, 6);
        let zk = rand_vec(&mut rng, 6);
        let w = attention_weights(&store, &l, 0, &zc, &[zk.clone(), zk], &[true, true]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn masking_and_empty() {
        let (store, l, _) = layer(4, 2, 0, 1);
        let mut rng = stream(2, "x", &[]);
        let zc = rand_vec(&mut rng, 6);
        let z1 = rand_vec(&mut rng, 6);
        let junk = vec![99.0; 6];
        let w = attention_weights(&store, &l, 0, &zc, &[z1.clone(), junk.clone()], &[true, false]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        let a = dsacf(&store, &l, &zc, &[z1.clone(), junk.clone()], &[true, false]).unwrap();
        let b = dsacf(&store, &l, &zc, &[z1], &[true]).unwrap();
        assert_eq!(a, b);
        let z = dsacf(&store, &l, &zc, &[junk], &[false]).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert_eq!(dsacf(&store, &l, &zc, &[], &[]).unwrap(), vec![0.0; 4]);
        assert!(dsacf(&store, &l, &zc, &[vec![0.0; 6]], &[]).is_err());
    }

    #[test]
    fn head_count_must_divide() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(0, "x", &[]);
        assert!(DctLayer::build("l", 6, 2, 0, 4, AttentionKind::Dsacf, Activation::Silu, &mut store, &mut rng).is_err());
    }

    #[test]
    fn identity_ffn_layer() {
        let (mut store, mut l, _) = layer(3, 2, 0, 1);
        l.ffn.make_slice_identity(&mut store).unwrap();
        let out = dct_layer(&store, &l, &[4.0, 5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
        assert!(dct_layer(&store, &l, &[4.0; 5], &[1.0; 2]).is_err());
    }

    #[test]
    fn tape_matches_plain_dsacf_and_layer() {
        for kind in [AttentionKind::Dsacf, AttentionKind::Sum] {
            let (store, mut l, _) = layer(4, 4, 2, 2);
            l.attention = kind;
            let mut rng = stream(3, "x", &[]);
            let zc = rand_vec(&mut rng, 8);
            let zs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 10)).collect();
            let plain_n = dsacf(&store, &l, &zc, &zs, &[true; 3]).unwrap();
            let plain = dct_layer(&store, &l, &zc, &plain_n).unwrap();
            let mut tape = Tape::new(&store);
            let c = tape.input(zc.clone());
            let vs: Vec<Var> = zs.iter().map(|z| tape.input(z.clone())).collect();
            let zn = dsacf_on(&mut tape, &l, c, &vs);
            let out = dct_layer_on(&mut tape, &l, c, zn);
            for (a, b) in tape.value(zn).iter().zip(&plain_n) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in tape.value(out).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
