//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every intermediate as a dense vector. Parameters are
//! read from a borrowed [`ParamStore`] and their adjoints land in a
//! [`Grads`] buffer. Forward-only use (scoring) simply never calls
//! [`Tape::backward`].

use crate::params::{dot, Grads, ParamId, ParamStore};
use crate::scalar::{c, sigmoid, log_sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · σ(x)`
    #[default]
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative in terms of the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(crate::Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Row { param: ParamId, row: usize },
    Param { param: ParamId },
    MatVec { param: ParamId, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Act(Var, Activation),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Dot(Var, Var),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Mean(Vec<Var>),
    /// `sqrt(2/d)·[cos(w_k Δ), sin(w_k Δ)]_k` with frequencies from `param`.
    Harmonic { param: ParamId, delta: T },
    /// `w · Δ` elementwise.
    Ramp { param: ParamId, delta: T },
    LogSigmoid(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn row(&mut self, param: ParamId, row: usize) -> Var {
        let value = self.store.get(param).row(row).to_vec();
        self.push(value, Op::Row { param, row })
    }

    pub fn param(&mut self, param: ParamId) -> Var {
        let value = self.store.get(param).data.clone();
        self.push(value, Op::Param { param })
    }

    pub fn matvec(&mut self, param: ParamId, x: Var) -> Var {
        let value = self.store.get(param).matvec(self.value(x));
        self.push(value, Op::MatVec { param, x })
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.len(), vb.len());
        va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.map(a, |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| T::one() - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let v = self.map(a, |x| act.apply(x));
        self.push(v, Op::Act(a, act))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let len = parts.iter().map(|p| self.value(*p).len()).sum();
        let mut v = Vec::with_capacity(len);
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x)[start..start + len].to_vec();
        self.push(v, Op::Slice { x, start })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = vec![dot(self.value(a), self.value(b))];
        self.push(v, Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// `Σ_k weights[k] · items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = self.value(weights);
        debug_assert_eq!(w.len(), items.len());
        let len = self.value(items[0]).len();
        let mut v = vec![T::zero(); len];
        for (k, it) in items.iter().enumerate() {
            let wk = w[k];
            for (acc, &x) in v.iter_mut().zip(self.value(*it)) {
                *acc = *acc + wk * x;
            }
        }
        self.push(
            v,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, items: &[Var]) -> Var {
        let len = self.value(items[0]).len();
        let inv = T::one() / c::<T>(items.len() as f64);
        let mut v = vec![T::zero(); len];
        for it in items {
            for (acc, &x) in v.iter_mut().zip(self.value(*it)) {
                *acc = *acc + x;
            }
        }
        for x in v.iter_mut() {
            *x = *x * inv;
        }
        self.push(v, Op::Mean(items.to_vec()))
    }

    pub fn harmonic(&mut self, param: ParamId, delta: T) -> Var {
        let v = crate::time_codec::harmonic_features(&self.store.get(param).data, delta);
        self.push(v, Op::Harmonic { param, delta })
    }

    pub fn ramp(&mut self, param: ParamId, delta: T) -> Var {
        let v = self.store.get(param).data.iter().map(|&w| w * delta).collect();
        self.push(v, Op::Ramp { param, delta })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Propagate `d(root)/d(·)` into `grads`, seeding the root adjoint with `seed`.
    pub fn backward(&self, root: Var, seed: T, grads: &mut Grads<T>) {
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![seed; self.nodes[root.0].value.len()]);

        fn acc<T: Scalar>(adj: &mut [Option<Vec<T>>], target: Var, len: usize) -> &mut Vec<T> {
            adj[target.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Row { param, row } => {
                    for (a, &b) in grads.row_mut(*param, *row).iter_mut().zip(&g) {
                        *a = *a + b;
                    }
                }
                Op::Param { param } => {
                    for (a, &b) in grads.dense_mut(*param).iter_mut().zip(&g) {
                        *a = *a + b;
                    }
                }
                Op::MatVec { param, x } => {
                    let w = self.store.get(*param);
                    let xv = self.value(*x);
                    {
                        let gw = grads.dense_mut(*param);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == T::zero() {
                                continue;
                            }
                            let row = &mut gw[r * w.cols..(r + 1) * w.cols];
                            for (a, &xv) in row.iter_mut().zip(xv) {
                                *a = *a + gr * xv;
                            }
                        }
                    }
                    if !matches!(self.nodes[x.0].op, Op::Input) {
                        let gx = acc(&mut adj, *x, w.cols);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == T::zero() {
                                continue;
                            }
                            for (a, &wv) in gx.iter_mut().zip(w.row(r)) {
                                *a = *a + gr * wv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, T::one());
                    add_into(acc(&mut adj, *b, g.len()), &g, T::one());
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, T::one());
                    add_into(acc(&mut adj, *b, g.len()), &g, -T::one());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * vb[k];
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] = gb[k] + g[k] * va[k];
                    }
                }
                Op::Scale(a, k) => add_into(acc(&mut adj, *a, g.len()), &g, *k),
                Op::OneMinus(a) => add_into(acc(&mut adj, *a, g.len()), &g, -T::one()),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * y[k] * (T::one() - y[k]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * (T::one() - y[k] * y[k]);
                    }
                }
                Op::Act(a, act) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * act.derivative(x[k], y[k]);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        add_into(acc(&mut adj, *p, len), &g[off..off + len], T::one());
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let len = self.value(*x).len();
                    let gx = acc(&mut adj, *x, len);
                    add_into(&mut gx[*start..*start + g.len()], &g, T::one());
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    add_into(acc(&mut adj, *a, va.len()), vb, g[0]);
                    add_into(acc(&mut adj, *b, vb.len()), va, g[0]);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let s = dot(&g, y);
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] = ga[k] + y[k] * (g[k] - s);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.value(*weights).to_vec();
                    let mut gw = Vec::with_capacity(items.len());
                    for it in items {
                        gw.push(dot(&g, self.value(*it)));
                    }
                    add_into(acc(&mut adj, *weights, w.len()), &gw, T::one());
                    for (k, it) in items.iter().enumerate() {
                        add_into(acc(&mut adj, *it, g.len()), &g, w[k]);
                    }
                }
                Op::Mean(items) => {
                    let inv = T::one() / c::<T>(items.len() as f64);
                    for it in items {
                        add_into(acc(&mut adj, *it, g.len()), &g, inv);
                    }
                }
                Op::Harmonic { param, delta } => {
                    // y_{2k} = s cos(w_k Δ), y_{2k+1} = s sin(w_k Δ)
                    let y = &node.value;
                    let gw = grads.dense_mut(*param);
                    for k in 0..gw.len() {
                        let (cos_s, sin_s) = (y[2 * k], y[2 * k + 1]);
                        gw[k] = gw[k] + *delta * (g[2 * k + 1] * cos_s - g[2 * k] * sin_s);
                    }
                }
                Op::Ramp { param, delta } => {
                    let gw = grads.dense_mut(*param);
                    for k in 0..gw.len() {
                        gw[k] = gw[k] + g[k] * *delta;
                    }
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    let ga = acc(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        // d/dx ln σ(x) = σ(-x)
                        ga[k] = ga[k] + g[k] * sigmoid(-x[k]);
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T], k: T) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + k * b;
    }
}

/// Numerically stable softmax; an empty input yields an empty output.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;
    use crate::rng::stream;
    use rand::Rng;

    /// Central-difference gradient of `f` w.r.t. every entry of every parameter.
    fn fd(store: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut work = store.clone();
        store
            .ids()
            .map(|id| {
                (0..store.get(id).len())
                    .map(|k| {
                        let orig = work.get(id).data[k];
                        work.get_mut(id).data[k] = orig + h;
                        let fp = f(&work);
                        work.get_mut(id).data[k] = orig - h;
                        let fm = f(&work);
                        work.get_mut(id).data[k] = orig;
                        (fp - fm) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = stream(11, "tape", &[]);
        let mut store = ParamStore::<f64>::new();
        let mut rand_t = |r, c| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let w = store.add("w", rand_t(3, 4));
        let table = store.add_row_sparse("table", rand_t(5, 4));
        let b = store.add("b", rand_t(3, 1));
        let freqs = store.add("freqs", rand_t(2, 1));
        let ramp = store.add("ramp", rand_t(4, 1));

        let f = |s: &ParamStore<f64>, grads: Option<&mut Grads<f64>>| -> f64 {
            let mut t = Tape::new(s);
            let x = t.input(vec![0.3, -0.7, 1.1, 0.2]);
            let r2 = t.row(table, 2);
            let r4 = t.row(table, 4);
            let xr = t.add(x, r2);
            let y = t.matvec(w, xr);
            let bb = t.param(b);
            let y = t.add(y, bb);
            let s1 = t.sigmoid(y);
            let s2 = t.tanh(y);
            let s3 = t.act(y, Activation::Silu);
            let m = t.mul(s1, s2);
            let m = t.sub(m, s3);
            let om = t.one_minus(m);
            let sc = t.scale(om, 0.7);
            let hm = t.harmonic(freqs, 1.3);
            let rp = t.ramp(ramp, -0.4);
            let cat = t.concat(&[sc, hm]);
            let sl = t.slice(cat, 1, 4);
            let d1 = t.dot(sl, r4);
            let d2 = t.dot(rp, r2);
            let d3 = t.dot(sl, rp);
            let logits = t.concat(&[d1, d2, d3]);
            let alpha = t.softmax(logits);
            let ws = t.weighted_sum(alpha, &[sl, r4, rp]);
            let mn = t.mean(&[ws, r2]);
            let one = t.input(vec![1.0; 4]);
            let tot = t.dot(mn, one);
            let out = t.log_sigmoid(tot);
            if let Some(g) = grads {
                t.backward(out, 1.0, g);
            }
            t.scalar(out)
        };

        let mut grads = Grads::zeros_like(&store);
        f(&store, Some(&mut grads));
        let numeric = fd(&store, &|s| f(s, None));
        for id in store.ids() {
            let analytic = grads.to_dense(id);
            for (a, n) in analytic.iter().zip(&numeric[id.0]) {
                assert!((a - n).abs() < 1e-7, "{}: {a} vs {n}", store.name(id));
            }
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.1f64, 2.0, -3.0]);
        let b = softmax(&[100.1f64, 102.0, 97.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax::<f64>(&[]).is_empty());
    }
}
