//! Flat parameter storage, gradient buffers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Row-major dense matrix; vectors are `rows × 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Glorot/Xavier uniform on `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
    pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| c(rng.gen_range(-a..=a)))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    /// Tensors whose gradients are accumulated per touched row.
    row_sparse: Vec<bool>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            row_sparse: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.row_sparse.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_row_sparse(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let id = self.add(name, tensor);
        self.row_sparse[id.0] = true;
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_row_sparse(&self, id: ParamId) -> bool {
        self.row_sparse[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            row_sparse: self.row_sparse.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum GradBuf<T> {
    Unset,
    Dense(Vec<T>),
    Rows(BTreeMap<usize, Vec<T>>),
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    bufs: Vec<GradBuf<T>>,
    shapes: Vec<(usize, usize, bool)>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            bufs: vec![GradBuf::Unset; store.len()],
            shapes: store
                .tensors
                .iter()
                .zip(&store.row_sparse)
                .map(|(t, &s)| (t.rows, t.cols, s))
                .collect(),
        }
    }

    pub fn dense_mut(&mut self, id: ParamId) -> &mut [T] {
        let (rows, cols, sparse) = self.shapes[id.0];
        if sparse {
            self.densify(id);
        }
        let buf = &mut self.bufs[id.0];
        if matches!(buf, GradBuf::Unset) {
            *buf = GradBuf::Dense(vec![T::zero(); rows * cols]);
        }
        match buf {
            GradBuf::Dense(v) => v,
            _ => unreachable!(),
        }
    }

    fn densify(&mut self, id: ParamId) {
        let (rows, cols, _) = self.shapes[id.0];
        let buf = &mut self.bufs[id.0];
        if let GradBuf::Rows(map) = buf {
            let mut dense = vec![T::zero(); rows * cols];
            for (r, v) in map.iter() {
                dense[r * cols..(r + 1) * cols].copy_from_slice(v);
            }
            *buf = GradBuf::Dense(dense);
        }
    }

    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [T] {
        let (rows, cols, sparse) = self.shapes[id.0];
        let buf = &mut self.bufs[id.0];
        if matches!(buf, GradBuf::Unset) {
            *buf = if sparse {
                GradBuf::Rows(BTreeMap::new())
            } else {
                GradBuf::Dense(vec![T::zero(); rows * cols])
            };
        }
        match buf {
            GradBuf::Dense(v) => &mut v[row * cols..(row + 1) * cols],
            GradBuf::Rows(map) => map.entry(row).or_insert_with(|| vec![T::zero(); cols]),
            GradBuf::Unset => unreachable!(),
        }
    }

    /// Add `other` into `self`, element by element in a fixed order.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (k, buf) in other.bufs.iter().enumerate() {
            let id = ParamId(k);
            match buf {
                GradBuf::Unset => {}
                GradBuf::Dense(v) => {
                    for (a, &b) in self.dense_mut(id).iter_mut().zip(v) {
                        *a = *a + b;
                    }
                }
                GradBuf::Rows(map) => {
                    for (&r, v) in map {
                        for (a, &b) in self.row_mut(id, r).iter_mut().zip(v) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }

    /// Dense copy of one parameter's gradient (zeros where untouched).
    pub fn to_dense(&self, id: ParamId) -> Vec<T> {
        let (rows, cols, _) = self.shapes[id.0];
        match &self.bufs[id.0] {
            GradBuf::Unset => vec![T::zero(); rows * cols],
            GradBuf::Dense(v) => v.clone(),
            GradBuf::Rows(map) => {
                let mut dense = vec![T::zero(); rows * cols];
                for (r, v) in map {
                    dense[r * cols..(r + 1) * cols].copy_from_slice(v);
                }
                dense
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| match b {
            GradBuf::Unset => true,
            GradBuf::Dense(v) => v.iter().all(|x| x.is_finite()),
            GradBuf::Rows(m) => m.values().flatten().all(|x| x.is_finite()),
        })
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        Adam {
            lr,
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            step: 0,
            m: store.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: store.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let step = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(step);
        let bc2 = T::one() - self.beta2.powi(step);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.to_dense(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = &mut store.get_mut(id).data;
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (T::one() - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (T::one() - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if delta != T::zero() {
                    p[k] = p[k] - delta;
                }
            }
        }
    }
}
