//! Two-layer feed-forward block shared by the transformer combiner and the
//! score predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::tape::{Activation, Tape, Var};

/// `W2 · act(W1 x + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub act: Activation,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

impl Ffn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        act: Activation,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        Ffn {
            w1: store.add(format!("{prefix}.w1"), Tensor::xavier_uniform(hidden, input_dim, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(hidden, 1)),
            w2: store.add(format!("{prefix}.w2"), Tensor::xavier_uniform(output_dim, hidden, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(output_dim, 1)),
            act,
            input_dim,
            hidden,
            output_dim,
        }
    }

    /// Overwrite the weights so the block returns the first `output_dim`
    /// entries of its input. Requires `hidden == output_dim <= input_dim`.
    pub fn make_slice_identity<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.hidden != self.output_dim || self.output_dim > self.input_dim {
            return Err(Error::Shape("slice identity needs hidden == out <= in".into()));
        }
        let w1 = store.get_mut(self.w1);
        w1.data.iter_mut().for_each(|v| *v = T::zero());
        for k in 0..self.hidden {
            w1.data[k * self.input_dim + k] = T::one();
        }
        let w2 = store.get_mut(self.w2);
        w2.data.iter_mut().for_each(|v| *v = T::zero());
        for k in 0..self.output_dim {
            w2.data[k * self.hidden + k] = T::one();
        }
        for b in [self.b1, self.b2] {
            store.get_mut(b).data.iter_mut().for_each(|v| *v = T::zero());
        }
        self.act = Activation::Identity;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "ffn expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let b1 = &store.get(self.b1).data;
        let hidden: Vec<T> = store
            .get(self.w1)
            .matvec(x)
            .into_iter()
            .zip(b1)
            .map(|(v, &b)| self.act.apply(v + b))
            .collect();
        let b2 = &store.get(self.b2).data;
        Ok(store
            .get(self.w2)
            .matvec(&hidden)
            .into_iter()
            .zip(b2)
            .map(|(v, &b)| v + b)
            .collect())
    }

    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = tape.matvec(self.w1, x);
        let b1 = tape.param(self.b1);
        let h = tape.add(h, b1);
        let h = tape.act(h, self.act);
        let o = tape.matvec(self.w2, h);
        let b2 = tape.param(self.b2);
        tape.add(o, b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn slice_identity_returns_prefix() {
        let mut store = ParamStore::<f64>::new();
        let mut ffn = Ffn::build("f", 5, 2, 2, Activation::Silu, &mut store, &mut stream(0, "f", &[]));
        ffn.make_slice_identity(&mut store).unwrap();
        let x = [0.3, -2.0, 7.0, 1.0, 4.0];
        assert_eq!(ffn.forward(&store, &x).unwrap(), vec![0.3, -2.0]);
        assert!(ffn.forward(&store, &x[..4]).is_err());
    }

    #[test]
    fn tape_matches_plain() {
        let mut store = ParamStore::<f64>::new();
        let ffn = Ffn::build("f", 4, 3, 2, Activation::Silu, &mut store, &mut stream(1, "f", &[]));
        let x = vec![0.1, 0.9, -0.4, 2.0];
        let plain = ffn.forward(&store, &x).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.input(x);
        let y = ffn.forward_on(&mut tape, xv);
        assert_eq!(tape.value(y), plain.as_slice());
    }
}
