//! Functional time encodings: harmonic (random-Fourier-style) features of
//! elapsed time with learnable frequencies, a linear projection variant,
//! and a learnable position table for the recency-rank ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Tensor};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeVariant {
    #[default]
    Bochner,
    Projection,
    Position,
}

impl std::str::FromStr for TimeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bochner" => Ok(TimeVariant::Bochner),
            "projection" => Ok(TimeVariant::Projection),
            "position" => Ok(TimeVariant::Position),
            other => Err(Error::InvalidArgument(format!("unknown time variant '{other}'"))),
        }
    }
}

/// Learnable frequencies; the encoding has `2 · frequencies.len()` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEncoderParams<T> {
    pub frequencies: Vec<T>,
}

impl<T: Scalar> TimeEncoderParams<T> {
    pub fn new(frequencies: Vec<T>) -> Self {
        TimeEncoderParams { frequencies }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    /// Uniform `[0, 1]` draws divided by timescales `1, 10, 100, ...`.
    pub fn init<R: Rng + ?Sized>(d_t: usize, rng: &mut R) -> Result<Self> {
        Ok(TimeEncoderParams {
            frequencies: init_frequencies(d_t, rng)?,
        })
    }
}

pub(crate) fn init_frequencies<T: Scalar, R: Rng + ?Sized>(d_t: usize, rng: &mut R) -> Result<Vec<T>> {
    if d_t == 0 || !d_t.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time encoding dimension must be even and positive, got {d_t}"
        )));
    }
    Ok((0..d_t / 2)
        .map(|k| c(rng.gen_range(0.0..=1.0) / 10f64.powi(k as i32)))
        .collect())
}

/// `sqrt(2/d_t)·[cos(w_1 t), sin(w_1 t), …]`; unit Euclidean norm.
pub(crate) fn harmonic_features<T: Scalar>(frequencies: &[T], t: T) -> Vec<T> {
    let scale = (T::one() / c::<T>(frequencies.len() as f64)).sqrt();
    let mut out = Vec::with_capacity(2 * frequencies.len());
    for &w in frequencies {
        let (s, co) = (w * t).sin_cos();
        out.push(scale * co);
        out.push(scale * s);
    }
    out
}

pub fn phi<T: Scalar>(params: &TimeEncoderParams<T>, t: T) -> Vec<T> {
    harmonic_features(&params.frequencies, t)
}

/// Encoding of the elapsed time `t_q − t_p`.
pub fn time_kernel<T: Scalar>(params: &TimeEncoderParams<T>, t_q: f64, t_p: f64) -> Vec<T> {
    phi(params, c(t_q - t_p))
}

/// Learnable `(ε+1) × d_t` table indexed by recency rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable<T> {
    pub table: Tensor<T>,
}

impl<T: Scalar> PositionTable<T> {
    pub fn init<R: Rng + ?Sized>(epsilon: usize, d_t: usize, rng: &mut R) -> Self {
        PositionTable {
            table: Tensor::xavier_uniform(epsilon + 1, d_t, rng),
        }
    }
}

pub fn position_encode<T: Scalar>(table: &PositionTable<T>, rank: usize) -> Result<Vec<T>> {
    if rank >= table.table.rows {
        return Err(Error::OutOfRange {
            index: rank,
            len: table.table.rows,
        });
    }
    Ok(table.table.row(rank).to_vec())
}

/// Parameter handle for whichever encoding the model is configured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeEncoder {
    Bochner { frequencies: ParamId },
    Projection { weights: ParamId },
    Position { table: ParamId },
}

impl TimeEncoder {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        variant: TimeVariant,
        d_t: usize,
        epsilon: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match variant {
            TimeVariant::Bochner => {
                let f = init_frequencies::<T, _>(d_t, rng)?;
                let n = f.len();
                TimeEncoder::Bochner {
                    frequencies: store.add("time.frequencies", Tensor::from_vec(n, 1, f)?),
                }
            }
            TimeVariant::Projection => {
                let f = init_frequencies::<T, _>(d_t, rng)?;
                // one weight per output entry, same horizon spread as the harmonic variant
                let w: Vec<T> = f.iter().flat_map(|&x| [x, x]).collect();
                TimeEncoder::Projection {
                    weights: store.add("time.projection", Tensor::from_vec(d_t, 1, w)?),
                }
            }
            TimeVariant::Position => TimeEncoder::Position {
                table: store.add("time.position", Tensor::xavier_uniform(epsilon + 1, d_t, rng)),
            },
        })
    }

    /// Encoding of elapsed time `delta` for the slot with recency `rank`
    /// (0 = the node itself). Harmonic and projection variants ignore `rank`;
    /// the position variant ignores `delta`.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, delta: T, rank: usize) -> Vec<T> {
        match *self {
            TimeEncoder::Bochner { frequencies } => {
                harmonic_features(&store.get(frequencies).data, delta)
            }
            TimeEncoder::Projection { weights } => {
                store.get(weights).data.iter().map(|&w| w * delta).collect()
            }
            TimeEncoder::Position { table } => {
                let t = store.get(table);
                t.row(rank.min(t.rows - 1)).to_vec()
            }
        }
    }

    pub fn encode_on<T: Scalar>(&self, tape: &mut Tape<'_, T>, delta: T, rank: usize) -> Var {
        match *self {
            TimeEncoder::Bochner { frequencies } => tape.harmonic(frequencies, delta),
            TimeEncoder::Projection { weights } => tape.ramp(weights, delta),
            TimeEncoder::Position { table } => {
                let rows = tape.store().get(table).rows;
                tape.row(table, rank.min(rows - 1))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Grads;
    use crate::rng::stream;
    use std::f64::consts::PI;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn closed_form_values() {
        let p = TimeEncoderParams::new(vec![0.37]);
        assert_eq!(phi(&p, 0.0), vec![1.0, 0.0]);
        let p = TimeEncoderParams::new(vec![PI]);
        let v = phi(&p, 1.0);
        assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        let p = TimeEncoderParams::new(vec![PI / 2.0]);
        let v = time_kernel(&p, 2.0, 1.0);
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_delta_kernel() {
        let p = TimeEncoderParams::new(vec![0.3, 4.0]);
        let v = time_kernel(&p, 5.0, 5.0);
        let h = (0.5f64).sqrt();
        assert_eq!(v, vec![h, 0.0, h, 0.0]);
        assert_eq!(time_kernel(&p, 10.0, 4.0), time_kernel(&p, 7.0, 1.0));
    }

    #[test]
    fn unit_norm_random() {
        let mut rng = stream(5, "phi", &[]);
        let p = TimeEncoderParams::<f64>::init(8, &mut rng).unwrap();
        for _ in 0..100 {
            let t: f64 = rng.gen_range(-1e6..1e6);
            assert!((norm(&phi(&p, t)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_rejects_odd_dims() {
        let mut rng = stream(5, "phi", &[]);
        assert!(TimeEncoderParams::<f64>::init(3, &mut rng).is_err());
        assert!(TimeEncoderParams::<f64>::init(0, &mut rng).is_err());
        let p = TimeEncoderParams::<f64>::init(6, &mut rng).unwrap();
        assert!(p.frequencies[0] <= 1.0 && p.frequencies[2] <= 0.01);
    }

    #[test]
    fn position_lookup() {
        let mut rng = stream(1, "pos", &[]);
        let table = PositionTable::<f64>::init(3, 4, &mut rng);
        assert_eq!(position_encode(&table, 0).unwrap(), table.table.row(0).to_vec());
        assert_ne!(position_encode(&table, 0).unwrap(), position_encode(&table, 1).unwrap());
        assert!(position_encode(&table, 3).is_ok());
        assert!(matches!(position_encode(&table, 4), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn frequency_gradient_matches_central_differences() {
        let mut rng = stream(9, "grad", &[]);
        let mut store = ParamStore::<f64>::new();
        let enc = TimeEncoder::build(TimeVariant::Bochner, 6, 2, &mut store, &mut rng).unwrap();
        let TimeEncoder::Bochner { frequencies } = enc else { unreachable!() };
        let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta = 2.7;
        let objective = |s: &ParamStore<f64>| -> f64 {
            enc.encode(s, delta, 0).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new(&store);
        let e = enc.encode_on(&mut tape, delta, 0);
        let w = tape.input(weights.clone());
        let out = tape.dot(e, w);
        let mut grads = Grads::zeros_like(&store);
        tape.backward(out, 1.0, &mut grads);
        let analytic = grads.to_dense(frequencies);
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = store.clone();
            plus.get_mut(frequencies).data[k] += h;
            let mut minus = store.clone();
            minus.get_mut(frequencies).data[k] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "k={k}: {} vs {numeric}", analytic[k]);
        }
    }
}
