use std::ops::Range;

use super::{tie_aware_ranges, Interaction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

const ROUNDING_SLACK: f64 = 1e-9;

/// Contiguous prefix/middle/suffix by chronological position:
/// `floor(N·train)`, `floor(N·val)`, remainder to test.
pub fn chronological_split(events: &[Interaction], ratios: (f64, f64, f64)) -> Result<Split> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {}",
            tr + va + te
        )));
    }
    let n = events.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 events to split, got {n}"
        )));
    }
    let n_train = (n as f64 * tr + ROUNDING_SLACK).floor() as usize;
    let n_val = (n as f64 * va + ROUNDING_SLACK).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "ratios {ratios:?} leave an empty partition for {n} events"
        )));
    }
    Ok(Split {
        train: events[..n_train].to_vec(),
        val: events[n_train..n_train + n_val].to_vec(),
        test: events[n_train + n_val..].to_vec(),
    })
}

/// The latest `ceil(p·N)` events.
pub fn truncate_latest(train: &[Interaction], proportion: f64) -> Result<Vec<Interaction>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "proportion must lie in (0, 1], got {proportion}"
        )));
    }
    let n = train.len();
    let keep = ((n as f64 * proportion - ROUNDING_SLACK).ceil() as usize).min(n);
    Ok(train[n - keep..].to_vec())
}

/// Chronological batches of about `batch_size` events; equal timestamps
/// always land in the same batch.
pub fn chronological_batches(events: &[Interaction], batch_size: usize) -> Vec<Range<usize>> {
    tie_aware_ranges(events, batch_size)
}
