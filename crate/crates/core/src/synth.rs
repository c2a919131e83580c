//! Seeded synthetic interaction logs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctdg::{sort_chronologically, GraphDims, Interaction};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Each user cycles a fixed random item sequence at unit time steps.
    Periodic,
    /// Each user draws from one item cluster for the first half of their
    /// events and from another for the second half.
    Shift,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "periodic" => Ok(SynthKind::Periodic),
            "shift" => Ok(SynthKind::Shift),
            other => Err(Error::InvalidArgument(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Periodic => "periodic",
            SynthKind::Shift => "shift",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub users: usize,
    pub items: usize,
    pub events_per_user: usize,
    /// Cycle length for the periodic kind; `None` cycles through every item.
    pub period: Option<usize>,
    /// Number of equal item clusters for the shift kind (default 2).
    pub clusters: Option<usize>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, users: usize, items: usize, events_per_user: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            users,
            items,
            events_per_user,
            period: None,
            clusters: None,
            seed,
        }
    }

    pub fn with_period(mut self, period: usize) -> Self {
        self.period = Some(period);
        self
    }

    pub fn with_clusters(mut self, clusters: usize) -> Self {
        self.clusters = Some(clusters);
        self
    }
}

/// Item range of cluster `c` out of `n` over `items` ids.
pub fn cluster_items(c: usize, n: usize, items: usize) -> std::ops::Range<usize> {
    (c * items / n)..((c + 1) * items / n)
}

/// The `(A, B)` cluster pair assigned to `user` by the shift generator.
pub fn shift_clusters(spec: &SynthSpec, user: usize) -> (usize, usize) {
    let n = spec.clusters.unwrap_or(2);
    let mut rng = rng::stream(spec.seed, "synth-shift-clusters", &[user as u64]);
    let a = rng.gen_range(0..n);
    let b = (a + rng.gen_range(1..n)) % n;
    (a, b)
}

/// Per-user offset inside each unit step, so users never share a timestamp.
fn offset(user: usize, users: usize) -> f64 {
    user as f64 / users as f64
}

/// Generate a chronologically sorted log and its dimensions.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Interaction>, GraphDims)> {
    if spec.users == 0 || spec.items == 0 || spec.events_per_user == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be >= 1".into()));
    }
    let mut events = Vec::with_capacity(spec.users * spec.events_per_user);
    match spec.kind {
        SynthKind::Periodic => {
            let period = spec.period.unwrap_or(spec.items);
            if period == 0 || period > spec.items {
                return Err(Error::InvalidArgument(format!(
                    "period {period} must be in 1..={}",
                    spec.items
                )));
            }
            for u in 0..spec.users {
                let mut rng = rng::stream(spec.seed, "synth-periodic", &[u as u64]);
                let mut items: Vec<usize> = (0..spec.items).collect();
                items.shuffle(&mut rng);
                items.truncate(period);
                for k in 0..spec.events_per_user {
                    let t = k as f64 + offset(u, spec.users);
                    events.push(Interaction::new(u, items[k % period], t, 0));
                }
            }
        }
        SynthKind::Shift => {
            let n = spec.clusters.unwrap_or(2);
            if n < 2 || n > spec.items {
                return Err(Error::InvalidArgument(format!(
                    "shift dataset needs 2..={} clusters, got {n}",
                    spec.items
                )));
            }
            let first_half = spec.events_per_user.div_ceil(2);
            for u in 0..spec.users {
                let mut rng = rng::stream(spec.seed, "synth-shift", &[u as u64]);
                let (a, b) = shift_clusters(spec, u);
                for k in 0..spec.events_per_user {
                    let cluster = if k < first_half { a } else { b };
                    let item = rng.gen_range(cluster_items(cluster, n, spec.items));
                    let t = k as f64 + offset(u, spec.users);
                    events.push(Interaction::new(u, item, t, 0));
                }
            }
        }
    }
    sort_chronologically(&mut events);
    let dims = GraphDims {
        n_users: spec.users,
        n_items: spec.items,
        d_e: 0,
    };
    Ok((events, dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_repeats() {
        let (ev, dims) = generate(&SynthSpec::new(SynthKind::Periodic, 1, 3, 9, 7)).unwrap();
        assert_eq!(dims.n_items, 3);
        let items: Vec<usize> = ev.iter().map(|e| e.item_id).collect();
        assert_eq!(items.len(), 9);
        for k in 3..9 {
            assert_eq!(items[k], items[k - 3]);
        }
        let mut first: Vec<usize> = items[..3].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2]);
    }

    #[test]
    fn shift_first_half_in_cluster_a() {
        let spec = SynthSpec::new(SynthKind::Shift, 1, 10, 20, 3);
        let (ev, _) = generate(&spec).unwrap();
        let (a, b) = shift_clusters(&spec, 0);
        assert_ne!(a, b);
        assert!(ev[..10].iter().all(|e| cluster_items(a, 2, 10).contains(&e.item_id)));
        assert!(ev[10..].iter().all(|e| cluster_items(b, 2, 10).contains(&e.item_id)));
    }

    #[test]
    fn seeded_and_sorted() {
        let spec = SynthSpec::new(SynthKind::Periodic, 20, 10, 200, 1).with_period(5);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4000);
        assert!(a.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert!(generate(&SynthSpec::new(SynthKind::Shift, 0, 10, 20, 3)).is_err());
    }
}
