use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QlabError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
struct Reservoir {
    dim: usize,
    columns: Vec<Vec<f32>>,
    seen: usize,
}

/// Per-projection input activations, capped at `cap` columns with uniform
/// reservoir sampling once the cap is reached.
#[derive(Debug, Clone)]
pub struct CaptureBuffer {
    cap: usize,
    requested: BTreeSet<String>,
    entries: BTreeMap<String, Reservoir>,
    rng: ChaCha8Rng,
}

impl CaptureBuffer {
    pub fn new(names: impl IntoIterator<Item = String>, cap: usize, seed: u64) -> Self {
        Self {
            cap: cap.max(1),
            requested: names.into_iter().collect(),
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn requested(&self) -> impl Iterator<Item = &String> {
        self.requested.iter()
    }

    /// Appends each row of `input` (tokens × dim) as one column.
    pub(crate) fn record(&mut self, name: &str, input: &Matrix) {
        if !self.requested.contains(name) {
            return;
        }
        let res = self.entries.entry(name.to_string()).or_insert_with(|| Reservoir {
            dim: input.cols(),
            columns: Vec::new(),
            seen: 0,
        });
        for t in 0..input.rows() {
            res.seen += 1;
            if res.columns.len() < self.cap {
                res.columns.push(input.row(t).to_vec());
            } else {
                let j = self.rng.gen_range(0..res.seen);
                if j < self.cap {
                    res.columns[j] = input.row(t).to_vec();
                }
            }
        }
    }

    /// Captured columns as a `dim × n` matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let res = self
            .entries
            .get(name)
            .ok_or_else(|| QlabError::UnknownProjection(name.to_string()))?;
        Matrix::from_columns(res.dim, &res.columns)
    }

    pub fn columns(&self, name: &str) -> usize {
        self.entries.get(name).map_or(0, |r| r.columns.len())
    }

    /// Total columns offered, including those not retained.
    pub fn seen(&self, name: &str) -> usize {
        self.entries.get(name).map_or(0, |r| r.seen)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reservoir_caps_columns() {
        let mut buf = CaptureBuffer::new(["a".to_string()], 5, 1);
        let x = Matrix::from_fn(12, 3, |r, c| (r * 3 + c) as f32);
        buf.record("a", &x);
        buf.record("b", &x);
        assert_eq!(buf.columns("a"), 5);
        assert_eq!(buf.seen("a"), 12);
        assert_eq!(buf.matrix("a").unwrap().shape(), (3, 5));
        assert!(buf.matrix("b").is_err());
    }

    #[test]
    fn under_cap_keeps_everything_in_order() {
        let mut buf = CaptureBuffer::new(["a".to_string()], 100, 1);
        let x = Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f32);
        buf.record("a", &x);
        assert_eq!(buf.matrix("a").unwrap(), x.transpose());
    }
}
