use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Labelled rows `(domain, y, x)`. Upstream rows carry domain labels
/// `1..=p`; downstream rows use domain `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub domain: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, domain: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != domain.len() {
            return Err(Error::shape(format!(
                "dataset parts disagree: x has {} rows, y {}, domain {}",
                x.nrows(),
                y.len(),
                domain.len()
            )));
        }
        Ok(Dataset { x, y, domain })
    }

    pub fn empty(d: usize) -> Self {
        Dataset {
            x: Array2::zeros((0, d)),
            y: Array1::zeros(0),
            domain: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Largest domain label, i.e. `p` for an upstream dataset.
    pub fn num_domains(&self) -> usize {
        self.domain.iter().copied().max().unwrap_or(0)
    }

    /// Row counts for labels `1..=p`.
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains()];
        for &s in &self.domain {
            if s > 0 {
                counts[s - 1] += 1;
            }
        }
        counts
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            domain: rows.iter().map(|&i| self.domain[i]).collect(),
        }
    }

    /// Deterministic split: the first `round(frac * n)` rows and the rest.
    pub fn split_head(&self, frac: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let k = ((n as f64) * frac).round() as usize;
        let head: Vec<usize> = (0..k.min(n)).collect();
        let tail: Vec<usize> = (k.min(n)..n).collect();
        (self.select(&head), self.select(&tail))
    }

    /// One-hot encoding of domain labels `1..=p` as an `n × p` matrix.
    pub fn onehot_domains(&self, p: usize) -> Array2<f64> {
        onehot(&self.domain, p)
    }
}

pub fn onehot(domain: &[usize], p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((domain.len(), p));
    for (i, &s) in domain.iter().enumerate() {
        if (1..=p).contains(&s) {
            out[[i, s - 1]] = 1.0;
        }
    }
    out
}
