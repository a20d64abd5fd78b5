//! First-order optimizer with an optional proximal L1 step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Adaptive moments with bias correction.
    #[default]
    Adam,
    /// Plain gradient step. Combined with a threshold this is proximal
    /// gradient descent, whose fixed points are exact lasso solutions.
    Sgd,
}

/// Soft-thresholding operator.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rule: UpdateRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Proximal L1 threshold `t`; entries are soft-thresholded by `t * lr`.
    pub l1_threshold: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(rule: UpdateRule, lr: f64) -> Self {
        OptimizerState {
            rule,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1_threshold: 0.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(UpdateRule::Adam, lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(UpdateRule::Sgd, lr)
    }

    pub fn with_l1(mut self, threshold: f64) -> Self {
        self.l1_threshold = threshold;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `names` label the parameter slices in error messages.
    /// On a non-finite gradient nothing is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "parameter {} has {} entries, gradient {}",
                    label(names, k),
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(label(names, k)));
            }
        }
        if self.first.is_empty() && self.rule == UpdateRule::Adam {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        if self.rule == UpdateRule::Adam {
            let shapes_match = self.first.len() == grads.len()
                && self.first.iter().zip(grads).all(|(m, g)| m.len() == g.len());
            if !shapes_match {
                return Err(Error::shape("optimizer state shaped differently from parameters"));
            }
        }
        self.step += 1;
        let shrink = self.l1_threshold * self.lr;
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gw) in p.iter_mut().zip(g.iter()) {
                        *w -= self.lr * gw;
                    }
                }
            }
            UpdateRule::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    for i in 0..p.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        if shrink > 0.0 {
            for p in params.iter_mut() {
                for w in p.iter_mut() {
                    *w = soft_threshold(*w, shrink);
                }
            }
        }
        Ok(())
    }
}

fn label(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("param{k}"))
}

/// Scale `values` onto the Euclidean ball of radius `radius` if outside it.
pub fn clip_to_ball(values: &mut [f64], radius: f64) -> f64 {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let c = radius / norm;
        for v in values.iter_mut() {
            *v *= c;
        }
        // Guard against rounding just above the radius.
        let after = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if after > radius {
            let c2 = (radius / after) * (1.0 - f64::EPSILON);
            for v in values.iter_mut() {
                *v *= c2;
            }
        }
        c
    } else {
        1.0
    }
}
