//! Class learning pace and the balanced margins derived from it.
//!
//! The pace of class `k` counts unlabeled predictions of `k` with confidence
//! at least ζ. Counts are estimated online: each step contributes the
//! increments of its batch, and either the last `W` steps are kept (window)
//! or older increments decay geometrically (EMA). From the counts,
//! `β_k = σ_k / max σ`, `Δ_k = 1 − β_k`, `α_t = (max β − min β)·α`.
//! With no confident prediction yet, every margin is 1 and `α_t = α`.

use std::collections::VecDeque;

use crate::numkit::{argmax, Matrix};
use crate::{Error, Result};

/// Per-class margins and their scale for one step.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Margins {
    pub delta: Vec<f64>,
    pub alpha_t: f64,
}

impl Margins {
    /// Margins that reduce every margin loss to plain cross-entropy.
    pub fn none(c: usize) -> Self {
        Self {
            delta: vec![0.0; c],
            alpha_t: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PaceEstimator {
    /// Sum of the last `capacity` steps' increments.
    Window { capacity: usize },
    /// `counts ← decay·counts + increments`.
    Ema { decay: f64 },
}

#[derive(Debug, Clone)]
pub struct PaceState {
    counts: Vec<f64>,
    zeta: f64,
    alpha_base: f64,
    estimator: PaceEstimator,
    window: VecDeque<Vec<f64>>,
    beta: Vec<f64>,
    delta: Vec<f64>,
    alpha_t: f64,
}

impl PaceState {
    pub fn new(c: usize, zeta: f64, alpha_base: f64, estimator: PaceEstimator) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("pace needs at least one class".into()));
        }
        if !(zeta > 0.0 && zeta <= 1.0) {
            return Err(Error::Config(format!("zeta must be in (0,1], got {zeta}")));
        }
        if !(alpha_base >= 0.0) || !alpha_base.is_finite() {
            return Err(Error::Config(format!("alpha_base must be ≥ 0, got {alpha_base}")));
        }
        match estimator {
            PaceEstimator::Window { capacity: 0 } => {
                return Err(Error::Config("pace window must hold at least one step".into()))
            }
            PaceEstimator::Ema { decay } if !(0.0..1.0).contains(&decay) => {
                return Err(Error::Config(format!("pace EMA decay must be in [0,1), got {decay}")))
            }
            _ => {}
        }
        let mut s = Self {
            counts: vec![0.0; c],
            zeta,
            alpha_base,
            estimator,
            window: VecDeque::new(),
            beta: vec![0.0; c],
            delta: vec![1.0; c],
            alpha_t: alpha_base,
        };
        s.refresh_margins();
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn alpha_t(&self) -> f64 {
        self.alpha_t
    }

    pub fn margins(&self) -> Margins {
        Margins {
            delta: self.delta.clone(),
            alpha_t: self.alpha_t,
        }
    }

    /// Confident-prediction histogram of one batch of probability rows.
    pub fn increments(&self, q: &Matrix) -> Vec<f64> {
        let mut inc = vec![0.0; self.counts.len()];
        for row in q.iter_rows() {
            let (k, conf) = argmax(row);
            if conf >= self.zeta {
                inc[k] += 1.0;
            }
        }
        inc
    }

    /// Adds one step's increments from the main head's weak-view outputs.
    pub fn update_counts(&mut self, q_weak: &Matrix) {
        let inc = self.increments(q_weak);
        self.push_increments(inc);
    }

    pub fn push_increments(&mut self, inc: Vec<f64>) {
        debug_assert_eq!(inc.len(), self.counts.len());
        match self.estimator {
            PaceEstimator::Window { capacity } => {
                if self.window.len() == capacity {
                    self.window.pop_front();
                }
                self.window.push_back(inc);
                // recompute column sums so counts never drift from the buffer
                self.counts.iter_mut().for_each(|c| *c = 0.0);
                for step in &self.window {
                    for (c, v) in self.counts.iter_mut().zip(step) {
                        *c += v;
                    }
                }
            }
            PaceEstimator::Ema { decay } => {
                for (c, v) in self.counts.iter_mut().zip(&inc) {
                    *c = decay * *c + v;
                }
            }
        }
    }

    /// Recomputes `β`, `Δ` and `α_t` from the current counts.
    pub fn refresh_margins(&mut self) -> Margins {
        let max = self.counts.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for (b, &c) in self.beta.iter_mut().zip(&self.counts) {
                *b = c / max;
            }
            for (d, &b) in self.delta.iter_mut().zip(&self.beta) {
                *d = 1.0 - b;
            }
            let hi = self.beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = self.beta.iter().copied().fold(f64::INFINITY, f64::min);
            self.alpha_t = (hi - lo) * self.alpha_base;
        } else {
            self.beta.iter_mut().for_each(|b| *b = 0.0);
            self.delta.iter_mut().for_each(|d| *d = 1.0);
            self.alpha_t = self.alpha_base;
        }
        self.margins()
    }
}
