//! Unlabeled-loss strategies.
//!
//! Each strategy turns a batch into [`Targets`] (pseudo-labels, per-row
//! weights, which view the consistency term reads) plus the margins to use.
//! The loss itself is always evaluated by [`crate::objective::evaluate`].
//!
//! The FlexMatch and DebiasPL variants are lightweight approximations, not
//! reproductions of the reference methods.

use std::fmt;

use crate::embedstore::{Batch, View};
use crate::model::Heads;
use crate::numkit::{argmax, softmax_unchecked, Matrix};
use crate::objective::{finessl_targets, weak_probs, FinesslParams, Targets};
use crate::pace::{Margins, PaceState};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_LAMBDA_D: f64 = 0.5;
pub const DEFAULT_M_EMA: f64 = 0.999;
const DEBIAS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategySpec {
    Supervised,
    /// Classic pseudo-labeling on the weak view only.
    Pl { tau: f64 },
    FixMatch { tau: f64 },
    /// FixMatch with class-adaptive thresholds from the learning pace.
    FlexMatchLite { tau: f64 },
    /// FixMatch on logits adjusted by an EMA of the pseudo-label marginal.
    DebiasPlLite { tau: f64, lambda_d: f64, m_ema: f64 },
    FineSsl,
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Supervised => "supervised",
            StrategySpec::Pl { .. } => "pl",
            StrategySpec::FixMatch { .. } => "fixmatch",
            StrategySpec::FlexMatchLite { .. } => "flexmatch_lite",
            StrategySpec::DebiasPlLite { .. } => "debiaspl_lite",
            StrategySpec::FineSsl => "finessl",
        }
    }

    /// Builds a variant from its configuration name and parameters.
    pub fn from_name(name: &str, tau: f64, lambda_d: f64, m_ema: f64) -> Result<Self> {
        let s = match name {
            "supervised" => StrategySpec::Supervised,
            "pl" => StrategySpec::Pl { tau },
            "fixmatch" => StrategySpec::FixMatch { tau },
            "flexmatch_lite" => StrategySpec::FlexMatchLite { tau },
            "debiaspl_lite" => StrategySpec::DebiasPlLite { tau, lambda_d, m_ema },
            "finessl" => StrategySpec::FineSsl,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            StrategySpec::Pl { tau }
            | StrategySpec::FixMatch { tau }
            | StrategySpec::FlexMatchLite { tau }
            | StrategySpec::DebiasPlLite { tau, .. } => Some(tau),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau() {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("tau must be in (0,1], got {tau}")));
            }
        }
        if let StrategySpec::DebiasPlLite { lambda_d, m_ema, .. } = *self {
            if !(lambda_d >= 0.0) || !lambda_d.is_finite() {
                return Err(Error::Config(format!("lambda_d must be ≥ 0, got {lambda_d}")));
            }
            if !(0.0..1.0).contains(&m_ema) {
                return Err(Error::Config(format!("m_ema must be in [0,1), got {m_ema}")));
            }
        }
        Ok(())
    }

    /// Whether the trainer maintains the learning pace for this strategy.
    pub fn uses_pace(&self) -> bool {
        matches!(self, StrategySpec::FineSsl | StrategySpec::FlexMatchLite { .. })
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StrategySpec::Supervised | StrategySpec::FineSsl => f.write_str(self.name()),
            StrategySpec::Pl { tau } | StrategySpec::FixMatch { tau } | StrategySpec::FlexMatchLite { tau } => {
                write!(f, "{}(tau={tau})", self.name())
            }
            StrategySpec::DebiasPlLite { tau, lambda_d, m_ema } => {
                write!(f, "{}(tau={tau},lambda_d={lambda_d},m_ema={m_ema})", self.name())
            }
        }
    }
}

/// EMA of the pseudo-label marginal used by DebiasPL-lite.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasState {
    p_bar: Vec<f64>,
}

impl DebiasState {
    pub fn uniform(c: usize) -> Self {
        Self {
            p_bar: vec![1.0 / c as f64; c],
        }
    }

    pub fn from_marginal(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Usage("marginal entries must be positive".into()));
        }
        let mut s = Self { p_bar: p };
        s.renormalize();
        Ok(s)
    }

    pub fn p_bar(&self) -> &[f64] {
        &self.p_bar
    }

    fn renormalize(&mut self) {
        for p in &mut self.p_bar {
            *p = p.max(DEBIAS_FLOOR);
        }
        let s: f64 = self.p_bar.iter().sum();
        for p in &mut self.p_bar {
            *p /= s;
        }
    }

    /// `p̄ ← m·p̄ + (1−m)·(one-hot marginal of this batch's pseudo-labels)`.
    pub fn update(&mut self, pseudo_labels: &[usize], m_ema: f64) {
        if pseudo_labels.is_empty() {
            return;
        }
        let c = self.p_bar.len();
        let mut hist = vec![0.0; c];
        for &y in pseudo_labels {
            hist[y] += 1.0;
        }
        let n = pseudo_labels.len() as f64;
        for (p, h) in self.p_bar.iter_mut().zip(&hist) {
            *p = m_ema * *p + (1.0 - m_ema) * h / n;
        }
        self.renormalize();
    }
}

/// `(argmax q, max q)`, ties to the lowest class.
pub fn pseudo_label(q: &[f64]) -> (usize, f64) {
    argmax(q)
}

/// Class-adaptive thresholds `τ_k = max(τ·M(β_k), τ/2)` with
/// `M(β) = β/(2−β)` and `β_k = counts_k / max counts` (1 when all are zero).
pub fn flex_thresholds(counts: &[f64], tau: f64) -> Vec<f64> {
    let max = counts.iter().copied().fold(0.0, f64::max);
    counts
        .iter()
        .map(|&c| {
            let beta = if max > 0.0 { c / max } else { 1.0 };
            (tau * beta / (2.0 - beta)).max(0.5 * tau)
        })
        .collect()
}

/// `z′_k = z_k − λ_d·ln p̄_k`.
pub fn debias_logits(z: &[f64], state: &DebiasState, lambda_d: f64) -> Vec<f64> {
    if lambda_d == 0.0 {
        return z.to_vec();
    }
    z.iter()
        .zip(&state.p_bar)
        .map(|(zk, pk)| zk - lambda_d * pk.ln())
        .collect()
}

/// Pseudo-label statistics of one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchPlStats {
    /// Confident pseudo-labels per class.
    pub hist: Vec<usize>,
    /// Confident pseudo-labels matching the ground truth (0 without truth).
    pub correct: usize,
    pub incorrect: usize,
    /// Mean top confidence over every unlabeled row.
    pub mean_conf: f64,
}

/// Everything the trainer needs to evaluate one step's loss.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub targets: Targets,
    pub margins: Margins,
    pub stats: BatchPlStats,
}

/// Hyperparameters shared by the strategies.
#[derive(Debug, Clone, Copy)]
pub struct StepParams {
    pub finessl: FinesslParams,
    /// Confidence constant ζ used to report FineSSL's confident pseudo-labels.
    pub zeta: f64,
}

fn stats_for(
    probs: &Matrix,
    labels: &[usize],
    thresholds: impl Fn(usize) -> f64,
    batch: &Batch,
    truth: Option<&[i32]>,
    c: usize,
) -> BatchPlStats {
    let mut s = BatchPlStats {
        hist: vec![0; c],
        ..Default::default()
    };
    let mut conf_sum = 0.0;
    for (j, (row, &y)) in probs.iter_rows().zip(labels).enumerate() {
        let conf = row[y];
        conf_sum += conf;
        if conf >= thresholds(y) {
            s.hist[y] += 1;
            if let Some(t) = truth {
                if t[batch.unlabeled_index[j]] == y as i32 {
                    s.correct += 1;
                } else {
                    s.incorrect += 1;
                }
            }
        }
    }
    s.mean_conf = conf_sum / probs.rows().max(1) as f64;
    s
}

fn threshold_targets(probs: &Matrix, thresholds: impl Fn(usize) -> f64, view: View) -> Targets {
    let mut labels = Vec::with_capacity(probs.rows());
    let mut weights = Vec::with_capacity(probs.rows());
    for row in probs.iter_rows() {
        let (y, conf) = pseudo_label(row);
        labels.push(y);
        weights.push(if conf >= thresholds(y) { 1.0 } else { 0.0 });
    }
    Targets {
        pseudo_labels: labels,
        weights,
        consistency_view: view,
        margin_main: false,
        aux_targets: None,
    }
}

/// Plans the unlabeled part of one training step.
///
/// `pace` must already hold this step's counts (the trainer updates them
/// first). `debias` is required for DebiasPL-lite and is updated in place.
/// `truth` maps dataset rows to ground-truth classes for the statistics.
pub fn unlabeled_step(
    spec: &StrategySpec,
    heads: &Heads,
    batch: &Batch,
    pace: &PaceState,
    debias: Option<&mut DebiasState>,
    params: &StepParams,
    truth: Option<&[i32]>,
) -> Result<StepPlan> {
    let c = heads.num_classes();
    let (q_main, _) = weak_probs(heads, batch);
    let plan = match *spec {
        StrategySpec::Supervised => {
            let t = threshold_targets(&q_main, |_| f64::INFINITY, View::Strong);
            let stats = stats_for(&q_main, &t.pseudo_labels, |_| f64::INFINITY, batch, truth, c);
            StepPlan {
                targets: t,
                margins: Margins::none(c),
                stats,
            }
        }
        StrategySpec::Pl { tau } | StrategySpec::FixMatch { tau } => {
            let view = if matches!(spec, StrategySpec::Pl { .. }) {
                View::Weak
            } else {
                View::Strong
            };
            let t = threshold_targets(&q_main, |_| tau, view);
            let stats = stats_for(&q_main, &t.pseudo_labels, |_| tau, batch, truth, c);
            StepPlan {
                targets: t,
                margins: Margins::none(c),
                stats,
            }
        }
        StrategySpec::FlexMatchLite { tau } => {
            let th = flex_thresholds(pace.counts(), tau);
            let t = threshold_targets(&q_main, |k| th[k], View::Strong);
            let stats = stats_for(&q_main, &t.pseudo_labels, |k| th[k], batch, truth, c);
            StepPlan {
                targets: t,
                margins: Margins::none(c),
                stats,
            }
        }
        StrategySpec::DebiasPlLite { tau, lambda_d, m_ema } => {
            let state = debias.ok_or_else(|| Error::Usage("debiaspl_lite needs a DebiasState".into()))?;
            let mut adjusted = Matrix::zeros(batch.unlabeled_len(), c);
            for j in 0..batch.unlabeled_len() {
                let h = heads.trace(batch.unlabeled_weak.row(j)).out;
                let z = debias_logits(&heads.main_logits(&h), state, lambda_d);
                adjusted.row_mut(j).copy_from_slice(&softmax_unchecked(&z));
            }
            let t = threshold_targets(&adjusted, |_| tau, View::Strong);
            let stats = stats_for(&adjusted, &t.pseudo_labels, |_| tau, batch, truth, c);
            state.update(&t.pseudo_labels, m_ema);
            StepPlan {
                targets: t,
                margins: Margins::none(c),
                stats,
            }
        }
        StrategySpec::FineSsl => {
            let t = finessl_targets(heads, batch, &params.finessl)?;
            let stats = stats_for(&q_main, &t.pseudo_labels, |_| params.zeta, batch, truth, c);
            StepPlan {
                targets: t,
                margins: pace.margins(),
                stats,
            }
        }
    };
    Ok(plan)
}
