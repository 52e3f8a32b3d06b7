//! The training loop: batches, pace refresh, loss and gradient, SGD with
//! momentum, weight decay and a half-cosine learning-rate schedule, and
//! per-epoch evaluation.

use serde::Serialize;

use crate::embedstore::{AugmentConfig, BatchSampler, EmbeddingDataset};
use crate::metrics::{self, DEFAULT_ECE_BINS};
use crate::model::{init_heads, GradBundle, Heads, InitMode};
use crate::numkit::{argmax, softmax_unchecked, streams, Matrix, RandomStream};
use crate::objective::{evaluate, weak_probs, Branches, FinesslParams, LossBundle};
use crate::pace::{Margins, PaceEstimator, PaceState};
use crate::strategy::{unlabeled_step, DebiasState, StepParams, StrategySpec};
use crate::{Error, Result};

/// Every hyperparameter of a run. Defaults follow the reference setup
/// (SGD, lr 0.03 with cosine decay, batch 32, 30 × 500 steps).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_b: usize,
    pub mu: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub zeta: f64,
    pub alpha_base: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lambda_d: f64,
    pub m_ema: f64,
    pub strategy: StrategySpec,
    pub seed: u64,
    /// Evaluation period in epochs. The last epoch is always evaluated.
    pub eval_every: usize,
    pub augment: AugmentConfig,
    pub init: InitMode,
    pub adapter: bool,
    /// Pace window in steps; `None` means one epoch (`steps_per_epoch`).
    pub pace_window: Option<usize>,
    /// Use the EMA pace estimator with this decay instead of the window.
    pub pace_ema: Option<f64>,
    /// L2-normalize features (and prototypes) before training.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_b: 32,
            mu: 1,
            epochs: 30,
            steps_per_epoch: 500,
            zeta: 0.7,
            alpha_base: 8.0,
            lambda: 0.5,
            gamma: 3.0,
            tau: crate::strategy::DEFAULT_TAU,
            lambda_d: crate::strategy::DEFAULT_LAMBDA_D,
            m_ema: crate::strategy::DEFAULT_M_EMA,
            strategy: StrategySpec::FineSsl,
            seed: 0,
            eval_every: 1,
            augment: AugmentConfig::default(),
            init: InitMode::Zeros,
            adapter: false,
            pace_window: None,
            pace_ema: None,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be ≥ 0, got {v}")))
            }
        };
        pos("lr", self.lr)?;
        nonneg("weight_decay", self.weight_decay)?;
        nonneg("alpha_base", self.alpha_base)?;
        nonneg("gamma", self.gamma)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_b == 0 {
            return Err(Error::Config("batch_b must be ≥ 1".into()));
        }
        if self.mu == 0 {
            return Err(Error::Config("mu must be ≥ 1".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥ 1".into()));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(Error::Config(format!("zeta must be in (0,1], got {}", self.zeta)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must be in (0,1), got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        self.strategy.validate()?;
        self.augment.validate()?;
        if self.pace_window == Some(0) {
            return Err(Error::Config("pace_window must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn pace_estimator(&self) -> PaceEstimator {
        match self.pace_ema {
            Some(decay) => PaceEstimator::Ema { decay },
            None => PaceEstimator::Window {
                capacity: self.pace_window.unwrap_or(self.steps_per_epoch),
            },
        }
    }

    /// Threshold at which pseudo-labels count as confident in reports.
    pub fn report_threshold(&self) -> f64 {
        match self.strategy {
            StrategySpec::FineSsl => self.zeta,
            s => s.tau().unwrap_or(self.tau),
        }
    }

    fn step_params(&self) -> StepParams {
        StepParams {
            finessl: FinesslParams {
                lambda: self.lambda,
                gamma: self.gamma,
            },
            zeta: self.zeta,
        }
    }
}

/// `base · ½(1 + cos(π t / T))`.
pub fn cosine_lr(t: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = t.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Momentum buffers mirroring [`Heads`], plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: Heads,
    pub t: u64,
    pub total: u64,
}

impl OptimizerState {
    pub fn new(heads: &Heads, total: u64) -> Self {
        Self {
            velocity: heads.zeros_like(),
            t: 0,
            total,
        }
    }
}

/// One SGD step: `g ← grad + wd·param` (weights only), `v ← m·v + g`,
/// `param ← param − lr·v`.
pub fn sgd_step(
    heads: &mut Heads,
    grads: &GradBundle,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (block, g) in grads.blocks() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient in {}", block.name()),
                step: opt.t,
            });
        }
    }
    let mut vel = opt.velocity.blocks_mut();
    let params = heads.blocks_mut();
    let grads = grads.blocks();
    if vel.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Usage("gradient and parameter shapes differ".into()));
    }
    for (((block, p), (_, v)), (_, g)) in params.into_iter().zip(vel.iter_mut()).zip(grads) {
        if p.len() != g.len() || v.len() != g.len() {
            return Err(Error::Usage(format!("shape mismatch in {}", block.name())));
        }
        let wd = if block.is_bias() { 0.0 } else { weight_decay };
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            let step = gi + wd * *pi;
            *vi = momentum * *vi + step;
            *pi -= lr * *vi;
        }
    }
    opt.t += 1;
    if let Some(block) = heads.first_non_finite() {
        return Err(Error::NonFinite {
            what: format!("parameter in {}", block.name()),
            step: opt.t,
        });
    }
    Ok(())
}

/// One line of the run report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub strategy: String,
    pub lr: f64,
    pub sup_loss: Option<f64>,
    pub unsup_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub pl_acc: Option<f64>,
    pub pl_entropy: Option<f64>,
    pub mean_conf: Option<f64>,
    pub mean_conf_confident: Option<f64>,
    pub ece: Option<f64>,
    pub alpha_t: f64,
    pub delta: Vec<f64>,
    pub pseudo_label_hist: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub strategy: String,
    pub records: Vec<EpochRecord>,
}

impl RunReport {
    /// JSON Lines: one record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("report line {}: {e}", i + 1)))?;
            records.push(record_from_value(&v).ok_or_else(|| {
                Error::Config(format!("report line {} is missing fields", i + 1))
            })?);
        }
        let strategy = records.first().map(|r| r.strategy.clone()).unwrap_or_default();
        Ok(Self {
            seed: 0,
            strategy,
            records,
        })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn record_from_value(v: &serde_json::Value) -> Option<EpochRecord> {
    let f = |k: &str| v.get(k).and_then(serde_json::Value::as_f64);
    Some(EpochRecord {
        epoch: v.get("epoch")?.as_u64()? as usize,
        strategy: v.get("strategy")?.as_str()?.to_string(),
        lr: f("lr")?,
        sup_loss: f("sup_loss"),
        unsup_loss: f("unsup_loss"),
        test_acc: f("test_acc"),
        pl_acc: f("pl_acc"),
        pl_entropy: f("pl_entropy"),
        mean_conf: f("mean_conf"),
        mean_conf_confident: f("mean_conf_confident"),
        ece: f("ece"),
        alpha_t: f("alpha_t")?,
        delta: v.get("delta")?.as_array()?.iter().map(|x| x.as_f64()).collect::<Option<_>>()?,
        pseudo_label_hist: v
            .get("pseudo_label_hist")?
            .as_array()?
            .iter()
            .map(|x| x.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()?,
    })
}

/// Data of one run. `truth` gives the hidden class of every training row
/// (`-1` for OOD) and enables pseudo-label accuracy.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub train: &'a EmbeddingDataset,
    pub test: Option<&'a EmbeddingDataset>,
    pub truth: Option<&'a [i32]>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub heads: Heads,
    pub pace: PaceState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Main,
    Aux,
}

/// Softmax outputs of one head on the given dataset rows (no augmentation).
pub fn predict_probs(heads: &Heads, data: &EmbeddingDataset, rows: &[usize], head: HeadKind) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), heads.num_classes());
    for (r, &i) in rows.iter().enumerate() {
        let h = heads.trace(&data.row_f64(i)).out;
        let z = match head {
            HeadKind::Main => heads.main_logits(&h),
            HeadKind::Aux => heads.aux_logits(&h),
        };
        out.row_mut(r).copy_from_slice(&softmax_unchecked(&z));
    }
    out
}

struct EpochAccum {
    sup: f64,
    unsup: f64,
    steps: usize,
}

/// Runs the full optimization loop.
pub fn run_training(inputs: TrainInputs<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    inputs.train.validate_ssl()?;
    let (train_owned, test_owned);
    let (train, test) = if config.normalize {
        train_owned = inputs.train.l2_normalized();
        test_owned = inputs.test.map(EmbeddingDataset::l2_normalized);
        (&train_owned, test_owned.as_ref())
    } else {
        (inputs.train, inputs.test)
    };
    if let Some(t) = test {
        t.validate()?;
        if t.dim != train.dim || t.num_classes != train.num_classes {
            return Err(Error::Config("test split shape differs from training data".into()));
        }
    }
    if let Some(truth) = inputs.truth {
        if truth.len() != train.len() {
            return Err(Error::Config("ground truth length differs from training data".into()));
        }
    }
    let c = train.num_classes;
    let proto = train.prototype_matrix();
    let mut heads = init_heads(
        c,
        train.dim,
        config.init,
        config.adapter,
        proto.as_ref(),
        &mut RandomStream::new(config.seed, streams::INIT),
    )?;
    let mut pace = PaceState::new(c, config.zeta, config.alpha_base, config.pace_estimator())?;
    let mut debias = DebiasState::uniform(c);
    let mut opt = OptimizerState::new(&heads, config.total_steps());
    let mut sampler = BatchSampler::new(train, config.batch_b, config.mu, config.augment.clone(), config.seed)?;
    let params = config.step_params();
    let strategy_name = config.strategy.to_string();
    let unlabeled_rows = train.unlabeled_indices();
    let mut margins = if config.strategy.uses_pace() {
        pace.margins()
    } else {
        Margins::none(c)
    };

    let evaluate_epoch = |heads: &Heads, epoch: usize, lr: f64, acc: Option<EpochAccum>, margins: &Margins, full: bool| {
        let q = predict_probs(heads, train, &unlabeled_rows, HeadKind::Main);
        let truth_u: Option<Vec<i32>> = inputs.truth.map(|t| unlabeled_rows.iter().map(|&i| t[i]).collect());
        let pl = metrics::pl_stats(&q, truth_u.as_deref(), config.report_threshold());
        let (test_acc, ece) = match (full, test) {
            (true, Some(t)) => {
                let all: Vec<usize> = (0..t.len()).collect();
                let p = predict_probs(heads, t, &all, HeadKind::Main);
                let labels: Vec<usize> = t.labels.iter().map(|&y| y.max(0) as usize).collect();
                let mut conf = Vec::with_capacity(all.len());
                let mut ok = Vec::with_capacity(all.len());
                for (row, &y) in p.iter_rows().zip(&labels) {
                    let (k, cf) = argmax(row);
                    conf.push(cf.min(1.0));
                    ok.push(k == y);
                }
                let acc = ok.iter().filter(|&&b| b).count() as f64 / ok.len().max(1) as f64;
                (Some(acc), metrics::ece(&conf, &ok, DEFAULT_ECE_BINS).ok())
            }
            _ => (None, None),
        };
        let (sup_loss, unsup_loss) = match acc {
            Some(a) if a.steps > 0 => (Some(a.sup / a.steps as f64), Some(a.unsup / a.steps as f64)),
            _ => (None, None),
        };
        EpochRecord {
            epoch,
            strategy: strategy_name.clone(),
            lr,
            sup_loss,
            unsup_loss,
            test_acc,
            pl_acc: if full { pl.accuracy } else { None },
            pl_entropy: full.then_some(pl.entropy),
            mean_conf: full.then_some(pl.mean_conf),
            mean_conf_confident: if full { pl.mean_conf_confident } else { None },
            ece,
            alpha_t: margins.alpha_t,
            delta: margins.delta.clone(),
            pseudo_label_hist: pl.hist,
        }
    };

    let mut records = vec![evaluate_epoch(
        &heads,
        0,
        cosine_lr(0, opt.total, config.lr),
        None,
        &margins,
        true,
    )];
    let mut lr = cosine_lr(0, opt.total, config.lr);
    for epoch in 1..=config.epochs {
        let mut acc = EpochAccum {
            sup: 0.0,
            unsup: 0.0,
            steps: 0,
        };
        for _ in 0..config.steps_per_epoch {
            let batch = sampler.next_batch();
            if config.strategy.uses_pace() {
                let (q_weak, _) = weak_probs(&heads, &batch);
                pace.update_counts(&q_weak);
                pace.refresh_margins();
            }
            let plan = unlabeled_step(
                &config.strategy,
                &heads,
                &batch,
                &pace,
                Some(&mut debias),
                &params,
                inputs.truth,
            )?;
            let (loss, grads) = evaluate(&heads, &heads, &batch, &plan.targets, &plan.margins, Branches::All)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step: opt.t,
                });
            }
            acc.sup += loss.sup();
            acc.unsup += loss.unsup();
            acc.steps += 1;
            margins = plan.margins;
            lr = cosine_lr(opt.t, opt.total, config.lr);
            sgd_step(&mut heads, &grads, &mut opt, lr, config.momentum, config.weight_decay)?;
        }
        let full = epoch % config.eval_every == 0 || epoch == config.epochs;
        let rec = evaluate_epoch(&heads, epoch, lr, Some(acc), &margins, full);
        log::debug!(
            "epoch {epoch}: sup {:?} unsup {:?} test_acc {:?} alpha_t {:.3}",
            rec.sup_loss,
            rec.unsup_loss,
            rec.test_acc,
            rec.alpha_t
        );
        records.push(rec);
    }
    Ok(TrainOutcome {
        report: RunReport {
            seed: config.seed,
            strategy: strategy_name,
            records,
        },
        heads,
        pace,
    })
}

/// Mean loss bundle of a fixed batch under fixed targets; used to check that
/// training reduces the loss it optimizes.
pub fn batch_loss(heads: &Heads, batch: &crate::embedstore::Batch, targets: &crate::objective::Targets, margins: &Margins) -> Result<LossBundle> {
    Ok(evaluate(heads, heads, batch, targets, margins, Branches::All)?.0)
}
