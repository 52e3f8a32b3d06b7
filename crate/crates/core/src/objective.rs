//! Loss functions and their analytic gradients with respect to [`Heads`].
//!
//! The balanced margin softmax shifts only the target logit:
//! `margin_ce(z, y, Δ, α) = ce(z − α·Δ_y·e_y, y)`. The soft version used for
//! the auxiliary head is the q̃-weighted mixture of hard margin losses.
//!
//! Pseudo-labels, sample weights and threshold masks are computed up front
//! as [`Targets`] and treated as constants by [`evaluate`]. Auxiliary-head
//! losses read features through a detached snapshot of the heads, so their
//! gradients stop at the auxiliary head and never reach the adapter.

use crate::embedstore::{Batch, View};
use crate::model::{FeatureTrace, GradBundle, Heads};
use crate::numkit::{argmax, lse_unchecked, max_of, softmax_unchecked, Matrix};
use crate::pace::Margins;
use crate::{Error, Result};

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossBundle {
    /// Supervised loss of the main head.
    pub sup_main: f64,
    /// Consistency loss of the main head.
    pub cons_main: f64,
    /// Supervised loss of the auxiliary head.
    pub sup_aux: f64,
    /// Smoothed consistency loss of the auxiliary head.
    pub cons_aux: f64,
    pub total: f64,
}

impl LossBundle {
    fn finish(mut self) -> Self {
        self.total = self.sup_main + self.cons_main + self.sup_aux + self.cons_aux;
        self
    }

    pub fn unsup(&self) -> f64 {
        self.cons_main + self.cons_aux
    }

    pub fn sup(&self) -> f64 {
        self.sup_main + self.sup_aux
    }
}

/// Smoothed one-hot target: `(1−λ) + λ/C` at `y_hat`, `λ/C` elsewhere.
pub fn smooth_labels(y_hat: usize, lambda: f64, c: usize) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Usage(format!("lambda must be in (0,1), got {lambda}")));
    }
    if y_hat >= c {
        return Err(Error::Usage(format!("class {y_hat} out of range for C={c}")));
    }
    let off = lambda / c as f64;
    let mut q = vec![off; c];
    q[y_hat] = (1.0 - lambda) + off;
    Ok(q)
}

/// `−log softmax(z)_y`.
pub fn ce(z: &[f64], y: usize) -> f64 {
    lse_unchecked(z) - z[y]
}

/// Balanced margin softmax loss for hard target `y`.
pub fn margin_ce(z: &[f64], y: usize, margins: &Margins) -> f64 {
    let shift = margins.alpha_t * margins.delta[y];
    if shift == 0.0 {
        return ce(z, y);
    }
    let mut zs = z.to_vec();
    zs[y] -= shift;
    ce(&zs, y)
}

/// Loss and `∂/∂z` of [`margin_ce`].
pub fn margin_ce_grad(z: &[f64], y: usize, margins: &Margins) -> (f64, Vec<f64>) {
    let mut zs = z.to_vec();
    zs[y] -= margins.alpha_t * margins.delta[y];
    let loss = ce(&zs, y);
    let mut g = softmax_unchecked(&zs);
    g[y] -= 1.0;
    (loss, g)
}

fn check_distribution(q: &[f64]) -> Result<()> {
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > 1e-6 || q.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Usage(format!(
            "soft target must be a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// Per-class pieces of the O(C) soft margin evaluation.
struct SoftTerms {
    /// `exp(z_j − max z)`
    e: Vec<f64>,
    /// Denominator of target `k`: `Σ_{j≠k} e_j + e_k·exp(−αΔ_k)`.
    denom: Vec<f64>,
    /// `exp(−αΔ_k)`
    shrink: Vec<f64>,
    zmax: f64,
}

fn soft_terms(z: &[f64], margins: &Margins) -> SoftTerms {
    let c = z.len();
    let zmax = max_of(z);
    let e: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
    // prefix/suffix sums give Σ_{j≠k} e_j without subtracting from the total
    let mut prefix = vec![0.0; c + 1];
    for k in 0..c {
        prefix[k + 1] = prefix[k] + e[k];
    }
    let mut suffix = vec![0.0; c + 1];
    for k in (0..c).rev() {
        suffix[k] = suffix[k + 1] + e[k];
    }
    let shrink: Vec<f64> = (0..c)
        .map(|k| (-margins.alpha_t * margins.delta[k]).exp())
        .collect();
    let denom = (0..c)
        .map(|k| prefix[k] + suffix[k + 1] + e[k] * shrink[k])
        .collect();
    SoftTerms {
        e,
        denom,
        shrink,
        zmax,
    }
}

/// `Σ_k q_k · margin_ce(z, k, Δ, α)` in O(C).
pub fn soft_margin_ce(z: &[f64], q: &[f64], margins: &Margins) -> Result<f64> {
    check_distribution(q)?;
    Ok(soft_margin_ce_unchecked(z, q, margins))
}

fn soft_margin_ce_unchecked(z: &[f64], q: &[f64], margins: &Margins) -> f64 {
    let t = soft_terms(z, margins);
    let mut loss = 0.0;
    for k in 0..z.len() {
        if q[k] == 0.0 {
            continue;
        }
        let shifted = z[k] - margins.alpha_t * margins.delta[k] - t.zmax;
        loss += q[k] * (t.denom[k].ln() - shifted);
    }
    loss
}

/// Loss and `∂/∂z` of [`soft_margin_ce`].
pub fn soft_margin_ce_grad(z: &[f64], q: &[f64], margins: &Margins) -> (f64, Vec<f64>) {
    let t = soft_terms(z, margins);
    let loss = soft_margin_ce_unchecked(z, q, margins);
    let a: f64 = q.iter().zip(&t.denom).map(|(qk, dk)| qk / dk).sum();
    let g = (0..z.len())
        .map(|j| {
            let own = q[j] / t.denom[j];
            t.e[j] * (a - own) + own * t.e[j] * t.shrink[j] - q[j]
        })
        .collect();
    (loss, g)
}

/// FixMatch consistency: `(1/μB) Σ_j 𝕀(max q_j ≥ τ)·ce(z_j, argmax q_j)`.
/// Masked rows still count toward the denominator.
pub fn consistency_fixmatch(z_strong: &Matrix, q_weak: &Matrix, tau: f64) -> f64 {
    let n = z_strong.rows();
    let mut sum = 0.0;
    for (z, q) in z_strong.iter_rows().zip(q_weak.iter_rows()) {
        let (y, conf) = argmax(q);
        if conf >= tau {
            sum += ce(z, y);
        }
    }
    sum / n as f64
}

/// Weighted margin consistency: `(1/μB) Σ_j ψ_j·margin_ce(z_j, ŷ_j, Δ, α)`.
pub fn consistency_weighted(z_strong: &Matrix, pseudo_labels: &[usize], psi: &[f64], margins: &Margins) -> f64 {
    let n = z_strong.rows();
    let mut sum = 0.0;
    for ((z, &y), &w) in z_strong.iter_rows().zip(pseudo_labels).zip(psi) {
        if w != 0.0 {
            sum += w * margin_ce(z, y, margins);
        }
    }
    sum / n as f64
}

/// FineSSL weighting and smoothing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinesslParams {
    /// Label smoothing strength λ ∈ (0,1).
    pub lambda: f64,
    /// Sample-weight scale γ.
    pub gamma: f64,
}

/// Constant (gradient-free) quantities a batch's loss depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Pseudo-label of each unlabeled row.
    pub pseudo_labels: Vec<usize>,
    /// Weight of each unlabeled row in the main consistency term
    /// (a 0/1 mask for threshold methods, ψ for FineSSL).
    pub weights: Vec<f64>,
    /// View the main consistency term reads.
    pub consistency_view: View,
    /// Apply the pace margins to the main branch.
    pub margin_main: bool,
    /// Smoothed targets for the auxiliary head; `None` leaves it untrained.
    pub aux_targets: Option<Vec<Vec<f64>>>,
}

/// Which branch contributions [`evaluate`] accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    All,
    MainOnly,
    AuxOnly,
}

/// Per-row head outputs on the weak views of a batch.
pub fn weak_probs(heads: &Heads, batch: &Batch) -> (Matrix, Matrix) {
    let c = heads.num_classes();
    let n = batch.unlabeled_len();
    let mut main = Matrix::zeros(n, c);
    let mut aux = Matrix::zeros(n, c);
    for j in 0..n {
        let h = heads.trace(batch.unlabeled_weak.row(j)).out;
        main.row_mut(j).copy_from_slice(&softmax_unchecked(&heads.main_logits(&h)));
        aux.row_mut(j).copy_from_slice(&softmax_unchecked(&heads.aux_logits(&h)));
    }
    (main, aux)
}

/// Targets of the FineSSL objective: pseudo-labels from the main head's weak
/// view, `ψ = γ·max p_aux` from the auxiliary head's weak view, and smoothed
/// auxiliary targets built from the main pseudo-labels.
pub fn finessl_targets(heads: &Heads, batch: &Batch, params: &FinesslParams) -> Result<Targets> {
    let (q_main, p_aux) = weak_probs(heads, batch);
    let c = heads.num_classes();
    let mut pseudo = Vec::with_capacity(q_main.rows());
    let mut psi = Vec::with_capacity(q_main.rows());
    let mut smooth = Vec::with_capacity(q_main.rows());
    for (q, p) in q_main.iter_rows().zip(p_aux.iter_rows()) {
        let y = argmax(q).0;
        pseudo.push(y);
        psi.push(params.gamma * argmax(p).1);
        smooth.push(smooth_labels(y, params.lambda, c)?);
    }
    Ok(Targets {
        pseudo_labels: pseudo,
        weights: psi,
        consistency_view: View::Strong,
        margin_main: true,
        aux_targets: Some(smooth),
    })
}

/// Full FineSSL loss of a batch under the given margins.
pub fn finessl_loss(heads: &Heads, batch: &Batch, margins: &Margins, params: &FinesslParams) -> Result<LossBundle> {
    let t = finessl_targets(heads, batch, params)?;
    Ok(evaluate(heads, heads, batch, &t, margins, Branches::All)?.0)
}

/// Analytic gradient of the full FineSSL loss.
pub fn grad(heads: &Heads, batch: &Batch, margins: &Margins, params: &FinesslParams) -> Result<GradBundle> {
    let t = finessl_targets(heads, batch, params)?;
    Ok(evaluate(heads, heads, batch, &t, margins, Branches::All)?.1)
}

fn backprop_main(heads: &Heads, tr: &FeatureTrace, dz: &[f64], scale: f64, g: &mut GradBundle) {
    g.main_w.add_outer(dz, &tr.out, scale);
    for (gb, d) in g.main_b.iter_mut().zip(dz) {
        *gb += scale * d;
    }
    if let (Some(pre), Some(ga)) = (&tr.pre, &mut g.adapter) {
        let dh = heads.main_w.tmul_vec(dz);
        let da: Vec<f64> = dh
            .iter()
            .zip(pre)
            .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
            .collect();
        ga.w.add_outer(&da, &tr.input, scale);
        for (gb, d) in ga.b.iter_mut().zip(&da) {
            *gb += scale * d;
        }
    }
}

fn backprop_aux(h_detached: &[f64], dz: &[f64], scale: f64, g: &mut GradBundle) {
    g.aux_w.add_outer(dz, h_detached, scale);
    for (gb, d) in g.aux_b.iter_mut().zip(dz) {
        *gb += scale * d;
    }
}

/// Loss bundle and its gradient for fixed targets.
///
/// Main-branch terms run through `heads` end to end. Auxiliary terms take
/// their features from `detach_from` (the stop-gradient snapshot; pass the
/// same heads during training) and only their head parameters from `heads`.
pub fn evaluate(
    heads: &Heads,
    detach_from: &Heads,
    batch: &Batch,
    targets: &Targets,
    margins: &Margins,
    branches: Branches,
) -> Result<(LossBundle, GradBundle)> {
    let c = heads.num_classes();
    batch.validate(heads.input_dim(), c)?;
    let u = batch.unlabeled_len();
    if targets.pseudo_labels.len() != u || targets.weights.len() != u {
        return Err(Error::Usage("targets do not match the batch".into()));
    }
    if margins.delta.len() != c {
        return Err(Error::Usage("margin vector length differs from C".into()));
    }
    if let Some(a) = &targets.aux_targets {
        if a.len() != u {
            return Err(Error::Usage("aux targets do not match the batch".into()));
        }
    }
    let no_margin = Margins::none(c);
    let main_margins = if targets.margin_main { margins } else { &no_margin };
    let do_main = branches != Branches::AuxOnly;
    let do_aux = branches != Branches::MainOnly && targets.aux_targets.is_some();

    let mut loss = LossBundle::default();
    let mut g = heads.zeros_like();
    let inv_b = 1.0 / batch.labeled_len() as f64;
    let inv_u = 1.0 / u as f64;

    for (i, &y) in batch.labeled_y.iter().enumerate() {
        let x = batch.labeled_x.row(i);
        if do_main {
            let tr = heads.trace(x);
            let (l, dz) = margin_ce_grad(&heads.main_logits(&tr.out), y, main_margins);
            loss.sup_main += l * inv_b;
            backprop_main(heads, &tr, &dz, inv_b, &mut g);
        }
        if do_aux {
            let h = detach_from.trace(x).out;
            let (l, dz) = margin_ce_grad(&heads.aux_logits(&h), y, &no_margin);
            loss.sup_aux += l * inv_b;
            backprop_aux(&h, &dz, inv_b, &mut g);
        }
    }

    let main_view = match targets.consistency_view {
        View::Weak => &batch.unlabeled_weak,
        View::Strong => &batch.unlabeled_strong,
    };
    for j in 0..u {
        let w = targets.weights[j];
        if do_main && w != 0.0 {
            let tr = heads.trace(main_view.row(j));
            let (l, dz) = margin_ce_grad(&heads.main_logits(&tr.out), targets.pseudo_labels[j], main_margins);
            loss.cons_main += w * l * inv_u;
            backprop_main(heads, &tr, &dz, w * inv_u, &mut g);
        }
        if do_aux {
            let q = &targets.aux_targets.as_ref().unwrap()[j];
            let h = detach_from.trace(batch.unlabeled_strong.row(j)).out;
            let (l, dz) = soft_margin_ce_grad(&heads.aux_logits(&h), q, margins);
            loss.cons_aux += l * inv_u;
            backprop_aux(&h, &dz, inv_u, &mut g);
        }
    }
    Ok((loss.finish(), g))
}
