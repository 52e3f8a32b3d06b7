#![allow(dead_code)]

use finessl::embedstore::Batch;
use finessl::model::Heads;
use finessl::numkit::{Matrix, RandomStream};
use finessl::pace::Margins;

pub fn random_matrix(rows: usize, cols: usize, sd: f64, rng: &mut RandomStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| sd * rng.normal()).collect()).unwrap()
}

/// Heads with every block drawn from `N(0, sd²)`.
pub fn random_heads(c: usize, d: usize, adapter: bool, sd: f64, rng: &mut RandomStream) -> Heads {
    let mut h = Heads::zeros(c, d, adapter);
    for (_, block) in h.blocks_mut() {
        for v in block {
            *v = sd * rng.normal();
        }
    }
    h
}

pub fn random_batch(c: usize, d: usize, b: usize, u: usize, rng: &mut RandomStream) -> Batch {
    Batch {
        labeled_x: random_matrix(b, d, 1.0, rng),
        labeled_y: (0..b).map(|_| rng.below(c)).collect(),
        unlabeled_weak: random_matrix(u, d, 1.0, rng),
        unlabeled_strong: random_matrix(u, d, 1.0, rng),
        unlabeled_index: (0..u).collect(),
    }
}

pub fn random_margins(c: usize, alpha_max: f64, rng: &mut RandomStream) -> Margins {
    Margins {
        delta: (0..c).map(|_| rng.uniform()).collect(),
        alpha_t: alpha_max * rng.uniform(),
    }
}

pub fn random_logits(c: usize, sd: f64, rng: &mut RandomStream) -> Vec<f64> {
    (0..c).map(|_| sd * rng.normal()).collect()
}

use finessl::objective::{ce, evaluate, finessl_targets, margin_ce, soft_margin_ce, Branches, FinesslParams};

/// Worst mismatch between analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub entries: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

pub const FD_STEP: f64 = 1e-4;

/// Central differences are only meaningful where the loss is smooth over the
/// stencil; ReLU inputs this close to zero would put a kink inside it.
const KINK_CLEARANCE: f64 = 1e-3;

/// Smallest |adapter pre-activation| over every row of the batch.
pub fn min_abs_preactivation(h: &Heads, batch: &Batch) -> f64 {
    let Some(a) = &h.adapter else {
        return f64::INFINITY;
    };
    let mut min = f64::INFINITY;
    for m in [&batch.labeled_x, &batch.unlabeled_weak, &batch.unlabeled_strong] {
        for row in m.iter_rows() {
            for (p, b) in a.w.mul_vec(row).iter().zip(&a.b) {
                min = min.min((p + b).abs());
            }
        }
    }
    min
}

/// Random FD instance away from ReLU kinks.
fn smooth_instance(c: usize, d: usize, b: usize, u: usize, rng: &mut RandomStream) -> (Heads, Batch) {
    loop {
        let h = random_heads(c, d, true, 0.5, rng);
        let batch = random_batch(c, d, b, u, rng);
        if min_abs_preactivation(&h, &batch) > KINK_CLEARANCE {
            return (h, batch);
        }
    }
}

fn entry_ok(analytic: f64, fd: f64) -> (bool, f64) {
    let abs = (analytic - fd).abs();
    let rel = abs / analytic.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
    (rel < 1e-4 || abs < 1e-7, if abs < 1e-7 { 0.0 } else { rel })
}

/// Total-loss gradients of random FineSSL instances (adapter on) against
/// central differences. Targets and the stop-gradient snapshot stay fixed
/// while parameters move.
pub fn total_loss_gradient_check(instances: usize, seed: u64) -> GradCheck {
    let (c, d, b, u) = (5, 8, 4, 4);
    let mut rng = RandomStream::new(seed, 0);
    let mut out = GradCheck::default();
    for _ in 0..instances {
        let (h0, batch) = smooth_instance(c, d, b, u, &mut rng);
        let margins = random_margins(c, 8.0, &mut rng);
        let params = FinesslParams {
            lambda: 0.1 + 0.8 * rng.uniform(),
            gamma: 0.5 + 3.0 * rng.uniform(),
        };
        let targets = finessl_targets(&h0, &batch, &params).unwrap();
        let (_, g) = evaluate(&h0, &h0, &batch, &targets, &margins, Branches::All).unwrap();
        let loss = |h: &Heads| evaluate(h, &h0, &batch, &targets, &margins, Branches::All).unwrap().0.total;
        let blocks: Vec<_> = g.blocks().into_iter().map(|(k, v)| (k, v.to_vec())).collect();
        for (bi, (_, analytic)) in blocks.iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let mut hp = h0.clone();
                hp.blocks_mut()[bi].1[i] += FD_STEP;
                let mut hm = h0.clone();
                hm.blocks_mut()[bi].1[i] -= FD_STEP;
                let fd = (loss(&hp) - loss(&hm)) / (2.0 * FD_STEP);
                let (ok, rel) = entry_ok(a, fd);
                out.entries += 1;
                out.failures += usize::from(!ok);
                out.worst_rel = out.worst_rel.max(rel);
            }
        }
    }
    out
}

/// Adapter gradients of the auxiliary-only loss: (all exactly zero, largest
/// |finite difference| through the same loss).
pub fn detach_check(instances: usize, seed: u64) -> (bool, f64) {
    let (c, d, b, u) = (5, 8, 4, 4);
    let mut rng = RandomStream::new(seed, 0);
    let mut all_zero = true;
    let mut worst_fd: f64 = 0.0;
    for _ in 0..instances {
        let (h0, batch) = smooth_instance(c, d, b, u, &mut rng);
        let margins = random_margins(c, 8.0, &mut rng);
        let params = FinesslParams { lambda: 0.5, gamma: 3.0 };
        let targets = finessl_targets(&h0, &batch, &params).unwrap();
        let (_, g) = evaluate(&h0, &h0, &batch, &targets, &margins, Branches::AuxOnly).unwrap();
        let ga = g.adapter.as_ref().unwrap();
        all_zero &= ga.w.as_slice().iter().chain(&ga.b).all(|&v| v == 0.0);
        let loss = |h: &Heads| evaluate(h, &h0, &batch, &targets, &margins, Branches::AuxOnly).unwrap().0.total;
        let n = ga.w.as_slice().len() + ga.b.len();
        for i in 0..n {
            let bump = |s: f64| {
                let mut h = h0.clone();
                let a = h.adapter.as_mut().unwrap();
                let nw = a.w.as_slice().len();
                if i < nw {
                    a.w.as_mut_slice()[i] += s;
                } else {
                    a.b[i - nw] += s;
                }
                h
            };
            let fd = (loss(&bump(FD_STEP)) - loss(&bump(-FD_STEP))) / (2.0 * FD_STEP);
            worst_fd = worst_fd.max(fd.abs());
        }
    }
    (all_zero, worst_fd)
}

/// Largest deviations of the two hard-margin identities over random draws:
/// `α = 0` against plain CE, and the shifted-logit form.
pub fn margin_identity_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = RandomStream::new(seed, 0);
    let (mut zero_alpha, mut shifted) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let c = 2 + rng.below(19);
        let z = random_logits(c, 3.0, &mut rng);
        let y = rng.below(c);
        let mut m = random_margins(c, 10.0, &mut rng);
        let with_alpha = margin_ce(&z, y, &m);
        let mut zs = z.clone();
        zs[y] -= m.alpha_t * m.delta[y];
        shifted = shifted.max((with_alpha - ce(&zs, y)).abs());
        m.alpha_t = 0.0;
        zero_alpha = zero_alpha.max((margin_ce(&z, y, &m) - ce(&z, y)).abs());
    }
    (zero_alpha, shifted)
}

/// Largest deviation of the O(C) soft-target margin loss from the explicit
/// mixture `Σ_k q_k · margin_ce(z, k)`, with C up to 100.
pub fn soft_margin_error(instances: usize, seed: u64) -> f64 {
    let mut rng = RandomStream::new(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = 2 + rng.below(99);
        let z = random_logits(c, 3.0, &mut rng);
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform()).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let m = random_margins(c, 10.0, &mut rng);
        let fast = soft_margin_ce(&z, &q, &m).unwrap();
        let brute: f64 = (0..c).map(|k| q[k] * margin_ce(&z, k, &m)).sum();
        worst = worst.max((fast - brute).abs());
    }
    worst
}

use finessl::pace::{PaceEstimator, PaceState};

fn confident_row(c: usize, k: usize) -> Vec<f64> {
    let mut r = vec![0.1 / (c - 1) as f64; c];
    r[k] = 0.9;
    r
}

/// Probability rows realizing the given per-class confident counts, padded
/// with rows below ζ that must not count.
pub fn rows_for_counts(counts: &[usize]) -> Matrix {
    let c = counts.len();
    let mut rows = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            rows.push(confident_row(c, k));
        }
    }
    let mut weak = vec![0.5 / (c - 1) as f64; c];
    weak[0] = 0.5;
    rows.push(weak);
    Matrix::from_rows(&rows).unwrap()
}

/// Five scripted steps: confident predictions per class at each step.
pub const PACE_SCRIPT: [[usize; 3]; 5] = [[2, 0, 1], [1, 1, 0], [0, 2, 2], [0, 0, 4], [0, 0, 0]];

/// Hand-simulated (σ, β, Δ, α_t) after each scripted step for window 3, α = 8.
pub fn pace_oracle() -> Vec<([f64; 3], [f64; 3], [f64; 3], f64)> {
    vec![
        ([2.0, 0.0, 1.0], [1.0, 0.0, 0.5], [0.0, 1.0, 0.5], 8.0),
        ([3.0, 1.0, 1.0], [1.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 1.0 - 1.0 / 3.0, 1.0 - 1.0 / 3.0], (1.0 - 1.0 / 3.0) * 8.0),
        ([3.0, 3.0, 3.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.0),
        ([1.0, 3.0, 6.0], [1.0 / 6.0, 0.5, 1.0], [1.0 - 1.0 / 6.0, 0.5, 0.0], (1.0 - 1.0 / 6.0) * 8.0),
        ([0.0, 2.0, 6.0], [0.0, 1.0 / 3.0, 1.0], [1.0, 1.0 - 1.0 / 3.0, 0.0], 8.0),
    ]
}

/// Runs the script through a window-3 estimator and compares every step
/// with the oracle bit for bit.
pub fn pace_script_matches_oracle() -> bool {
    let mut p = PaceState::new(3, 0.7, 8.0, PaceEstimator::Window { capacity: 3 }).unwrap();
    PACE_SCRIPT.iter().zip(pace_oracle()).all(|(step, (sigma, beta, delta, alpha))| {
        p.update_counts(&rows_for_counts(step));
        let m = p.refresh_margins();
        p.counts() == sigma && p.beta() == beta && m.delta == delta && m.alpha_t == alpha
    })
}

/// Literal full-pass count over every row seen so far against a window at
/// least as long as the run.
pub fn full_pass_matches_window() -> bool {
    let mut p = PaceState::new(3, 0.7, 8.0, PaceEstimator::Window { capacity: PACE_SCRIPT.len() }).unwrap();
    let mut seen: Vec<Vec<f64>> = Vec::new();
    PACE_SCRIPT.iter().all(|step| {
        let q = rows_for_counts(step);
        seen.extend(q.iter_rows().map(<[f64]>::to_vec));
        p.update_counts(&q);
        let mut sigma = [0.0; 3];
        for row in &seen {
            let (k, conf) = finessl::numkit::argmax(row);
            if conf >= 0.7 {
                sigma[k] += 1.0;
            }
        }
        p.counts() == sigma
    })
}

/// Cold start gives Δ = 1; equal counts give α_t = 0.
pub fn pace_edge_cases_hold() -> bool {
    let mut p = PaceState::new(4, 0.7, 8.0, PaceEstimator::Window { capacity: 2 }).unwrap();
    let cold = p.refresh_margins();
    let cold_ok = cold.delta == vec![1.0; 4] && cold.alpha_t == 8.0;
    p.update_counts(&rows_for_counts(&[3, 3, 3, 3]));
    let eq = p.refresh_margins();
    cold_ok && eq.alpha_t == 0.0 && eq.delta == vec![0.0; 4]
}
