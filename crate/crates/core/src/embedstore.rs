//! Frozen-embedding datasets.
//!
//! Holds the dataset model, the EMB1 binary format, synthetic generators
//! (Gaussian blobs, long-tailed counts, OOD contamination), embedding-space
//! augmentation views, and the deterministic batch sampler.
//!
//! EMB1 layout (little-endian, no padding):
//!
//! ```text
//! "EMB1" | u32 version=1 | u32 N | u32 D | u32 C | u32 flags
//! N × i32 labels
//! N×D × f32 features, row-major
//! [C×D × f32 prototypes]   if flags bit0
//! [N × u8 ood flags]       if flags bit1
//! ```
//!
//! flags bit2 records that the features are already L2-normalized.

use std::fs;
use std::path::Path;

use crate::numkit::{streams, Matrix, RandomStream};
use crate::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub const FLAG_PROTOTYPES: u32 = 1;
pub const FLAG_OOD: u32 = 1 << 1;
pub const FLAG_NORMALIZED: u32 = 1 << 2;

/// Sidecar format holding the hidden ground truth of a generated dataset.
pub const LBL1_MAGIC: &[u8; 4] = b"LBL1";

/// Frozen features with partial labels.
///
/// `labels[i] == -1` marks an unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub num_classes: usize,
    /// `N × D`, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<i32>,
    /// `C × D`, row-major.
    pub prototypes: Option<Vec<f32>>,
    pub ood_mask: Option<Vec<bool>>,
    pub normalized: bool,
}

impl EmbeddingDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] >= 0).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] < 0).collect()
    }

    pub fn is_ood(&self, i: usize) -> bool {
        self.ood_mask.as_ref().is_some_and(|m| m[i])
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.prototypes.is_some() {
            f |= FLAG_PROTOTYPES;
        }
        if self.ood_mask.is_some() {
            f |= FLAG_OOD;
        }
        if self.normalized {
            f |= FLAG_NORMALIZED;
        }
        f
    }

    /// Structural invariants: shapes, label range, finiteness, OOD ⇒ unlabeled.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("dataset needs D ≥ 1 and C ≥ 1".into()));
        }
        if self.features.len() != n * self.dim {
            return Err(Error::Config(format!(
                "feature block has {} entries, expected {}",
                self.features.len(),
                n * self.dim
            )));
        }
        let c = self.num_classes as i32;
        if let Some(i) = self.labels.iter().position(|&y| y < -1 || y >= c) {
            return Err(Error::Config(format!(
                "label {} at row {i} outside [-1, {c})",
                self.labels[i]
            )));
        }
        if let Some(i) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite feature at row {}",
                i / self.dim
            )));
        }
        if let Some(p) = &self.prototypes {
            if p.len() != self.num_classes * self.dim {
                return Err(Error::Config("prototype block shape mismatch".into()));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("non-finite prototype entry".into()));
            }
        }
        if let Some(m) = &self.ood_mask {
            if m.len() != n {
                return Err(Error::Config("ood mask length mismatch".into()));
            }
            if let Some(i) = (0..n).find(|&i| m[i] && self.labels[i] != -1) {
                return Err(Error::Config(format!("row {i} is OOD but labeled")));
            }
        }
        Ok(())
    }

    /// Additional requirements of a semi-supervised run.
    pub fn validate_ssl(&self) -> Result<()> {
        self.validate()?;
        if !self.labels.iter().any(|&y| y >= 0) {
            return Err(Error::Config("SSL requires labeled samples".into()));
        }
        if !self.labels.iter().any(|&y| y < 0) {
            return Err(Error::Config("SSL requires unlabeled samples".into()));
        }
        Ok(())
    }

    /// Copy with every feature row (and prototype row) scaled to unit L2 norm.
    /// Zero rows stay zero. A dataset already flagged as normalized is returned
    /// unchanged.
    pub fn l2_normalized(&self) -> Self {
        if self.normalized {
            return self.clone();
        }
        let mut out = self.clone();
        normalize_rows(&mut out.features, self.dim);
        if let Some(p) = &mut out.prototypes {
            normalize_rows(p, self.dim);
        }
        out.normalized = true;
        out
    }

    /// Rows `i` of the dataset as an `f64` matrix.
    pub fn gather(&self, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(idx.len(), self.dim);
        for (r, &i) in idx.iter().enumerate() {
            for (dst, &src) in m.row_mut(r).iter_mut().zip(self.row(i)) {
                *dst = f64::from(src);
            }
        }
        m
    }

    pub fn prototype_matrix(&self) -> Option<Matrix> {
        let p = self.prototypes.as_ref()?;
        let data = p.iter().map(|&x| f64::from(x)).collect();
        Matrix::from_vec(self.num_classes, self.dim, data).ok()
    }
}

fn normalize_rows(data: &mut [f32], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let norm = row
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for x in row {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// EMB1 encode / decode

pub fn encode_emb1(d: &EmbeddingDataset) -> Result<Vec<u8>> {
    d.validate()?;
    let n = d.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 4 + d.features.len() * 4);
    out.extend_from_slice(EMB1_MAGIC);
    for v in [EMB1_VERSION, n as u32, d.dim as u32, d.num_classes as u32, d.flags()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &d.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    for &x in &d.features {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(p) = &d.prototypes {
        for &x in p {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(m) = &d.ood_mask {
        out.extend(m.iter().map(|&b| u8::from(b)));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated body: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32_block(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = self.take(count * 4, what)?;
        let mut out = Vec::with_capacity(count);
        for (i, ch) in bytes.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(ch.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::parse((start + i * 4) as u64, format!("non-finite float in {what}")));
            }
            out.push(x);
        }
        Ok(out)
    }
}

pub fn decode_emb1(buf: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != EMB1_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != EMB1_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let n = r.u32("N")? as usize;
    let dim = r.u32("D")? as usize;
    let c = r.u32("C")? as usize;
    let flags_at = r.pos;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_PROTOTYPES | FLAG_OOD | FLAG_NORMALIZED) != 0 {
        return Err(Error::parse(flags_at as u64, format!("unknown flag bits {flags:#x}")));
    }
    if dim == 0 || c == 0 {
        return Err(Error::parse(8, "D and C must be positive"));
    }

    let labels_at = r.pos;
    let raw = r.take(n * 4, "labels")?;
    let mut labels = Vec::with_capacity(n);
    for (i, ch) in raw.chunks_exact(4).enumerate() {
        let y = i32::from_le_bytes(ch.try_into().unwrap());
        if y < -1 || y >= c as i32 {
            return Err(Error::parse(
                (labels_at + i * 4) as u64,
                format!("label {y} out of range [-1, {c})"),
            ));
        }
        labels.push(y);
    }
    let features = r.f32_block(n * dim, "features")?;
    let prototypes = if flags & FLAG_PROTOTYPES != 0 {
        Some(r.f32_block(c * dim, "prototypes")?)
    } else {
        None
    };
    let ood_mask = if flags & FLAG_OOD != 0 {
        let at = r.pos;
        let raw = r.take(n, "ood flags")?;
        let mut m = Vec::with_capacity(n);
        for (i, &b) in raw.iter().enumerate() {
            match b {
                0 => m.push(false),
                1 if labels[i] == -1 => m.push(true),
                1 => return Err(Error::parse((at + i) as u64, "ood flag set on a labeled row")),
                _ => return Err(Error::parse((at + i) as u64, format!("ood flag byte {b} not 0/1"))),
            }
        }
        Some(m)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes"));
    }
    Ok(EmbeddingDataset {
        dim,
        num_classes: c,
        features,
        labels,
        prototypes,
        ood_mask,
        normalized: flags & FLAG_NORMALIZED != 0,
    })
}

pub fn write_emb1(d: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_emb1(d)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_emb1(&bytes)
}

/// Writes the hidden per-row ground truth: `"LBL1" | u32 N | N × i32`.
/// `-1` marks rows without an in-distribution class.
pub fn write_truth(truth: &[i32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + truth.len() * 4);
    out.extend_from_slice(LBL1_MAGIC);
    out.extend_from_slice(&(truth.len() as u32).to_le_bytes());
    for &y in truth {
        out.extend_from_slice(&y.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<i32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != LBL1_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let n = r.u32("N")? as usize;
    let raw = r.take(n * 4, "labels")?;
    if r.pos != buf.len() {
        return Err(Error::parse(r.pos as u64, "trailing bytes"));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|ch| i32::from_le_bytes(ch.try_into().unwrap()))
        .collect())
}

/// Conventional sidecar path for a dataset's ground truth.
pub fn truth_path(data_path: &Path) -> std::path::PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".truth");
    s.into()
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Long-tailed per-class counts `N_k = N_1 · ρ^{-(k-1)/(C-1)}`, rounded to the
/// nearest integer with a floor of 1.
pub fn longtail_counts(n1: usize, c: usize, rho: f64) -> Result<Vec<usize>> {
    if n1 < 1 || c < 2 || !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::Usage(format!(
            "longtail_counts needs n1 ≥ 1, c ≥ 2, finite rho ≥ 1 (got {n1}, {c}, {rho})"
        )));
    }
    Ok((0..c)
        .map(|k| {
            let e = -(k as f64) / ((c - 1) as f64);
            ((n1 as f64 * rho.powf(e)).round() as usize).max(1)
        })
        .collect())
}

/// Gaussian-blob generation parameters.
#[derive(Debug, Clone)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    /// Per-class labeled counts (length `classes`).
    pub labeled: Vec<usize>,
    /// Per-class unlabeled counts (length `classes`).
    pub unlabeled: Vec<usize>,
    /// Per-class count of the held-out test split.
    pub test_per_class: usize,
    /// Minimum pairwise mean distance, in units of `noise_sd`.
    pub class_sep: f64,
    pub noise_sd: f64,
    /// Per-class noise multipliers.
    pub bias_profile: Option<Vec<f64>>,
    /// Extra unlabeled samples drawn around means outside all classes.
    pub n_ood: usize,
}

impl BlobsConfig {
    pub fn balanced(classes: usize, dim: usize, labeled: usize, unlabeled: usize) -> Self {
        Self {
            classes,
            dim,
            labeled: vec![labeled; classes],
            unlabeled: vec![unlabeled; classes],
            test_per_class: 0,
            class_sep: 4.0,
            noise_sd: 1.0,
            bias_profile: None,
            n_ood: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::Config("blobs need c ≥ 2 and d ≥ 2".into()));
        }
        if self.labeled.len() != self.classes || self.unlabeled.len() != self.classes {
            return Err(Error::Config("per-class count vectors must have length c".into()));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        if !(self.class_sep >= 0.0) || !self.class_sep.is_finite() {
            return Err(Error::Config("class_sep must be non-negative".into()));
        }
        if let Some(b) = &self.bias_profile {
            if b.len() != self.classes || b.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
                return Err(Error::Config(
                    "bias_profile needs c positive multipliers".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of OOD cluster centres used when `n_ood > 0`.
    pub fn ood_clusters(&self) -> usize {
        if self.n_ood == 0 {
            0
        } else {
            self.classes.div_ceil(2)
        }
    }
}

/// Output of [`gen_blobs`].
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub train: EmbeddingDataset,
    /// Fully labeled held-out split drawn from the same class means.
    pub test: EmbeddingDataset,
    /// Ground truth for every training row; `-1` for OOD rows.
    pub truth: Vec<i32>,
    pub means: Matrix,
}

const MEAN_PLACEMENT_ATTEMPTS: usize = 20_000;

/// Places `count` means at pairwise distance ≥ `sep`.
///
/// Up to `2·dim` means are `±` the axes of a random orthonormal frame scaled
/// by `sep/√2`, so neighbouring classes sit exactly at the minimum separation.
/// Beyond that, points on the sphere of radius `sep` are drawn by rejection
/// (pairwise angle ≥ 60°), which fails for geometries that cannot hold them.
fn place_means(count: usize, dim: usize, sep: f64, rng: &mut RandomStream) -> Result<Matrix> {
    if count <= 2 * dim {
        let frame = random_frame(count.min(dim), dim, rng);
        let radius = sep / std::f64::consts::SQRT_2;
        let rows: Vec<Vec<f64>> = (0..count)
            .map(|k| {
                let sign = if k < dim { radius } else { -radius };
                frame[k % dim].iter().map(|v| v * sign).collect()
            })
            .collect();
        return Matrix::from_rows(&rows);
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = crate::numkit::l2_norm(&v);
            if norm == 0.0 {
                continue;
            }
            for x in &mut v {
                *x *= sep / norm;
            }
            let ok = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= sep
            });
            if ok {
                means.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "infeasible geometry: could not place mean {k} of {count} in {dim} dims at separation {sep}"
            )));
        }
    }
    Matrix::from_rows(&means)
}

/// `n ≤ dim` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn random_frame(n: usize, dim: usize, rng: &mut RandomStream) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n);
    while frame.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &frame {
            let p = crate::numkit::dot(u, &v);
            for (x, ui) in v.iter_mut().zip(u) {
                *x -= p * ui;
            }
        }
        let norm = crate::numkit::l2_norm(&v);
        // a draw nearly inside the current span is redrawn
        if norm > 1e-6 {
            frame.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    frame
}

fn draw_around(mean: &[f64], sd: f64, rng: &mut RandomStream, out: &mut Vec<f32>) {
    out.extend(mean.iter().map(|&m| (m + sd * rng.normal()) as f32));
}

/// Gaussian blobs around well-separated class means, plus optional OOD
/// clusters. Training rows are ordered labeled (class-major), unlabeled
/// (class-major), then OOD.
pub fn gen_blobs(cfg: &BlobsConfig, rng: &mut RandomStream) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let c = cfg.classes;
    let sep = cfg.class_sep * cfg.noise_sd;
    let n_ood_clusters = cfg.ood_clusters();
    let all_means = place_means(c + n_ood_clusters, cfg.dim, sep, rng)?;
    let sd_of = |k: usize| cfg.noise_sd * cfg.bias_profile.as_ref().map_or(1.0, |b| b[k]);

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for k in 0..c {
        for _ in 0..cfg.labeled[k] {
            draw_around(all_means.row(k), sd_of(k), rng, &mut features);
            labels.push(k as i32);
            truth.push(k as i32);
        }
    }
    for k in 0..c {
        for _ in 0..cfg.unlabeled[k] {
            draw_around(all_means.row(k), sd_of(k), rng, &mut features);
            labels.push(-1);
            truth.push(k as i32);
        }
    }
    let n_id = labels.len();
    for j in 0..cfg.n_ood {
        let centre = c + j % n_ood_clusters;
        draw_around(all_means.row(centre), cfg.noise_sd, rng, &mut features);
        labels.push(-1);
        truth.push(-1);
    }
    let ood_mask = (cfg.n_ood > 0).then(|| (0..labels.len()).map(|i| i >= n_id).collect());

    let mut test_rng = rng.sibling(streams::TEST_GEN);
    let mut test_features = Vec::new();
    let mut test_labels = Vec::new();
    for k in 0..c {
        for _ in 0..cfg.test_per_class {
            draw_around(all_means.row(k), sd_of(k), &mut test_rng, &mut test_features);
            test_labels.push(k as i32);
        }
    }

    let mut class_means = Matrix::zeros(c, cfg.dim);
    for k in 0..c {
        class_means.row_mut(k).copy_from_slice(all_means.row(k));
    }
    Ok(SyntheticSplit {
        train: EmbeddingDataset {
            dim: cfg.dim,
            num_classes: c,
            features,
            labels,
            prototypes: None,
            ood_mask,
            normalized: false,
        },
        test: EmbeddingDataset {
            dim: cfg.dim,
            num_classes: c,
            features: test_features,
            labels: test_labels,
            prototypes: None,
            ood_mask: None,
            normalized: false,
        },
        truth,
        means: class_means,
    })
}

// ---------------------------------------------------------------------------
// Augmentation and batching

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub weak_noise_sd: f64,
    pub strong_noise_sd: f64,
    pub strong_drop_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_sd: 0.0,
            strong_noise_sd: 0.05,
            strong_drop_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.strong_drop_frac) {
            return Err(Error::Config("strong_drop_frac must be in [0,1)".into()));
        }
        if !(self.weak_noise_sd >= 0.0) || !(self.strong_noise_sd >= 0.0) {
            return Err(Error::Config("augmentation noise sds must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Embedding-space perturbation standing in for image augmentation.
///
/// Weak adds `N(0, weak_noise_sd²)` per dimension. Strong zeroes a uniformly
/// chosen `⌊strong_drop_frac·D⌋`-subset of dimensions, then adds
/// `N(0, strong_noise_sd²)`. A zero noise level draws nothing.
pub fn augment_view(x: &[f64], view: View, cfg: &AugmentConfig, rng: &mut RandomStream) -> Vec<f64> {
    let mut out = x.to_vec();
    let sd = match view {
        View::Weak => cfg.weak_noise_sd,
        View::Strong => {
            let k = (cfg.strong_drop_frac * x.len() as f64).floor() as usize;
            for i in rng.choose_subset(x.len(), k) {
                out[i] = 0.0;
            }
            cfg.strong_noise_sd
        }
    };
    if sd > 0.0 {
        for v in &mut out {
            *v += sd * rng.normal();
        }
    }
    out
}

/// One optimization step's worth of data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled_x: Matrix,
    pub labeled_y: Vec<usize>,
    pub unlabeled_weak: Matrix,
    pub unlabeled_strong: Matrix,
    /// Dataset row of each unlabeled position.
    pub unlabeled_index: Vec<usize>,
}

impl Batch {
    pub fn labeled_len(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled_index.len()
    }

    /// Shape checks against a feature dimension and class count.
    pub fn validate(&self, dim: usize, classes: usize) -> Result<()> {
        let b = self.labeled_y.len();
        let u = self.unlabeled_index.len();
        if self.labeled_x.rows() != b
            || self.unlabeled_weak.rows() != u
            || self.unlabeled_strong.rows() != u
        {
            return Err(Error::Usage("batch row counts disagree".into()));
        }
        if b == 0 || u == 0 {
            return Err(Error::Usage("batch needs labeled and unlabeled rows".into()));
        }
        for m in [&self.labeled_x, &self.unlabeled_weak, &self.unlabeled_strong] {
            if m.cols() != dim {
                return Err(Error::Usage(format!("batch dim {} != {dim}", m.cols())));
            }
        }
        if self.labeled_y.iter().any(|&y| y >= classes) {
            return Err(Error::Usage("batch label out of range".into()));
        }
        Ok(())
    }
}

/// Shuffled index pool that reshuffles at every wraparound.
#[derive(Debug, Clone)]
struct CyclingPool {
    items: Vec<usize>,
    cursor: usize,
}

impl CyclingPool {
    fn new(items: Vec<usize>, rng: &mut RandomStream) -> Self {
        let mut pool = Self { items, cursor: 0 };
        rng.shuffle(&mut pool.items);
        pool
    }

    fn next(&mut self, rng: &mut RandomStream) -> usize {
        if self.cursor == self.items.len() {
            rng.shuffle(&mut self.items);
            self.cursor = 0;
        }
        let i = self.items[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Deterministic source of batches. Labeled and unlabeled pools cycle
/// independently; augmentation draws come from their own sub-stream.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    data: &'a EmbeddingDataset,
    b: usize,
    mu: usize,
    aug: AugmentConfig,
    labeled: CyclingPool,
    unlabeled: CyclingPool,
    order_rng: RandomStream,
    aug_rng: RandomStream,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a EmbeddingDataset, b: usize, mu: usize, aug: AugmentConfig, seed: u64) -> Result<Self> {
        if b == 0 || mu == 0 {
            return Err(Error::Config("batch size and mu must be ≥ 1".into()));
        }
        aug.validate()?;
        let lab = data.labeled_indices();
        let unl = data.unlabeled_indices();
        if lab.is_empty() {
            return Err(Error::Config("empty labeled pool".into()));
        }
        if unl.is_empty() {
            return Err(Error::Config("empty unlabeled pool".into()));
        }
        let mut order_rng = RandomStream::new(seed, streams::BATCH_ORDER);
        let labeled = CyclingPool::new(lab, &mut order_rng);
        let unlabeled = CyclingPool::new(unl, &mut order_rng);
        Ok(Self {
            data,
            b,
            mu,
            aug,
            labeled,
            unlabeled,
            order_rng,
            aug_rng: RandomStream::new(seed, streams::AUGMENTATION),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let d = self.data.dim;
        let lab_idx: Vec<usize> = (0..self.b).map(|_| self.labeled.next(&mut self.order_rng)).collect();
        let unl_idx: Vec<usize> = (0..self.b * self.mu)
            .map(|_| self.unlabeled.next(&mut self.order_rng))
            .collect();
        let labeled_x = self.data.gather(&lab_idx);
        let labeled_y = lab_idx.iter().map(|&i| self.data.labels[i] as usize).collect();
        let mut weak = Matrix::zeros(unl_idx.len(), d);
        let mut strong = Matrix::zeros(unl_idx.len(), d);
        for (r, &i) in unl_idx.iter().enumerate() {
            let x = self.data.row_f64(i);
            weak.row_mut(r)
                .copy_from_slice(&augment_view(&x, View::Weak, &self.aug, &mut self.aug_rng));
            strong
                .row_mut(r)
                .copy_from_slice(&augment_view(&x, View::Strong, &self.aug, &mut self.aug_rng));
        }
        Batch {
            labeled_x,
            labeled_y,
            unlabeled_weak: weak,
            unlabeled_strong: strong,
            unlabeled_index: unl_idx,
        }
    }
}

/// `epoch_steps` consecutive batches from a fresh sampler.
pub fn sample_batches(
    data: &EmbeddingDataset,
    b: usize,
    mu: usize,
    epoch_steps: usize,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<Vec<Batch>> {
    let mut s = BatchSampler::new(data, b, mu, aug.clone(), seed)?;
    Ok((0..epoch_steps).map(|_| s.next_batch()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> EmbeddingDataset {
        EmbeddingDataset {
            dim: 2,
            num_classes: 2,
            features: vec![0.5, -1.0, 2.25, 0.0, -3.5, 1e-3],
            labels: vec![0, -1, 1],
            prototypes: None,
            ood_mask: None,
            normalized: false,
        }
    }

    #[test]
    fn roundtrip_tiny() {
        let d = tiny();
        let bytes = encode_emb1(&d).unwrap();
        assert_eq!(bytes.len(), 24 + 3 * 4 + 6 * 4);
        assert_eq!(decode_emb1(&bytes).unwrap(), d);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_emb1(&tiny()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_emb1(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic at offset 0");
    }

    #[test]
    fn truncated_rows() {
        // declares N=5 but only carries 4 feature rows
        let mut d = tiny();
        d.labels = vec![0, -1, 1, -1, -1];
        d.features = vec![0.0; 10];
        let mut bytes = encode_emb1(&d).unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = decode_emb1(&bytes).unwrap_err();
        match err {
            Error::Parse { offset, msg } => {
                assert!(msg.starts_with("truncated body"), "{msg}");
                assert_eq!(offset, 24 + 20);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let mut bytes = encode_emb1(&tiny()).unwrap();
        bytes[28..32].copy_from_slice(&7i32.to_le_bytes());
        match decode_emb1(&bytes).unwrap_err() {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 28);
                assert!(msg.contains("out of range"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_float_names_offset() {
        let mut bytes = encode_emb1(&tiny()).unwrap();
        let at = 24 + 12 + 4 * 3;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_emb1(&bytes).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, at as u64),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ood_on_labeled_row_rejected() {
        let mut d = tiny();
        d.ood_mask = Some(vec![false, true, false]);
        let mut bytes = encode_emb1(&d).unwrap();
        let n = bytes.len();
        bytes[n - 3] = 1;
        assert!(matches!(decode_emb1(&bytes), Err(Error::Parse { .. })));
    }

    fn arb_dataset() -> impl Strategy<Value = EmbeddingDataset> {
        (1usize..12, 1usize..5, 1usize..4, any::<bool>(), any::<bool>(), any::<bool>()).prop_flat_map(
            |(n, d, c, protos, ood, norm)| {
                (
                    prop::collection::vec(-1e6f32..1e6, n * d),
                    prop::collection::vec(-1i32..(c as i32), n),
                    prop::collection::vec(-10f32..10.0, c * d),
                    prop::collection::vec(any::<bool>(), n),
                )
                    .prop_map(move |(features, labels, p, mask)| {
                        let ood_mask = ood.then(|| {
                            mask.iter().zip(&labels).map(|(&m, &y)| m && y == -1).collect()
                        });
                        EmbeddingDataset {
                            dim: d,
                            num_classes: c,
                            features,
                            labels,
                            prototypes: protos.then_some(p),
                            ood_mask,
                            normalized: norm,
                        }
                    })
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn emb1_roundtrip_is_bit_exact(d in arb_dataset()) {
            let bytes = encode_emb1(&d).unwrap();
            let back = decode_emb1(&bytes).unwrap();
            prop_assert_eq!(encode_emb1(&back).unwrap(), bytes);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.features), bits(&d.features));
            prop_assert_eq!(back, d);
        }

        #[test]
        fn longtail_monotone_and_floored(n1 in 1usize..=1000, c in 2usize..=1000, rho in 1.0f64..=1000.0) {
            let v = longtail_counts(n1, c, rho).unwrap();
            prop_assert_eq!(v.len(), c);
            prop_assert_eq!(v[0], n1);
            prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(v.iter().all(|&x| x >= 1));
        }
    }

    #[test]
    fn truth_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.truth");
        write_truth(&[3, -1, 0], &p).unwrap();
        assert_eq!(read_truth(&p).unwrap(), vec![3, -1, 0]);
    }

    #[test]
    fn longtail_examples() {
        let v = longtail_counts(50, 100, 10.0).unwrap();
        assert_eq!((v[0], v[99]), (50, 5));
        assert_eq!(longtail_counts(7, 5, 1.0).unwrap(), vec![7; 5]);
        let v = longtail_counts(150, 100, 20.0).unwrap();
        assert_eq!(v[99], 8);
        assert!(longtail_counts(0, 5, 2.0).is_err());
        assert!(longtail_counts(5, 5, 0.5).is_err());
    }

    #[test]
    fn blobs_counts_and_determinism() {
        let mut cfg = BlobsConfig::balanced(10, 16, 4, 20);
        cfg.test_per_class = 3;
        cfg.n_ood = 7;
        let a = gen_blobs(&cfg, &mut RandomStream::new(5, streams::DATA_GEN)).unwrap();
        let b = gen_blobs(&cfg, &mut RandomStream::new(5, streams::DATA_GEN)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.labels.iter().filter(|&&y| y >= 0).count(), 40);
        for k in 0..10 {
            assert_eq!(a.train.labels.iter().filter(|&&y| y == k).count(), 4);
            assert_eq!(a.truth.iter().filter(|&&y| y == k).count(), 24);
        }
        assert_eq!(a.train.len(), 40 + 200 + 7);
        assert_eq!(a.test.len(), 30);
        let mask = a.train.ood_mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 7);
        a.train.validate_ssl().unwrap();
    }

    #[test]
    fn blobs_means_respect_separation() {
        let cfg = BlobsConfig { class_sep: 3.0, noise_sd: 0.5, ..BlobsConfig::balanced(6, 4, 1, 1) };
        let s = gen_blobs(&cfg, &mut RandomStream::new(9, 0)).unwrap();
        for i in 0..6 {
            for j in 0..i {
                let d: f64 = s.means.row(i).iter().zip(s.means.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 1.5 - 1e-12);
            }
        }
    }

    #[test]
    fn blobs_infeasible_geometry() {
        // 9 > 2·2 axes, and the circle holds at most 6 points 60° apart
        let cfg = BlobsConfig::balanced(9, 2, 1, 1);
        assert!(matches!(gen_blobs(&cfg, &mut RandomStream::new(1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_mean_oracle_on_well_separated_blobs() {
        let mut cfg = BlobsConfig::balanced(10, 16, 20, 100);
        cfg.class_sep = 8.0;
        let s = gen_blobs(&cfg, &mut RandomStream::new(3, 0)).unwrap();
        let d = &s.train;
        // brute force: class means estimated from the truth, nearest by Euclid
        let mut est = vec![vec![0.0f64; d.dim]; 10];
        let mut cnt = [0usize; 10];
        for i in 0..d.len() {
            let k = s.truth[i] as usize;
            cnt[k] += 1;
            for (e, &x) in est[k].iter_mut().zip(d.row(i)) {
                *e += f64::from(x);
            }
        }
        for k in 0..10 {
            for e in &mut est[k] {
                *e /= cnt[k] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..d.len() {
            let x = d.row_f64(i);
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = est[a].iter().zip(&x).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = est[b].iter().zip(&x).map(|(m, v)| (m - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best as i32 == s.truth[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / d.len() as f64 > 0.99, "{correct}/{}", d.len());
    }

    #[test]
    fn augment_views() {
        let cfg = AugmentConfig { weak_noise_sd: 0.0, strong_noise_sd: 0.0, strong_drop_frac: 0.1 };
        let x: Vec<f64> = (1..=20).map(f64::from).collect();
        let mut rng = RandomStream::new(1, streams::AUGMENTATION);
        assert_eq!(augment_view(&x, View::Weak, &cfg, &mut rng), x);
        let s = augment_view(&x, View::Strong, &cfg, &mut rng);
        assert_eq!(s.iter().filter(|&&v| v == 0.0).count(), 2);

        let noisy = AugmentConfig::default();
        let a = augment_view(&x, View::Strong, &noisy, &mut RandomStream::new(4, 1));
        let b = augment_view(&x, View::Strong, &noisy, &mut RandomStream::new(4, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_unit_rows() {
        let d = tiny().l2_normalized();
        assert!(d.normalized);
        for i in 0..d.len() {
            let n: f64 = d.row(i).iter().map(|&x| f64::from(x).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    fn pool_dataset(n_lab: usize, n_unl: usize) -> EmbeddingDataset {
        let n = n_lab + n_unl;
        EmbeddingDataset {
            dim: 3,
            num_classes: 2,
            features: (0..n * 3).map(|i| i as f32).collect(),
            labels: (0..n).map(|i| if i < n_lab { (i % 2) as i32 } else { -1 }).collect(),
            prototypes: None,
            ood_mask: None,
            normalized: false,
        }
    }

    #[test]
    fn batches_have_exact_shapes() {
        let d = pool_dataset(40, 100);
        let bs = sample_batches(&d, 32, 1, 5, &AugmentConfig::default(), 1).unwrap();
        assert_eq!(bs.len(), 5);
        for b in &bs {
            assert_eq!(b.labeled_x.rows(), 32);
            assert_eq!(b.unlabeled_weak.rows(), 32);
            assert_eq!(b.unlabeled_strong.rows(), 32);
            b.validate(3, 2).unwrap();
            // weak view is the identity by default, so it reveals the source row
            for (r, &i) in b.unlabeled_index.iter().enumerate() {
                assert_eq!(b.unlabeled_weak.row(r), d.row_f64(i).as_slice());
            }
        }
        let bs = sample_batches(&d, 4, 3, 1, &AugmentConfig::default(), 1).unwrap();
        assert_eq!(bs[0].unlabeled_len(), 12);
    }

    #[test]
    fn first_batch_covers_small_pool() {
        let d = pool_dataset(8, 20);
        let mut s = BatchSampler::new(&d, 8, 1, AugmentConfig::default(), 3).unwrap();
        let b = s.next_batch();
        let mut rows: Vec<usize> = (0..8)
            .map(|r| (b.labeled_x[(r, 0)] as usize) / 3)
            .collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_deterministic() {
        let d = pool_dataset(10, 30);
        let a = sample_batches(&d, 4, 2, 20, &AugmentConfig::default(), 8).unwrap();
        let b = sample_batches(&d, 4, 2, 20, &AugmentConfig::default(), 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.unlabeled_index, y.unlabeled_index);
            assert_eq!(x.labeled_x, y.labeled_x);
            assert_eq!(x.unlabeled_strong, y.unlabeled_strong);
        }
    }

    #[test]
    fn sampler_rejects_empty_pools() {
        let mut d = pool_dataset(4, 4);
        d.labels = vec![-1; 8];
        assert!(matches!(BatchSampler::new(&d, 2, 1, AugmentConfig::default(), 0), Err(Error::Config(_))));
        d.labels = vec![0; 8];
        assert!(matches!(BatchSampler::new(&d, 2, 1, AugmentConfig::default(), 0), Err(Error::Config(_))));
    }
}
