//! Trainable state: main head, auxiliary head and the optional adapter.
//!
//! The adapter (`relu(W x + b)`, square by default) is the only parameter block
//! shared by both heads. Gradients from auxiliary-head losses never reach it;
//! see [`crate::objective`].

use std::fs;
use std::path::Path;

use crate::numkit::{Matrix, RandomStream};
use crate::{Error, Result};

pub const HDS1_MAGIC: &[u8; 4] = b"HDS1";
pub const HDS1_VERSION: u32 = 1;

/// Standard deviation of the adapter's random initialization.
pub const ADAPTER_INIT_SD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `D′ × D`
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub adapter: Option<Adapter>,
    /// `C × D′`
    pub main_w: Matrix,
    pub main_b: Vec<f64>,
    /// `C × D′`
    pub aux_w: Matrix,
    pub aux_b: Vec<f64>,
}

/// Gradients share the shape of the parameters they belong to.
pub type GradBundle = Heads;

/// Names of the parameter blocks, in declaration (and checkpoint) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    AdapterW,
    AdapterB,
    MainW,
    MainB,
    AuxW,
    AuxB,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::AdapterW => "adapter_w",
            Block::AdapterB => "adapter_b",
            Block::MainW => "main_w",
            Block::MainB => "main_b",
            Block::AuxW => "aux_w",
            Block::AuxB => "aux_b",
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Block::AdapterB | Block::MainB | Block::AuxB)
    }
}

/// Intermediate values of one forward pass through the adapter.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    pub input: Vec<f64>,
    /// Adapter pre-activation; `None` when the adapter is disabled.
    pub pre: Option<Vec<f64>>,
    pub out: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zeros,
    Gaussian { sd: f64 },
    Prototypes { scale: f64 },
}

impl Heads {
    pub fn zeros(c: usize, d: usize, adapter: bool) -> Self {
        Self {
            adapter: adapter.then(|| Adapter {
                w: Matrix::zeros(d, d),
                b: vec![0.0; d],
            }),
            main_w: Matrix::zeros(c, d),
            main_b: vec![0.0; c],
            aux_w: Matrix::zeros(c, d),
            aux_b: vec![0.0; c],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.main_b.len()
    }

    /// Input feature dimension `D`.
    pub fn input_dim(&self) -> usize {
        self.adapter.as_ref().map_or(self.main_w.cols(), |a| a.w.cols())
    }

    /// Adapter output dimension `D′` (equal to `D` when disabled).
    pub fn feature_dim(&self) -> usize {
        self.main_w.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: self.adapter.as_ref().map(|a| Adapter {
                w: Matrix::zeros(a.w.rows(), a.w.cols()),
                b: vec![0.0; a.b.len()],
            }),
            main_w: Matrix::zeros(self.main_w.rows(), self.main_w.cols()),
            main_b: vec![0.0; self.main_b.len()],
            aux_w: Matrix::zeros(self.aux_w.rows(), self.aux_w.cols()),
            aux_b: vec![0.0; self.aux_b.len()],
        }
    }

    pub fn blocks(&self) -> Vec<(Block, &[f64])> {
        let mut v = Vec::with_capacity(6);
        if let Some(a) = &self.adapter {
            v.push((Block::AdapterW, a.w.as_slice()));
            v.push((Block::AdapterB, a.b.as_slice()));
        }
        v.push((Block::MainW, self.main_w.as_slice()));
        v.push((Block::MainB, self.main_b.as_slice()));
        v.push((Block::AuxW, self.aux_w.as_slice()));
        v.push((Block::AuxB, self.aux_b.as_slice()));
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(Block, &mut [f64])> {
        let mut v = Vec::with_capacity(6);
        if let Some(a) = &mut self.adapter {
            v.push((Block::AdapterW, a.w.as_mut_slice()));
            v.push((Block::AdapterB, a.b.as_mut_slice()));
        }
        v.push((Block::MainW, self.main_w.as_mut_slice()));
        v.push((Block::MainB, self.main_b.as_mut_slice()));
        v.push((Block::AuxW, self.aux_w.as_mut_slice()));
        v.push((Block::AuxB, self.aux_b.as_mut_slice()));
        v
    }

    pub fn block(&self, which: Block) -> Option<&[f64]> {
        self.blocks().into_iter().find(|(b, _)| *b == which).map(|(_, s)| s)
    }

    /// First parameter block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<Block> {
        self.blocks()
            .into_iter()
            .find(|(_, s)| s.iter().any(|x| !x.is_finite()))
            .map(|(b, _)| b)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Usage(format!(
                "feature length {} does not match head input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> FeatureTrace {
        match &self.adapter {
            None => FeatureTrace {
                input: x.to_vec(),
                pre: None,
                out: x.to_vec(),
            },
            Some(a) => {
                let mut pre = a.w.mul_vec(x);
                for (p, b) in pre.iter_mut().zip(&a.b) {
                    *p += b;
                }
                let out = pre.iter().map(|&v| v.max(0.0)).collect();
                FeatureTrace {
                    input: x.to_vec(),
                    pre: Some(pre),
                    out,
                }
            }
        }
    }

    /// Identity without an adapter, `relu(W x + b)` with one.
    pub fn forward_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).out)
    }

    pub(crate) fn main_logits(&self, h: &[f64]) -> Vec<f64> {
        affine(&self.main_w, &self.main_b, h)
    }

    pub(crate) fn aux_logits(&self, h: &[f64]) -> Vec<f64> {
        affine(&self.aux_w, &self.aux_b, h)
    }

    pub fn forward_main(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.main_logits(&self.forward_features(x)?))
    }

    /// Auxiliary logits. The features feeding this head are gradient-blocked
    /// during training.
    pub fn forward_aux(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.aux_logits(&self.forward_features(x)?))
    }
}

fn affine(w: &Matrix, b: &[f64], h: &[f64]) -> Vec<f64> {
    let mut z = w.mul_vec(h);
    for (zi, bi) in z.iter_mut().zip(b) {
        *zi += bi;
    }
    z
}

/// Builds initial heads.
///
/// `Zeros` leaves both heads at zero; `Gaussian` draws weights from
/// `N(0, sd²)` with zero biases; `Prototypes` sets both heads' weight rows to
/// `scale ×` the unit-normalized class prototypes. An enabled adapter always
/// gets `N(0, 0.01²)` weights so its units are not symmetric.
pub fn init_heads(
    c: usize,
    d: usize,
    mode: InitMode,
    adapter: bool,
    prototypes: Option<&Matrix>,
    rng: &mut RandomStream,
) -> Result<Heads> {
    let mut h = Heads::zeros(c, d, adapter);
    if let Some(a) = &mut h.adapter {
        for w in a.w.as_mut_slice() {
            *w = ADAPTER_INIT_SD * rng.normal();
        }
    }
    match mode {
        InitMode::Zeros => {}
        InitMode::Gaussian { sd } => {
            if !(sd >= 0.0) {
                return Err(Error::Config("gaussian init sd must be ≥ 0".into()));
            }
            for w in h.main_w.as_mut_slice() {
                *w = sd * rng.normal();
            }
            for w in h.aux_w.as_mut_slice() {
                *w = sd * rng.normal();
            }
        }
        InitMode::Prototypes { scale } => {
            let p = prototypes.ok_or_else(|| {
                Error::Config("prototype init requested but the dataset has no prototypes".into())
            })?;
            if p.rows() != c || p.cols() != d {
                return Err(Error::Config(format!(
                    "prototype block is {}x{}, expected {c}x{d}",
                    p.rows(),
                    p.cols()
                )));
            }
            for k in 0..c {
                let row = p.row(k);
                let norm = crate::numkit::l2_norm(row);
                let s = if norm > 0.0 { scale / norm } else { 0.0 };
                for j in 0..d {
                    h.main_w[(k, j)] = s * row[j];
                    h.aux_w[(k, j)] = s * row[j];
                }
            }
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// HDS1 checkpoints:
// "HDS1" | u32 version | u32 C | u32 D | u32 D′ | u8 adapter_flag | f32 blocks

pub fn encode_hds1(h: &Heads) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HDS1_MAGIC);
    for v in [
        HDS1_VERSION,
        h.num_classes() as u32,
        h.input_dim() as u32,
        h.feature_dim() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(h.adapter.is_some()));
    for (_, s) in h.blocks() {
        for &x in s {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_hds1(buf: &[u8]) -> Result<Heads> {
    if buf.len() < 21 {
        return Err(Error::parse(buf.len() as u64, "truncated header"));
    }
    if &buf[..4] != HDS1_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    let u = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
    if u(4) != HDS1_VERSION as usize {
        return Err(Error::parse(4, format!("unsupported version {}", u(4))));
    }
    let (c, d, dp) = (u(8), u(12), u(16));
    let adapter = match buf[20] {
        0 => false,
        1 => true,
        b => return Err(Error::parse(20, format!("adapter flag {b} not 0/1"))),
    };
    if !adapter && d != dp {
        return Err(Error::parse(16, "D′ must equal D without an adapter"));
    }
    let mut h = Heads::zeros(c, dp, false);
    if adapter {
        h.adapter = Some(Adapter {
            w: Matrix::zeros(dp, d),
            b: vec![0.0; dp],
        });
    }
    let mut pos = 21;
    for (_, block) in h.blocks_mut() {
        let need = block.len() * 4;
        if buf.len() - pos < need {
            return Err(Error::parse(pos as u64, "truncated body"));
        }
        for (dst, ch) in block.iter_mut().zip(buf[pos..pos + need].chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(ch.try_into().unwrap()));
        }
        pos += need;
    }
    if pos != buf.len() {
        return Err(Error::parse(pos as u64, "trailing bytes"));
    }
    Ok(h)
}

pub fn write_checkpoint(h: &Heads, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_hds1(h)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Heads> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hds1(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::softmax;

    #[test]
    fn features_identity_without_adapter() {
        let h = Heads::zeros(3, 4, false);
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(h.forward_features(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn adapter_relu() {
        let mut h = Heads::zeros(2, 3, true);
        h.adapter.as_mut().unwrap().w = Matrix::identity(3);
        assert_eq!(h.forward_features(&[0.5, 1.0, 2.0]).unwrap(), vec![0.5, 1.0, 2.0]);
        assert_eq!(h.forward_features(&[-0.5, 1.0, -2.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn dim_mismatch_is_usage_error() {
        let h = Heads::zeros(2, 3, false);
        assert!(matches!(h.forward_main(&[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(h.forward_aux(&[1.0; 4]), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_heads_give_uniform_softmax() {
        let h = Heads::zeros(4, 3, false);
        let z = h.forward_main(&[0.3, -7.0, 2.0]).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert_eq!(softmax(&z).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn orthonormal_prototypes_pick_their_class() {
        // rows: rotated orthonormal basis in 3-D
        let s = 0.5f64.sqrt();
        let rows = vec![vec![s, s, 0.0], vec![-s, s, 0.0], vec![0.0, 0.0, 1.0]];
        let mut h = Heads::zeros(3, 3, false);
        h.main_w = Matrix::from_rows(&rows).unwrap();
        let z = h.forward_main(&rows[1]).unwrap();
        assert!((z[1] - 1.0).abs() < 1e-15 && z[0].abs() < 1e-15 && z[2].abs() < 1e-15);
        assert_eq!(crate::numkit::argmax(&z).0, 1);
    }

    #[test]
    fn main_and_aux_agree_with_identical_weights() {
        let mut rng = RandomStream::new(2, 0);
        let mut h = init_heads(5, 4, InitMode::Gaussian { sd: 1.0 }, true, None, &mut rng).unwrap();
        h.aux_w = h.main_w.clone();
        h.aux_b = h.main_b.clone();
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(h.forward_main(&x).unwrap(), h.forward_aux(&x).unwrap());
    }

    #[test]
    fn init_modes() {
        let mut rng = RandomStream::new(1, 3);
        let z = init_heads(3, 2, InitMode::Zeros, false, None, &mut rng).unwrap();
        assert_eq!(z, Heads::zeros(3, 2, false));
        let za = init_heads(3, 2, InitMode::Zeros, true, None, &mut rng).unwrap();
        assert!(za.adapter.unwrap().w.as_slice().iter().any(|&w| w != 0.0));

        let g1 = init_heads(3, 2, InitMode::Gaussian { sd: 0.5 }, false, None, &mut RandomStream::new(4, 3)).unwrap();
        let g2 = init_heads(3, 2, InitMode::Gaussian { sd: 0.5 }, false, None, &mut RandomStream::new(4, 3)).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.main_b, vec![0.0; 3]);

        let p = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, -2.0], vec![1.0, 1.0]]).unwrap();
        let h = init_heads(3, 2, InitMode::Prototypes { scale: 1.0 }, false, Some(&p), &mut rng).unwrap();
        for k in 0..3 {
            assert!((crate::numkit::l2_norm(h.main_w.row(k)) - 1.0).abs() < 1e-15);
        }
        assert_eq!(h.main_w, h.aux_w);
        assert!(matches!(
            init_heads(3, 2, InitMode::Prototypes { scale: 1.0 }, false, None, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_in_main_w() {
        let mut rng = RandomStream::new(6, 3);
        let h = init_heads(4, 5, InitMode::Gaussian { sd: 1.0 }, false, None, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let a = -2.7;
        let mut scaled = h.clone();
        for w in scaled.main_w.as_mut_slice() {
            *w *= a;
        }
        let z = h.forward_main(&x).unwrap();
        let za = scaled.forward_main(&x).unwrap();
        for (p, q) in z.iter().zip(&za) {
            assert!((a * p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = RandomStream::new(8, 3);
        for adapter in [false, true] {
            let h = init_heads(3, 4, InitMode::Gaussian { sd: 0.25 }, adapter, None, &mut rng).unwrap();
            let bytes = encode_hds1(&h);
            let back = decode_hds1(&bytes).unwrap();
            // f32 storage: the second trip is exact
            assert_eq!(encode_hds1(&back), bytes);
            for ((_, a), (_, b)) in h.blocks().iter().zip(back.blocks()) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        assert!(decode_hds1(b"HDS0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
    }
}
