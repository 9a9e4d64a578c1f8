//! Complex containers, the unitary 2D DFT, seeded randomness and the real
//! isomorphism `C^n <-> R^2n` used by the model and divergence code.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Error, Result};

pub type C64 = Complex64;

// ============================================================================
// Slice arithmetic
// ============================================================================

/// Helpers on raw complex slices. `dot` is conjugate-linear in its first argument.
pub mod cx {
    use super::C64;

    pub fn dot(a: &[C64], b: &[C64]) -> C64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    }

    pub fn norm_sqr(a: &[C64]) -> f64 {
        a.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn norm(a: &[C64]) -> f64 {
        norm_sqr(a).sqrt()
    }

    /// `y += alpha * x`
    pub fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    pub fn scale(alpha: f64, x: &mut [C64]) {
        for xi in x.iter_mut() {
            *xi *= alpha;
        }
    }

    pub fn sub(a: &[C64], b: &[C64]) -> Vec<C64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn add(a: &[C64], b: &[C64]) -> Vec<C64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    /// `alpha * a + beta * b`
    pub fn lincomb(alpha: f64, a: &[C64], beta: f64, b: &[C64]) -> Vec<C64> {
        a.iter().zip(b).map(|(x, y)| x * alpha + y * beta).collect()
    }

    pub fn max_abs(a: &[C64]) -> f64 {
        a.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    pub fn all_finite(a: &[C64]) -> bool {
        a.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }
}

// ============================================================================
// Containers
// ============================================================================

/// Complex field on a `height x width` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, Shape, "empty grid {height}x{width}");
        ensure!(
            data.len() == height * width,
            Shape,
            "{} values for a {height}x{width} grid",
            data.len()
        );
        ensure!(cx::all_finite(&data), NonFinite, "image data");
        Ok(Self { height, width, data })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<C64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![C64::new(0.0, 0.0); height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    /// Same grid, new values.
    pub fn with_data(&self, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "with_data length");
        Self::from_raw(self.height, self.width, data)
    }

    pub fn norm(&self) -> f64 {
        cx::norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        cx::all_finite(&self.data)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn check_same_shape(&self, other: &ComplexImage) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            Shape,
            "{:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(())
    }
}

/// Flat complex vector: k-space samples or flattened images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVector(Vec<C64>);

impl ComplexVector {
    pub fn new(data: Vec<C64>) -> Result<Self> {
        ensure!(cx::all_finite(&data), NonFinite, "vector data");
        Ok(Self(data))
    }

    pub(crate) fn from_raw(data: Vec<C64>) -> Self {
        Self(data)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![C64::new(0.0, 0.0); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        cx::norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        cx::all_finite(&self.0)
    }
}

impl From<ComplexImage> for ComplexVector {
    fn from(img: ComplexImage) -> Self {
        Self(img.data)
    }
}

// ============================================================================
// Unitary DFT
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned unitary 2D DFT for one grid shape; DC at index (0, 0).
#[derive(Clone)]
pub struct Dft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Dft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Dft2({}x{})", self.height, self.width)
    }
}

impl Dft2 {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "empty DFT grid");
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// In-place transform of a row-major `height x width` buffer.
    pub fn process(&self, data: &mut [C64], direction: Direction) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "DFT buffer length");
        let (row, col) = match direction {
            Direction::Forward => (&self.row_fwd, &self.col_fwd),
            Direction::Inverse => (&self.row_inv, &self.col_inv),
        };
        if w > 1 {
            row.process(data);
        }
        if h > 1 {
            let mut t = vec![C64::new(0.0, 0.0); h * w];
            for r in 0..h {
                for c in 0..w {
                    t[c * h + r] = data[r * w + c];
                }
            }
            col.process(&mut t);
            for r in 0..h {
                for c in 0..w {
                    data[r * w + c] = t[c * h + r];
                }
            }
        }
        cx::scale(1.0 / ((h * w) as f64).sqrt(), data);
    }
}

pub fn dft2(img: &ComplexImage, direction: Direction) -> ComplexImage {
    let plan = Dft2::new(img.height(), img.width());
    let mut out = img.clone();
    plan.process(out.as_mut_slice(), direction);
    out
}

// ============================================================================
// Randomness
// ============================================================================

/// Seeded generator. Named substreams are independent ChaCha streams derived
/// from the same seed, so draws for one component do not shift when another
/// component changes how many numbers it consumes.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, name: &str) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        RngState { seed: self.seed, rng }
    }

    /// Substream keyed by a name and an index, e.g. one per training example.
    pub fn substream_indexed(&self, name: &str, index: u64) -> RngState {
        let seed = self.seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(name));
        RngState { seed, rng }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Draw from CN(0, variance I): each real and imaginary part carries variance/2.
    pub fn sample_cn(&mut self, n: usize, variance: f64) -> Result<ComplexVector> {
        Ok(ComplexVector(self.cn_vec(n, variance)?))
    }

    pub(crate) fn cn_vec(&mut self, n: usize, variance: f64) -> Result<Vec<C64>> {
        ensure!(
            variance >= 0.0 && variance.is_finite(),
            InvalidArgument,
            "complex Gaussian variance must be >= 0, got {variance}"
        );
        let s = (variance / 2.0).sqrt();
        Ok((0..n).map(|_| C64::new(self.normal() * s, self.normal() * s)).collect())
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn sample_cn(n: usize, variance: f64, rng: &mut RngState) -> Result<ComplexVector> {
    rng.sample_cn(n, variance)
}

// ============================================================================
// Real isomorphism
// ============================================================================

/// Interleaved `(re, im)` layout.
pub fn real_embed(v: &[C64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * v.len());
    for z in v {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

pub fn real_lift(v: &[f64]) -> Result<Vec<C64>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::Shape(format!("odd real length {} cannot be lifted", v.len())));
    }
    Ok(v.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect())
}
