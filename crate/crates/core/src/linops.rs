//! The coil-combined Cartesian MRI forward operator `A = [M F S_c]_c`, conjugate
//! gradients, and the CG-backed projection, pseudoinverse and resolvent.
//!
//! Measurement vectors are coil-major: for each coil, the kept phase-encode rows
//! in ascending order, each row holding the full readout.

use crate::dense::{self, CMatrix};
use crate::error::{ensure, Error, Result};
use crate::numerics::{cx, ComplexImage, ComplexVector, Dft2, Direction, RngState, C64};

// ============================================================================
// Operator abstraction
// ============================================================================

pub trait LinearOperator: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[C64]) -> Vec<C64>;
    fn adjoint(&self, y: &[C64]) -> Vec<C64>;

    /// `A^* A x`
    fn normal(&self, x: &[C64]) -> Vec<C64> {
        self.adjoint(&self.apply(x))
    }
}

/// Explicit matrix operator, for oracles and degenerate test cases.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub CMatrix);

impl LinearOperator for DenseOperator {
    fn domain_len(&self) -> usize {
        self.0.ncols()
    }

    fn range_len(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[C64]) -> Vec<C64> {
        dense::from_dvec(&(&self.0 * dense::to_dvec(x)))
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        dense::from_dvec(&(self.0.adjoint() * dense::to_dvec(y)))
    }
}

// ============================================================================
// Acquisition model
// ============================================================================

/// 1D Cartesian mask over phase-encode rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    kept: Vec<bool>,
    acs_count: usize,
}

impl SamplingMask {
    pub fn new(kept: Vec<bool>, acs_count: usize) -> Result<Self> {
        let n = kept.len();
        ensure!(n >= 1, InvalidArgument, "mask has no lines");
        ensure!(kept.iter().any(|&k| k), InvalidArgument, "mask keeps no lines");
        ensure!(acs_count <= n, InvalidArgument, "acs {acs_count} exceeds {n} lines");
        for line in Self::acs_lines(n, acs_count) {
            ensure!(kept[line], InvalidArgument, "ACS line {line} is not kept");
        }
        Ok(Self { kept, acs_count })
    }

    pub fn full(lines: usize) -> Self {
        Self { kept: vec![true; lines], acs_count: lines }
    }

    /// Indices of the `acs` lowest spatial frequencies (DC sits at line 0,
    /// negative frequencies wrap to the end).
    pub fn acs_lines(lines: usize, acs: usize) -> Vec<usize> {
        let lo = acs / 2;
        let mut out: Vec<usize> = (0..acs)
            .map(|k| (k as isize - lo as isize).rem_euclid(lines as isize) as usize)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn full_lines(&self) -> usize {
        self.kept.len()
    }

    pub fn acs_count(&self) -> usize {
        self.acs_count
    }

    pub fn is_kept(&self, line: usize) -> bool {
        self.kept[line]
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_lines(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }

    pub fn num_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn acceleration(&self) -> f64 {
        self.full_lines() as f64 / self.num_kept() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    maps: Vec<ComplexImage>,
}

impl CoilSensitivities {
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        ensure!(!maps.is_empty(), InvalidArgument, "no coil maps");
        let shape = maps[0].shape();
        for (c, m) in maps.iter().enumerate() {
            ensure!(m.shape() == shape, Shape, "coil {c} map is {:?}, expected {shape:?}", m.shape());
        }
        let sos = Self::sum_of_squares_of(&maps);
        if let Some(i) = sos.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("blind spot at pixel {i}")));
        }
        Ok(Self { maps })
    }

    /// Single coil with unit sensitivity.
    pub fn identity(height: usize, width: usize) -> Self {
        Self { maps: vec![ComplexImage::from_fn(height, width, |_, _| C64::new(1.0, 0.0))] }
    }

    fn sum_of_squares_of(maps: &[ComplexImage]) -> Vec<f64> {
        let n = maps[0].len();
        (0..n).map(|i| maps.iter().map(|m| m.as_slice()[i].norm_sqr()).sum()).collect()
    }

    pub fn sum_of_squares(&self) -> Vec<f64> {
        Self::sum_of_squares_of(&self.maps)
    }

    pub fn coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }
}

/// Mask + sensitivities + k-space noise level; owns the derived operator `A_s`.
#[derive(Debug, Clone)]
pub struct AcquisitionSystem {
    mask: SamplingMask,
    sens: CoilSensitivities,
    noise_sigma0: f64,
    kept: Vec<usize>,
    dft: Dft2,
}

impl AcquisitionSystem {
    pub fn new(mask: SamplingMask, sens: CoilSensitivities, noise_sigma0: f64) -> Result<Self> {
        let (h, w) = sens.shape();
        ensure!(
            mask.full_lines() == h,
            Shape,
            "mask has {} lines but the image has {h} rows",
            mask.full_lines()
        );
        ensure!(
            noise_sigma0 >= 0.0 && noise_sigma0.is_finite(),
            InvalidArgument,
            "sigma0 must be >= 0, got {noise_sigma0}"
        );
        let kept = mask.kept_lines();
        Ok(Self { mask, sens, noise_sigma0, kept, dft: Dft2::new(h, w) })
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn sens(&self) -> &CoilSensitivities {
        &self.sens
    }

    pub fn noise_sigma0(&self) -> f64 {
        self.noise_sigma0
    }

    pub fn with_sigma0(&self, sigma0: f64) -> Self {
        Self { noise_sigma0: sigma0, ..self.clone() }
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.sens.shape()
    }

    /// D
    pub fn image_len(&self) -> usize {
        let (h, w) = self.image_shape();
        h * w
    }

    pub fn coils(&self) -> usize {
        self.sens.coils()
    }

    /// Samples per coil.
    pub fn samples_per_coil(&self) -> usize {
        self.kept.len() * self.image_shape().1
    }

    /// C d
    pub fn measurement_len(&self) -> usize {
        self.coils() * self.samples_per_coil()
    }

    pub fn dft(&self) -> &Dft2 {
        &self.dft
    }

    pub fn image(&self, data: Vec<C64>) -> ComplexImage {
        let (h, w) = self.image_shape();
        ComplexImage::from_raw(h, w, data)
    }

    pub fn apply_forward(&self, x: &ComplexImage) -> Result<ComplexVector> {
        ensure!(
            x.shape() == self.image_shape(),
            Shape,
            "image {:?} vs system {:?}",
            x.shape(),
            self.image_shape()
        );
        Ok(ComplexVector::from_raw(self.apply(x.as_slice())))
    }

    pub fn apply_adjoint(&self, y: &ComplexVector) -> Result<ComplexImage> {
        ensure!(
            y.len() == self.measurement_len(),
            Shape,
            "measurement length {} vs expected {}",
            y.len(),
            self.measurement_len()
        );
        Ok(self.image(self.adjoint(y.as_slice())))
    }
}

impl LinearOperator for AcquisitionSystem {
    fn domain_len(&self) -> usize {
        self.image_len()
    }

    fn range_len(&self) -> usize {
        self.measurement_len()
    }

    fn apply(&self, x: &[C64]) -> Vec<C64> {
        let w = self.image_shape().1;
        let per_coil = self.samples_per_coil();
        let mut out = Vec::with_capacity(self.measurement_len());
        let mut buf = vec![C64::new(0.0, 0.0); x.len()];
        for map in self.sens.maps() {
            for ((b, s), xi) in buf.iter_mut().zip(map.as_slice()).zip(x) {
                *b = s * xi;
            }
            self.dft.process(&mut buf, Direction::Forward);
            for &r in &self.kept {
                out.extend_from_slice(&buf[r * w..(r + 1) * w]);
            }
        }
        debug_assert_eq!(out.len(), per_coil * self.coils());
        out
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let w = self.image_shape().1;
        let d = self.image_len();
        let per_coil = self.samples_per_coil();
        let mut out = vec![C64::new(0.0, 0.0); d];
        let mut buf = vec![C64::new(0.0, 0.0); d];
        for (c, map) in self.sens.maps().iter().enumerate() {
            buf.iter_mut().for_each(|b| *b = C64::new(0.0, 0.0));
            let yc = &y[c * per_coil..(c + 1) * per_coil];
            for (k, &r) in self.kept.iter().enumerate() {
                buf[r * w..(r + 1) * w].copy_from_slice(&yc[k * w..(k + 1) * w]);
            }
            self.dft.process(&mut buf, Direction::Inverse);
            for ((o, s), b) in out.iter_mut().zip(map.as_slice()).zip(&buf) {
                *o += s.conj() * b;
            }
        }
        out
    }
}

pub fn apply_forward(sys: &AcquisitionSystem, x: &ComplexImage) -> Result<ComplexVector> {
    sys.apply_forward(x)
}

pub fn apply_adjoint(sys: &AcquisitionSystem, y: &ComplexVector) -> Result<ComplexImage> {
    sys.apply_adjoint(y)
}

// ============================================================================
// Conjugate gradients
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl CgConfig {
    pub fn new(max_iters: usize, tolerance: f64) -> Result<Self> {
        ensure!(max_iters >= 1, InvalidArgument, "CG needs at least one iteration");
        ensure!(tolerance > 0.0, InvalidArgument, "CG tolerance must be positive");
        Ok(Self { max_iters, tolerance })
    }

    /// Tight settings for the verification suites.
    pub fn verification() -> Self {
        Self { max_iters: 100, tolerance: 1e-10 }
    }

    /// k = 10 during training.
    pub fn training() -> Self {
        Self { max_iters: 10, tolerance: 1e-4 }
    }

    /// k = 30 during inference.
    pub fn inference() -> Self {
        Self { max_iters: 30, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<C64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Conjugate gradients for a Hermitian PSD operator, returning the last iterate
/// after `max_iters` steps or once `||r|| < tolerance`.
pub fn cg_solve<F>(mut apply_spd: F, b: &[C64], x0: &[C64], cfg: &CgConfig) -> Result<CgSolution>
where
    F: FnMut(&[C64]) -> Vec<C64>,
{
    ensure!(b.len() == x0.len(), Shape, "rhs {} vs initial guess {}", b.len(), x0.len());
    let mut x = x0.to_vec();
    let mut r = cx::sub(b, &apply_spd(&x));
    let mut p = r.clone();
    let mut rr = cx::norm_sqr(&r);
    let mut iterations = 0;
    if rr.sqrt() < cfg.tolerance {
        return Ok(CgSolution { x, iterations, residual_norm: rr.sqrt() });
    }
    for _ in 0..cfg.max_iters {
        let v = apply_spd(&p);
        let pv = cx::dot(&p, &v).re;
        if !(pv > 0.0) {
            if pv.is_nan() {
                return Err(Error::NonFinite(format!("CG curvature at iteration {iterations}")));
            }
            // p lies in the null space (or the operator is indefinite): no progress possible.
            break;
        }
        let alpha = rr / pv;
        cx::axpy(C64::new(alpha, 0.0), &p, &mut x);
        cx::axpy(C64::new(-alpha, 0.0), &v, &mut r);
        iterations += 1;
        let rr_next = cx::norm_sqr(&r);
        if rr_next.sqrt() < cfg.tolerance {
            rr = rr_next;
            break;
        }
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + *pi * beta;
        }
        rr = rr_next;
    }
    if !cx::all_finite(&x) {
        return Err(Error::NonFinite(format!("CG iterate after {iterations} iterations")));
    }
    Ok(CgSolution { x, iterations, residual_norm: rr.sqrt() })
}

// ============================================================================
// Derived applications
// ============================================================================

/// `P v = A^+ A v`, solving `A^*A x = A^*A v` from `x0 = A^*A v` so the iterates
/// stay in the range of `A^*A`.
pub fn projection<O: LinearOperator + ?Sized>(op: &O, v: &[C64], cfg: &CgConfig) -> Result<Vec<C64>> {
    let b = op.normal(v);
    Ok(cg_solve(|p| op.normal(p), &b, &b, cfg)?.x)
}

/// `A^+ y` via the normal equations started from zero.
pub fn pseudoinverse<O: LinearOperator + ?Sized>(op: &O, y: &[C64], cfg: &CgConfig) -> Result<Vec<C64>> {
    ensure!(y.len() == op.range_len(), Shape, "measurement length {} vs {}", y.len(), op.range_len());
    let b = op.adjoint(y);
    let zero = vec![C64::new(0.0, 0.0); b.len()];
    Ok(cg_solve(|p| op.normal(p), &b, &zero, cfg)?.x)
}

/// `(c I + 2 A^*A)^{-1} v`
pub fn resolvent<O: LinearOperator + ?Sized>(op: &O, c: f64, v: &[C64], cfg: &CgConfig) -> Result<Vec<C64>> {
    ensure!(c > 0.0, InvalidArgument, "resolvent shift must be positive, got {c}");
    let zero = vec![C64::new(0.0, 0.0); v.len()];
    let apply = |p: &[C64]| {
        let mut out = op.normal(p);
        for (o, pi) in out.iter_mut().zip(p) {
            *o = *o * 2.0 + pi * c;
        }
        out
    };
    Ok(cg_solve(apply, v, &zero, cfg)?.x)
}

pub fn apply_projection(sys: &AcquisitionSystem, v: &ComplexImage, cfg: &CgConfig) -> Result<ComplexImage> {
    ensure!(v.shape() == sys.image_shape(), Shape, "image {:?} vs {:?}", v.shape(), sys.image_shape());
    Ok(sys.image(projection(sys, v.as_slice(), cfg)?))
}

pub fn apply_pseudoinverse(sys: &AcquisitionSystem, y: &ComplexVector, cfg: &CgConfig) -> Result<ComplexImage> {
    Ok(sys.image(pseudoinverse(sys, y.as_slice(), cfg)?))
}

pub fn apply_resolvent(sys: &AcquisitionSystem, c: f64, v: &ComplexImage, cfg: &CgConfig) -> Result<ComplexImage> {
    ensure!(v.shape() == sys.image_shape(), Shape, "image {:?} vs {:?}", v.shape(), sys.image_shape());
    Ok(sys.image(resolvent(sys, c, v.as_slice(), cfg)?))
}

// ============================================================================
// Dense materialization and completeness
// ============================================================================

pub const DENSE_ENTRY_CAP: usize = 1_000_000;
pub const COMPLETENESS_MAX_PIXELS: usize = 256;

/// Column `j` is `A e_j`.
pub fn materialize_dense<O: LinearOperator + ?Sized>(op: &O) -> Result<CMatrix> {
    let (m, n) = (op.range_len(), op.domain_len());
    ensure!(m * n <= DENSE_ENTRY_CAP, TooLarge, "{m}x{n} operator exceeds {DENSE_ENTRY_CAP} entries");
    let mut out = CMatrix::zeros(m, n);
    let mut e = vec![C64::new(0.0, 0.0); n];
    for j in 0..n {
        e[j] = C64::new(1.0, 0.0);
        let col = op.apply(&e);
        for (i, z) in col.into_iter().enumerate() {
            out[(i, j)] = z;
        }
        e[j] = C64::new(0.0, 0.0);
    }
    Ok(out)
}

/// Smallest eigenvalue of the average row-space projection over `n_masks` masks
/// drawn from `mask_sampler`. Positive means no image is invisible to every mask.
pub fn check_completeness<F>(
    mut mask_sampler: F,
    sens: &CoilSensitivities,
    n_masks: usize,
    rng: &mut RngState,
) -> Result<f64>
where
    F: FnMut(&mut RngState) -> Result<SamplingMask>,
{
    ensure!(n_masks >= 1, InvalidArgument, "need at least one mask");
    let (h, w) = sens.shape();
    let d = h * w;
    ensure!(d <= COMPLETENESS_MAX_PIXELS, TooLarge, "{d} pixels exceeds {COMPLETENESS_MAX_PIXELS}");
    let mut avg = CMatrix::zeros(d, d);
    for _ in 0..n_masks {
        let sys = AcquisitionSystem::new(mask_sampler(rng)?, sens.clone(), 0.0)?;
        avg += dense::row_space_projection(&materialize_dense(&sys)?);
    }
    avg /= C64::new(n_masks as f64, 0.0);
    Ok(dense::hermitian_eigenvalues(&avg)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dft2, real_embed};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_sens(h: usize, w: usize, coils: usize, rng: &mut RngState) -> CoilSensitivities {
        let maps = (0..coils)
            .map(|_| ComplexImage::new(h, w, rng.cn_vec(h * w, 1.0).unwrap()).unwrap())
            .collect();
        CoilSensitivities::new(maps).unwrap()
    }

    fn half_mask(h: usize) -> SamplingMask {
        let kept = (0..h).map(|i| i % 2 == 0).collect();
        SamplingMask::new(kept, 1).unwrap()
    }

    #[test]
    fn acs_lines_wrap_around_dc() {
        assert_eq!(SamplingMask::acs_lines(16, 4), vec![0, 1, 14, 15]);
        assert_eq!(SamplingMask::acs_lines(8, 1), vec![0]);
        assert_eq!(SamplingMask::acs_lines(8, 3), vec![0, 1, 7]);
        assert!(SamplingMask::new(vec![false, true, true, true], 1).is_err());
        assert!(SamplingMask::new(vec![false; 4], 0).is_err());
    }

    #[test]
    fn blind_spot_rejected() {
        let mut m = ComplexImage::from_fn(2, 2, |_, _| c(1.0, 0.0));
        m.as_mut_slice()[3] = c(0.0, 0.0);
        assert!(CoilSensitivities::new(vec![m]).is_err());
    }

    #[test]
    fn forward_degenerates_to_dft() {
        let mut rng = RngState::new(1);
        let x = ComplexImage::new(4, 4, rng.cn_vec(16, 1.0).unwrap()).unwrap();
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 4), 0.0).unwrap();
        let y = sys.apply_forward(&x).unwrap();
        assert_eq!(y.as_slice(), dft2(&x, Direction::Forward).as_slice());
    }

    #[test]
    fn second_coil_is_i_times_first() {
        let one = ComplexImage::from_fn(4, 4, |_, _| c(1.0, 0.0));
        let i = ComplexImage::from_fn(4, 4, |_, _| c(0.0, 1.0));
        let sens = CoilSensitivities::new(vec![one, i]).unwrap();
        let sys = AcquisitionSystem::new(SamplingMask::full(4), sens, 0.0).unwrap();
        let mut rng = RngState::new(2);
        let x = ComplexImage::new(4, 4, rng.cn_vec(16, 1.0).unwrap()).unwrap();
        let y = sys.apply_forward(&x).unwrap();
        let (a, b) = y.as_slice().split_at(16);
        for (p, q) in a.iter().zip(b) {
            assert!((q - c(0.0, 1.0) * p).norm() < 1e-14);
        }
    }

    #[test]
    fn shape_errors() {
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 4), 0.0).unwrap();
        assert!(sys.apply_forward(&ComplexImage::zeros(4, 2)).is_err());
        assert!(sys.apply_adjoint(&ComplexVector::zeros(3)).is_err());
        assert!(AcquisitionSystem::new(SamplingMask::full(3), CoilSensitivities::identity(4, 4), 0.0).is_err());
    }

    #[test]
    fn adjoint_identity_random() {
        let mut rng = RngState::new(5);
        let sys = AcquisitionSystem::new(half_mask(4), random_sens(4, 4, 2, &mut rng), 0.0).unwrap();
        for _ in 0..100 {
            let x = rng.cn_vec(sys.image_len(), 1.0).unwrap();
            let y = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();
            let lhs = cx::dot(&sys.apply(&x), &y);
            let rhs = cx::dot(&x, &sys.adjoint(&y));
            assert!((lhs - rhs).norm() < 1e-10 * cx::norm(&x) * cx::norm(&y));
        }
    }

    #[test]
    fn full_mask_single_unit_coil_is_unitary() {
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 4), 0.0).unwrap();
        let mut rng = RngState::new(3);
        let x = rng.cn_vec(16, 1.0).unwrap();
        let back = sys.normal(&x);
        assert!(cx::max_abs(&cx::sub(&back, &x)) < 1e-12);
    }

    #[test]
    fn dense_matches_operator_and_adjoint() {
        let mut rng = RngState::new(6);
        let sys = AcquisitionSystem::new(half_mask(4), random_sens(4, 4, 2, &mut rng), 0.0).unwrap();
        let a = materialize_dense(&sys).unwrap();
        let x = rng.cn_vec(16, 1.0).unwrap();
        let y = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();
        let ax = dense::from_dvec(&(&a * dense::to_dvec(&x)));
        assert!(cx::max_abs(&cx::sub(&ax, &sys.apply(&x))) < 1e-12);
        let ahy = dense::from_dvec(&(a.adjoint() * dense::to_dvec(&y)));
        assert!(cx::max_abs(&cx::sub(&ahy, &sys.adjoint(&y))) < 1e-12);
    }

    #[test]
    fn dense_of_trivial_system_is_unitary_dft() {
        let sys = AcquisitionSystem::new(SamplingMask::full(2), CoilSensitivities::identity(2, 2), 0.0).unwrap();
        let a = materialize_dense(&sys).unwrap();
        assert!(dense::max_abs_diff(&(a.adjoint() * &a), &dense::identity(4)) < 1e-12);
        // first row is the DC row: all entries 1/2
        for j in 0..4 {
            assert!((a[(0, j)] - c(0.5, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn materialize_respects_cap() {
        let op = DenseOperator(CMatrix::zeros(1001, 1000));
        assert!(matches!(materialize_dense(&op), Err(Error::TooLarge(_))));
    }

    #[test]
    fn cg_identity_one_iteration() {
        let b = vec![c(1.0, 2.0), c(-3.0, 0.5), c(0.0, 1.0)];
        let sol = cg_solve(|p| p.to_vec(), &b, &[c(0.0, 0.0); 3], &CgConfig::verification()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(cx::max_abs(&cx::sub(&sol.x, &b)) < 1e-14);
    }

    #[test]
    fn cg_diagonal() {
        let d = [1.0, 2.0, 4.0];
        let b = vec![c(1.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)];
        let apply = |p: &[C64]| p.iter().zip(d).map(|(z, s)| z * s).collect::<Vec<_>>();
        let sol = cg_solve(apply, &b, &[c(0.0, 0.0); 3], &CgConfig::verification()).unwrap();
        for z in sol.x {
            assert!((z - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = RngState::new(8);
        let g = CMatrix::from_fn(8, 8, |_, _| c(rng.normal(), rng.normal()));
        let m = &g * g.adjoint() + dense::identity(8);
        let b = rng.cn_vec(8, 1.0).unwrap();
        let op = DenseOperator(m.clone());
        let sol = cg_solve(|p| op.apply(p), &b, &[c(0.0, 0.0); 8], &CgConfig::new(50, 1e-12).unwrap()).unwrap();
        let exact = dense::from_dvec(&dense::solve_hpd(&m, &dense::to_dvec(&b)).unwrap());
        assert!(cx::max_abs(&cx::sub(&sol.x, &exact)) < 1e-8);
    }

    #[test]
    fn cg_reports_non_finite() {
        let b = vec![c(1.0, 0.0)];
        let out = cg_solve(|p| p.iter().map(|z| z * f64::NAN).collect(), &b, &[c(0.0, 0.0)], &CgConfig::verification());
        assert!(matches!(out, Err(Error::NonFinite(_))));
    }

    #[test]
    fn projection_pinv_resolvent_match_dense() {
        let mut rng = RngState::new(12);
        for (h, w) in [(4, 4), (8, 8)] {
            let sys = AcquisitionSystem::new(half_mask(h), random_sens(h, w, 2, &mut rng), 0.0).unwrap();
            let a = materialize_dense(&sys).unwrap();
            let ap = dense::pinv(&a, 1e-10);
            let cfg = CgConfig::new(200, 1e-12).unwrap();
            let v = rng.cn_vec(sys.image_len(), 1.0).unwrap();
            let y = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();

            let pv = projection(&sys, &v, &cfg).unwrap();
            let pv_dense = dense::from_dvec(&(&ap * &a * dense::to_dvec(&v)));
            assert!(cx::norm(&cx::sub(&pv, &pv_dense)) < 1e-6 * cx::norm(&v));

            let xp = pseudoinverse(&sys, &y, &cfg).unwrap();
            let xp_dense = dense::from_dvec(&(&ap * dense::to_dvec(&y)));
            assert!(cx::norm(&cx::sub(&xp, &xp_dense)) < 1e-6 * cx::norm(&xp_dense));

            let rv = resolvent(&sys, 0.3, &v, &cfg).unwrap();
            let m = dense::identity(sys.image_len()) * c(0.3, 0.0) + a.adjoint() * &a * c(2.0, 0.0);
            let rv_dense = dense::from_dvec(&dense::solve_hpd(&m, &dense::to_dvec(&v)).unwrap());
            assert!(cx::norm(&cx::sub(&rv, &rv_dense)) < 1e-8 * cx::norm(&rv_dense));
        }
    }

    #[test]
    fn projection_trivial_cases() {
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 4), 0.0).unwrap();
        let mut rng = RngState::new(4);
        let v = rng.cn_vec(16, 1.0).unwrap();
        let cfg = CgConfig::verification();
        assert!(cx::max_abs(&cx::sub(&projection(&sys, &v, &cfg).unwrap(), &v)) < 1e-10);
        let r = resolvent(&sys, 0.5, &v, &cfg).unwrap();
        for (a, b) in r.iter().zip(&v) {
            assert!((a - b / 2.5).norm() < 1e-10);
        }
        // A^+ = F^* for the trivial system
        let y = rng.cn_vec(16, 1.0).unwrap();
        let xp = pseudoinverse(&sys, &y, &cfg).unwrap();
        let fy = dft2(&ComplexImage::new(4, 4, y.clone()).unwrap(), Direction::Inverse);
        assert!(cx::max_abs(&cx::sub(&xp, fy.as_slice())) < 1e-10);
    }

    #[test]
    fn resolvent_of_zero_operator() {
        let op = DenseOperator(CMatrix::zeros(3, 4));
        let v = vec![c(1.0, 0.0), c(0.0, 2.0), c(-1.0, 1.0), c(4.0, 0.0)];
        let r = resolvent(&op, 2.0, &v, &CgConfig::verification()).unwrap();
        for (a, b) in r.iter().zip(&v) {
            assert!((a - b / 2.0).norm() < 1e-14);
        }
        assert!(resolvent(&op, 0.0, &v, &CgConfig::verification()).is_err());
    }

    #[test]
    fn projection_annihilates_null_space_and_is_idempotent() {
        let mut rng = RngState::new(21);
        let sys = AcquisitionSystem::new(half_mask(4), CoilSensitivities::identity(4, 4), 0.0).unwrap();
        let a = materialize_dense(&sys).unwrap();
        let p = dense::row_space_projection(&a);
        let wv = rng.cn_vec(16, 1.0).unwrap();
        let null = dense::from_dvec(&((dense::identity(16) - &p) * dense::to_dvec(&wv)));
        let cfg = CgConfig::new(50, 1e-12).unwrap();
        let pn = projection(&sys, &null, &cfg).unwrap();
        assert!(cx::norm(&pn) < 1e-8 * cx::norm(&null));
        let pv = projection(&sys, &wv, &cfg).unwrap();
        let ppv = projection(&sys, &pv, &cfg).unwrap();
        assert!(cx::norm(&cx::sub(&ppv, &pv)) <= 1e-6 * cx::norm(&wv));
    }

    #[test]
    fn pinv_recovers_row_space_signal() {
        let mut rng = RngState::new(30);
        let sys = AcquisitionSystem::new(half_mask(4), random_sens(4, 4, 2, &mut rng), 0.0).unwrap();
        let z = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();
        let x = sys.adjoint(&z); // in range(A^*)
        let y = sys.apply(&x);
        let rec = pseudoinverse(&sys, &y, &CgConfig::verification()).unwrap();
        assert!(cx::norm(&cx::sub(&rec, &x)) < 1e-6 * cx::norm(&x));
    }

    #[test]
    fn completeness_trivial_cases() {
        let sens = CoilSensitivities::identity(4, 4);
        let mut rng = RngState::new(1);
        let full = check_completeness(|_| Ok(SamplingMask::full(4)), &sens, 3, &mut rng).unwrap();
        assert!((full - 1.0).abs() < 1e-10);
        let dead = check_completeness(
            |r| {
                let mut kept: Vec<bool> = (0..4).map(|_| r.uniform() < 0.5).collect();
                kept[0] = true;
                kept[3] = false;
                SamplingMask::new(kept, 1)
            },
            &sens,
            16,
            &mut rng,
        )
        .unwrap();
        assert!(dead.abs() < 1e-10, "{dead}");
        let big = CoilSensitivities::identity(32, 32);
        assert!(matches!(
            check_completeness(|_| Ok(SamplingMask::full(32)), &big, 1, &mut rng),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn real_embedding_of_adjoint_pairing() {
        // Re<Ax, y> = <x_r, (A^* y)_r> in the real embedding
        let mut rng = RngState::new(40);
        let sys = AcquisitionSystem::new(half_mask(4), random_sens(4, 4, 2, &mut rng), 0.0).unwrap();
        let x = rng.cn_vec(16, 1.0).unwrap();
        let y = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();
        let lhs = cx::dot(&sys.apply(&x), &y).re;
        let rhs: f64 = real_embed(&x).iter().zip(real_embed(&sys.adjoint(&y))).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
