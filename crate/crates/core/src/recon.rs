//! Dual-space cyclic reconstruction: forward Euler in measurement space to the
//! latent `y1`, a posterior draw of `x1`, then backward Euler in image space
//! with a range-null data-consistency step after every step. Also PSNR/SSIM.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{ensure, Error, Result};
use crate::flow::{y_marginal_field, GaussianOracle, Schedule, TimePoint, DEFAULT_TIME_MARGIN};
use crate::linops::{self, AcquisitionSystem, CgConfig, LinearOperator};
use crate::model::VectorFieldModel;
use crate::numerics::{cx, ComplexImage, ComplexVector, RngState, C64};

/// Image-space marginal field evaluated from a measurement-space state.
pub trait ReconField {
    fn eval(&self, sys: &AcquisitionSystem, y: &ComplexVector, t: TimePoint) -> Result<ComplexImage>;
}

/// Trained network applied to the zero-filled image `A^* y`.
pub struct ModelField<'a>(pub &'a VectorFieldModel);

impl ReconField for ModelField<'_> {
    fn eval(&self, sys: &AcquisitionSystem, y: &ComplexVector, t: TimePoint) -> Result<ComplexImage> {
        let x = sys.adjoint(y.as_slice());
        Ok(sys.image(self.0.eval(&x, t.value())?))
    }
}

/// Closed-form field under a Gaussian prior.
pub struct OracleField<'a>(pub &'a GaussianOracle<'a>);

impl ReconField for OracleField<'_> {
    fn eval(&self, _sys: &AcquisitionSystem, y: &ComplexVector, t: TimePoint) -> Result<ComplexImage> {
        self.0.vstar(y, t)
    }
}

pub struct ZeroField;

impl ReconField for ZeroField {
    fn eval(&self, sys: &AcquisitionSystem, _y: &ComplexVector, _t: TimePoint) -> Result<ComplexImage> {
        let (h, w) = sys.image_shape();
        Ok(ComplexImage::zeros(h, w))
    }
}

/// Counts field evaluations of the wrapped field.
pub struct CountingField<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F: ReconField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<F: ReconField> ReconField for CountingField<F> {
    fn eval(&self, sys: &AcquisitionSystem, y: &ComplexVector, t: TimePoint) -> Result<ComplexImage> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(sys, y, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub steps: usize,
    pub cg: CgConfig,
    pub sigma0: f64,
    pub seed: u64,
    pub time_margin: f64,
}

impl Default for ReconConfig {
    /// T = 10, k = 30, sigma0 = 1e-2.
    fn default() -> Self {
        Self { steps: 10, cg: CgConfig::inference(), sigma0: 1e-2, seed: 0, time_margin: DEFAULT_TIME_MARGIN }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, InvalidArgument, "need at least one integration step");
        ensure!(self.cg.max_iters >= 1, InvalidArgument, "need at least one CG iteration");
        ensure!(self.sigma0 >= 0.0 && self.sigma0.is_finite(), InvalidArgument, "sigma0 must be >= 0");
        ensure!((0.0..0.5).contains(&self.time_margin), InvalidArgument, "time margin must lie in [0, 0.5)");
        Ok(())
    }

    fn time(&self, t: f64) -> TimePoint {
        TimePoint::with_margin(t, self.time_margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub image: ComplexImage,
    pub y1: ComplexVector,
    /// `||A x - y(t)||` after each data-consistency step, in integration order.
    pub residuals: Vec<f64>,
    /// Same quantity before the data-consistency step.
    pub residuals_before_dc: Vec<f64>,
    /// `||y(t)||` at each backward step.
    pub reference_norms: Vec<f64>,
}

impl ReconResult {
    pub fn relative_residuals(&self) -> Vec<f64> {
        self.residuals
            .iter()
            .zip(&self.reference_norms)
            .map(|(r, n)| if *n > 0.0 { r / n } else { *r })
            .collect()
    }
}

fn check_measurement(sys: &AcquisitionSystem, y: &ComplexVector, what: &str) -> Result<()> {
    ensure!(
        y.len() == sys.measurement_len(),
        Shape,
        "{what} has {} samples, system expects {}",
        y.len(),
        sys.measurement_len()
    );
    Ok(())
}

/// Explicit Euler from `t = 0` to `t = 1` on the grid `i / T`.
pub fn forward_integrate<F: ReconField + ?Sized>(
    y0: &ComplexVector,
    field: &F,
    sys: &AcquisitionSystem,
    cfg: &ReconConfig,
) -> Result<ComplexVector> {
    cfg.validate()?;
    check_measurement(sys, y0, "y0")?;
    let noisy = sys.with_sigma0(cfg.sigma0);
    let dt = 1.0 / cfg.steps as f64;
    let mut y = y0.clone();
    for i in 0..cfg.steps {
        let t = cfg.time(i as f64 * dt);
        let v = field.eval(&noisy, &y, t)?;
        let u = y_marginal_field(&v, &noisy, &y, t, &cfg.cg)?;
        cx::axpy(C64::new(dt, 0.0), u.as_slice(), y.as_mut_slice());
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("measurement state at forward step {i}")));
        }
    }
    Ok(y)
}

/// `x1 = A^+ y1 + (I - A^+ A) z`, `z ~ CN(0, 2I)`.
pub fn posterior_sample_t1(sys: &AcquisitionSystem, y1: &ComplexVector, rng: &mut RngState, cg: &CgConfig) -> Result<ComplexImage> {
    check_measurement(sys, y1, "y1")?;
    let z = rng.cn_vec(sys.image_len(), 2.0)?;
    let pz = linops::projection(sys, &z, cg)?;
    let mut x = linops::pseudoinverse(sys, y1.as_slice(), cg)?;
    for ((xi, zi), pi) in x.iter_mut().zip(&z).zip(&pz) {
        *xi += zi - pi;
    }
    Ok(sys.image(x))
}

/// `x <- x - A^+(A x - y)`
pub fn data_consistency(sys: &AcquisitionSystem, x: &[C64], y: &[C64], cg: &CgConfig) -> Result<Vec<C64>> {
    let r = cx::sub(&sys.apply(x), y);
    let fix = linops::pseudoinverse(sys, &r, cg)?;
    Ok(cx::sub(x, &fix))
}

/// Backward Euler from `t = 1` to `t = 0`. The step ending at `t` evaluates the
/// field at `(y(t + 1/T), t + 1/T)` and then enforces `A x = y(t)`, with
/// `y(t) = a_t y0 + b_t y1`.
pub fn backward_integrate<F: ReconField + ?Sized>(
    x1: &ComplexImage,
    y0: &ComplexVector,
    y1: &ComplexVector,
    field: &F,
    sys: &AcquisitionSystem,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    check_measurement(sys, y0, "y0")?;
    check_measurement(sys, y1, "y1")?;
    ensure!(x1.shape() == sys.image_shape(), Shape, "x1 {:?} vs system {:?}", x1.shape(), sys.image_shape());
    let noisy = sys.with_sigma0(cfg.sigma0);
    let dt = 1.0 / cfg.steps as f64;
    let interp = |s: f64| {
        let k = Schedule::Linear.eval_at(s);
        ComplexVector::new(cx::lincomb(k.a, y0.as_slice(), k.b, y1.as_slice()))
    };
    let mut x = x1.as_slice().to_vec();
    let mut residuals = Vec::with_capacity(cfg.steps);
    let mut before = Vec::with_capacity(cfg.steps);
    let mut norms = Vec::with_capacity(cfg.steps);
    for i in (0..cfg.steps).rev() {
        let s = (i + 1) as f64 * dt;
        let ys = interp(s)?;
        let v = field.eval(&noisy, &ys, cfg.time(s))?;
        cx::axpy(C64::new(-dt, 0.0), v.as_slice(), &mut x);
        let yt = interp(i as f64 * dt)?;
        before.push(cx::norm(&cx::sub(&sys.apply(&x), yt.as_slice())));
        x = data_consistency(sys, &x, yt.as_slice(), &cfg.cg)?;
        if !cx::all_finite(&x) {
            return Err(Error::NonFinite(format!("image state at backward step {i}")));
        }
        residuals.push(cx::norm(&cx::sub(&sys.apply(&x), yt.as_slice())));
        norms.push(yt.norm());
    }
    Ok(ReconResult {
        image: sys.image(x),
        y1: y1.clone(),
        residuals,
        residuals_before_dc: before,
        reference_norms: norms,
    })
}

/// Forward integration, posterior draw at `t = 1`, backward integration. Uses
/// exactly `2 T` field evaluations and is deterministic given `rng`.
pub fn reconstruct<F: ReconField + ?Sized>(
    y0: &ComplexVector,
    sys: &AcquisitionSystem,
    field: &F,
    cfg: &ReconConfig,
    rng: &mut RngState,
) -> Result<ReconResult> {
    let y1 = forward_integrate(y0, field, sys, cfg)?;
    let x1 = posterior_sample_t1(sys, &y1, &mut rng.substream("posterior"), &cfg.cg)?;
    backward_integrate(&x1, y0, &y1, field, sys, cfg)
}

// ============================================================================
// Metrics
// ============================================================================

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 200.0;

fn magnitudes(reference: &ComplexImage, test: &ComplexImage) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    reference.check_same_shape(test)?;
    let r = reference.magnitude();
    let peak = r.iter().cloned().fold(0.0, f64::max);
    ensure!(peak > 0.0, InvalidArgument, "reference image is identically zero");
    ensure!(test.is_finite(), NonFinite, "test image");
    Ok((r, test.magnitude(), peak))
}

/// `20 log10(max|ref| / RMSE)` on magnitude images.
pub fn psnr(reference: &ComplexImage, test: &ComplexImage) -> Result<f64> {
    let (r, t, peak) = magnitudes(reference, test)?;
    let mse = r.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over all fully contained 7x7 windows (smaller if the image is),
/// uniform weights, sample covariances, dynamic range `max|ref|`.
pub fn ssim(reference: &ComplexImage, test: &ComplexImage) -> Result<f64> {
    let (r, t, peak) = magnitudes(reference, test)?;
    let (h, w) = reference.shape();
    let win = 7.min(h).min(w);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (win * win) as f64;
    let norm = if win > 1 { n / (n - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=h - win {
        for j0 in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in i0..i0 + win {
                for j in j0..j0 + win {
                    let (a, b) = (r[i * w + j], t[i * w + j]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx) * norm;
            let vy = (syy / n - my * my) * norm;
            let cxy = (sxy / n - mx * my) * norm;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use crate::flow::GaussianPrior;
    use crate::linops::{CoilSensitivities, SamplingMask};

    fn rank_deficient_system(sigma0: f64) -> AcquisitionSystem {
        let mut rng = RngState::new(3);
        let s1 = ComplexImage::new(4, 2, rng.cn_vec(8, 1.0).unwrap()).unwrap();
        let s2 = s1.with_data(s1.as_slice().iter().map(|z| z * C64::new(0.3, 0.8)).collect());
        let sens = CoilSensitivities::new(vec![s1, s2]).unwrap();
        AcquisitionSystem::new(SamplingMask::new(vec![true, false, true, false], 1).unwrap(), sens, sigma0).unwrap()
    }

    fn full_system() -> AcquisitionSystem {
        let mut rng = RngState::new(4);
        let maps: Vec<ComplexImage> = (0..2).map(|_| ComplexImage::new(4, 4, rng.cn_vec(16, 1.0).unwrap()).unwrap()).collect();
        AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::new(maps).unwrap(), 0.0).unwrap()
    }

    fn cfg(steps: usize, sigma0: f64) -> ReconConfig {
        ReconConfig { steps, cg: CgConfig::verification(), sigma0, ..ReconConfig::default() }
    }

    #[test]
    fn zero_field_without_noise_keeps_measurement_fixed() {
        let sys = rank_deficient_system(0.0);
        let y0 = RngState::new(1).sample_cn(sys.measurement_len(), 1.0).unwrap();
        let y1 = forward_integrate(&y0, &ZeroField, &sys, &cfg(7, 0.0)).unwrap();
        assert_eq!(y1, y0);
    }

    #[test]
    fn posterior_sample_is_consistent_and_degenerates_under_full_rank() {
        let sys = rank_deficient_system(0.0);
        let cg = CgConfig::verification();
        let w = RngState::new(2).cn_vec(8, 1.0).unwrap();
        let y1 = ComplexVector::new(sys.apply(&w)).unwrap();
        let x1 = posterior_sample_t1(&sys, &y1, &mut RngState::new(3), &cg).unwrap();
        assert!(cx::norm(&cx::sub(&sys.apply(x1.as_slice()), y1.as_slice())) <= 1e-5 * y1.norm());

        let full = full_system();
        let y = ComplexVector::new(full.apply(&RngState::new(4).cn_vec(16, 1.0).unwrap())).unwrap();
        let a = posterior_sample_t1(&full, &y, &mut RngState::new(5), &cg).unwrap();
        let b = posterior_sample_t1(&full, &y, &mut RngState::new(6), &cg).unwrap();
        assert!(cx::norm(&cx::sub(a.as_slice(), b.as_slice())) < 1e-8);
    }

    #[test]
    fn single_step_with_zero_field_is_one_dc_step() {
        let sys = rank_deficient_system(0.0);
        let c = cfg(1, 0.0);
        let mut rng = RngState::new(7);
        let x1 = sys.image(rng.cn_vec(8, 2.0).unwrap());
        let y0 = rng.sample_cn(sys.measurement_len(), 1.0).unwrap();
        let y1 = rng.sample_cn(sys.measurement_len(), 1.0).unwrap();
        let out = backward_integrate(&x1, &y0, &y1, &ZeroField, &sys, &c).unwrap();
        let expect = data_consistency(&sys, x1.as_slice(), y0.as_slice(), &c.cg).unwrap();
        assert_eq!(out.image.as_slice(), &expect[..]);
        assert_eq!(out.residuals.len(), 1);
    }

    #[test]
    fn full_mask_recovers_sense_combination_regardless_of_field() {
        let sys = full_system();
        let mut rng = RngState::new(8);
        let x0 = sys.image(rng.cn_vec(16, 1.0).unwrap());
        let y0 = sys.apply_forward(&x0).unwrap();
        let junk = ModelField(&{
            let mut m = VectorFieldModel::init(crate::model::Architecture { pixels: 16, hidden: 8, depth: 1, time_dim: 2 }, &mut rng).unwrap();
            let head = m.head_range();
            for p in &mut m.params_mut()[head] {
                *p = rng.normal();
            }
            m
        });
        let out = reconstruct(&y0, &sys, &junk, &cfg(5, 0.01), &mut RngState::new(9)).unwrap();
        let expect = linops::apply_pseudoinverse(&sys, &y0, &CgConfig::verification()).unwrap();
        assert!(cx::norm(&cx::sub(out.image.as_slice(), expect.as_slice())) < 1e-8 * x0.norm());
        assert!(cx::norm(&cx::sub(out.image.as_slice(), x0.as_slice())) < 1e-8 * x0.norm());
    }

    #[test]
    fn reconstruction_uses_two_t_field_evaluations_and_is_deterministic() {
        let sys = rank_deficient_system(0.01);
        let y0 = RngState::new(10).sample_cn(sys.measurement_len(), 1.0).unwrap();
        let field = CountingField::new(ZeroField);
        let c = cfg(10, 0.01);
        let a = reconstruct(&y0, &sys, &field, &c, &mut RngState::new(11)).unwrap();
        assert_eq!(field.count(), 20);
        let b = reconstruct(&y0, &sys, &field, &c, &mut RngState::new(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.residuals.len(), 10);
    }

    #[test]
    fn oracle_reconstruction_stays_measurement_consistent() {
        let sys = rank_deficient_system(1e-4);
        let mut rng = RngState::new(12);
        let g = dense::CMatrix::from_fn(8, 8, |_, _| C64::new(rng.normal(), rng.normal()) * 0.4);
        let prior = GaussianPrior::new(sys.image(rng.cn_vec(8, 1.0).unwrap()), &g * g.adjoint()).unwrap();
        let oracle = GaussianOracle::new(&prior, &sys).unwrap();
        let x0 = prior.sample(&mut rng);
        let mut y0 = sys.apply(x0.as_slice());
        cx::axpy(C64::new(1.0, 0.0), &rng.cn_vec(y0.len(), 1e-8).unwrap(), &mut y0);
        let y0 = ComplexVector::new(y0).unwrap();
        let out = reconstruct(&y0, &sys, &OracleField(&oracle), &cfg(50, 1e-4), &mut RngState::new(13)).unwrap();
        assert!(out.relative_residuals().iter().all(|&r| r < 1e-3));
        let fin = cx::norm(&cx::sub(&sys.apply(out.image.as_slice()), y0.as_slice())) / y0.norm();
        assert!(fin < 1e-3, "final residual {fin}");
    }

    #[test]
    fn dc_step_is_idempotent() {
        let sys = rank_deficient_system(0.0);
        let cg = CgConfig::verification();
        let mut rng = RngState::new(14);
        let x = rng.cn_vec(8, 1.0).unwrap();
        let y = rng.cn_vec(sys.measurement_len(), 1.0).unwrap();
        let once = data_consistency(&sys, &x, &y, &cg).unwrap();
        let twice = data_consistency(&sys, &once, &y, &cg).unwrap();
        assert!(cx::norm(&cx::sub(&once, &twice)) < 1e-8);
    }

    #[test]
    fn psnr_cases() {
        let r = ComplexImage::from_fn(8, 8, |i, j| C64::new(1.0 + (i * 8 + j) as f64 / 10.0, 0.0));
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP_DB);
        let peak = r.magnitude().into_iter().fold(0.0, f64::max);
        let shifted = r.with_data(r.as_slice().iter().map(|z| z + 0.01 * peak).collect());
        assert!((psnr(&r, &shifted).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&ComplexImage::zeros(8, 8), &r).is_err());
        assert!(psnr(&r, &ComplexImage::zeros(4, 4)).is_err());
    }

    #[test]
    fn ssim_cases() {
        let r = ComplexImage::from_fn(10, 9, |i, j| C64::new(((i * 3 + j * 5) % 7) as f64, (i as f64 - j as f64) * 0.3));
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        // magnitude of -ref equals magnitude of ref; use a sign flip on the magnitudes instead
        let flipped = ComplexImage::from_fn(10, 9, |i, j| C64::new(7.0 - r.get(i, j).norm(), 0.0));
        let s = ssim(&r, &flipped).unwrap();
        assert!((-1.0..1.0).contains(&s));
        let noisy = r.with_data(r.as_slice().iter().enumerate().map(|(k, z)| z + 0.3 * ((k % 3) as f64)).collect());
        assert!(ssim(&r, &noisy).unwrap() < 1.0);
    }
}
