//! Interpolation schedule, conditional paths, the logit-normal time sampler,
//! the measurement-space marginal field, and closed-form Gaussian-prior oracles.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`): `x_t = (1 - t) x0 + t x1`
//! with `x1 ~ CN(0, 2 I)`.

use crate::dense::{self, CMatrix, CVector};
use crate::error::{ensure, Error, Result};
use crate::linops::{self, AcquisitionSystem, CgConfig, LinearOperator};
use crate::numerics::{cx, ComplexImage, ComplexVector, RngState, C64};

// ============================================================================
// Schedule and time
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Linear,
}

/// `(a_t, b_t, a'_t, b'_t)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
    pub da: f64,
    pub db: f64,
}

impl Schedule {
    pub fn eval(&self, t: TimePoint) -> Coefficients {
        self.eval_at(t.value())
    }

    /// Unclamped evaluation.
    pub fn eval_at(&self, t: f64) -> Coefficients {
        match self {
            Schedule::Linear => Coefficients { a: 1.0 - t, b: t, da: -1.0, db: 1.0 },
        }
    }
}

/// `c_t = (1 - t)^2 / t * sigma0^2`
pub fn c_t(t: f64, sigma0: f64) -> f64 {
    (1.0 - t) * (1.0 - t) / t * sigma0 * sigma0
}

pub const DEFAULT_TIME_MARGIN: f64 = 1e-3;

/// A time in `[margin, 1 - margin]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Self {
        Self::with_margin(t, DEFAULT_TIME_MARGIN)
    }

    pub fn with_margin(t: f64, margin: f64) -> Self {
        Self(t.clamp(margin, 1.0 - margin))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `t = sigmoid(loc + scale * g)`, `g ~ N(0, 1)`, then clamped.
pub fn sample_time(rng: &mut RngState, loc: f64, scale: f64, margin: f64) -> Result<TimePoint> {
    ensure!(scale > 0.0, InvalidArgument, "logit-normal scale must be positive, got {scale}");
    Ok(TimePoint::with_margin(sigmoid(loc + scale * rng.normal()), margin))
}

/// `(x_t, u) = (a x0 + b x1, a' x0 + b' x1)`
pub fn conditional_point(
    x0: &ComplexImage,
    x1: &ComplexImage,
    schedule: Schedule,
    t: TimePoint,
) -> Result<(ComplexImage, ComplexImage)> {
    x0.check_same_shape(x1)?;
    let k = schedule.eval(t);
    let xt = cx::lincomb(k.a, x0.as_slice(), k.b, x1.as_slice());
    let u = cx::lincomb(k.da, x0.as_slice(), k.db, x1.as_slice());
    Ok((x0.with_data(xt), x0.with_data(u)))
}

// ============================================================================
// Measurement-space marginal field
// ============================================================================

/// Y-space marginal field driven by an X-space field value `vstar`:
///
/// `u = A v - c/(1-t) * A (c I + 2 A^*A)^{-1} A^+ [(1-t) A v + y]`
///
/// which equals `A v - c/(1-t) * A A^+ (c I + 2 A A^*)^{-1} [(1-t) A v + y]`,
/// i.e. the Cd-space expression restricted to the range of `A`. Two CG solves.
pub fn y_marginal_field(
    vstar: &ComplexImage,
    sys: &AcquisitionSystem,
    y: &ComplexVector,
    t: TimePoint,
    cfg: &CgConfig,
) -> Result<ComplexVector> {
    let t = t.value();
    ensure!(t > 0.0 && t < 1.0, InvalidArgument, "field time {t} must lie strictly inside (0, 1)");
    ensure!(y.len() == sys.measurement_len(), Shape, "measurement length {} vs {}", y.len(), sys.measurement_len());
    let av = sys.apply_forward(vstar)?.into_vec();
    let c = c_t(t, sys.noise_sigma0());
    if c == 0.0 {
        return Ok(ComplexVector::from_raw(av));
    }
    let w = cx::lincomb(1.0 - t, &av, 1.0, y.as_slice());
    let lifted = linops::pseudoinverse(sys, &w, cfg)?;
    let r = linops::resolvent(sys, c, &lifted, cfg)?;
    let correction = sys.apply(&r);
    let u = cx::lincomb(1.0, &av, -c / (1.0 - t), &correction);
    ComplexVector::new(u)
}

// ============================================================================
// Gaussian prior oracles
// ============================================================================

/// `x0 ~ CN(mean, cov)` on a desk-scale grid; exists so the field identities can
/// be checked in closed form.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: ComplexImage,
    cov: CMatrix,
    factor: CMatrix,
}

impl GaussianPrior {
    pub fn new(mean: ComplexImage, cov: CMatrix) -> Result<Self> {
        let d = mean.len();
        ensure!(cov.shape() == (d, d), Shape, "covariance {:?} for {d} pixels", cov.shape());
        let scale = cov.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        let asym = dense::max_abs_diff(&cov, &cov.adjoint());
        ensure!(asym <= 1e-10 * scale, InvalidArgument, "covariance is not Hermitian ({asym:e})");
        let cov = dense::hermitian_part(&cov);
        let ev = dense::hermitian_eigenvalues(&cov);
        ensure!(ev[0] >= -1e-10 * scale, InvalidArgument, "covariance has eigenvalue {}", ev[0]);
        let factor = dense::psd_factor(&cov);
        Ok(Self { mean, cov, factor })
    }

    pub fn isotropic(mean: ComplexImage, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, dense::identity(d) * C64::new(variance, 0.0))
    }

    /// Mean and unbiased sample covariance of the given images.
    pub fn moment_matched(samples: &[ComplexImage]) -> Result<Self> {
        ensure!(samples.len() >= 2, InvalidArgument, "need at least two samples");
        let (h, w) = samples[0].shape();
        let d = h * w;
        let n = samples.len() as f64;
        let mut mean = vec![C64::new(0.0, 0.0); d];
        for s in samples {
            samples[0].check_same_shape(s)?;
            cx::axpy(C64::new(1.0 / n, 0.0), s.as_slice(), &mut mean);
        }
        let mut cov = CMatrix::zeros(d, d);
        for s in samples {
            let c = dense::to_dvec(&cx::sub(s.as_slice(), &mean));
            cov += &c * c.adjoint();
        }
        cov /= C64::new(n - 1.0, 0.0);
        Self::new(ComplexImage::from_raw(h, w, mean), cov)
    }

    pub fn mean(&self) -> &ComplexImage {
        &self.mean
    }

    pub fn covariance(&self) -> &CMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RngState) -> ComplexImage {
        let z = dense::to_dvec(&rng.cn_vec(self.dim(), 1.0).expect("unit variance"));
        let x = &self.factor * z + dense::to_dvec(self.mean.as_slice());
        self.mean.with_data(dense::from_dvec(&x))
    }
}

/// Exact joint-Gaussian conditioning on `(x0, x1, y)` with
/// `y = A(a x0 + b x1) + a e`, `e ~ CN(0, sigma0^2 I)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle<'a> {
    prior: &'a GaussianPrior,
    sys: &'a AcquisitionSystem,
    a: CMatrix,
}

struct Conditioning {
    coeffs: Coefficients,
    cov_y: CMatrix,
    centered: CVector,
}

impl<'a> GaussianOracle<'a> {
    pub fn new(prior: &'a GaussianPrior, sys: &'a AcquisitionSystem) -> Result<Self> {
        ensure!(prior.dim() == sys.image_len(), Shape, "prior dim {} vs D = {}", prior.dim(), sys.image_len());
        Ok(Self { prior, sys, a: linops::materialize_dense(sys)? })
    }

    pub fn system(&self) -> &AcquisitionSystem {
        self.sys
    }

    pub fn operator(&self) -> &CMatrix {
        &self.a
    }

    /// `Cov(y) = A (a^2 S0 + 2 b^2 I) A^* + a^2 sigma0^2 I`
    pub fn y_covariance(&self, t: TimePoint) -> CMatrix {
        let k = Schedule::Linear.eval(t);
        let d = self.prior.dim();
        let inner = self.prior.cov.clone() * C64::new(k.a * k.a, 0.0) + dense::identity(d) * C64::new(2.0 * k.b * k.b, 0.0);
        let s2 = self.sys.noise_sigma0().powi(2);
        &self.a * inner * self.a.adjoint() + dense::identity(self.a.nrows()) * C64::new(k.a * k.a * s2, 0.0)
    }

    /// `E[y] = a A mean`
    pub fn y_mean(&self, t: TimePoint) -> CVector {
        let k = Schedule::Linear.eval(t);
        &self.a * dense::to_dvec(self.prior.mean.as_slice()) * C64::new(k.a, 0.0)
    }

    fn condition(&self, y: &ComplexVector, t: TimePoint) -> Result<Conditioning> {
        ensure!(y.len() == self.a.nrows(), Shape, "measurement length {} vs {}", y.len(), self.a.nrows());
        let coeffs = Schedule::Linear.eval(t);
        let centered = dense::to_dvec(y.as_slice()) - self.y_mean(t);
        Ok(Conditioning { coeffs, cov_y: self.y_covariance(t), centered })
    }

    /// `E[a' x0 + b' x1 | y]`
    pub fn vstar(&self, y: &ComplexVector, t: TimePoint) -> Result<ComplexImage> {
        let c = self.condition(y, t)?;
        let k = c.coeffs;
        let solved = dense::solve_hpd(&c.cov_y, &c.centered)
            .map_err(|_| Error::Singular(format!("Cov(y) at t = {} (sigma0 = 0 with rank-deficient A?)", t.value())))?;
        let ah = self.a.adjoint();
        let cross = &self.prior.cov * &ah * C64::new(k.da * k.a, 0.0) + &ah * C64::new(2.0 * k.db * k.b, 0.0);
        let v = dense::to_dvec(self.prior.mean.as_slice()) * C64::new(k.da, 0.0) + cross * solved;
        Ok(self.prior.mean.with_data(dense::from_dvec(&v)))
    }

    /// `-Cov(y)^{-1} (y - E[y])`
    pub fn score(&self, y: &ComplexVector, t: TimePoint) -> Result<ComplexVector> {
        let c = self.condition(y, t)?;
        let solved = dense::solve_hpd(&c.cov_y, &c.centered)
            .map_err(|_| Error::Singular(format!("Cov(y) at t = {}", t.value())))?;
        Ok(ComplexVector::from_raw(dense::from_dvec(&(-solved))))
    }

    /// `A v* - a a' sigma0^2 score`
    pub fn field_via_score(&self, y: &ComplexVector, t: TimePoint) -> Result<ComplexVector> {
        let k = Schedule::Linear.eval(t);
        let av = self.sys.apply_forward(&self.vstar(y, t)?)?;
        let s = self.score(y, t)?;
        let w = k.a * k.da * self.sys.noise_sigma0().powi(2);
        Ok(ComplexVector::from_raw(cx::lincomb(1.0, av.as_slice(), -w, s.as_slice())))
    }

    /// `(a'/a) y - b (b' - (a'/a) b) (2 A A^*) score`
    pub fn field_via_interpolant(&self, y: &ComplexVector, t: TimePoint) -> Result<ComplexVector> {
        let k = Schedule::Linear.eval(t);
        let s = dense::to_dvec(self.score(y, t)?.as_slice());
        let g = &self.a * (self.a.adjoint() * s) * C64::new(2.0, 0.0);
        let r = k.da / k.a;
        let w = k.b * (k.db - r * k.b);
        Ok(ComplexVector::from_raw(cx::lincomb(r, y.as_slice(), -w, &dense::from_dvec(&g))))
    }

    /// `A v - c/(1-t) (c I + 2 A A^*)^{-1} [(1-t) A v + y]`, evaluated densely in
    /// measurement space for an arbitrary X-space field value `v`.
    pub fn field_measurement_space(&self, v: &ComplexImage, y: &ComplexVector, t: TimePoint) -> Result<ComplexVector> {
        let t = t.value();
        let c = c_t(t, self.sys.noise_sigma0());
        let av = &self.a * dense::to_dvec(v.as_slice());
        if c == 0.0 {
            return Ok(ComplexVector::from_raw(dense::from_dvec(&av)));
        }
        let m = dense::identity(self.a.nrows()) * C64::new(c, 0.0) + &self.a * self.a.adjoint() * C64::new(2.0, 0.0);
        let rhs = &av * C64::new(1.0 - t, 0.0) + dense::to_dvec(y.as_slice());
        let corr = dense::solve_hpd(&m, &rhs)?;
        Ok(ComplexVector::from_raw(dense::from_dvec(&(av - corr * C64::new(c / (1.0 - t), 0.0)))))
    }
}

pub fn oracle_vstar(
    prior: &GaussianPrior,
    sys: &AcquisitionSystem,
    y: &ComplexVector,
    t: TimePoint,
) -> Result<ComplexImage> {
    GaussianOracle::new(prior, sys)?.vstar(y, t)
}

pub fn oracle_score_y(
    prior: &GaussianPrior,
    sys: &AcquisitionSystem,
    y: &ComplexVector,
    t: TimePoint,
) -> Result<ComplexVector> {
    GaussianOracle::new(prior, sys)?.score(y, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{CoilSensitivities, SamplingMask};
    use crate::numerics::real_embed;

    fn small_system(seed: u64, sigma0: f64) -> AcquisitionSystem {
        let mut rng = RngState::new(seed);
        let maps = (0..2)
            .map(|_| ComplexImage::new(4, 2, rng.cn_vec(8, 1.0).unwrap()).unwrap())
            .collect();
        let sens = CoilSensitivities::new(maps).unwrap();
        AcquisitionSystem::new(SamplingMask::new(vec![true, false, true, false], 1).unwrap(), sens, sigma0).unwrap()
    }

    fn random_prior(d: usize, h: usize, w: usize, rng: &mut RngState) -> GaussianPrior {
        let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.normal(), rng.normal()) * 0.5);
        let mean = ComplexImage::new(h, w, rng.cn_vec(d, 1.0).unwrap()).unwrap();
        GaussianPrior::new(mean, &g * g.adjoint()).unwrap()
    }

    #[test]
    fn schedule_values() {
        let k = Schedule::Linear.eval_at(0.0);
        assert_eq!((k.a, k.b, k.da, k.db), (1.0, 0.0, -1.0, 1.0));
        let k = Schedule::Linear.eval_at(1.0);
        assert_eq!((k.a, k.b), (0.0, 1.0));
        let k = Schedule::Linear.eval(TimePoint::new(0.5));
        assert_eq!((k.a, k.b, k.da, k.db), (0.5, 0.5, -1.0, 1.0));
        assert!((c_t(0.5, 0.1) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn time_clamp() {
        assert_eq!(TimePoint::new(0.0).value(), 1e-3);
        assert_eq!(TimePoint::new(1.0).value(), 1.0 - 1e-3);
        let mut rng = RngState::new(0);
        assert!(sample_time(&mut rng, 0.0, 0.0, 1e-3).is_err());
        let t = sample_time(&mut rng, 0.0, 1e-12, 1e-3).unwrap();
        assert!((t.value() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn logit_normal_median_and_range() {
        let mut rng = RngState::new(5);
        let mut ts: Vec<f64> = (0..100_000).map(|_| sample_time(&mut rng, 0.0, 1.0, 1e-3).unwrap().value()).collect();
        assert!(ts.iter().all(|&t| (1e-3..=1.0 - 1e-3).contains(&t)));
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ts[ts.len() / 2];
        assert!((0.49..=0.51).contains(&median), "median {median}");
    }

    #[test]
    fn conditional_point_cases() {
        let mut rng = RngState::new(1);
        let x0 = ComplexImage::new(2, 2, rng.cn_vec(4, 1.0).unwrap()).unwrap();
        let x1 = ComplexImage::new(2, 2, rng.cn_vec(4, 1.0).unwrap()).unwrap();
        let (xt, u) = conditional_point(&x0, &x1, Schedule::Linear, TimePoint::with_margin(0.0, 0.0)).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(u.as_slice(), cx::sub(x1.as_slice(), x0.as_slice()).as_slice());
        let (xt, u) = conditional_point(&x0, &x0, Schedule::Linear, TimePoint::new(0.3)).unwrap();
        assert!(cx::max_abs(&cx::sub(xt.as_slice(), x0.as_slice())) < 1e-15);
        assert!(cx::max_abs(u.as_slice()) == 0.0);
        let zero = ComplexImage::zeros(2, 2);
        let (xt, u) = conditional_point(&zero, &x1, Schedule::Linear, TimePoint::new(0.5)).unwrap();
        assert!(cx::max_abs(&cx::lincomb(1.0, xt.as_slice(), -0.5, x1.as_slice())) < 1e-15);
        assert_eq!(u, x1);
        assert!(conditional_point(&zero, &ComplexImage::zeros(1, 4), Schedule::Linear, TimePoint::new(0.5)).is_err());
    }

    #[test]
    fn symmetric_base_prior_gives_zero_field_at_half_time() {
        // x0 ~ CN(0, 2I), square full-rank A: at t = 1/2 the conditional mean of
        // -x0 + x1 vanishes by exchange symmetry.
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 2), 0.0).unwrap();
        let prior = GaussianPrior::isotropic(ComplexImage::zeros(4, 2), 2.0).unwrap();
        let mut rng = RngState::new(3);
        let y = rng.sample_cn(8, 1.0).unwrap();
        let v = oracle_vstar(&prior, &sys, &y, TimePoint::new(0.5)).unwrap();
        assert!(v.norm() < 1e-12 * y.norm(), "{}", v.norm());
    }

    #[test]
    fn degenerate_prior_splits_mean_and_noise_part() {
        let sys = small_system(2, 0.1);
        let mut rng = RngState::new(4);
        let mean = ComplexImage::new(4, 2, rng.cn_vec(8, 1.0).unwrap()).unwrap();
        let prior = GaussianPrior::new(mean.clone(), CMatrix::zeros(8, 8)).unwrap();
        let t = TimePoint::new(0.4);
        let y = rng.sample_cn(sys.measurement_len(), 1.0).unwrap();
        let v = oracle_vstar(&prior, &sys, &y, t).unwrap();
        // a' mu + b' E[x1 | y] with E[x1|y] = 2b A^* Cov(y)^{-1} (y - a A mu)
        let k = Schedule::Linear.eval(t);
        let a = linops::materialize_dense(&sys).unwrap();
        let cov = &a * a.adjoint() * C64::new(2.0 * k.b * k.b, 0.0)
            + dense::identity(a.nrows()) * C64::new((k.a * 0.1).powi(2), 0.0);
        let centered = dense::to_dvec(y.as_slice()) - &a * dense::to_dvec(mean.as_slice()) * C64::new(k.a, 0.0);
        let ex1 = a.adjoint() * dense::solve_hpd(&cov, &centered).unwrap() * C64::new(2.0 * k.b, 0.0);
        let expect = dense::to_dvec(mean.as_slice()) * C64::new(k.da, 0.0) + ex1 * C64::new(k.db, 0.0);
        assert!(cx::max_abs(&cx::sub(v.as_slice(), &dense::from_dvec(&expect))) < 1e-10);
    }

    #[test]
    fn score_trivial_cases() {
        let sys = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 2), 0.2).unwrap();
        let mut rng = RngState::new(6);
        let mean = ComplexImage::new(4, 2, rng.cn_vec(8, 1.0).unwrap()).unwrap();
        let prior = GaussianPrior::isotropic(mean.clone(), 1.5).unwrap();
        let oracle = GaussianOracle::new(&prior, &sys).unwrap();
        let t = TimePoint::new(0.3);
        let m = ComplexVector::from_raw(dense::from_dvec(&oracle.y_mean(t)));
        assert!(oracle.score(&m, t).unwrap().norm() < 1e-12);
        // unitary A and isotropic prior: Cov(y) = c I
        let k = Schedule::Linear.eval(t);
        let c = k.a * k.a * 1.5 + 2.0 * k.b * k.b + k.a * k.a * 0.04;
        let y = rng.sample_cn(8, 1.0).unwrap();
        let s = oracle.score(&y, t).unwrap();
        let expect = cx::lincomb(-1.0 / c, y.as_slice(), 1.0 / c, m.as_slice());
        assert!(cx::max_abs(&cx::sub(s.as_slice(), &expect)) < 1e-12);
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let mut rng = RngState::new(7);
        let sys = AcquisitionSystem::new(SamplingMask::full(2), CoilSensitivities::identity(2, 2), 0.1).unwrap();
        let prior = random_prior(4, 2, 2, &mut rng);
        let oracle = GaussianOracle::new(&prior, &sys).unwrap();
        let t = TimePoint::new(0.35);
        let cov = oracle.y_covariance(t);
        let mean = oracle.y_mean(t);
        let inv = cov.clone().try_inverse().unwrap();
        // log CN(y; m, S) = -(y-m)^* S^{-1} (y-m) + const
        let logp = |y: &[C64]| -> f64 {
            let c = dense::to_dvec(y) - &mean;
            -(c.adjoint() * &inv * &c)[(0, 0)].re
        };
        let y = rng.sample_cn(4, 1.0).unwrap();
        let s = oracle.score(&y, t).unwrap();
        // d/d(re) log p = 2 Re(score), d/d(im) log p = 2 Im(score)
        let sr = real_embed(s.as_slice());
        let yr = real_embed(y.as_slice());
        let h = 1e-5;
        for i in 0..yr.len() {
            let mut p = yr.clone();
            let mut m = yr.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (logp(&crate::numerics::real_lift(&p).unwrap()) - logp(&crate::numerics::real_lift(&m).unwrap())) / (2.0 * h);
            assert!((fd - 2.0 * sr[i]).abs() < 1e-5 * fd.abs().max(1.0), "coord {i}: fd {fd} vs {}", 2.0 * sr[i]);
        }
    }

    #[test]
    fn three_field_expressions_agree() {
        let mut rng = RngState::new(8);
        let sys = small_system(9, 0.05);
        let prior = random_prior(8, 4, 2, &mut rng);
        let oracle = GaussianOracle::new(&prior, &sys).unwrap();
        let cfg = CgConfig::verification();
        for _ in 0..10 {
            let t = TimePoint::new(0.05 + 0.9 * rng.uniform());
            let y = rng.sample_cn(sys.measurement_len(), 2.0).unwrap();
            let v = oracle.vstar(&y, t).unwrap();
            let p3 = y_marginal_field(&v, &sys, &y, t, &cfg).unwrap();
            let l2 = oracle.field_via_score(&y, t).unwrap();
            let l3 = oracle.field_via_interpolant(&y, t).unwrap();
            let dense_p3 = oracle.field_measurement_space(&v, &y, t).unwrap();
            let scale = l2.norm();
            assert!(cx::norm(&cx::sub(p3.as_slice(), l2.as_slice())) < 1e-6 * scale);
            assert!(cx::norm(&cx::sub(l3.as_slice(), l2.as_slice())) < 1e-6 * scale);
            assert!(cx::norm(&cx::sub(dense_p3.as_slice(), l2.as_slice())) < 1e-6 * scale);
        }
    }

    #[test]
    fn zero_noise_field_is_forward_of_vstar() {
        let sys = small_system(10, 0.0);
        let mut rng = RngState::new(11);
        let v = ComplexImage::new(4, 2, rng.cn_vec(8, 1.0).unwrap()).unwrap();
        let y = rng.sample_cn(sys.measurement_len(), 1.0).unwrap();
        let u = y_marginal_field(&v, &sys, &y, TimePoint::new(0.3), &CgConfig::verification()).unwrap();
        assert_eq!(u, sys.apply_forward(&v).unwrap());
    }

    #[test]
    fn moment_matched_prior_recovers_sample_moments() {
        let mut rng = RngState::new(12);
        let truth = random_prior(4, 2, 2, &mut rng);
        let samples: Vec<_> = (0..20_000).map(|_| truth.sample(&mut rng)).collect();
        let fit = GaussianPrior::moment_matched(&samples).unwrap();
        assert!(cx::max_abs(&cx::sub(fit.mean().as_slice(), truth.mean().as_slice())) < 0.05);
        assert!(dense::max_abs_diff(fit.covariance(), truth.covariance()) < 0.1);
    }

    #[test]
    fn prior_validation() {
        let mean = ComplexImage::zeros(2, 1);
        let bad = CMatrix::from_row_slice(2, 2, &[
            C64::new(1.0, 0.0), C64::new(0.0, 1.0),
            C64::new(0.0, 1.0), C64::new(1.0, 0.0),
        ]);
        assert!(GaussianPrior::new(mean.clone(), bad).is_err());
        let neg = dense::identity(2) * C64::new(-1.0, 0.0);
        assert!(GaussianPrior::new(mean, neg).is_err());
    }
}
