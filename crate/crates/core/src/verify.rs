//! Self-checks against dense-matrix and closed-form oracles. Used by the
//! `verify` command and by the acceptance tests; sample sizes are parameters.

use std::fmt;
use std::str::FromStr;

use crate::dense::{self, CMatrix};
use crate::error::{Error, Result};
use crate::flow::{sample_time, y_marginal_field, GaussianOracle, GaussianPrior, TimePoint};
use crate::linops::{self, AcquisitionSystem, CgConfig, CoilSensitivities, LinearOperator, SamplingMask};
use crate::model::{self, Architecture, GradientBundle, VectorFieldModel};
use crate::numerics::{cx, real_embed, real_lift, ComplexImage, ComplexVector, Direction, RngState, C64};
use crate::recon::{reconstruct, CountingField, ModelField, OracleField, ReconConfig};
use crate::sim::generate_mask;
use crate::train::{self, LossSettings, MeasurementRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value < bound, format!("{value:.3e} < {bound:.0e}"))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Props,
    Oracle,
    Gradients,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "props" => Ok(Suite::Props),
            "oracle" => Ok(Suite::Oracle),
            "gradients" => Ok(Suite::Gradients),
            other => Err(Error::InvalidArgument(format!("unknown suite {other:?} (props, oracle, gradients)"))),
        }
    }
}

/// Monte-Carlo sample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub masks: usize,
    pub field_points: usize,
    pub posterior_samples: usize,
    pub gsure_draws: usize,
    pub hutchinson_draws: usize,
    pub grad_coords: usize,
}

impl Scale {
    pub fn full() -> Self {
        Self {
            masks: 64,
            field_points: 100,
            posterior_samples: 10_000,
            gsure_draws: 10_000,
            hutchinson_draws: 10_000,
            grad_coords: 32,
        }
    }

    pub fn quick() -> Self {
        Self {
            masks: 64,
            field_points: 20,
            posterior_samples: 2_000,
            gsure_draws: 2_000,
            hutchinson_draws: 2_000,
            grad_coords: 32,
        }
    }
}

pub fn run_suite(suite: Suite, scale: &Scale, seed: u64) -> Result<Vec<Check>> {
    let rng = RngState::new(seed);
    let mut out = Vec::new();
    match suite {
        Suite::Props => {
            out.extend(operator_checks(&mut rng.substream("operators"))?);
            out.extend(completeness_checks(scale.masks, &mut rng.substream("completeness"))?);
            out.push(dft_unitarity(&mut rng.substream("dft"))?);
            out.push(mask_reachability(10_000, &mut rng.substream("masks"))?);
        }
        Suite::Oracle => {
            out.push(field_agreement(scale.field_points, &mut rng.substream("fields"))?);
            out.extend(measurement_consistency(50, &mut rng.substream("consistency"))?);
            out.extend(posterior_moments(scale.posterior_samples, &mut rng.substream("posterior"))?);
        }
        Suite::Gradients => {
            out.extend(gradient_checks(scale.grad_coords, &mut rng.substream("gradients"))?);
            out.extend(hutchinson_checks(scale.hutchinson_draws, &mut rng.substream("hutchinson"))?);
            out.push(gsure_equivalence(scale.gsure_draws, 32, &mut rng.substream("gsure"))?);
            out.push(nfe_count(10)?);
        }
    }
    Ok(out)
}

// ============================================================================
// Fixtures
// ============================================================================

fn random_sens(h: usize, w: usize, coils: usize, rng: &mut RngState) -> Result<CoilSensitivities> {
    let maps = (0..coils)
        .map(|_| ComplexImage::new(h, w, rng.cn_vec(h * w, 1.0)?))
        .collect::<Result<Vec<_>>>()?;
    CoilSensitivities::new(maps)
}

/// 4x2 image, two coils with independent random maps, lines 0 and 2 kept.
/// The operator is square and generically invertible.
pub fn generic_small_system(sigma0: f64, rng: &mut RngState) -> Result<AcquisitionSystem> {
    AcquisitionSystem::new(SamplingMask::new(vec![true, false, true, false], 1)?, random_sens(4, 2, 2, rng)?, sigma0)
}

/// 4x2 image, two coils whose maps differ by a complex factor, lines 0 and 2
/// kept: rank 4 of 8, so the null space is non-trivial.
pub fn collinear_small_system(sigma0: f64, rng: &mut RngState) -> Result<AcquisitionSystem> {
    let s1 = ComplexImage::new(4, 2, rng.cn_vec(8, 1.0)?)?;
    let g = C64::new(rng.normal(), rng.normal());
    let s2 = s1.with_data(s1.as_slice().iter().map(|z| z * g).collect());
    AcquisitionSystem::new(
        SamplingMask::new(vec![true, false, true, false], 1)?,
        CoilSensitivities::new(vec![s1, s2])?,
        sigma0,
    )
}

pub fn random_prior(sys: &AcquisitionSystem, rng: &mut RngState) -> Result<GaussianPrior> {
    let d = sys.image_len();
    let g = CMatrix::from_fn(d, d, |_, _| C64::new(rng.normal(), rng.normal()) * 0.4);
    GaussianPrior::new(sys.image(rng.cn_vec(d, 1.0)?), &g * g.adjoint())
}

/// Small network with a randomized head so the field is non-zero.
pub fn random_small_model(pixels: usize, rng: &mut RngState) -> Result<VectorFieldModel> {
    let mut m = VectorFieldModel::init(Architecture { pixels, hidden: 16, depth: 2, time_dim: 4 }, rng)?;
    let head = m.head_range();
    for p in &mut m.params_mut()[head] {
        *p = 0.3 * rng.normal();
    }
    Ok(m)
}

fn rel(a: &[C64], b: &[C64]) -> f64 {
    cx::norm(&cx::sub(a, b)) / cx::norm(b).max(f64::MIN_POSITIVE)
}

struct Moments {
    n: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self { n: 0.0, sum: vec![0.0; k], sumsq: vec![0.0; k] }
    }

    fn push(&mut self, x: impl IntoIterator<Item = f64>) {
        self.n += 1.0;
        for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sumsq).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n
    }

    /// Standard error of the mean.
    fn se(&self, i: usize) -> f64 {
        let m = self.mean(i);
        let var = ((self.sumsq[i] / self.n - m * m) * self.n / (self.n - 1.0)).max(0.0);
        (var / self.n).sqrt()
    }
}

// ============================================================================
// Operator properties
// ============================================================================

/// Adjointness, projection idempotence and symmetry, `A A^+ A = A`, and CG
/// projection, pseudoinverse and resolvent against dense oracles, at 4x4 and 8x8.
pub fn operator_checks(rng: &mut RngState) -> Result<Vec<Check>> {
    let cfg = CgConfig::verification();
    let tol = 1e-6;
    let mut out = Vec::new();
    for n in [4usize, 8] {
        let sens = random_sens(n, n, 2, rng)?;
        let mask = generate_mask(n, 2.0, 2, rng)?;
        let sys = AcquisitionSystem::new(mask, sens, 0.0)?;
        let a = linops::materialize_dense(&sys)?;
        let pinv = dense::pinv(&a, 1e-10);
        let p = &pinv * &a;
        let c = 0.3;
        let res = dense::solve_hpd_mat(&(dense::identity(n * n) * C64::new(c, 0.0) + a.adjoint() * &a * C64::new(2.0, 0.0)), &dense::identity(n * n))?;
        let (d, m) = (sys.image_len(), sys.measurement_len());
        let mut worst = [0.0f64; 7];
        for _ in 0..10 {
            let x = rng.cn_vec(d, 1.0)?;
            let u = rng.cn_vec(d, 1.0)?;
            let y = rng.cn_vec(m, 1.0)?;
            let ax = sys.apply(&x);
            let aty = sys.adjoint(&y);
            let adj = (cx::dot(&ax, &y) - cx::dot(&x, &aty)).norm() / (cx::norm(&ax) * cx::norm(&y) + cx::norm(&x) * cx::norm(&aty));
            let px = linops::projection(&sys, &x, &cfg)?;
            let ppx = linops::projection(&sys, &px, &cfg)?;
            let pu = linops::projection(&sys, &u, &cfg)?;
            let herm = (cx::dot(&pu, &x) - cx::dot(&u, &px)).norm() / (cx::norm(&u) * cx::norm(&x));
            let aaa = sys.apply(&linops::pseudoinverse(&sys, &ax, &cfg)?);
            let dense_px = dense::from_dvec(&(&p * dense::to_dvec(&x)));
            let dense_pinv = dense::from_dvec(&(&pinv * dense::to_dvec(&y)));
            let dense_res = dense::from_dvec(&(&res * dense::to_dvec(&x)));
            let errs = [
                adj,
                rel(&ppx, &px),
                herm,
                rel(&aaa, &ax),
                rel(&px, &dense_px),
                rel(&linops::pseudoinverse(&sys, &y, &cfg)?, &dense_pinv),
                rel(&linops::resolvent(&sys, c, &x, &cfg)?, &dense_res),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        let names = ["adjointness", "projection idempotence", "projection symmetry", "A A+ A = A", "projection vs dense", "pseudoinverse vs dense", "resolvent vs dense"];
        for (name, w) in names.iter().zip(worst) {
            out.push(Check::below(format!("{name} {n}x{n}"), w, tol));
        }
    }
    Ok(out)
}

/// Averaged row-space projection over random 2x masks on 8x8 is positive
/// definite. With a single uniform coil, a mask law that never samples one
/// line leaves it singular (with several coils the other lines can still
/// cover the image, so the dead-line case uses one coil).
pub fn completeness_checks(n_masks: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let sens = random_sens(8, 8, 2, rng)?;
    let lam = linops::check_completeness(|r| generate_mask(8, 2.0, 2, r), &sens, n_masks, rng)?;
    let dead = linops::check_completeness(
        |r| {
            let m = generate_mask(8, 2.0, 2, r)?;
            let mut kept = m.kept().to_vec();
            kept[4] = false;
            SamplingMask::new(kept, 2)
        },
        &CoilSensitivities::identity(8, 8),
        n_masks,
        rng,
    )?;
    Ok(vec![
        Check::new("completeness of random masks", lam > 1e-6, format!("lambda_min {lam:.3e} > 0 over {n_masks} masks")),
        Check::new("dead line breaks completeness", dead.abs() < 1e-8, format!("lambda_min {dead:.3e} = 0")),
    ])
}

pub fn dft_unitarity(rng: &mut RngState) -> Result<Check> {
    let x = ComplexImage::new(6, 10, rng.cn_vec(60, 1.0)?)?;
    let k = crate::numerics::dft2(&x, Direction::Forward);
    let back = crate::numerics::dft2(&k, Direction::Inverse);
    let err = rel(back.as_slice(), x.as_slice()).max((k.norm() - x.norm()).abs() / x.norm());
    Ok(Check::below("DFT round trip and Parseval", err, 1e-12))
}

/// Every non-ACS line is kept with positive empirical frequency at 4x.
pub fn mask_reachability(n: usize, rng: &mut RngState) -> Result<Check> {
    let mut hits = [0usize; 16];
    for _ in 0..n {
        let m = generate_mask(16, 4.0, 2, rng)?;
        for (l, h) in hits.iter_mut().enumerate() {
            *h += m.is_kept(l) as usize;
        }
    }
    let min = *hits.iter().min().expect("16 lines");
    Ok(Check::new("every line reachable at 4x", min > 0, format!("min keep count {min} of {n}")))
}

// ============================================================================
// Gaussian-oracle identities
// ============================================================================

/// The CG range-space field, the score form and the interpolant form of the
/// measurement-space field agree at random `(y, t)`.
pub fn field_agreement(points: usize, rng: &mut RngState) -> Result<Check> {
    let sys = generic_small_system(0.1, rng)?;
    let prior = random_prior(&sys, rng)?;
    let oracle = GaussianOracle::new(&prior, &sys)?;
    let cfg = CgConfig::verification();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let y = rng.sample_cn(sys.measurement_len(), 1.0)?;
        let t = TimePoint::new(0.02 + 0.96 * rng.uniform());
        let cg_form = y_marginal_field(&oracle.vstar(&y, t)?, &sys, &y, t, &cfg)?;
        let score_form = oracle.field_via_score(&y, t)?;
        let interp_form = oracle.field_via_interpolant(&y, t)?;
        worst = worst
            .max(rel(cg_form.as_slice(), score_form.as_slice()))
            .max(rel(interp_form.as_slice(), score_form.as_slice()))
            .max(rel(cg_form.as_slice(), interp_form.as_slice()));
    }
    Ok(Check::below(format!("three field expressions agree ({points} points)"), worst, 1e-6))
}

/// Oracle-field reconstruction at sigma0 = 1e-4 keeps `A x(t)` on the
/// measurement path at every step and at the end.
pub fn measurement_consistency(steps: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let sigma0 = 1e-4;
    let sys = collinear_small_system(sigma0, rng)?;
    let prior = random_prior(&sys, rng)?;
    let oracle = GaussianOracle::new(&prior, &sys)?;
    let x0 = prior.sample(rng);
    let mut y0 = sys.apply(x0.as_slice());
    cx::axpy(C64::new(1.0, 0.0), &rng.cn_vec(y0.len(), sigma0 * sigma0)?, &mut y0);
    let y0 = ComplexVector::new(y0)?;
    let cfg = ReconConfig { steps, cg: CgConfig::verification(), sigma0, ..ReconConfig::default() };
    let out = reconstruct(&y0, &sys, &OracleField(&oracle), &cfg, &mut rng.substream("recon"))?;
    let per_step = out.relative_residuals().into_iter().fold(0.0, f64::max);
    let before = out
        .residuals_before_dc
        .iter()
        .zip(&out.reference_norms)
        .map(|(r, n)| r / n)
        .fold(0.0, f64::max);
    let fin = rel(&sys.apply(out.image.as_slice()), y0.as_slice());
    Ok(vec![
        Check::new(
            format!("per-step measurement residual (T={steps})"),
            per_step < 1e-3,
            format!("{per_step:.3e} < 1e-3 (before correction {before:.3e})"),
        ),
        Check::below("final measurement residual", fin, 1e-3),
    ])
}

/// Posterior draws at `t = 1` have mean `A^+ y1` and covariance `2 (I - A^+ A)`.
/// Each real coordinate of the mean and covariance must fall within three
/// standard errors (plus a 1e-8 floor for solver error on exactly-zero entries).
pub fn posterior_moments(samples: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let sys = collinear_small_system(0.0, rng)?;
    let cfg = CgConfig::verification();
    let a = linops::materialize_dense(&sys)?;
    let pinv = dense::pinv(&a, 1e-10);
    let d = sys.image_len();
    let y1 = sys.apply(&rng.cn_vec(d, 1.0)?);
    let mu = dense::from_dvec(&(&pinv * dense::to_dvec(&y1)));
    let cov = (dense::identity(d) - &pinv * &a) * C64::new(2.0, 0.0);
    let y1 = ComplexVector::new(y1)?;
    let mut mean_m = Moments::new(2 * d);
    let mut cov_m = Moments::new(2 * d * d);
    for _ in 0..samples {
        let x = crate::recon::posterior_sample_t1(&sys, &y1, rng, &cfg)?;
        let c = cx::sub(x.as_slice(), &mu);
        mean_m.push(real_embed(x.as_slice()));
        let mut outer = Vec::with_capacity(2 * d * d);
        for i in 0..d {
            for j in 0..d {
                let z = c[i] * c[j].conj();
                outer.push(z.re);
                outer.push(z.im);
            }
        }
        cov_m.push(outer);
    }
    let floor = 1e-8;
    let mu_r = real_embed(&mu);
    let mean_fail = (0..2 * d).filter(|&i| (mean_m.mean(i) - mu_r[i]).abs() > 3.0 * mean_m.se(i) + floor).count();
    let cov_r = real_embed(cov.transpose().as_slice());
    let cov_fail = (0..2 * d * d).filter(|&i| (cov_m.mean(i) - cov_r[i]).abs() > 3.0 * cov_m.se(i) + floor).count();
    Ok(vec![
        Check::new("posterior mean", mean_fail == 0, format!("{mean_fail} of {} coordinates outside 3 SE ({samples} draws)", 2 * d)),
        Check::new("posterior covariance", cov_fail == 0, format!("{cov_fail} of {} entries outside 3 SE ({samples} draws)", 2 * d * d)),
    ])
}

// ============================================================================
// Gradients and divergence
// ============================================================================

fn fd_check(
    name: &str,
    m: &VectorFieldModel,
    bundle: &GradientBundle,
    loss: impl Fn(&VectorFieldModel) -> Result<f64>,
    coords: usize,
    rng: &mut RngState,
) -> Result<Check> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let n = bundle.gradient.len();
    for k in rand::seq::index::sample(rng, n, coords.min(n)) {
        let mut p = m.clone();
        p.params_mut()[k] += h;
        let mut q = m.clone();
        q.params_mut()[k] -= h;
        let fd = (loss(&p)? - loss(&q)?) / (2.0 * h);
        let g = bundle.gradient[k];
        worst = worst.max((g - fd).abs() / (g.abs() + 1e-8));
    }
    Ok(Check::below(format!("{name} gradient vs finite differences ({coords} coords)"), worst, 1e-3))
}

/// Backprop of each loss against central differences on random coordinates.
pub fn gradient_checks(coords: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let sigma0 = 0.05;
    let sys = collinear_small_system(sigma0, rng)?;
    let m = random_small_model(sys.image_len(), rng)?;
    let x0 = sys.image(rng.cn_vec(8, 1.0)?);
    let x1 = sys.image(rng.cn_vec(8, 2.0)?);
    let e = rng.sample_cn(sys.measurement_len(), sigma0 * sigma0)?;
    let t = TimePoint::new(0.35);
    let cg = CgConfig::verification();
    let rec = MeasurementRecord::from_system(ComplexVector::new(cx::add(&sys.apply(x0.as_slice()), e.as_slice()))?, sys.clone(), 0)?;
    let settings = LossSettings::new(sigma0, cg, 1e-3, 2)?;
    let probes = rng.substream("probes");

    let mut out = Vec::new();
    let b = train::loss_cfm_grad(&m, &x0, &x1, t)?;
    out.push(fd_check("CFM loss", &m, &b, |m| train::loss_cfm(m, &x0, &x1, t), coords, rng)?);
    let b = train::loss_pcfm_supervised_grad(&m, &sys, &x0, &x1, &e, t, &cg)?;
    out.push(fd_check("supervised projected loss", &m, &b, |m| train::loss_pcfm_supervised(m, &sys, &x0, &x1, &e, t, &cg), coords, rng)?);
    let b = train::loss_pcfm_unsupervised_grad(&m, &rec, &x1, t, &settings, &mut probes.clone())?;
    out.push(fd_check(
        "unsupervised projected loss",
        &m,
        &b,
        |m| train::loss_pcfm_unsupervised(m, &rec, &x1, t, &settings, &mut probes.clone()),
        coords,
        rng,
    )?);
    Ok(out)
}

fn hutchinson_vs_trace(
    name: &str,
    field: impl Fn(&[C64]) -> Result<Vec<C64>>,
    exact: f64,
    sys: &AcquisitionSystem,
    draws: usize,
    rng: &mut RngState,
) -> Result<Check> {
    let cfg = CgConfig::verification();
    let x = rng.cn_vec(sys.image_len(), 1.0)?;
    let mut mom = Moments::new(1);
    for _ in 0..draws {
        mom.push([model::hutchinson_divergence_with(&field, &x, sys, 1, rng, &cfg, 1e-3)?]);
    }
    let (mean, se) = (mom.mean(0), mom.se(0));
    Ok(Check::new(
        name,
        (mean - exact).abs() < 3.0 * se.max(1e-12),
        format!("estimate {mean:.4} vs exact {exact:.4}, 3 SE = {:.4} ({draws} draws)", 3.0 * se),
    ))
}

/// Single-probe Hutchinson means against the dense real-embedded trace
/// `tr(P_r M)` for random real-linear fields, and `2D` for the identity.
pub fn hutchinson_checks(draws: usize, rng: &mut RngState) -> Result<Vec<Check>> {
    let sys = collinear_small_system(0.0, rng)?;
    let d = sys.image_len();
    let p = dense::row_space_projection(&linops::materialize_dense(&sys)?);
    let pr = dense::real_representation(&p);
    let mut out = Vec::new();
    for k in 0..2 {
        let mr = nalgebra::DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.normal());
        let exact = (&pr * &mr).trace();
        let field = |x: &[C64]| real_lift((&mr * nalgebra::DVector::from_vec(real_embed(x))).as_slice());
        out.push(hutchinson_vs_trace(&format!("Hutchinson vs dense trace, random linear field {k}"), field, exact, &sys, draws, rng)?);
    }
    let identity = |x: &[C64]| Ok(x.to_vec());
    out.push(hutchinson_vs_trace("Hutchinson identity field, rank-deficient mask", identity, pr.trace(), &sys, draws, rng)?);
    let full = AcquisitionSystem::new(SamplingMask::full(4), CoilSensitivities::identity(4, 2), 0.0)?;
    out.push(hutchinson_vs_trace("Hutchinson identity field equals 2D", identity, 2.0 * d as f64, &full, draws, rng)?);
    Ok(out)
}

/// Monte-Carlo parameter gradients of the unsupervised loss (from `y0` only)
/// and of the supervised projected loss (with `x0`), paired on `(x0, x1, e, t)`.
/// Passes when at least 95% of the sampled coordinates agree within three
/// combined standard errors.
pub fn gsure_equivalence(draws: usize, coords: usize, rng: &mut RngState) -> Result<Check> {
    let r = gsure_report(0.05, draws, coords, rng)?;
    let need = (0.95 * r.coords as f64).ceil() as usize;
    Ok(Check::new(
        "unsupervised and supervised gradients agree in expectation",
        r.agree >= need,
        format!(
            "{} of {} coordinates within 3 combined SE, need {need}; paired {}; without divergence term {} (paired {}) ({draws} draws)",
            r.agree, r.coords, r.agree_paired, r.control_agree, r.control_agree_paired
        ),
    ))
}

/// Per-coordinate agreement counts behind [`gsure_equivalence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GsureReport {
    pub coords: usize,
    /// Coordinates where the unsupervised gradient matches the supervised one.
    pub agree: usize,
    /// Same count for the unsupervised loss with the divergence term removed.
    pub control_agree: usize,
    /// Counts using the standard error of the per-draw difference, which is
    /// far smaller because both estimators share the draw.
    pub agree_paired: usize,
    pub control_agree_paired: usize,
}

pub fn gsure_report(sigma0: f64, draws: usize, coords: usize, rng: &mut RngState) -> Result<GsureReport> {
    let sys = collinear_small_system(sigma0, rng)?;
    let prior = random_prior(&sys, rng)?;
    let m = random_small_model(sys.image_len(), rng)?;
    let n = m.params().len();
    let idx: Vec<usize> = rand::seq::index::sample(rng, n, coords.min(n)).into_vec();
    let cg = CgConfig::verification();
    let settings = LossSettings::new(sigma0, cg, 1e-3, 1)?;
    // control: the same estimator without the divergence correction is biased
    let uncorrected = LossSettings::new(0.0, cg, 1e-3, 1)?;
    let mut sup = Moments::new(idx.len());
    let mut uns = Moments::new(idx.len());
    let mut ctl = Moments::new(idx.len());
    let mut d_uns = Moments::new(idx.len());
    let mut d_ctl = Moments::new(idx.len());
    for i in 0..draws {
        let mut r = rng.substream_indexed("draw", i as u64);
        let x0 = prior.sample(&mut r);
        let x1 = sys.image(r.cn_vec(8, 2.0)?);
        let e = r.sample_cn(sys.measurement_len(), sigma0 * sigma0)?;
        let t = sample_time(&mut r, 0.0, 1.0, 1e-3)?;
        let y0 = ComplexVector::new(cx::add(&sys.apply(x0.as_slice()), e.as_slice()))?;
        let rec = MeasurementRecord::from_system(y0, sys.clone(), 0)?;
        let gs = train::loss_pcfm_supervised_grad(&m, &sys, &x0, &x1, &e, t, &cg)?;
        let gu = train::loss_pcfm_unsupervised_grad(&m, &rec, &x1, t, &settings, &mut r.clone())?;
        let gc = train::loss_pcfm_unsupervised_grad(&m, &rec, &x1, t, &uncorrected, &mut r)?;
        sup.push(idx.iter().map(|&k| gs.gradient[k]));
        uns.push(idx.iter().map(|&k| gu.gradient[k]));
        ctl.push(idx.iter().map(|&k| gc.gradient[k]));
        d_uns.push(idx.iter().map(|&k| gu.gradient[k] - gs.gradient[k]));
        d_ctl.push(idx.iter().map(|&k| gc.gradient[k] - gs.gradient[k]));
    }
    let paired = |d: &Moments| (0..idx.len()).filter(|&k| d.mean(k).abs() <= 3.0 * d.se(k)).count();
    let agree = |other: &Moments| {
        (0..idx.len())
            .filter(|&k| {
                let tol = 3.0 * (sup.se(k).powi(2) + other.se(k).powi(2)).sqrt();
                (sup.mean(k) - other.mean(k)).abs() <= tol
            })
            .count()
    };
    Ok(GsureReport {
        coords: idx.len(),
        agree: agree(&uns),
        control_agree: agree(&ctl),
        agree_paired: paired(&d_uns),
        control_agree_paired: paired(&d_ctl),
    })
}

/// Reconstruction evaluates the field exactly `2 T` times.
pub fn nfe_count(steps: usize) -> Result<Check> {
    let mut rng = RngState::new(5);
    let sys = collinear_small_system(1e-2, &mut rng)?;
    let m = random_small_model(8, &mut rng)?;
    let field = CountingField::new(ModelField(&m));
    let y0 = rng.sample_cn(sys.measurement_len(), 1.0)?;
    let cfg = ReconConfig { steps, ..ReconConfig::default() };
    reconstruct(&y0, &sys, &field, &cfg, &mut rng)?;
    Ok(Check::new(
        format!("field evaluations per reconstruction (T={steps})"),
        field.count() == 2 * steps,
        format!("{} = 2T", field.count()),
    ))
}
