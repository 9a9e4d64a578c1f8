//! Training objectives (supervised CFM, supervised and unsupervised projected
//! CFM), the maximum-likelihood target, and the AdamW + EMA optimization loop.
//!
//! Every loss is assembled from per-example "plans": the model inputs of one
//! example (the field input plus `x +/- h b` for each divergence probe) are
//! stacked into one batch, evaluated with one forward pass, and the per-row
//! cotangents are pushed back with one reverse pass.

use std::io::Write;
use std::time::Instant;

use crate::error::{ensure, Error, Result};
use crate::flow::{sample_time, Schedule, TimePoint, DEFAULT_TIME_MARGIN};
use crate::linops::{self, AcquisitionSystem, CgConfig, CoilSensitivities, LinearOperator, SamplingMask};
use crate::model::{self, BatchField, GradientBundle, VectorFieldModel};
use crate::numerics::{cx, ComplexImage, ComplexVector, RngState, C64};

/// Knobs shared by the projected losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub sigma0: f64,
    pub cg: CgConfig,
    pub eps_jvp: f64,
    pub n_probes: usize,
}

impl LossSettings {
    pub fn new(sigma0: f64, cg: CgConfig, eps_jvp: f64, n_probes: usize) -> Result<Self> {
        ensure!(sigma0 >= 0.0 && sigma0.is_finite(), InvalidArgument, "sigma0 must be >= 0, got {sigma0}");
        ensure!(eps_jvp > 0.0, InvalidArgument, "eps_jvp must be positive");
        ensure!(n_probes >= 1, InvalidArgument, "need at least one probe");
        Ok(Self { sigma0, cg, eps_jvp, n_probes })
    }

    /// sigma0 = 1e-2, k = 10, one probe, jvp step 1e-3.
    pub fn training() -> Self {
        Self { sigma0: 1e-2, cg: CgConfig::training(), eps_jvp: 1e-3, n_probes: 1 }
    }
}

/// Undersampled measurement of one case. Holds no image-space ground truth.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    y0: ComplexVector,
    sys: AcquisitionSystem,
    seed: u64,
}

impl MeasurementRecord {
    pub fn new(y0: ComplexVector, mask: SamplingMask, sens: CoilSensitivities, sigma0: f64, seed: u64) -> Result<Self> {
        let sys = AcquisitionSystem::new(mask, sens, sigma0)?;
        Self::from_system(y0, sys, seed)
    }

    pub fn from_system(y0: ComplexVector, sys: AcquisitionSystem, seed: u64) -> Result<Self> {
        ensure!(
            y0.len() == sys.measurement_len(),
            Shape,
            "measurement has {} samples, system expects {}",
            y0.len(),
            sys.measurement_len()
        );
        ensure!(y0.is_finite(), NonFinite, "measurement y0");
        Ok(Self { y0, sys, seed })
    }

    pub fn y0(&self) -> &ComplexVector {
        &self.y0
    }

    pub fn system(&self) -> &AcquisitionSystem {
        &self.sys
    }

    pub fn mask(&self) -> &SamplingMask {
        self.sys.mask()
    }

    pub fn sens(&self) -> &CoilSensitivities {
        self.sys.sens()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

// ============================================================================
// Loss plans
// ============================================================================

/// One example: `rows[0]` is the field input, then `+h b_k`, `-h b_k` per probe.
/// Loss is `||P (v(rows[0]) - target)||^2 + kappa * mean_k Re<b_k, jvp_k>`.
struct Plan<'a> {
    rows: Vec<Vec<C64>>,
    t: f64,
    target: Vec<C64>,
    probes: Vec<Vec<C64>>,
    step: f64,
    kappa: f64,
    projector: Option<&'a AcquisitionSystem>,
}

impl Plan<'_> {
    fn finish(&self, out: &[Vec<C64>], cg: &CgConfig) -> Result<(f64, Vec<Vec<C64>>)> {
        let diff = cx::sub(&out[0], &self.target);
        let r = match self.projector {
            Some(sys) => linops::projection(sys, &diff, cg)?,
            None => diff,
        };
        let mut loss = cx::norm_sqr(&r);
        // P is an orthogonal projection, so d||P e||^2 = 2 P e.
        let mut cots = Vec::with_capacity(self.rows.len());
        cots.push(r.iter().map(|z| z * 2.0).collect::<Vec<_>>());
        let n = self.probes.len().max(1) as f64;
        for (k, b) in self.probes.iter().enumerate() {
            let jb = cx::lincomb(0.5 / self.step, &out[1 + 2 * k], -0.5 / self.step, &out[2 + 2 * k]);
            loss += self.kappa / n * cx::dot(b, &jb).re;
            let c = self.kappa / (2.0 * self.step * n);
            cots.push(b.iter().map(|z| z * c).collect());
            cots.push(b.iter().map(|z| z * -c).collect());
        }
        Ok((loss, cots))
    }
}

fn plan_cfm<'a>(x0: &ComplexImage, x1: &ComplexImage, t: TimePoint) -> Result<Plan<'a>> {
    x0.check_same_shape(x1)?;
    let k = Schedule::Linear.eval(t);
    Ok(Plan {
        rows: vec![cx::lincomb(k.a, x0.as_slice(), k.b, x1.as_slice())],
        t: t.value(),
        target: cx::lincomb(k.da, x0.as_slice(), k.db, x1.as_slice()),
        probes: Vec::new(),
        step: 1.0,
        kappa: 0.0,
        projector: None,
    })
}

fn plan_supervised<'a>(
    sys: &'a AcquisitionSystem,
    x0: &ComplexImage,
    x1: &ComplexImage,
    noise: &ComplexVector,
    t: TimePoint,
) -> Result<Plan<'a>> {
    x0.check_same_shape(x1)?;
    ensure!(x0.shape() == sys.image_shape(), Shape, "image {:?} vs system {:?}", x0.shape(), sys.image_shape());
    ensure!(noise.len() == sys.measurement_len(), Shape, "noise length {}", noise.len());
    let k = Schedule::Linear.eval(t);
    let xt = cx::lincomb(k.a, x0.as_slice(), k.b, x1.as_slice());
    let mut yt = sys.apply(&xt);
    cx::axpy(C64::new(k.a, 0.0), noise.as_slice(), &mut yt);
    Ok(Plan {
        rows: vec![sys.adjoint(&yt)],
        t: t.value(),
        target: cx::lincomb(k.da, x0.as_slice(), k.db, x1.as_slice()),
        probes: Vec::new(),
        step: 1.0,
        kappa: 0.0,
        projector: Some(sys),
    })
}

fn plan_unsupervised<'a>(
    rec: &'a MeasurementRecord,
    x1: &ComplexImage,
    t: TimePoint,
    settings: &LossSettings,
    rng: &mut RngState,
) -> Result<Plan<'a>> {
    let sys = &rec.sys;
    ensure!(x1.shape() == sys.image_shape(), Shape, "x1 {:?} vs system {:?}", x1.shape(), sys.image_shape());
    let k = Schedule::Linear.eval(t);
    let y1 = sys.apply(x1.as_slice());
    let yt = cx::lincomb(k.a, rec.y0.as_slice(), k.b, &y1);
    let uy = cx::lincomb(k.da, rec.y0.as_slice(), k.db, &y1);
    let target = linops::pseudoinverse(sys, &uy, &settings.cg)?;
    let w = sys.adjoint(&yt);
    let step = model::jvp_step(&w, settings.eps_jvp);
    let kappa = k.a * k.da * settings.sigma0 * settings.sigma0;
    let mut rows = vec![w.clone()];
    let mut probes = Vec::new();
    if kappa != 0.0 {
        for _ in 0..settings.n_probes {
            let b = model::draw_probe(sys, rng, &settings.cg)?;
            rows.push(cx::lincomb(1.0, &w, step, &b));
            rows.push(cx::lincomb(1.0, &w, -step, &b));
            probes.push(b);
        }
    }
    Ok(Plan { rows, t: t.value(), target, probes, step, kappa, projector: Some(sys) })
}

fn stack<'p>(plans: &'p [Plan<'_>]) -> (Vec<&'p [C64]>, Vec<f64>) {
    let mut inputs = Vec::new();
    let mut ts = Vec::new();
    for p in plans {
        for r in &p.rows {
            inputs.push(r.as_slice());
            ts.push(p.t);
        }
    }
    (inputs, ts)
}

fn evaluate<F: BatchField + ?Sized>(field: &F, plans: &[Plan<'_>], cg: &CgConfig) -> Result<f64> {
    let (inputs, ts) = stack(plans);
    let out = field.eval_batch(&inputs, &ts)?;
    let mut total = 0.0;
    let mut at = 0;
    for p in plans {
        let (loss, _) = p.finish(&out[at..at + p.rows.len()], cg)?;
        total += loss;
        at += p.rows.len();
    }
    Ok(total)
}

/// Weighted sum of plan losses and its parameter gradient, one forward and one
/// reverse pass over the stacked batch.
fn evaluate_grad(m: &VectorFieldModel, plans: &[Plan<'_>], cg: &CgConfig, weight: f64) -> Result<GradientBundle> {
    let (inputs, ts) = stack(plans);
    let (out, cache) = m.forward_batch(&inputs, &ts)?;
    let mut total = 0.0;
    let mut cots = Vec::with_capacity(out.len());
    let mut at = 0;
    for p in plans {
        let (loss, c) = p.finish(&out[at..at + p.rows.len()], cg)?;
        total += weight * loss;
        cots.extend(c.into_iter().map(|v| v.into_iter().map(|z| z * weight).collect::<Vec<_>>()));
        at += p.rows.len();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let gradient = m.backward(&cache, &cots)?;
    Ok(GradientBundle { loss: total, gradient })
}

// ============================================================================
// Public losses
// ============================================================================

/// `||v(x_t, t) - (a' x0 + b' x1)||^2` with `x_t = a x0 + b x1`.
pub fn loss_cfm<F: BatchField + ?Sized>(field: &F, x0: &ComplexImage, x1: &ComplexImage, t: TimePoint) -> Result<f64> {
    evaluate(field, &[plan_cfm(x0, x1, t)?], &CgConfig::verification())
}

pub fn loss_cfm_grad(m: &VectorFieldModel, x0: &ComplexImage, x1: &ComplexImage, t: TimePoint) -> Result<GradientBundle> {
    evaluate_grad(m, &[plan_cfm(x0, x1, t)?], &CgConfig::verification(), 1.0)
}

/// `||P [v(A^* y_t, t) - (a' x0 + b' x1)]||^2` with `y_t = A(a x0 + b x1) + a e`.
/// The noise `e ~ CN(0, sigma0^2 I)` is supplied by the caller.
pub fn loss_pcfm_supervised<F: BatchField + ?Sized>(
    field: &F,
    sys: &AcquisitionSystem,
    x0: &ComplexImage,
    x1: &ComplexImage,
    noise: &ComplexVector,
    t: TimePoint,
    cg: &CgConfig,
) -> Result<f64> {
    evaluate(field, &[plan_supervised(sys, x0, x1, noise, t)?], cg)
}

pub fn loss_pcfm_supervised_grad(
    m: &VectorFieldModel,
    sys: &AcquisitionSystem,
    x0: &ComplexImage,
    x1: &ComplexImage,
    noise: &ComplexVector,
    t: TimePoint,
    cg: &CgConfig,
) -> Result<GradientBundle> {
    evaluate_grad(m, &[plan_supervised(sys, x0, x1, noise, t)?], cg, 1.0)
}

/// Maximum-likelihood image-space velocity for measurement-space velocity
/// `u_y`. The noise covariance is a scalar multiple of the identity, so the
/// weighted pseudoinverse reduces to `A^+ u_y`.
pub fn ml_estimate(sys: &AcquisitionSystem, u_y: &ComplexVector, cfg: &CgConfig) -> Result<ComplexImage> {
    linops::apply_pseudoinverse(sys, u_y, cfg)
}

/// `||P [v(A^* y_t, t) - A^+ u_y]||^2 + a a' sigma0^2 div(P v)` where
/// `y_t = a y0 + b A x1`, `u_y = a' y0 + b' A x1`, and the divergence is the
/// Hutchinson estimate over the real embedding (probes `P z`, `z ~ CN(0, 2I)`).
/// The weight is negative for `a' < 0` and kept signed.
pub fn loss_pcfm_unsupervised<F: BatchField + ?Sized>(
    field: &F,
    rec: &MeasurementRecord,
    x1: &ComplexImage,
    t: TimePoint,
    settings: &LossSettings,
    rng: &mut RngState,
) -> Result<f64> {
    evaluate(field, &[plan_unsupervised(rec, x1, t, settings, rng)?], &settings.cg)
}

pub fn loss_pcfm_unsupervised_grad(
    m: &VectorFieldModel,
    rec: &MeasurementRecord,
    x1: &ComplexImage,
    t: TimePoint,
    settings: &LossSettings,
    rng: &mut RngState,
) -> Result<GradientBundle> {
    evaluate_grad(m, &[plan_unsupervised(rec, x1, t, settings, rng)?], &settings.cg, 1.0)
}

// ============================================================================
// Optimizer and averaging
// ============================================================================

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// `ema <- rate * ema + (1 - rate) * theta` every `every` steps.
#[derive(Debug, Clone)]
pub struct Ema {
    rate: f64,
    every: u64,
    params: Vec<f64>,
    updates: u64,
}

impl Ema {
    pub fn new(initial: &[f64], rate: f64, every: u64) -> Result<Self> {
        ensure!(rate > 0.0 && rate <= 1.0, InvalidArgument, "EMA rate must lie in (0, 1], got {rate}");
        ensure!(every >= 1, InvalidArgument, "EMA interval must be >= 1");
        Ok(Self { rate, every, params: initial.to_vec(), updates: 0 })
    }

    /// Called after optimizer step `step` (1-based).
    pub fn observe(&mut self, step: u64, params: &[f64]) {
        if !step.is_multiple_of(self.every) {
            return;
        }
        for (e, p) in self.params.iter_mut().zip(params) {
            *e = self.rate * *e + (1.0 - self.rate) * p;
        }
        self.updates += 1;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

// ============================================================================
// Training loop
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_rate: f64,
    pub ema_every: u64,
    pub batch: usize,
    pub cg_iters_train: usize,
    pub cg_tol_train: f64,
    pub sigma0: f64,
    pub time_loc: f64,
    pub time_scale: f64,
    pub time_margin: f64,
    pub eps_jvp: f64,
    pub n_probes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-4,
            weight_decay: 0.1,
            ema_rate: 0.99,
            ema_every: 100,
            batch: 16,
            cg_iters_train: 10,
            cg_tol_train: 1e-4,
            sigma0: 1e-2,
            time_loc: 0.0,
            time_scale: 1.0,
            time_margin: DEFAULT_TIME_MARGIN,
            eps_jvp: 1e-3,
            n_probes: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0, InvalidArgument, "learning_rate must be positive");
        ensure!(self.weight_decay >= 0.0, InvalidArgument, "weight_decay must be >= 0");
        ensure!(self.batch >= 1, InvalidArgument, "batch must be >= 1");
        ensure!(self.time_scale > 0.0, InvalidArgument, "time scale must be positive");
        ensure!((0.0..0.5).contains(&self.time_margin), InvalidArgument, "time margin must lie in [0, 0.5)");
        Ema::new(&[], self.ema_rate, self.ema_every)?;
        self.loss_settings()?;
        Ok(())
    }

    pub fn loss_settings(&self) -> Result<LossSettings> {
        LossSettings::new(
            self.sigma0,
            CgConfig::new(self.cg_iters_train, self.cg_tol_train)?,
            self.eps_jvp,
            self.n_probes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl TraceEntry {
    /// `step<TAB>loss<TAB>wall_ms`
    pub fn to_line(&self) -> String {
        format!("{}\t{:e}\t{:.3}", self.step, self.loss, self.wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: VectorFieldModel,
    pub ema: VectorFieldModel,
    pub trace: Vec<TraceEntry>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Records with the `batch` smallest keys form the batch at `step`; keys depend
/// only on the record seed, so the batch is independent of dataset order.
fn select_batch(data: &[MeasurementRecord], step: u64, seed: u64, batch: usize) -> Vec<usize> {
    let salt = splitmix64(seed ^ splitmix64(step));
    let mut keyed: Vec<(u64, u64, usize)> = data
        .iter()
        .enumerate()
        .map(|(i, r)| (splitmix64(r.seed ^ salt), r.seed, i))
        .collect();
    let b = batch.min(keyed.len());
    keyed.select_nth_unstable(b - 1);
    keyed.truncate(b);
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

fn example_rng(seed: u64, record_seed: u64, step: u64) -> RngState {
    RngState::new(seed)
        .substream_indexed("example", splitmix64(record_seed))
        .substream_indexed("step", step)
}

fn batch_gradient(
    model: &VectorFieldModel,
    data: &[MeasurementRecord],
    cfg: &TrainConfig,
    settings: &LossSettings,
    step: u64,
    weight: f64,
) -> Result<GradientBundle> {
    let pixels = model.architecture().pixels;
    let idx = select_batch(data, step, cfg.seed, cfg.batch);
    let mut plans = Vec::with_capacity(idx.len());
    for &i in &idx {
        let rec = &data[i];
        let rng = example_rng(cfg.seed, rec.seed, step);
        let t = sample_time(&mut rng.substream("time"), cfg.time_loc, cfg.time_scale, cfg.time_margin)?;
        let (h, w) = rec.sys.image_shape();
        let x1 = ComplexImage::new(h, w, rng.substream("x1").cn_vec(pixels, 2.0)?)?;
        plans.push(plan_unsupervised(rec, &x1, t, settings, &mut rng.substream("probes"))?);
    }
    evaluate_grad(model, &plans, &settings.cg, weight)
}

/// Unsupervised training: per step draw a batch, a time, `x1 ~ CN(0, 2I)` and
/// probes per example, take one AdamW step on the batch-mean loss, and update
/// the EMA. Each trace line is written to `trace_out` as it is produced.
pub fn train_loop(
    model: VectorFieldModel,
    data: &[MeasurementRecord],
    cfg: &TrainConfig,
    mut trace_out: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    ensure!(!data.is_empty(), InvalidArgument, "training set is empty");
    let pixels = model.architecture().pixels;
    let mut seeds = std::collections::HashSet::new();
    for r in data {
        ensure!(r.sys.image_len() == pixels, Shape, "record image has {} pixels, model expects {pixels}", r.sys.image_len());
        ensure!(seeds.insert(r.seed), InvalidArgument, "duplicate record seed {}", r.seed);
    }
    let settings = cfg.loss_settings()?;
    let mut model = model;
    let mut opt = AdamW::new(model.params().len(), cfg.learning_rate, cfg.weight_decay);
    let mut ema = Ema::new(model.params(), cfg.ema_rate, cfg.ema_every)?;
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    let start = Instant::now();
    let weight = 1.0 / cfg.batch.min(data.len()) as f64;

    for step in 1..=cfg.steps {
        let bundle = batch_gradient(&model, data, cfg, &settings, step, weight).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at step {step}")),
            Error::Singular(msg) => Error::Singular(format!("{msg} at step {step}")),
            other => other,
        })?;
        opt.step(model.params_mut(), &bundle.gradient);
        if !model.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        ema.observe(step, model.params());
        let entry = TraceEntry { step, loss: bundle.loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        if let Some(w) = trace_out.as_mut() {
            writeln!(w, "{}", entry.to_line())?;
        }
        trace.push(entry);
    }
    let ema_model = VectorFieldModel::from_params(*model.architecture(), ema.params().to_vec())?;
    Ok(TrainOutput { model, ema: ema_model, trace })
}
