//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.

use std::time::{Duration, Instant};

use pcfm::io::Tensor;
use pcfm::model::{Architecture, Checkpoint, VectorFieldModel};
use pcfm::recon::{psnr, reconstruct, ssim, ModelField, ReconConfig};
use pcfm::sim::{simulate_case, SimConfig, SimulatedCase};
use pcfm::train::{train_loop, TrainConfig};
use pcfm::verify::{self, Check};
use pcfm::RngState;

fn report(n: u32, checks: &[Check], elapsed: Duration, budget: Duration) {
    for c in checks {
        println!("  {c}");
    }
    let in_time = elapsed <= budget;
    let passed = in_time && checks.iter().all(|c| c.passed);
    println!(
        "criterion {n}: {} ({:.1}s, budget {}s)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(passed, "criterion {n} failed");
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[test]
fn criterion_01_operator_suite() {
    let (checks, dt) = timed(|| verify::operator_checks(&mut RngState::new(101)).unwrap());
    report(1, &checks, dt, Duration::from_secs(10));
}

#[test]
fn criterion_02_completeness() {
    let (checks, dt) = timed(|| verify::completeness_checks(64, &mut RngState::new(102)).unwrap());
    report(2, &checks, dt, Duration::from_secs(30));
}

#[test]
fn criterion_03_measurement_field_agreement() {
    let (check, dt) = timed(|| verify::field_agreement(100, &mut RngState::new(103)).unwrap());
    report(3, &[check], dt, Duration::from_secs(30));
}

#[test]
fn criterion_04_measurement_consistency() {
    let (checks, dt) = timed(|| verify::measurement_consistency(50, &mut RngState::new(104)).unwrap());
    report(4, &checks, dt, Duration::from_secs(60));
}

#[test]
fn criterion_05_posterior_moments() {
    let (checks, dt) = timed(|| verify::posterior_moments(10_000, &mut RngState::new(105)).unwrap());
    report(5, &checks, dt, Duration::from_secs(60));
}

#[test]
fn criterion_06_gsure_gradient_equivalence() {
    let (check, dt) = timed(|| verify::gsure_equivalence(10_000, 32, &mut RngState::new(106)).unwrap());
    report(6, &[check], dt, Duration::from_secs(300));
}

#[test]
fn criterion_07_hutchinson() {
    let (checks, dt) = timed(|| verify::hutchinson_checks(10_000, &mut RngState::new(107)).unwrap());
    report(7, &checks, dt, Duration::from_secs(30));
}

#[test]
fn criterion_08_gradient_checks() {
    let (checks, dt) = timed(|| verify::gradient_checks(32, &mut RngState::new(108)).unwrap());
    report(8, &checks, dt, Duration::from_secs(120));
}

struct DeskMetrics {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
}

fn evaluate(model: &VectorFieldModel, cases: &[SimulatedCase], steps: usize) -> DeskMetrics {
    let cfg = ReconConfig { steps, ..ReconConfig::default() };
    let field = ModelField(model);
    let mut m = DeskMetrics { psnr: Vec::new(), ssim: Vec::new() };
    for c in cases {
        let mut rng = RngState::new(cfg.seed).substream_indexed("case", c.record.seed());
        let r = reconstruct(c.record.y0(), c.record.system(), &field, &cfg, &mut rng).unwrap();
        m.psnr.push(psnr(&c.x0, &r.image).unwrap());
        m.ssim.push(ssim(&c.x0, &r.image).unwrap());
    }
    m
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and standard error of the paired differences `b - a`.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    (m, (var / d.len() as f64).sqrt())
}

#[test]
fn criterion_09_desk_experiment() {
    let start = Instant::now();
    let sim = SimConfig { grid: 16, coils: 4, accel: 4.0, ..SimConfig::default() };
    let cases: Vec<SimulatedCase> = (0..288).map(|i| simulate_case(&sim, i).unwrap()).collect();
    let (train, test) = cases.split_at(256);
    let records: Vec<_> = train.iter().map(|c| c.record.clone()).collect();
    let model = VectorFieldModel::init(Architecture::desk(256), &mut RngState::new(0).substream("init")).unwrap();
    let cfg = TrainConfig { steps: 20_000, ema_every: 20, ..TrainConfig::default() };
    let out = train_loop(model, &records, &cfg, None).unwrap();

    let zero_filled: Vec<f64> = test
        .iter()
        .map(|c| psnr(&c.x0, &c.record.system().apply_adjoint(c.record.y0()).unwrap()).unwrap())
        .collect();
    let grid = [5usize, 10, 20, 40];
    let runs: Vec<DeskMetrics> = grid.iter().map(|&t| evaluate(&out.ema, test, t)).collect();
    let mut checks = Vec::new();
    for (t, m) in grid.iter().zip(&runs) {
        println!("  T={t}: PSNR {:.2} dB, SSIM {:.4}", mean(&m.psnr), mean(&m.ssim));
    }
    let default_run = &runs[1];
    let gain = mean(&default_run.psnr) - mean(&zero_filled);
    checks.push(Check {
        name: "PSNR gain over zero-filled at T=10".into(),
        passed: gain >= 3.0,
        detail: format!("{:.2} dB - {:.2} dB = {gain:.2} dB >= 3 dB", mean(&default_run.psnr), mean(&zero_filled)),
    });
    // quality must not drop beyond two paired standard errors as T doubles
    for w in 0..grid.len() - 1 {
        let (d, se) = paired(&runs[w].psnr, &runs[w + 1].psnr);
        checks.push(Check {
            name: format!("PSNR non-decreasing from T={} to T={}", grid[w], grid[w + 1]),
            passed: d >= -2.0 * se,
            detail: format!("paired change {d:+.3} dB, SE {se:.3}"),
        });
    }
    report(9, &checks, start.elapsed(), Duration::from_secs(3600));
}

#[test]
fn criterion_10_nfe_accounting() {
    let (checks, dt) = timed(|| [5, 10, 20].map(|t| verify::nfe_count(t).unwrap()));
    report(10, &checks, dt, Duration::from_secs(30));
}

/// Simulate, train and reconstruct with fixed seeds; returns every produced byte.
fn pipeline_bytes() -> Vec<u8> {
    let sim = SimConfig { grid: 8, coils: 2, accel: 2.0, ..SimConfig::default() };
    let cases: Vec<_> = (0..12).map(|i| simulate_case(&sim, i).unwrap()).collect();
    let records: Vec<_> = cases[..8].iter().map(|c| c.record.clone()).collect();
    let arch = Architecture { pixels: 64, hidden: 32, depth: 2, time_dim: 8 };
    let model = VectorFieldModel::init(arch, &mut RngState::new(0).substream("init")).unwrap();
    let cfg = TrainConfig { steps: 200, batch: 4, ema_every: 10, learning_rate: 1e-3, ..TrainConfig::default() };
    let mut trace = Vec::new();
    let out = train_loop(model, &records, &cfg, Some(&mut trace)).unwrap();
    let mut bytes = Vec::new();
    Checkpoint { model: out.ema.clone(), step: cfg.steps, ema: true }.write_to(&mut bytes).unwrap();
    // wall-clock column excluded
    for e in &out.trace {
        bytes.extend_from_slice(&e.loss.to_le_bytes());
    }
    let rc = ReconConfig { steps: 5, ..ReconConfig::default() };
    for c in &cases[8..] {
        let mut rng = RngState::new(rc.seed).substream_indexed("case", c.record.seed());
        let r = reconstruct(c.record.y0(), c.record.system(), &ModelField(&out.ema), &rc, &mut rng).unwrap();
        Tensor::from_image(&r.image).write_to(&mut bytes).unwrap();
        bytes.extend_from_slice(&psnr(&c.x0, &r.image).unwrap().to_le_bytes());
        bytes.extend_from_slice(&ssim(&c.x0, &r.image).unwrap().to_le_bytes());
    }
    bytes
}

#[test]
fn criterion_11_determinism() {
    let ((a, b), dt) = timed(|| (pipeline_bytes(), pipeline_bytes()));
    let check = Check {
        name: "repeated pipeline output is bit-identical".into(),
        passed: a == b,
        detail: format!("{} bytes compared", a.len()),
    };
    report(11, &[check], dt, Duration::from_secs(600));
}
