//! Synthetic phantoms, coil sensitivities, Cartesian masks and k-space data.

use rand::seq::index;

use crate::error::{ensure, Result};
use crate::linops::{AcquisitionSystem, CoilSensitivities, SamplingMask};
use crate::numerics::{cx, dft2, ComplexImage, ComplexVector, Direction, RngState, C64};
use crate::train::MeasurementRecord;

fn coord(k: usize, n: usize) -> f64 {
    (k as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn uniform(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// 3 to 6 smooth elliptical blobs under a random linear phase ramp, plus coil
/// maps from low-order complex polynomials normalized to unit sum of squares.
pub fn simulate_phantom(grid: usize, coils: usize, rng: &mut RngState) -> Result<(ComplexImage, CoilSensitivities)> {
    ensure!((8..=64).contains(&grid), InvalidArgument, "grid must lie in [8, 64], got {grid}");
    ensure!((1..=8).contains(&coils), InvalidArgument, "coils must lie in [1, 8], got {coils}");
    let mut img_rng = rng.substream("phantom");
    let blobs = 3 + img_rng.below(4);
    let shapes: Vec<[f64; 6]> = (0..blobs)
        .map(|_| {
            [
                uniform(&mut img_rng, -0.5, 0.5),
                uniform(&mut img_rng, -0.5, 0.5),
                uniform(&mut img_rng, 0.15, 0.55),
                uniform(&mut img_rng, 0.15, 0.55),
                uniform(&mut img_rng, 0.0, std::f64::consts::PI),
                uniform(&mut img_rng, 0.3, 1.0),
            ]
        })
        .collect();
    let phase = [
        uniform(&mut img_rng, -std::f64::consts::PI, std::f64::consts::PI),
        uniform(&mut img_rng, -1.0, 1.0),
        uniform(&mut img_rng, -1.0, 1.0),
    ];
    let x0 = ComplexImage::from_fn(grid, grid, |i, j| {
        let (v, u) = (coord(i, grid), coord(j, grid));
        let mut mag = 0.0;
        for &[cu, cv, au, av, rot, amp] in &shapes {
            let (du, dv) = (u - cu, v - cv);
            let (s, c) = rot.sin_cos();
            let (pu, pv) = ((c * du + s * dv) / au, (-s * du + c * dv) / av);
            let r2 = pu * pu + pv * pv;
            mag += amp / (1.0 + (8.0 * (r2 - 1.0)).exp());
        }
        C64::from_polar(mag, phase[0] + phase[1] * u + phase[2] * v)
    });

    let mut sens_rng = rng.substream("sensitivities");
    let mut polys = Vec::with_capacity(coils);
    for c in 0..coils {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / coils as f64 + uniform(&mut sens_rng, -0.3, 0.3);
        let mut coef = [C64::new(0.0, 0.0); 6];
        for z in &mut coef {
            *z = C64::new(sens_rng.normal(), sens_rng.normal()) * 0.15;
        }
        coef[0] += C64::from_polar(1.0, uniform(&mut sens_rng, -3.0, 3.0));
        if coils > 1 {
            coef[1] += 0.7 * angle.cos();
            coef[2] += 0.7 * angle.sin();
        }
        polys.push(coef);
    }
    let raw: Vec<ComplexImage> = polys
        .iter()
        .map(|p| {
            ComplexImage::from_fn(grid, grid, |i, j| {
                let (v, u) = (coord(i, grid), coord(j, grid));
                p[0] + p[1] * u + p[2] * v + p[3] * (u * v) + p[4] * (u * u) + p[5] * (v * v)
            })
        })
        .collect();
    let sos: Vec<f64> = (0..grid * grid).map(|k| raw.iter().map(|m| m.as_slice()[k].norm_sqr()).sum()).collect();
    ensure!(sos.iter().all(|&s| s > 1e-12), Singular, "simulated coil maps vanish at a pixel");
    let maps = raw
        .into_iter()
        .map(|m| m.with_data(m.as_slice().iter().zip(&sos).map(|(z, s)| z / s.sqrt()).collect()))
        .collect();
    Ok((x0, CoilSensitivities::new(maps)?))
}

/// `round(grid / accel)` kept lines: the `acs` lowest frequencies plus lines
/// drawn uniformly without replacement from the rest.
pub fn generate_mask(grid: usize, accel: f64, acs: usize, rng: &mut RngState) -> Result<SamplingMask> {
    ensure!(accel >= 1.0 && accel.is_finite(), InvalidArgument, "acceleration must be >= 1, got {accel}");
    ensure!(grid >= 1, InvalidArgument, "grid must be positive");
    let budget = ((grid as f64 / accel).round() as usize).clamp(1, grid);
    ensure!(acs <= budget, InvalidArgument, "{acs} ACS lines exceed the budget of {budget} lines at acceleration {accel}");
    let mut kept = vec![false; grid];
    for l in SamplingMask::acs_lines(grid, acs) {
        kept[l] = true;
    }
    let rest: Vec<usize> = (0..grid).filter(|&l| !kept[l]).collect();
    for k in index::sample(rng, rest.len(), budget - acs) {
        kept[rest[k]] = true;
    }
    SamplingMask::new(kept, acs)
}

/// `y0 = A x0 + e`, `e ~ CN(0, sigma0^2 I)`.
pub fn simulate_measurement(
    x0: &ComplexImage,
    sens: &CoilSensitivities,
    mask: &SamplingMask,
    sigma0: f64,
    rng: &mut RngState,
    seed: u64,
) -> Result<MeasurementRecord> {
    let sys = AcquisitionSystem::new(mask.clone(), sens.clone(), sigma0)?;
    let mut y = sys.apply_forward(x0)?.into_vec();
    let e = rng.cn_vec(y.len(), sigma0 * sigma0)?;
    cx::axpy(C64::new(1.0, 0.0), &e, &mut y);
    MeasurementRecord::from_system(ComplexVector::new(y)?, sys, seed)
}

/// `(sum_c |S_c|^2)^{-1} sum_c conj(S_c) F^{-1} k_c` from fully sampled per-coil k-space.
pub fn sense_combine(kspace: &[ComplexImage], sens: &CoilSensitivities) -> Result<ComplexImage> {
    ensure!(kspace.len() == sens.coils(), Shape, "{} k-space coils vs {} maps", kspace.len(), sens.coils());
    let (h, w) = sens.shape();
    let mut acc = vec![C64::new(0.0, 0.0); h * w];
    for (k, s) in kspace.iter().zip(sens.maps()) {
        ensure!(k.shape() == (h, w), Shape, "k-space {:?} vs maps {:?}", k.shape(), (h, w));
        let img = dft2(k, Direction::Inverse);
        for ((a, z), sc) in acc.iter_mut().zip(img.as_slice()).zip(s.as_slice()) {
            *a += sc.conj() * z;
        }
    }
    for (a, s) in acc.iter_mut().zip(sens.sum_of_squares()) {
        *a /= s;
    }
    ComplexImage::new(h, w, acc)
}

/// Per-coil fully sampled k-space `F S_c x`.
pub fn coil_kspace(x: &ComplexImage, sens: &CoilSensitivities) -> Result<Vec<ComplexImage>> {
    ensure!(x.shape() == sens.shape(), Shape, "image {:?} vs maps {:?}", x.shape(), sens.shape());
    Ok(sens
        .maps()
        .iter()
        .map(|s| {
            let weighted = x.with_data(x.as_slice().iter().zip(s.as_slice()).map(|(a, b)| a * b).collect());
            dft2(&weighted, Direction::Forward)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub grid: usize,
    pub coils: usize,
    pub accel: f64,
    pub acs: usize,
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    /// 16x16, 4 coils, 4x acceleration, 2 ACS lines, sigma0 = 1e-2.
    fn default() -> Self {
        Self { grid: 16, coils: 4, accel: 4.0, acs: 2, sigma0: 1e-2, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub x0: ComplexImage,
    pub record: MeasurementRecord,
}

/// Case `index` of a simulated dataset; independent of how many other cases
/// are generated.
pub fn simulate_case(cfg: &SimConfig, index: u64) -> Result<SimulatedCase> {
    let root = RngState::new(cfg.seed).substream_indexed("case", index);
    let (x0, sens) = simulate_phantom(cfg.grid, cfg.coils, &mut root.substream("image"))?;
    let mask = generate_mask(cfg.grid, cfg.accel, cfg.acs, &mut root.substream("mask"))?;
    let record_seed = cfg.seed.wrapping_mul(0x100000001b3) ^ index;
    let record = simulate_measurement(&x0, &sens, &mask, cfg.sigma0, &mut root.substream("noise"), record_seed)?;
    Ok(SimulatedCase { x0, record })
}
