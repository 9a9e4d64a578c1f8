//! Time-conditioned residual MLP over the real embedding of an image, with
//! hand-written reverse-mode gradients, finite-difference Jacobian-vector
//! products and the Hutchinson divergence estimator.
//!
//! Layer `l` computes `z_l = W_l h_{l-1} + b_l + U_l tau(t)`; the first hidden
//! layer is `h_0 = silu(z_0)`, later ones are residual `h_l = h_{l-1} + silu(z_l)`,
//! and the head is affine. `tau(t)` holds sinusoidal time features.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{ensure, Error, Result};
use crate::linops::{self, CgConfig, LinearOperator};
use crate::numerics::{cx, real_embed, real_lift, ComplexImage, RngState, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Complex pixels D; the network sees 2D reals.
    pub pixels: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
}

impl Architecture {
    /// 3 hidden layers of width 256 with 32 time features.
    pub fn desk(pixels: usize) -> Self {
        Self { pixels, hidden: 256, depth: 3, time_dim: 32 }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.pixels
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 { self.input_dim() } else { self.hidden }
    }

    pub fn param_count(&self) -> usize {
        let hidden: usize = (0..self.depth)
            .map(|l| self.hidden * (self.layer_in(l) + 1 + self.time_dim))
            .sum();
        hidden + self.input_dim() * (self.hidden + 1)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.pixels >= 1, InvalidArgument, "architecture needs pixels >= 1");
        ensure!(self.hidden >= 1 && self.depth >= 1, InvalidArgument, "architecture needs hidden, depth >= 1");
        ensure!(self.time_dim >= 2 && self.time_dim.is_multiple_of(2), InvalidArgument, "time_dim must be even and >= 2");
        Ok(())
    }
}

/// Offsets of one affine block inside the flat parameter vector. Matrices are
/// column-major.
#[derive(Debug, Clone, Copy)]
struct Block {
    w: usize,
    b: usize,
    u: usize,
    rows: usize,
    cols: usize,
}

fn layout(arch: &Architecture) -> (Vec<Block>, Block) {
    let mut off = 0;
    let mut blocks = Vec::with_capacity(arch.depth);
    for l in 0..arch.depth {
        let (rows, cols) = (arch.hidden, arch.layer_in(l));
        let w = off;
        let b = w + rows * cols;
        let u = b + rows;
        off = u + rows * arch.time_dim;
        blocks.push(Block { w, b, u, rows, cols });
    }
    let (rows, cols) = (arch.input_dim(), arch.hidden);
    let head = Block { w: off, b: off + rows * cols, u: usize::MAX, rows, cols };
    (blocks, head)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features with frequencies spaced geometrically in `[1, 200]`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = (frac * 200f64.ln()).exp();
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Activations kept from a batched forward pass for the reverse sweep.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    tau: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    hidden: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.input.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl VectorFieldModel {
    /// LeCun-normal hidden weights, zero biases and a zero head, so the initial
    /// field is identically zero.
    pub fn init(arch: Architecture, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let (blocks, _) = layout(&arch);
        for blk in &blocks {
            let s = 1.0 / (blk.cols as f64).sqrt();
            for p in &mut params[blk.w..blk.w + blk.rows * blk.cols] {
                *p = s * rng.normal();
            }
            let s = 1.0 / (arch.time_dim as f64).sqrt();
            for p in &mut params[blk.u..blk.u + blk.rows * arch.time_dim] {
                *p = s * rng.normal();
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure!(
            params.len() == arch.param_count(),
            Shape,
            "{} parameters for an architecture with {}",
            params.len(),
            arch.param_count()
        );
        ensure!(params.iter().all(|p| p.is_finite()), NonFinite, "model parameters");
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of the head's parameters in the flat vector.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let (_, head) = layout(&self.arch);
        head.w..self.params.len()
    }

    fn view(&self, off: usize, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[off..off + rows * cols], rows, cols)
    }

    /// Batched forward pass; each input is one complex image as a flat slice.
    pub fn forward_batch(&self, inputs: &[&[C64]], ts: &[f64]) -> Result<(Vec<Vec<C64>>, ForwardCache)> {
        ensure!(inputs.len() == ts.len(), Shape, "{} inputs vs {} times", inputs.len(), ts.len());
        let n = inputs.len();
        let din = self.arch.input_dim();
        let mut input = DMatrix::zeros(din, n);
        for (j, x) in inputs.iter().enumerate() {
            ensure!(x.len() == self.arch.pixels, Shape, "input has {} pixels, model expects {}", x.len(), self.arch.pixels);
            input.column_mut(j).copy_from_slice(&real_embed(x));
        }
        let mut tau = DMatrix::zeros(self.arch.time_dim, n);
        for (j, &t) in ts.iter().enumerate() {
            tau.column_mut(j).copy_from_slice(&time_features(t, self.arch.time_dim));
        }
        let (blocks, head) = layout(&self.arch);
        let mut pre = Vec::with_capacity(blocks.len());
        let mut hidden: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
        for (l, blk) in blocks.iter().enumerate() {
            let prev = if l == 0 { &input } else { &hidden[l - 1] };
            let mut z = self.view(blk.w, blk.rows, blk.cols) * prev;
            z += self.view(blk.u, blk.rows, self.arch.time_dim) * &tau;
            let bias = &self.params[blk.b..blk.b + blk.rows];
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            let mut h = z.map(silu);
            if l > 0 {
                h += prev;
            }
            pre.push(z);
            hidden.push(h);
        }
        let mut out = self.view(head.w, head.rows, head.cols) * hidden.last().expect("depth >= 1");
        let bias = &self.params[head.b..head.b + head.rows];
        for mut col in out.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let outputs = out
            .column_iter()
            .map(|c| real_lift(c.as_slice()).expect("even length"))
            .collect();
        Ok((outputs, ForwardCache { input, tau, pre, hidden }))
    }

    /// Parameter gradient of a scalar loss given `dL/d(output)` per batch column
    /// (complex form: `dL/dRe + i dL/dIm`).
    pub fn backward(&self, cache: &ForwardCache, cotangents: &[Vec<C64>]) -> Result<Vec<f64>> {
        let n = cache.batch();
        ensure!(cotangents.len() == n, Shape, "{} cotangents for a batch of {n}", cotangents.len());
        let din = self.arch.input_dim();
        let mut g = DMatrix::zeros(din, n);
        for (j, c) in cotangents.iter().enumerate() {
            ensure!(c.len() == self.arch.pixels, Shape, "cotangent length {}", c.len());
            g.column_mut(j).copy_from_slice(&real_embed(c));
        }
        let (blocks, head) = layout(&self.arch);
        let mut grad = vec![0.0; self.params.len()];

        let last = cache.hidden.last().expect("depth >= 1");
        write_block(&mut grad, head.w, &(&g * last.transpose()));
        write_rowsum(&mut grad, head.b, &g);
        let mut gh = self.view(head.w, head.rows, head.cols).transpose() * &g;
        check_finite(&grad[head.w..], blocks.len())?;

        for (l, blk) in blocks.iter().enumerate().rev() {
            let mut dz = cache.pre[l].map(silu_grad);
            dz.component_mul_assign(&gh);
            let prev = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            write_block(&mut grad, blk.w, &(&dz * prev.transpose()));
            write_rowsum(&mut grad, blk.b, &dz);
            write_block(&mut grad, blk.u, &(&dz * cache.tau.transpose()));
            check_finite(&grad[blk.w..blk.u + blk.rows * self.arch.time_dim], l)?;
            if l > 0 {
                gh += self.view(blk.w, blk.rows, blk.cols).transpose() * &dz;
            }
        }
        Ok(grad)
    }

    /// Field value at a single input.
    pub fn eval(&self, x: &[C64], t: f64) -> Result<Vec<C64>> {
        let (mut out, _) = self.forward_batch(&[x], &[t])?;
        Ok(out.pop().expect("one output"))
    }
}

/// Anything that maps a batch of (image, time) pairs to field values.
pub trait BatchField {
    fn pixels(&self) -> usize;
    fn eval_batch(&self, inputs: &[&[C64]], ts: &[f64]) -> Result<Vec<Vec<C64>>>;
}

impl BatchField for VectorFieldModel {
    fn pixels(&self) -> usize {
        self.arch.pixels
    }

    fn eval_batch(&self, inputs: &[&[C64]], ts: &[f64]) -> Result<Vec<Vec<C64>>> {
        Ok(self.forward_batch(inputs, ts)?.0)
    }
}

/// Closure-backed field, evaluated one column at a time.
pub struct FnField<F> {
    pub pixels: usize,
    pub f: F,
}

impl<F> BatchField for FnField<F>
where
    F: Fn(&[C64], f64) -> Result<Vec<C64>>,
{
    fn pixels(&self) -> usize {
        self.pixels
    }

    fn eval_batch(&self, inputs: &[&[C64]], ts: &[f64]) -> Result<Vec<Vec<C64>>> {
        ensure!(inputs.len() == ts.len(), Shape, "{} inputs vs {} times", inputs.len(), ts.len());
        inputs.iter().zip(ts).map(|(x, &t)| (self.f)(x, t)).collect()
    }
}

fn write_block(grad: &mut [f64], off: usize, m: &DMatrix<f64>) {
    grad[off..off + m.len()].copy_from_slice(m.as_slice());
}

fn write_rowsum(grad: &mut [f64], off: usize, m: &DMatrix<f64>) {
    for (i, row) in m.row_iter().enumerate() {
        grad[off + i] = row.sum();
    }
}

fn check_finite(g: &[f64], layer: usize) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of layer {layer}")))
    }
}

pub fn model_forward(m: &VectorFieldModel, x_in: &ComplexImage, t: f64) -> Result<ComplexImage> {
    Ok(x_in.with_data(m.eval(x_in.as_slice(), t)?))
}

// ============================================================================
// Jacobian-vector products and divergence
// ============================================================================

/// Finite-difference step used along a probe direction at `x`.
pub fn jvp_step(x: &[C64], eps: f64) -> f64 {
    eps * (1.0 + cx::max_abs(x))
}

/// Central difference `[f(x + h b) - f(x - h b)] / 2h` with `h = eps (1 + |x|_inf)`.
pub fn jvp_with<F>(field: F, x: &[C64], probe: &[C64], eps: f64) -> Result<Vec<C64>>
where
    F: Fn(&[C64]) -> Result<Vec<C64>>,
{
    ensure!(eps > 0.0, InvalidArgument, "jvp step must be positive");
    ensure!(x.len() == probe.len(), Shape, "probe length {} vs {}", probe.len(), x.len());
    let h = jvp_step(x, eps);
    let plus = field(&cx::lincomb(1.0, x, h, probe))?;
    let minus = field(&cx::lincomb(1.0, x, -h, probe))?;
    Ok(cx::lincomb(0.5 / h, &plus, -0.5 / h, &minus))
}

pub fn model_jvp(m: &VectorFieldModel, x_in: &ComplexImage, t: f64, probe: &ComplexImage, eps: f64) -> Result<ComplexImage> {
    x_in.check_same_shape(probe)?;
    ensure!(eps > 0.0, InvalidArgument, "jvp step must be positive");
    let h = jvp_step(x_in.as_slice(), eps);
    let plus = cx::lincomb(1.0, x_in.as_slice(), h, probe.as_slice());
    let minus = cx::lincomb(1.0, x_in.as_slice(), -h, probe.as_slice());
    let (out, _) = m.forward_batch(&[&plus, &minus], &[t, t])?;
    Ok(x_in.with_data(cx::lincomb(0.5 / h, &out[0], -0.5 / h, &out[1])))
}

/// Draw a Hutchinson probe `b = P z`, `z ~ CN(0, 2 I)`, so the real embedding of
/// `b` has covariance equal to the real representation of `P`.
pub fn draw_probe<O: LinearOperator + ?Sized>(op: &O, rng: &mut RngState, cfg: &CgConfig) -> Result<Vec<C64>> {
    let z = rng.cn_vec(op.domain_len(), 2.0)?;
    linops::projection(op, &z, cfg)
}

/// Monte-Carlo estimate of the real-embedded divergence `tr(P J)` of `P f` at `x`,
/// where `J` is the real Jacobian of `f`. Equals `2D` in expectation for the
/// identity field under a full mask.
pub fn hutchinson_divergence_with<F, O>(
    field: F,
    x: &[C64],
    op: &O,
    n_probes: usize,
    rng: &mut RngState,
    cfg: &CgConfig,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[C64]) -> Result<Vec<C64>>,
    O: LinearOperator + ?Sized,
{
    ensure!(n_probes >= 1, InvalidArgument, "need at least one probe");
    let mut acc = 0.0;
    for _ in 0..n_probes {
        let b = draw_probe(op, rng, cfg)?;
        let jb = jvp_with(&field, x, &b, eps)?;
        acc += cx::dot(&b, &jb).re;
    }
    Ok(acc / n_probes as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn hutchinson_divergence<O: LinearOperator + ?Sized>(
    m: &VectorFieldModel,
    x_in: &ComplexImage,
    t: f64,
    op: &O,
    n_probes: usize,
    rng: &mut RngState,
    cfg: &CgConfig,
    eps: f64,
) -> Result<f64> {
    hutchinson_divergence_with(|x| m.eval(x, t), x_in.as_slice(), op, n_probes, rng, cfg, eps)
}

// ============================================================================
// Checkpoints
// ============================================================================

const CHECKPOINT_MAGIC: &str = "PCFM-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VectorFieldModel,
    pub step: u64,
    pub ema: bool,
}

impl Checkpoint {
    /// Text header of `key value` lines closed by `end`, then the parameters as
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let a = self.model.arch;
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "pixels {}", a.pixels)?;
        writeln!(w, "hidden {}", a.hidden)?;
        writeln!(w, "depth {}", a.depth)?;
        writeln!(w, "time_dim {}", a.time_dim)?;
        writeln!(w, "params {}", self.model.params.len())?;
        writeln!(w, "step {}", self.step)?;
        writeln!(w, "ema {}", u8::from(self.ema))?;
        writeln!(w, "end")?;
        let mut buf = Vec::with_capacity(8 * self.model.params.len());
        for p in &self.model.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let mut fields = std::collections::HashMap::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint header not terminated".into()));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once(' ').ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
            let v: u64 = v.parse().map_err(|_| Error::Format(format!("bad value in {l:?}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Format(format!("missing {k}")));
        let arch = Architecture {
            pixels: get("pixels")? as usize,
            hidden: get("hidden")? as usize,
            depth: get("depth")? as usize,
            time_dim: get("time_dim")? as usize,
        };
        let n = get("params")? as usize;
        ensure!(n == arch.param_count(), Format, "header declares {n} params, architecture has {}", arch.param_count());
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes)?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            model: VectorFieldModel::from_params(arch, params)?,
            step: get("step")?,
            ema: get("ema")? != 0,
        })
    }
}
