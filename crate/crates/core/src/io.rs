//! On-disk formats: complex tensors, run configuration, loss traces and the
//! per-case dataset layout.
//!
//! A tensor file is three text lines (`PCFM-TENSOR`, `rank N`, `dims d1 .. dN`)
//! followed by little-endian f32 `(re, im)` pairs in row-major order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;

use crate::error::{ensure, Error, Result};
use crate::linops::{CgConfig, CoilSensitivities, SamplingMask};
use crate::model::Architecture;
use crate::numerics::{ComplexImage, ComplexVector, C64};
use crate::recon::ReconConfig;
use crate::sim::SimConfig;
use crate::train::{MeasurementRecord, TraceEntry, TrainConfig};

const TENSOR_MAGIC: &str = "PCFM-TENSOR";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<Complex32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<Complex32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(!dims.is_empty(), Shape, "tensor rank must be >= 1");
        ensure!(n == data.len(), Shape, "dims {dims:?} hold {n} entries, got {}", data.len());
        Ok(Self { dims, data })
    }

    fn from_c64(dims: Vec<usize>, data: &[C64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn to_c64(&self) -> Vec<C64> {
        self.data.iter().map(|z| C64::new(z.re as f64, z.im as f64)).collect()
    }

    pub fn from_image(img: &ComplexImage) -> Self {
        Self::from_c64(vec![img.height(), img.width()], img.as_slice()).expect("image shape")
    }

    pub fn to_image(&self) -> Result<ComplexImage> {
        ensure!(self.dims.len() == 2, Shape, "expected a rank-2 tensor, got dims {:?}", self.dims);
        ComplexImage::new(self.dims[0], self.dims[1], self.to_c64())
    }

    /// `[C, H, W]`
    pub fn from_images(imgs: &[ComplexImage]) -> Result<Self> {
        ensure!(!imgs.is_empty(), Shape, "no images to stack");
        let (h, w) = imgs[0].shape();
        let mut data = Vec::with_capacity(imgs.len() * h * w);
        for im in imgs {
            ensure!(im.shape() == (h, w), Shape, "image {:?} vs {:?}", im.shape(), (h, w));
            data.extend_from_slice(im.as_slice());
        }
        Self::from_c64(vec![imgs.len(), h, w], &data)
    }

    pub fn to_images(&self) -> Result<Vec<ComplexImage>> {
        ensure!(self.dims.len() == 3, Shape, "expected a rank-3 tensor, got dims {:?}", self.dims);
        let (h, w) = (self.dims[1], self.dims[2]);
        let data = self.to_c64();
        data.chunks_exact(h * w).map(|c| ComplexImage::new(h, w, c.to_vec())).collect()
    }

    pub fn from_vector(v: &[C64], dims: Vec<usize>) -> Result<Self> {
        Self::from_c64(dims, v)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{TENSOR_MAGIC}")?;
        writeln!(w, "rank {}", self.dims.len())?;
        writeln!(w, "dims {}", dims.join(" "))?;
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for z in &self.data {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated tensor header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next(&mut r)? != TENSOR_MAGIC {
            return Err(Error::Format("missing tensor magic".into()));
        }
        let rank_line = next(&mut r)?;
        let rank: usize = rank_line
            .strip_prefix("rank ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad rank line {rank_line:?}")))?;
        let dims_line = next(&mut r)?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Format(format!("bad dims line {dims_line:?}")))?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dimension {d:?}"))))
            .collect::<Result<_>>()?;
        ensure!(dims.len() == rank, Format, "rank {rank} but {} dims", dims.len());
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        ensure!(bytes.len() == 8 * n, Format, "payload has {} bytes, dims need {}", bytes.len(), 8 * n);
        let data = bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                Complex32::new(re, im)
            })
            .collect();
        Self::new(dims, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

// ============================================================================
// Run configuration
// ============================================================================

/// Every configurable default, as flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

/// `(key, default, description)`
pub const RUN_CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("grid", "16", "image side length"),
    ("coils", "4", "receiver coils"),
    ("accel", "4", "acceleration factor"),
    ("acs", "2", "fully sampled low-frequency lines"),
    ("sigma0", "0.01", "measurement noise standard deviation"),
    ("n_cases", "256", "simulated cases"),
    ("sim_seed", "7", "simulation seed"),
    ("steps", "20000", "training steps"),
    ("lr", "0.0001", "AdamW learning rate"),
    ("weight_decay", "0.1", "decoupled weight decay"),
    ("ema_rate", "0.99", "EMA rate"),
    ("ema_every", "100", "steps between EMA updates"),
    ("batch", "16", "training batch size"),
    ("k_train", "10", "CG iterations during training"),
    ("cg_tol_train", "0.0001", "CG tolerance during training"),
    ("k_infer", "30", "CG iterations during reconstruction"),
    ("cg_tol_infer", "0.000001", "CG tolerance during reconstruction"),
    ("T", "10", "integration steps"),
    ("train_seed", "0", "training seed"),
    ("recon_seed", "1", "reconstruction seed"),
    ("eps_t", "0.001", "time margin away from 0 and 1"),
    ("eps_jvp", "0.001", "relative finite-difference step for divergence probes"),
    ("n_probes", "1", "divergence probes per example"),
    ("time_loc", "0", "logit-normal location"),
    ("time_scale", "1", "logit-normal scale"),
    ("hidden", "256", "hidden width"),
    ("depth", "3", "hidden layers"),
    ("time_dim", "32", "time features"),
];

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: RUN_CONFIG_KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Blank lines and `#` comments are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, _, _) = RUN_CONFIG_KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key).ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
        v.parse().map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
    }

    fn check(&self) -> Result<()> {
        self.sim()?;
        self.train()?.validate()?;
        self.recon()?.validate()?;
        self.architecture()?;
        self.num::<usize>("n_cases")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in RUN_CONFIG_KEYS {
            out.push_str(&format!("# {doc}\n{k}={}\n", self.values[k]));
        }
        out
    }

    pub fn sim(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            grid: self.num("grid")?,
            coils: self.num("coils")?,
            accel: self.num("accel")?,
            acs: self.num("acs")?,
            sigma0: self.num("sigma0")?,
            seed: self.num("sim_seed")?,
        })
    }

    pub fn n_cases(&self) -> Result<usize> {
        self.num("n_cases")
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.num("steps")?,
            learning_rate: self.num("lr")?,
            weight_decay: self.num("weight_decay")?,
            ema_rate: self.num("ema_rate")?,
            ema_every: self.num("ema_every")?,
            batch: self.num("batch")?,
            cg_iters_train: self.num("k_train")?,
            cg_tol_train: self.num("cg_tol_train")?,
            sigma0: self.num("sigma0")?,
            time_loc: self.num("time_loc")?,
            time_scale: self.num("time_scale")?,
            time_margin: self.num("eps_t")?,
            eps_jvp: self.num("eps_jvp")?,
            n_probes: self.num("n_probes")?,
            seed: self.num("train_seed")?,
        })
    }

    pub fn recon(&self) -> Result<ReconConfig> {
        Ok(ReconConfig {
            steps: self.num("T")?,
            cg: CgConfig::new(self.num("k_infer")?, self.num("cg_tol_infer")?)?,
            sigma0: self.num("sigma0")?,
            seed: self.num("recon_seed")?,
            time_margin: self.num("eps_t")?,
        })
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let grid: usize = self.num("grid")?;
        Ok(Architecture {
            pixels: grid * grid,
            hidden: self.num("hidden")?,
            depth: self.num("depth")?,
            time_dim: self.num("time_dim")?,
        })
    }
}

// ============================================================================
// Loss trace
// ============================================================================

pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            ensure!(f.len() == 3, Format, "trace line {l:?} does not have 3 fields");
            let bad = || Error::Format(format!("bad trace line {l:?}"));
            Ok(TraceEntry {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                wall_ms: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

// ============================================================================
// Dataset layout
// ============================================================================

pub const X0_FILE: &str = "x0.tensor";
pub const SENS_FILE: &str = "sens.tensor";
pub const MASK_FILE: &str = "mask.tensor";
pub const Y0_FILE: &str = "y0.tensor";
pub const META_FILE: &str = "meta.txt";

pub fn case_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("case{index:04}"))
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() && p.join(Y0_FILE).exists() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn mask_tensor(mask: &SamplingMask) -> Tensor {
    let data = mask.kept().iter().map(|&k| Complex32::new(k as u8 as f32, 0.0)).collect();
    Tensor::new(vec![mask.full_lines()], data).expect("mask dims")
}

/// Writes `x0`, `sens [C, H, W]`, `mask [H]`, `y0 [C, kept, W]` and a metadata file.
pub fn write_case(dir: &Path, x0: &ComplexImage, rec: &MeasurementRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    Tensor::from_image(x0).save(&dir.join(X0_FILE))?;
    Tensor::from_images(rec.sens().maps())?.save(&dir.join(SENS_FILE))?;
    mask_tensor(rec.mask()).save(&dir.join(MASK_FILE))?;
    let sys = rec.system();
    let (_, w) = sys.image_shape();
    Tensor::from_vector(rec.y0().as_slice(), vec![sys.coils(), rec.mask().num_kept(), w])?.save(&dir.join(Y0_FILE))?;
    let meta = format!(
        "seed={}\nsigma0={:e}\nacs={}\n",
        rec.seed(),
        sys.noise_sigma0(),
        rec.mask().acs_count()
    );
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// Opens a dataset file for the training path; ground-truth images are refused.
pub fn open_training_file(path: &Path) -> Result<Tensor> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    ensure!(
        name != X0_FILE,
        InvalidArgument,
        "refusing to read ground truth {} during training",
        path.display()
    );
    Tensor::load(path)
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("bad metadata line {l:?}")))
        })
        .collect()
}

/// Loads the measurement side of a case (everything except `x0`).
pub fn read_record(dir: &Path) -> Result<MeasurementRecord> {
    let meta = parse_meta(&fs::read_to_string(dir.join(META_FILE))?)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("metadata lacks {k}")));
    let seed: u64 = field("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?;
    let sigma0: f64 = field("sigma0")?.parse().map_err(|_| Error::Format("bad sigma0".into()))?;
    let acs: usize = field("acs")?.parse().map_err(|_| Error::Format("bad acs".into()))?;
    let sens = CoilSensitivities::new(open_training_file(&dir.join(SENS_FILE))?.to_images()?)?;
    let mask_t = open_training_file(&dir.join(MASK_FILE))?;
    ensure!(mask_t.dims().len() == 1, Format, "mask must be rank 1");
    let kept = mask_t.data().iter().map(|z| z.re != 0.0).collect();
    let mask = SamplingMask::new(kept, acs)?;
    let y0 = open_training_file(&dir.join(Y0_FILE))?;
    MeasurementRecord::new(ComplexVector::new(y0.to_c64())?, mask, sens, sigma0, seed)
}

/// Held-out ground truth, for evaluation only.
pub fn read_ground_truth(dir: &Path) -> Result<ComplexImage> {
    Tensor::load(&dir.join(X0_FILE))?.to_image()
}
