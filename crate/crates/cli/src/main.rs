//! `pcfm`: simulate data, train unsupervised, reconstruct, verify, score.
//!
//! Exit codes: 0 success, 1 usage or validation error (including failed
//! verification checks), 2 numerical failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pcfm::io::{self, RunConfig, Tensor, Y0_FILE};
use pcfm::model::{Checkpoint, VectorFieldModel};
use pcfm::recon::{psnr, reconstruct, ssim, ModelField, ReconResult};
use pcfm::sim::simulate_case;
use pcfm::train::train_loop;
use pcfm::verify::{run_suite, Scale, Suite};
use pcfm::RngState;

const X_HAT_FILE: &str = "x_hat.tensor";
const Y1_FILE: &str = "y1.tensor";
const RESIDUALS_FILE: &str = "residuals.tsv";

#[derive(Parser)]
#[command(name = "pcfm", version, about = "Unsupervised multi-coil MRI reconstruction with projected conditional flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value run configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        // round trip through the parser so every value is validated
        Ok(RunConfig::parse(&cfg.to_text())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms, coil maps, masks and noisy k-space
    Simulate {
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        coils: Option<usize>,
        #[arg(long)]
        accel: Option<f64>,
        #[arg(long)]
        acs: Option<usize>,
        #[arg(long)]
        sigma0: Option<f64>,
        /// Number of cases
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a vector field from measurements only
    Train {
        /// Dataset root with one directory per case
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the EMA parameters
        #[arg(long)]
        out: PathBuf,
        /// Also save the final (non-averaged) parameters here
        #[arg(long)]
        final_out: Option<PathBuf>,
        /// Loss trace (TSV: step, loss, wall_ms)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use only the first N cases
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct one case, or every case under a dataset root
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Integration steps
        #[arg(long = "T")]
        steps: Option<usize>,
        /// CG iterations
        #[arg(long)]
        cg: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available parallelism)
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a self-check suite
    Verify {
        /// props, oracle or gradients
        #[arg(long)]
        suite: String,
        /// Smaller Monte-Carlo samples
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR and SSIM of reconstructions against held-out ground truth
    Metrics {
        /// Case directory or dataset root
        #[arg(long)]
        data: PathBuf,
        /// Reconstruction directory matching `data`
        #[arg(long)]
        recon: PathBuf,
    },
}

fn is_case(dir: &Path) -> bool {
    dir.join(Y0_FILE).is_file()
}

fn cases_under(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_case(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let cases = io::list_cases(dir).with_context(|| format!("listing {}", dir.display()))?;
    if cases.is_empty() {
        bail!("no cases under {}", dir.display());
    }
    Ok(cases)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = cfg.sim()?;
    let n = cfg.n_cases()?;
    fs::create_dir_all(out)?;
    for i in 0..n {
        let case = simulate_case(&sim, i as u64)?;
        io::write_case(&io::case_dir(out, i), &case.x0, &case.record)?;
    }
    fs::write(out.join("config.txt"), cfg.to_text())?;
    eprintln!("wrote {n} cases to {}", out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, final_out: Option<&Path>, trace: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let mut dirs = cases_under(data)?;
    if let Some(l) = limit {
        dirs.truncate(l);
    }
    let records = dirs
        .iter()
        .map(|d| io::read_record(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let tc = cfg.train()?;
    let mut arch = cfg.architecture()?;
    arch.pixels = records[0].system().image_len();
    let model = VectorFieldModel::init(arch, &mut RngState::new(tc.seed).substream("init"))?;
    let mut trace_file = match trace {
        Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let result = train_loop(model, &records, &tc, trace_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = trace_file {
        w.flush()?;
    }
    Checkpoint { model: result.ema, step: tc.steps, ema: true }.save(out)?;
    if let Some(p) = final_out {
        Checkpoint { model: result.model, step: tc.steps, ema: false }.save(p)?;
    }
    if let Some(last) = result.trace.last() {
        eprintln!("trained {} steps on {} cases, last loss {:.6}", last.step, records.len(), last.loss);
    }
    Ok(())
}

fn write_recon(dir: &Path, r: &ReconResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    Tensor::from_image(&r.image).save(&dir.join(X_HAT_FILE))?;
    Tensor::from_vector(r.y1.as_slice(), vec![r.y1.len()])?.save(&dir.join(Y1_FILE))?;
    let mut text = String::from("step\tresidual_before_dc\tresidual\treference_norm\n");
    for (i, ((b, a), n)) in r.residuals_before_dc.iter().zip(&r.residuals).zip(&r.reference_norms).enumerate() {
        text.push_str(&format!("{i}\t{b:e}\t{a:e}\t{n:e}\n"));
    }
    fs::write(dir.join(RESIDUALS_FILE), text)?;
    Ok(())
}

fn reconstruct_all(cfg: &RunConfig, model: &Path, data: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::load(model).with_context(|| format!("reading {}", model.display()))?;
    let rc = cfg.recon()?;
    rc.validate()?;
    let single = is_case(data);
    let cases = cases_under(data)?;
    let workers = threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .clamp(1, cases.len());
    let field = ModelField(&ckpt.model);
    // each case has its own rng keyed by the record seed, so results do not
    // depend on worker count or order
    let run = |dir: &PathBuf| -> Result<()> {
        let rec = io::read_record(dir).with_context(|| format!("reading {}", dir.display()))?;
        let mut rng = RngState::new(rc.seed).substream_indexed("case", rec.seed());
        let r = reconstruct(rec.y0(), rec.system(), &field, &rc, &mut rng)?;
        let target = if single { out.to_path_buf() } else { out.join(dir.file_name().expect("case dir name")) };
        write_recon(&target, &r)
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let cases = &cases;
                let run = &run;
                s.spawn(move || cases.iter().skip(w).step_by(workers).try_for_each(run))
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("worker panicked"))
    })?;
    eprintln!("reconstructed {} case(s) into {}", cases.len(), out.display());
    Ok(())
}

fn metrics(data: &Path, recon: &Path) -> Result<()> {
    let single = is_case(data);
    let mut out = std::io::stdout().lock();
    writeln!(out, "case\tpsnr_db\tssim")?;
    for dir in cases_under(data)? {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("case").to_string();
        let rdir = if single { recon.to_path_buf() } else { recon.join(&name) };
        let truth = io::read_ground_truth(&dir).with_context(|| format!("reading ground truth of {name}"))?;
        let est = Tensor::load(&rdir.join(X_HAT_FILE)).with_context(|| format!("reading {}", rdir.display()))?.to_image()?;
        writeln!(out, "{name}\t{:.6}\t{:.6}", psnr(&truth, &est)?, ssim(&truth, &est)?)?;
    }
    Ok(())
}

fn verify(suite: &str, quick: bool, seed: u64) -> Result<bool> {
    let suite: Suite = suite.parse()?;
    let scale = if quick { Scale::quick() } else { Scale::full() };
    let checks = run_suite(suite, &scale, seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { grid, coils, accel, acs, sigma0, n, seed, out, config } => {
            let cfg = config.load(&[
                ("grid", opt(&grid)),
                ("coils", opt(&coils)),
                ("accel", opt(&accel)),
                ("acs", opt(&acs)),
                ("sigma0", opt(&sigma0)),
                ("n_cases", opt(&n)),
                ("sim_seed", opt(&seed)),
            ])?;
            simulate(&cfg, &out)?;
        }
        Command::Train { data, out, final_out, trace, limit, steps, lr, seed, config } => {
            let cfg = config.load(&[("steps", opt(&steps)), ("lr", opt(&lr)), ("train_seed", opt(&seed))])?;
            train(&cfg, &data, &out, final_out.as_deref(), trace.as_deref(), limit)?;
        }
        Command::Reconstruct { model, data, steps, cg, seed, out, threads, config } => {
            let cfg = config.load(&[("T", opt(&steps)), ("k_infer", opt(&cg)), ("recon_seed", opt(&seed))])?;
            reconstruct_all(&cfg, &model, &data, &out, threads)?;
        }
        Command::Verify { suite, quick, seed } => return verify(&suite, quick, seed),
        Command::Metrics { data, recon } => metrics(&data, &recon)?,
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<pcfm::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
