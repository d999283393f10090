//! `sugarct` command-line harness. Subcommands communicate only through
//! files; every run writes a `manifest.json` with the resolved
//! configuration, the tool version and stage timings.

pub mod config;
pub mod experiment;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{ExperimentConfig, GeometryPreset, SugarMode};

use crate::data::{load_image, load_sinogram, save_image, save_png, save_sinogram, MetricReport, Window};
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};
use crate::projector::{Fbp, Projector};
use crate::solvers::{cppd_tv_recon, split_bregman_recon, SolverTrace};
use crate::sugar::{
    load_params, save_params, sugar_forward, two_stage_recon_detailed, SugarParams, SugarState,
    TrainSample,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SUGARCT_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "sugarct", version, about = "Few-view fan-beam CT reconstruction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set sb.lambda=2.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master random seed (required by randomized commands).
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config, then $SUGARCT_OUT_DIR.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReconArgs {
    /// Input sinogram (geometry is read from its sidecar).
    #[arg(long)]
    pub sinogram: PathBuf,
    /// Reference image; enables `metrics.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom and its sinogram.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Filtered backprojection.
    Fbp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconArgs,
    },
    /// Split-Bregman reconstruction.
    Sb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconArgs,
    },
    /// Chambolle-Pock TV reconstruction.
    Cppd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconArgs,
    },
    /// Train SUGAR on synthetic random-ellipse phantoms.
    SugarTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Single-stage SUGAR reconstruction.
    SugarRecon {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconArgs,
        #[arg(long)]
        params: PathBuf,
    },
    /// Two-stage (low-resolution then high-resolution) SUGAR reconstruction.
    TwoStage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recon: ReconArgs,
        #[arg(long)]
        le: PathBuf,
        #[arg(long)]
        hr: PathBuf,
    },
    /// PSNR / SSIM / MSE of an image against a reference.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Compare HR refinement against the upsampled LE estimate.
    AblateHr {
        #[command(flatten)]
        common: Common,
    },
    /// Compare staged training against direct full-resolution training.
    AblateDirect {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fbp { .. } => "fbp",
            Command::Sb { .. } => "sb",
            Command::Cppd { .. } => "cppd",
            Command::SugarTrain { .. } => "sugar-train",
            Command::SugarRecon { .. } => "sugar-recon",
            Command::TwoStage { .. } => "two-stage",
            Command::Metrics { .. } => "metrics",
            Command::AblateHr { .. } => "ablate-hr",
            Command::AblateDirect { .. } => "ablate-direct",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common }
            | Command::Fbp { common, .. }
            | Command::Sb { common, .. }
            | Command::Cppd { common, .. }
            | Command::SugarTrain { common }
            | Command::SugarRecon { common, .. }
            | Command::TwoStage { common, .. }
            | Command::Metrics { common, .. }
            | Command::AblateHr { common }
            | Command::AblateDirect { common } => common,
        }
    }

    fn randomized(&self) -> bool {
        matches!(
            self,
            Command::Simulate { .. }
                | Command::SugarTrain { .. }
                | Command::AblateHr { .. }
                | Command::AblateDirect { .. }
        )
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    config: &'a ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    timings_s: BTreeMap<String, f64>,
}

/// Per-run bookkeeping shared by all subcommands.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn input(&mut self, key: &str, p: &Path) {
        self.inputs.insert(key.to_string(), p.display().to_string());
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let v = f()?;
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        Ok(v)
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.expect("checked for randomized commands")
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.path(name);
        let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::format(&p, e.to_string()))?;
        text.push('\n');
        fs::write(p, text)?;
        Ok(())
    }

    fn save_recon(&mut self, x: &Image, stem: &str, geometry_ref: Option<&str>) -> Result<()> {
        let p = self.path(&format!("{stem}.img"));
        save_image(&p, x, geometry_ref)?;
        self.outputs.push(format!("{stem}.img.json"));
        let window = Window {
            lo: self.cfg.phantom.clip[0],
            hi: self.cfg.phantom.clip[1],
        };
        let window = if window.hi > window.lo { window } else { Window::full_range(x) };
        let p = self.path(&format!("{stem}.png"));
        save_png(&p, x, window)
    }

    fn save_trace(&mut self, trace: &SolverTrace) -> Result<()> {
        let p = self.path("trace.csv");
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        fs::write(p, buf)?;
        Ok(())
    }
}

fn resolve_out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sugarct-out"))
}

/// Parse arguments, run one subcommand and map the outcome to an exit code:
/// 0 success, 1 I/O or file-format failure, 2 configuration error,
/// 3 numerical failure.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut out_dir = None;
    match execute(&cli.command, &argv, &mut out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sugarct {}: {e}", cli.command.name());
            ExitCode::from(report_failure(&e, out_dir.as_deref()))
        }
    }
}

fn report_failure(e: &Error, out: Option<&Path>) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numerical { trace, .. } => {
            if let (Some(t), Some(dir)) = (trace, out) {
                let p = dir.join("failure_trace.csv");
                let mut buf = Vec::new();
                if t.write_csv(&mut buf).is_ok() && fs::write(&p, &buf).is_ok() {
                    eprintln!("solver trace written to {}", p.display());
                }
                let _ = std::io::Write::write_all(&mut std::io::stderr(), &buf);
            }
            3
        }
        Error::Training { history, .. } => {
            eprintln!("loss history before failure: {history:?}");
            if let Some(dir) = out {
                let _ = fs::write(dir.join("failure_history.json"), format!("{history:?}\n"));
            }
            3
        }
        Error::Io(_) | Error::Format { .. } => 1,
    }
}

fn execute(cmd: &Command, argv: &[String], out_slot: &mut Option<PathBuf>) -> Result<()> {
    let common = cmd.common();
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if cmd.randomized() && common.seed.is_none() {
        return Err(Error::Config(format!("--seed is required for `{}`", cmd.name())));
    }
    let out = resolve_out_dir(common, &cfg);
    fs::create_dir_all(&out)?;
    *out_slot = Some(out.clone());
    cfg.out_dir = Some(out.clone());
    let mut run = Run {
        cfg,
        out,
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        timings: BTreeMap::new(),
    };
    let start = Instant::now();
    match cmd {
        Command::Simulate { .. } => simulate(&mut run)?,
        Command::Fbp { recon, .. } => {
            let (y, g, truth) = load_inputs(&mut run, recon)?;
            let filter = run.cfg.fbp.filter;
            let x = run.time("fbp", || Fbp::new(&g, filter)?.reconstruct(&y))?;
            finish_recon(&mut run, &x, truth.as_ref(), None)?;
        }
        Command::Sb { recon, .. } => {
            let (y, g, truth) = load_inputs(&mut run, recon)?;
            let sb = run.cfg.sb.clone();
            let (x, trace) = run.time("sb", || split_bregman_recon(&y, &g, &sb))?;
            finish_recon(&mut run, &x, truth.as_ref(), Some(&trace))?;
        }
        Command::Cppd { recon, .. } => {
            let (y, g, truth) = load_inputs(&mut run, recon)?;
            let c = run.cfg.cppd.clone();
            let (x, trace) = run.time("cppd", || cppd_tv_recon(&y, &g, c.lambda, c.n_iters))?;
            finish_recon(&mut run, &x, truth.as_ref(), Some(&trace))?;
        }
        Command::SugarTrain { .. } => sugar_train(&mut run)?,
        Command::SugarRecon { recon, params, .. } => {
            let (y, g, truth) = load_inputs(&mut run, recon)?;
            run.input("params", params);
            let p = load_params(params)?;
            let x = run.time("sugar", || {
                let init = SugarState::from_fbp(&y, &g, p.filter)?;
                sugar_forward(&y, &g, &p, &init)
            })?;
            finish_recon(&mut run, &x, truth.as_ref(), None)?;
        }
        Command::TwoStage { recon, le, hr, .. } => {
            let (y, g, truth) = load_inputs(&mut run, recon)?;
            run.input("le", le);
            run.input("hr", hr);
            let (lp, hp) = (load_params(le)?, load_params(hr)?);
            let le_n = run.cfg.sugar.le_n;
            let o = run.time("two_stage", || two_stage_recon_detailed(&y, &g, &lp, &hp, le_n))?;
            run.save_recon(&o.upsampled, "le_upsampled", None)?;
            if let Some(t) = &truth {
                #[derive(Serialize)]
                struct R {
                    hr: MetricReport,
                    upsampled_le: MetricReport,
                }
                let r = R {
                    hr: MetricReport::compute(&o.hr, t)?,
                    upsampled_le: MetricReport::compute(&o.upsampled, t)?,
                };
                run.write_json("metrics.json", &r)?;
            }
            run.save_recon(&o.hr, "recon", None)?;
        }
        Command::Metrics { image, reference, .. } => {
            run.input("image", image);
            run.input("reference", reference);
            let (x, _) = load_image(image)?;
            let (t, _) = load_image(reference)?;
            let r = MetricReport::compute(&x, &t)?;
            println!("psnr_db={:.4} ssim={:.6} mse={:.6e}", r.psnr_db, r.ssim, r.mse);
            run.write_json("metrics.json", &r)?;
        }
        Command::AblateHr { .. } => ablate_hr(&mut run)?,
        Command::AblateDirect { .. } => ablate_direct(&mut run)?,
    }
    run.timings.insert("total".into(), start.elapsed().as_secs_f64());
    fs::write(run.out.join("config.toml"), run.cfg.to_toml())?;
    run.outputs.push("config.toml".into());
    let manifest = Manifest {
        tool: "sugarct",
        version: env!("CARGO_PKG_VERSION"),
        command: cmd.name(),
        argv: argv.to_vec(),
        config: &run.cfg,
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        timings_s: run.timings.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&run.out, e.to_string()))?;
    fs::write(run.out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn load_inputs(run: &mut Run, r: &ReconArgs) -> Result<(Sinogram, FanBeamGeometry, Option<Image>)> {
    run.input("sinogram", &r.sinogram);
    let (y, g) = load_sinogram(&r.sinogram)?;
    let truth = match &r.truth {
        Some(p) => {
            run.input("truth", p);
            Some(load_image(p)?.0)
        }
        None => None,
    };
    Ok((y, g, truth))
}

fn finish_recon(run: &mut Run, x: &Image, truth: Option<&Image>, trace: Option<&SolverTrace>) -> Result<()> {
    run.save_recon(x, "recon", None)?;
    if let Some(t) = trace {
        run.save_trace(t)?;
    }
    if let Some(t) = truth {
        let r = MetricReport::compute(x, t)?;
        println!("psnr_db={:.4} ssim={:.6} mse={:.6e}", r.psnr_db, r.ssim, r.mse);
        run.write_json("metrics.json", &r)?;
    }
    Ok(())
}

fn simulate(run: &mut Run) -> Result<()> {
    let g = run.cfg.geometry.build()?;
    let seed = run.seed();
    let cfg = run.cfg.clone();
    let (y, truth) = run.time("simulate", || {
        experiment::simulate_pair(&cfg, &g, &Projector::new(&g)?, cfg.phantom.kind, seed)
    })?;
    let p = run.path("sinogram.sino");
    save_sinogram(&p, &y, &g)?;
    run.outputs.push("sinogram.sino.json".into());
    run.save_recon(&truth, "phantom", Some("sinogram.sino"))?;
    #[derive(Serialize)]
    struct R {
        image_n: usize,
        n_views: usize,
        n_detectors: usize,
        phantom_min: f64,
        phantom_max: f64,
        sinogram_max: f64,
    }
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
    let r = R {
        image_n: truth.n(),
        n_views: y.n_views(),
        n_detectors: y.n_detectors(),
        phantom_min: fold(truth.as_slice(), f64::INFINITY, f64::min),
        phantom_max: fold(truth.as_slice(), f64::NEG_INFINITY, f64::max),
        sinogram_max: fold(y.as_slice(), f64::NEG_INFINITY, f64::max),
    };
    run.write_json("metrics.json", &r)
}

fn progress_printer(stage: &str, r: &crate::sugar::EpochReport) {
    eprintln!(
        "[{stage}] epoch {:>3} loss {:.6e} lr {:.3e}",
        r.epoch + 1,
        r.mean_loss,
        r.learning_rate
    );
}

fn sugar_train(run: &mut Run) -> Result<()> {
    let g = run.cfg.geometry.build()?;
    let seed = run.seed();
    let cfg = run.cfg.clone();
    let data = run.time("dataset", || experiment::synthetic_dataset(&cfg, &g, seed))?;
    #[derive(Serialize)]
    struct R {
        mode: SugarMode,
        loss_history: BTreeMap<String, Vec<f64>>,
    }
    let mut hist = BTreeMap::new();
    match cfg.sugar.mode {
        SugarMode::TwoStage => {
            let m = run.time("train", || experiment::train_staged(&cfg, &g, &data.train, seed, progress_printer))?;
            let p = run.path("le.sugr");
            save_params(p, &m.le)?;
            let p = run.path("hr.sugr");
            save_params(p, &m.hr)?;
            hist.insert("le".to_string(), m.le_history);
            hist.insert("hr".to_string(), m.hr_history);
        }
        SugarMode::Single => {
            let (le, _, train) = experiment::seeded(&cfg, seed);
            let (p, h) = run.time("train", || {
                let init = SugarParams::initialize(&g, &le)?;
                let samples: Vec<TrainSample> = data
                    .train
                    .iter()
                    .map(|(y, t)| TrainSample { y: y.clone(), truth: t.clone(), init: None })
                    .collect();
                crate::sugar::train_sugar_with(&samples, &g, &train, init, |r| progress_printer("single", r))
            })?;
            let path = run.path("sugar.sugr");
            save_params(path, &p)?;
            hist.insert("single".to_string(), h);
        }
    }
    run.write_json("metrics.json", &R { mode: cfg.sugar.mode, loss_history: hist })
}

fn ablate_hr(run: &mut Run) -> Result<()> {
    let g = run.cfg.geometry.build()?;
    let seed = run.seed();
    let cfg = run.cfg.clone();
    let data = run.time("dataset", || experiment::synthetic_dataset(&cfg, &g, seed))?;
    let m = run.time("train", || experiment::train_staged(&cfg, &g, &data.train, seed, progress_printer))?;
    let r = run.time("evaluate", || experiment::hr_ablation(&m, &g, &data.test))?;
    println!("hr_improves_all={}", r.hr_improves_all);
    run.write_json("metrics.json", &r)
}

fn ablate_direct(run: &mut Run) -> Result<()> {
    let g = run.cfg.geometry.build()?;
    let seed = run.seed();
    let cfg = run.cfg.clone();
    let data = run.time("dataset", || experiment::synthetic_dataset(&cfg, &g, seed))?;
    let staged = run.time("train_staged", || experiment::train_staged(&cfg, &g, &data.train, seed, progress_printer))?;
    let (direct, _) = run.time("train_direct", || experiment::train_direct(&cfg, &g, &data.train, seed, progress_printer))?;
    let r = run.time("evaluate", || experiment::direct_ablation(&staged, &direct, &g, &data.test))?;
    println!(
        "staged_mean_psnr_db={:.4} direct_mean_psnr_db={:.4}",
        r.staged_mean_psnr_db, r.direct_mean_psnr_db
    );
    run.write_json("metrics.json", &r)
}
