//! Command-line front end. Every subcommand reads and writes the formats of
//! [`crate::dataset`] and prints a JSON report.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::calib::{convt_flow, estimate_params, CalibEstimate};
use crate::dataset::{
    read_flow, read_json, read_kernels, read_mask, read_pfm, read_sample, split_dataset,
    write_flow, write_json, write_kernels, write_pfm, write_sample,
};
use crate::error::{Error, Result};
use crate::geometry::{augment_sample, sample_perturbation, PerturbationConfig, WeakCalibParams};
use crate::gradcheck::{self, Op};
use crate::imaging::{FlowField, ImageBuffer, Mask};
use crate::kpn::{apply, direct_fit, FitOptions, KpnVariant};
use crate::metrics::{self, MetricReport};
use crate::tof_sim::{synthesize_sample, Scene, SynthConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TOFALIGN_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "tofalign-out";

#[derive(Debug, Parser)]
#[command(
    name = "tofalign",
    version,
    about = "ToF / RGB alignment and depth refinement toolkit"
)]
struct Cli {
    /// Worker threads for parallel stages (default: one per core for `synth`, 1 otherwise).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render aligned synthetic samples.
    Synth(SynthArgs),
    /// Misalign a sample by a random perturbation of the second camera.
    Augment(AugmentArgs),
    /// Estimate the calibration offsets from a flow field and depth.
    Calib(CalibArgs),
    /// Render the flow implied by a calibration estimate and a depth map.
    Convt(ConvtArgs),
    /// Filter a depth map with per-pixel kernels, or fit kernels directly.
    Refine(RefineArgs),
    /// Compute flow and depth metrics.
    Eval(EvalArgs),
    /// Compare analytic derivatives with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ReportArg {
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (default: $TOFALIGN_OUT_DIR or ./tofalign-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    /// Disable one-bounce multipath.
    #[arg(long)]
    no_mpi: bool,
    /// Standard deviation of the correlation noise.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 16)]
    bounce_samples: usize,
    #[arg(long, default_value_t = 525.0)]
    fx: f64,
    #[arg(long, default_value_t = 525.0)]
    fy: f64,
    #[arg(long, default_value_t = crate::tof_sim::signal::DEFAULT_MODULATION_HZ)]
    modulation_hz: f64,
    /// Render this scene file instead of random scenes (its seed is replaced per sample).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Reference translation magnitudes (same unit as depth).
    #[arg(long)]
    t_ref_x: f64,
    #[arg(long)]
    t_ref_y: f64,
    #[arg(long, default_value_t = PerturbationConfig::DEFAULT_PRINCIPAL_FRAC)]
    principal_frac: f64,
    #[arg(long, default_value_t = PerturbationConfig::DEFAULT_TRANSLATION_FRAC)]
    translation_frac: f64,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct CalibArgs {
    /// Sample directory; uses its gt_flow, gt_depth and mask.
    #[arg(long, conflicts_with_all = ["flow", "depth"])]
    sample: Option<PathBuf>,
    #[arg(long, requires = "depth")]
    flow: Option<PathBuf>,
    #[arg(long, requires = "flow")]
    depth: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct ConvtArgs {
    /// Sample directory; uses its gt_depth and mask, as `calib --sample` does.
    #[arg(long, conflicts_with = "depth")]
    sample: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Calibration report written by `calib`.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Sample directory; filters tof_depth against gt_depth.
    #[arg(long, conflicts_with_all = ["depth", "target"])]
    sample: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "tof-kpn")]
    variant: String,
    /// Fit kernels by gradient descent against the target.
    #[arg(long, conflicts_with = "kernels")]
    fit: bool,
    /// Kernel field to apply (written by `refine --fit --kernels-out`).
    #[arg(long)]
    kernels: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kernels_out: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Sample directory providing tof_depth, gt_depth, mask and gt_flow.
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Refined depth to score (default: the sample's tof_depth).
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    flow_pred: Option<PathBuf>,
    #[arg(long)]
    flow_gt: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_RANGE_LIMIT)]
    range_limit: f64,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// warp, calib, kpn or all.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Exit non-zero if any relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[command(flatten)]
    report: ReportArg,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code; diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tofalign: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let threads = match (&cli.command, cli.threads) {
        (_, Some(n)) => n,
        (Command::Synth(_), None) => 0,
        (_, None) => 1,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Augment(a) => augment(a),
        Command::Calib(a) => calib(a),
        Command::Convt(a) => convt(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => grad(a),
    })
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

fn emit<T: Serialize>(report: &ReportArg, value: &T) -> Result<()> {
    match &report.report {
        Some(path) => write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                // A closed pipe (`| head`) is not an error.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(Error::io("<stdout>", e))
                }
                _ => Ok(()),
            }
        }
    }
}

/// Independent per-scene seed derived from the run seed.
fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

fn synth(a: SynthArgs) -> Result<i32> {
    let out = a.out.clone().unwrap_or_else(default_out_dir);
    let params = WeakCalibParams::new(a.fx, a.fy)?;
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        mpi: !a.no_mpi,
        bounce_samples: a.bounce_samples,
        sigma: a.sigma,
        modulation_hz: a.modulation_hz,
        ..SynthConfig::default()
    };
    let template = match &a.scene {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(Scene::from_json(&text)?)
        }
        None => None,
    };
    if a.scenes == 0 {
        return Err(Error::Contract("--scenes must be at least 1".into()));
    }
    let ids: Vec<String> = (0..a.scenes).map(|i| format!("sample_{i:04}")).collect();
    ids.par_iter()
        .enumerate()
        .map(|(i, id)| -> Result<()> {
            let seed = scene_seed(a.seed, i);
            let scene = match &template {
                Some(t) => Scene { seed, ..t.clone() },
                None => Scene::random(seed),
            };
            let sample = synthesize_sample(&scene, &params, &cfg)?;
            let dir = out.join(id);
            write_sample(&dir, id, &sample)?;
            write_json(dir.join("scene.json"), &scene)
        })
        .collect::<Result<Vec<()>>>()?;
    let (train, test) = if a.scenes > 1 {
        split_dataset(&ids, a.test_fraction, a.seed)?
    } else {
        (ids.clone(), Vec::new())
    };
    let split =
        json!({ "seed": a.seed, "test_fraction": a.test_fraction, "train": train, "test": test });
    write_json(out.join("split.json"), &split)?;
    emit(
        &a.report,
        &json!({ "out": out, "samples": ids, "width": a.width, "height": a.height, "mpi": !a.no_mpi }),
    )?;
    Ok(0)
}

fn augment(a: AugmentArgs) -> Result<i32> {
    let (manifest, sample) = read_sample(&a.input)?;
    let cfg = PerturbationConfig {
        principal_frac: a.principal_frac,
        translation_frac: a.translation_frac,
        t_ref_x: a.t_ref_x,
        t_ref_y: a.t_ref_y,
        seed: a.seed,
    };
    let delta = sample_perturbation(&cfg, sample.size())?;
    let augmented = augment_sample(&sample, delta)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir().join(format!("{}_aug", manifest.id)));
    write_sample(&out, &format!("{}_aug", manifest.id), &augmented)?;
    write_json(out.join("perturbation.json"), &delta)?;
    emit(
        &a.report,
        &json!({
            "out": out,
            "perturbation": delta,
            "surviving_pixels": augmented.mask.count(),
        }),
    )?;
    Ok(0)
}

fn read_optional_mask(path: &Option<PathBuf>, size: (usize, usize)) -> Result<Mask> {
    match path {
        Some(p) => read_mask(p),
        None => Ok(Mask::all(size.0, size.1)),
    }
}

fn calib(a: CalibArgs) -> Result<i32> {
    let (flow, depth, mask, calib) = match (&a.sample, &a.flow, &a.depth) {
        (Some(dir), _, _) => {
            let (_, s) = read_sample(dir)?;
            let flow = s.gt_flow.clone().ok_or_else(|| Error::Manifest {
                field: "gt_flow".into(),
                message: "sample has no ground-truth flow".into(),
            })?;
            let mask = match &a.mask {
                Some(p) => read_mask(p)?,
                None => s.mask.clone(),
            };
            (flow, s.gt_depth, mask, Some(s.calib))
        }
        (None, Some(f), Some(d)) => {
            let depth = read_pfm(d)?;
            let mask = read_optional_mask(&a.mask, depth.size())?;
            (read_flow(f)?, depth, mask, None)
        }
        _ => {
            return Err(Error::Contract(
                "calib needs --sample or --flow and --depth".into(),
            ))
        }
    };
    let est = estimate_params(&flow, &depth, &mask)?;
    let mut report = serde_json::to_value(est)?;
    if let Some(c) = calib {
        // The flow maps the perturbed view back, so the recovered offsets
        // carry the opposite sign of the perturbation.
        report["recovered_delta"] = json!({
            "t_x": -est.t_x_star / c.f_x,
            "t_y": -est.t_y_star / c.f_y,
            "c_x": -est.c_x_star,
            "c_y": -est.c_y_star,
        });
    }
    emit(&a.report, &report)?;
    Ok(0)
}

fn convt(a: ConvtArgs) -> Result<i32> {
    let (depth, mask) = match (&a.sample, &a.depth) {
        (Some(dir), _) => {
            let (_, s) = read_sample(dir)?;
            let mask = match &a.mask {
                Some(p) => read_mask(p)?,
                None => s.mask,
            };
            (s.gt_depth, mask)
        }
        (None, Some(d)) => {
            let depth = read_pfm(d)?;
            let mask = read_optional_mask(&a.mask, depth.size())?;
            (depth, mask)
        }
        _ => return Err(Error::Contract("convt needs --sample or --depth".into())),
    };
    let est: CalibEstimate = read_json(&a.calib)?;
    let flow = convt_flow(&depth, &est, Some(&mask))?;
    write_flow(&a.out, &flow)?;
    Ok(0)
}

fn refine(a: RefineArgs) -> Result<i32> {
    let variant: KpnVariant = a.variant.parse()?;
    let (depth, target, mask) = match &a.sample {
        Some(dir) => {
            let (_, s) = read_sample(dir)?;
            (s.tof_depth, Some(s.gt_depth), s.mask)
        }
        None => {
            let path = a
                .depth
                .as_ref()
                .ok_or_else(|| Error::Contract("refine needs --sample or --depth".into()))?;
            let depth = read_pfm(path)?;
            let target = a.target.as_ref().map(read_pfm).transpose()?;
            let mask = read_optional_mask(&a.mask, depth.size())?;
            (depth, target, mask)
        }
    };
    let mut report = json!({ "variant": variant.name() });
    let pred = if a.fit {
        let target = target
            .as_ref()
            .ok_or_else(|| Error::Contract("--fit needs a target depth".into()))?;
        let opts = FitOptions {
            k: a.k,
            step: a.step,
            iterations: a.iterations,
            lambda: a.lambda,
            ..FitOptions::default()
        };
        let fit = direct_fit(&depth, target, &mask, variant, &opts)?;
        if let Some(path) = &a.kernels_out {
            write_kernels(path, &fit.kernels)?;
        }
        report["iterations"] = json!(fit.trace.len() - 1);
        report["initial_loss"] = json!(fit.trace[0]);
        report["final_loss"] = json!(fit.trace.last());
        apply(&depth, &fit.kernels, variant)?
    } else {
        let path = a
            .kernels
            .as_ref()
            .ok_or_else(|| Error::Contract("refine needs --fit or --kernels".into()))?;
        apply(&depth, &read_kernels(path)?, variant)?
    };
    if let Some(t) = &target {
        let l = metrics::depth_loss(&pred, t, &mask, a.lambda)?;
        report["depth_loss"] = serde_json::to_value(l)?;
    }
    write_pfm(&a.out, &pred)?;
    emit(&a.report, &report)?;
    Ok(0)
}

fn load_or<T>(
    path: &Option<PathBuf>,
    fallback: Option<T>,
    read: impl Fn(&Path) -> Result<T>,
) -> Result<Option<T>> {
    match path {
        Some(p) => read(p).map(Some),
        None => Ok(fallback),
    }
}

fn eval(a: EvalArgs) -> Result<i32> {
    let sample = a
        .sample
        .as_ref()
        .map(read_sample)
        .transpose()?
        .map(|(_, s)| s);
    let gt = load_or(&a.gt, sample.as_ref().map(|s| s.gt_depth.clone()), |p| {
        read_pfm(p)
    })?;
    let input = load_or(
        &a.input,
        sample.as_ref().map(|s| s.tof_depth.clone()),
        |p| read_pfm(p),
    )?;
    let pred = load_or(&a.pred, input.clone(), |p| read_pfm(p))?;
    let flow_gt: Option<FlowField> = load_or(
        &a.flow_gt,
        sample.as_ref().and_then(|s| s.gt_flow.clone()),
        |p| read_flow(p),
    )?;
    let flow_pred: Option<FlowField> = load_or(&a.flow_pred, None, |p| read_flow(p))?;

    let size = gt
        .as_ref()
        .map(ImageBuffer::size)
        .or_else(|| flow_gt.as_ref().map(FlowField::size))
        .ok_or_else(|| Error::Contract("eval needs --sample, --gt or --flow-gt".into()))?;
    let mask = match (&a.mask, &sample) {
        (Some(p), _) => read_mask(p)?,
        (None, Some(s)) => s.mask.clone(),
        (None, None) => Mask::all(size.0, size.1),
    };

    let mut report = MetricReport::default();
    if let (Some(gt), Some(pred)) = (&gt, &pred) {
        let input = input.as_ref().unwrap_or(pred);
        let q = metrics::quantile_mae(input, pred, gt, &mask, a.range_limit)?;
        let l = metrics::depth_loss(pred, gt, &mask, a.lambda)?;
        report = report.with_quantiles(&q).with_depth_loss(&l, a.lambda);
    }
    if let (Some(fp), Some(fg)) = (&flow_pred, &flow_gt) {
        report.aepe = Some(metrics::aepe(fp, fg, &mask)?);
    }
    emit(&a.report, &report)?;
    Ok(0)
}

fn grad(a: GradcheckArgs) -> Result<i32> {
    let ops: Vec<Op> = if a.op == "all" {
        Op::ALL.to_vec()
    } else {
        vec![a.op.parse()?]
    };
    let reports = ops
        .into_iter()
        .map(|op| gradcheck::run(op, a.instances, a.eps, a.seed))
        .collect::<Result<Vec<_>>>()?;
    let pass = reports.iter().all(|r| r.max_rel_err < a.tolerance);
    emit(
        &a.report,
        &json!({ "pass": pass, "tolerance": a.tolerance, "reports": reports }),
    )?;
    Ok(if pass { 0 } else { 1 })
}
