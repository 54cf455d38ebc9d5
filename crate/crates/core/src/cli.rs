//! Command implementations behind the `odereg` binary.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{
    read_grid, read_manifest, synth_sequence, write_grid, write_manifest, Manifest, ManifestEntry,
    SynthKind, SynthSpec,
};
use crate::grid::fold_percentage;
use crate::model::{load_checkpoint, save_checkpoint};
use crate::objective::{nrmse, psnr, ssim};
use crate::train::{
    fit, gradient_check, predict, FitConfig, GradCheckOptions, TrainError, GRADCHECK_TOLERANCE,
};

#[derive(Debug, Parser)]
#[command(
    name = "odereg",
    version,
    about = "Neural-ODE regression of image sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground-truth displacements.
    Synth(SynthArgs),
    /// Fit a velocity model to a sequence.
    Fit(FitArgs),
    /// Predict images and displacements at given times.
    Predict(PredictArgs),
    /// Score predictions against a reference sequence.
    Evaluate(EvaluateArgs),
    /// Check adjoint gradients against finite differences and backprop.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// translate-disk, scale-disk or contract-ring
    #[arg(long)]
    kind: SynthKind,
    /// Grid size, comma separated, e.g. 64,64
    #[arg(long, value_delimiter = ',', required = true)]
    size: Vec<usize>,
    #[arg(long)]
    frames: usize,
    /// Translation in voxels, or final scale ratio
    #[arg(long, allow_negative_numbers = true)]
    magnitude: f64,
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation of additive Gaussian noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON run configuration; omitted keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Per-epoch loss log, one JSON object per line
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    /// Normalized times in [0, 1], comma separated
    #[arg(
        long,
        value_delimiter = ',',
        required = true,
        allow_negative_numbers = true
    )]
    times: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    ref_manifest: PathBuf,
    /// Write a JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, hide = true)]
    corrupt_vjp: bool,
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Usage(e.into()))
}

type Outcome = anyhow::Result<()>;

/// Parses `args` (program name first) and runs the command. Returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return if code == 0 { 0 } else { 2 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.ndgr")
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Outcome {
    let spec = SynthSpec {
        kind: a.kind,
        size: a.size,
        frames: a.frames,
        magnitude: a.magnitude,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let seq = synth_sequence(&spec).context("cannot generate sequence")?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut entries = Vec::new();
    for (k, (frame, &t)) in seq
        .dataset
        .frames()
        .iter()
        .zip(seq.dataset.times())
        .enumerate()
    {
        write_grid(frame, a.out.join(frame_name(k)))?;
        entries.push(ManifestEntry {
            path: frame_name(k),
            time: t,
        });
    }
    for (k, u) in seq.ground_truth.iter().enumerate().skip(1) {
        write_grid(u, a.out.join(format!("truth_{k:03}.ndgr")))?;
    }
    write_manifest(&Manifest { frames: entries }, a.out.join("manifest.json"))?;
    writeln!(
        out,
        "wrote {} frames of {:?} and {} ground-truth fields to {}",
        spec.frames,
        spec.size,
        spec.frames - 1,
        a.out.display()
    )?;
    Ok(())
}

/// Fit configuration plus optional paths, read from JSON.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_model: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub fit: FitConfig,
}

const PATH_KEYS: [&str; 3] = ["manifest", "out_model", "log"];

impl RunConfig {
    /// Path keys sit alongside the fit keys; unknown keys are rejected.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| anyhow!("config must be a JSON object"))?;
        let mut paths = BTreeMap::new();
        for key in PATH_KEYS {
            if let Some(v) = map.remove(key) {
                let s = v
                    .as_str()
                    .ok_or_else(|| anyhow!("{key} must be a string"))?;
                paths.insert(key, PathBuf::from(s));
            }
        }
        let fit: FitConfig = serde_json::from_value(value).context("invalid fit configuration")?;
        Ok(Self {
            manifest: paths.remove("manifest"),
            out_model: paths.remove("out_model"),
            log: paths.remove("log"),
            fit,
        })
    }
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> Outcome {
    let mut rc = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))
                .map_err(usage)?;
            RunConfig::from_json(&text).map_err(usage)?
        }
        None => RunConfig::default(),
    };
    rc.manifest = a.manifest.or(rc.manifest);
    rc.out_model = a.out_model.or(rc.out_model);
    rc.log = a.log.or(rc.log);
    let manifest = rc
        .manifest
        .ok_or_else(|| usage(anyhow!("--manifest is required")))?;
    let out_model = rc
        .out_model
        .ok_or_else(|| usage(anyhow!("--out-model is required")))?;
    rc.fit.validate().map_err(usage)?;

    let dataset =
        read_manifest(&manifest).with_context(|| format!("cannot load {}", manifest.display()))?;
    let report = fit(&dataset, &rc.fit).map_err(|e| match e {
        TrainError::Config(_) => usage(e),
        other => anyhow::Error::from(other).context("fit failed"),
    })?;
    save_checkpoint(&report.final_model, &out_model)
        .with_context(|| format!("cannot write {}", out_model.display()))?;
    if let Some(log) = &rc.log {
        let mut text = String::new();
        for b in &report.loss_history {
            text.push_str(&serde_json::to_string(b)?);
            text.push('\n');
        }
        std::fs::write(log, text).with_context(|| format!("cannot write {}", log.display()))?;
    }
    let first = &report.loss_history[0];
    let last = report.loss_history.last().expect("epochs ≥ 1");
    writeln!(
        out,
        "fitted {} epochs in {:.1}s: loss {:.6} -> {:.6}",
        report.loss_history.len(),
        report.wall_time,
        first.total,
        last.total
    )?;
    Ok(())
}

fn time_tag(t: f64) -> String {
    format!("t{t:.4}")
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Outcome {
    let model =
        load_checkpoint(&a.model).with_context(|| format!("cannot load {}", a.model.display()))?;
    let baseline = read_grid(&a.baseline)?.into_scalar().ok_or_else(|| {
        anyhow!(
            "{} is a vector field, expected an image",
            a.baseline.display()
        )
    })?;
    let mut times = a.times;
    times.sort_by(f64::total_cmp);
    times.dedup();
    let preds = predict(&model, &baseline, &times)?;
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("cannot create {}", a.out.display()))?;
    for (t, (img, u)) in times.iter().zip(&preds) {
        write_grid(img, a.out.join(format!("image_{}.ndgr", time_tag(*t))))?;
        write_grid(u, a.out.join(format!("disp_{}.ndgr", time_tag(*t))))?;
    }
    writeln!(
        out,
        "wrote {} predictions to {}",
        preds.len(),
        a.out.display()
    )?;
    Ok(())
}

/// Published results of the full method on real data, kept for context.
pub fn reference_annotations() -> Value {
    json!({
        "note": "published results on brain and cardiac MRI; reference only, not comparable to synthetic runs",
        "ADNI": {"nrmse": 0.159, "ssim": 0.842, "psnr": 28.673, "fold_pct": 1.8e-3},
        "ACDC": {"nrmse": 0.283, "ssim": 0.712, "psnr": 25.547, "fold_pct": 2.3e-3},
    })
}

pub const REPORT_COLUMNS: [&str; 4] = ["nrmse", "ssim", "psnr", "fold_pct"];

/// Files `<prefix>_t<time>.ndgr` in `dir`, keyed by the time in the name.
fn tagged_files(dir: &Path, prefix: &str) -> anyhow::Result<Vec<(f64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(t) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix("_t"))
            .and_then(|r| r.strip_suffix(".ndgr"))
            .and_then(|r| r.parse::<f64>().ok())
        else {
            continue;
        };
        found.push((t, path));
    }
    Ok(found)
}

fn psnr_value(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Outcome {
    let reference = read_manifest(&a.ref_manifest)
        .with_context(|| format!("cannot load {}", a.ref_manifest.display()))?;
    let images = tagged_files(&a.pred_dir, "image")?;
    let fields = tagged_files(&a.pred_dir, "disp")?;
    let lookup = |files: &[(f64, PathBuf)], t: f64| {
        files
            .iter()
            .find(|(s, _)| (s - t).abs() < 5e-5)
            .map(|(_, p)| p.clone())
    };

    let missing: Vec<String> = reference
        .normalized_times()
        .iter()
        .filter(|&&t| lookup(&images, t).is_none())
        .map(|t| format!("{t:.4}"))
        .collect();
    if !missing.is_empty() {
        bail!("no prediction for reference time(s) {}", missing.join(", "));
    }

    let mut rows = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut folds_seen = 0usize;
    writeln!(
        out,
        "{:>8} {:>10} {:>10} {:>10} {:>10}",
        "time", "nrmse", "ssim", "psnr", "fold_pct"
    )?;
    for (frame, &t) in reference.frames().iter().zip(reference.normalized_times()) {
        let path = lookup(&images, t).expect("checked above");
        let pred = read_grid(&path)?
            .into_scalar()
            .ok_or_else(|| anyhow!("{} is not an image", path.display()))?;
        let e = nrmse(&pred, frame).with_context(|| format!("nrmse at t={t:.4}"))?;
        let s = ssim(&pred, frame).with_context(|| format!("ssim at t={t:.4}"))?;
        let p = psnr(&pred, frame, 1.0)?;
        let fold = match lookup(&fields, t) {
            Some(fp) => {
                let u = read_grid(&fp)?
                    .into_vector()
                    .ok_or_else(|| anyhow!("{} is not a displacement field", fp.display()))?;
                Some(100.0 * fold_percentage(&u)?)
            }
            None => None,
        };
        sums[0] += e;
        sums[1] += s;
        sums[2] += p;
        if let Some(f) = fold {
            sums[3] += f;
            folds_seen += 1;
        }
        let fold_text = fold.map_or("-".to_string(), |f| format!("{f:.4e}"));
        writeln!(
            out,
            "{t:>8.4} {e:>10.5} {s:>10.5} {p:>10.3} {fold_text:>10}"
        )?;
        rows.push(
            json!({"time": t, "nrmse": e, "ssim": s, "psnr": psnr_value(p), "fold_pct": fold}),
        );
    }
    let n = rows.len() as f64;
    let mean_fold = (folds_seen > 0).then(|| sums[3] / folds_seen as f64);
    writeln!(
        out,
        "{:>8} {:>10.5} {:>10.5} {:>10.3} {:>10}",
        "mean",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        mean_fold.map_or("-".to_string(), |f| format!("{f:.4e}"))
    )?;
    let refs = reference_annotations();
    writeln!(
        out,
        "reference (published, real MRI): ADNI nrmse {} ssim {} psnr {} fold_pct {}; ACDC nrmse {} ssim {} psnr {} fold_pct {}",
        refs["ADNI"]["nrmse"],
        refs["ADNI"]["ssim"],
        refs["ADNI"]["psnr"],
        refs["ADNI"]["fold_pct"],
        refs["ACDC"]["nrmse"],
        refs["ACDC"]["ssim"],
        refs["ACDC"]["psnr"],
        refs["ACDC"]["fold_pct"],
    )
    ?;

    if let Some(path) = &a.report {
        let report = json!({
            "columns": REPORT_COLUMNS,
            "frames": rows,
            "mean": {"nrmse": sums[0] / n, "ssim": sums[1] / n, "psnr": psnr_value(sums[2] / n), "fold_pct": mean_fold},
            "reference": refs,
        });
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let opts = GradCheckOptions {
        seed: a.seed,
        size: a.size,
        corrupt_vjp: a.corrupt_vjp,
    };
    let report = gradient_check(&opts).map_err(|e| match e {
        TrainError::Config(_) => usage(e),
        other => other.into(),
    })?;
    for (label, d) in [
        ("adjoint vs finite differences", &report.adjoint_vs_fd),
        ("adjoint vs direct", &report.adjoint_vs_direct),
        ("loss gradient vs finite differences", &report.loss_vs_fd),
    ] {
        writeln!(
            out,
            "{label}: max relative error {:.3e} at {}",
            d.max_rel_error, d.worst
        )?;
    }
    if report.passed() {
        writeln!(out, "gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})")?;
        Ok(())
    } else {
        let (label, d) = report.worst();
        bail!(
            "gradcheck failed: {label} error {:.3e} at {} exceeds {GRADCHECK_TOLERANCE:e}",
            d.max_rel_error,
            d.worst
        )
    }
}
