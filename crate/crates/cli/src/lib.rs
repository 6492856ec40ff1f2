//! The `geolle` command line: synth, train, eval, ablate, verify, plot.
//!
//! Every invocation that gets past argument parsing writes
//! `<output root>/<run name>/run_manifest.json`; see [`exit`] for exit codes.

pub mod config;
pub mod exit;
pub mod manifest;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geolle_core::ablation::{run_ablation_suite, AblationOptions, AblationRun};
use geolle_core::checkpoint::Checkpoint;
use geolle_core::digest::config_hash;
use geolle_core::synth::{export_dataset, Dataset, Split, MANIFEST_FILE};
use geolle_core::train::{evaluate, train, MetricsReport, TrainOptions};
use geolle_core::{verify, FusionMode};
use serde_json::{json, Map, Value};

use crate::config::{anchor, RunConfig};
use crate::exit::{Exit, Failure};
use crate::manifest::{now, RunManifest};

/// Environment variable that overrides the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GEOLLE_OUTPUT_ROOT";
/// Test-only hook: corrupts the analytic gradient of every parameter group whose name starts with this value.
pub const FAULT_ENV: &str = "GEOLLE_INJECT_GRAD_FAULT";

#[derive(Debug, Parser)]
#[command(
    name = "geolle",
    version,
    about = "Depth-guided low-light enhancement experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config file (TOML with [synth], [train], [ablation]); defaults apply when omitted
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root for run directories; relative dataset paths are resolved against it
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs", value_name = "DIR")]
    pub output_root: PathBuf,
    /// Run directory name under the output root (default derived from the command)
    #[arg(long, global = true, value_name = "NAME")]
    pub name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired dataset
    Synth(SynthArgs),
    /// Train one model and evaluate it on the val and test splits
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Train the ablation grid over several seeds and tabulate test metrics
    Ablate(AblateArgs),
    /// Run the oracle, attention-invariant and finite-difference gradient checks
    Verify(VerifyArgs),
    /// Draw metric bar charts and loss curves from training reports
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory (overrides train.dataset)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Master seed of the generator (overrides synth.master_seed)
    #[arg(long, value_name = "SEED")]
    pub master_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Fusion mode: full, decoder_fusion, no_correlation, additive or none
    #[arg(long, value_name = "MODE")]
    pub mode: Option<FusionMode>,
    /// Multiplier on the depth-loss weight, e.g. 5 or 0.2
    #[arg(long, value_name = "X")]
    pub lambda_scale: Option<f64>,
    /// Training seed (overrides train.seed)
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Number of epochs (overrides train.epochs)
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Dataset directory (overrides train.dataset)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Continue from the run directory's checkpoint if one exists
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test", value_name = "SPLIT")]
    pub split: Split,
    /// Dataset directory (default: the one recorded in the checkpoint)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Also write every enhanced image as an array container under <run dir>/outputs
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated seeds (overrides ablation.seeds)
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated row labels (overrides ablation.variants)
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub variants: Option<Vec<String>>,
    /// Train the grid cells concurrently
    #[arg(long)]
    pub parallel: bool,
    /// Number of epochs per run (overrides train.epochs)
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Dataset directory (overrides train.dataset)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random cases per oracle and attention suite
    #[arg(long, default_value_t = 100, value_name = "N")]
    pub cases: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Report files (report.json) written by `train` or `ablate`
    #[arg(required = true, num_args = 1.., value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
    /// Output directory for the figures (default: the run directory)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Verify(_) => "verify",
            Command::Plot(_) => "plot",
        }
    }
}

/// What a command hands back for the manifest.
struct Outcome {
    exit: Exit,
    message: Option<String>,
    artifacts: Vec<PathBuf>,
    details: Map<String, Value>,
}

impl Outcome {
    fn ok(artifacts: Vec<PathBuf>, details: Map<String, Value>) -> Self {
        Self {
            exit: Exit::Success,
            message: None,
            artifacts,
            details,
        }
    }
}

fn require_dataset(dir: &Path) -> Result<(), Failure> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(());
    }
    Err(Failure::new(
        Exit::MissingInput,
        format!(
            "no dataset at {}: run `geolle synth` with the same --config and --output-root first, or point --data at an exported dataset",
            dir.display()
        ),
    ))
}

fn details(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

/// Applies flag overrides to the config and returns the default run name.
fn resolve(cfg: &mut RunConfig, command: &Command) -> String {
    match command {
        Command::Synth(a) => {
            if let Some(d) = &a.data {
                cfg.train.dataset = d.clone();
            }
            if let Some(s) = a.master_seed {
                cfg.synth.master_seed = s;
            }
            "synth".into()
        }
        Command::Train(a) => {
            if let Some(m) = a.mode {
                cfg.train.mode = m;
            }
            if let Some(x) = a.lambda_scale {
                cfg.train.lambda_scale = x;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = &a.data {
                cfg.train.dataset = d.clone();
            }
            let mut name = format!("train-{}-seed{}", cfg.train.mode, cfg.train.seed);
            if cfg.train.lambda_scale != 1.0 {
                name.push_str(&format!("-lambda-x{}", cfg.train.lambda_scale));
            }
            name
        }
        Command::Eval(a) => format!("eval-{}", a.split),
        Command::Ablate(a) => {
            if let Some(s) = &a.seeds {
                cfg.ablation.seeds = s.clone();
            }
            if let Some(v) = &a.variants {
                cfg.ablation.variants = v.clone();
            }
            if a.parallel {
                cfg.ablation.parallel = true;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = &a.data {
                cfg.train.dataset = d.clone();
            }
            "ablate".into()
        }
        Command::Verify(_) => "verify".into(),
        Command::Plot(_) => "plot".into(),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let dir = &cfg.train.dataset;
    let summary = export_dataset(&cfg.synth, dir)?;
    let status = if summary.unchanged() {
        "unchanged"
    } else {
        "written"
    };
    println!(
        "{status}: {} ({} train / {} val / {} test, {} files written, {} unchanged)",
        dir.display(),
        summary.manifest.count(Split::Train),
        summary.manifest.count(Split::Val),
        summary.manifest.count(Split::Test),
        summary.files_written,
        summary.files_unchanged
    );
    Ok(Outcome::ok(
        vec![dir.join(MANIFEST_FILE)],
        details(json!({
            "dataset": dir,
            "status": status,
            "unchanged": summary.unchanged(),
            "files_written": summary.files_written,
            "files_unchanged": summary.files_unchanged,
            "dataset_hash": summary.manifest.header.config_hash,
        })),
    ))
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs, run_dir: &Path) -> Result<Outcome, Failure> {
    let t = &cfg.train;
    require_dataset(&t.dataset)?;
    let ckpt = run_dir.join("checkpoint.ckpt");
    let epochs = t.epochs;
    let opts = TrainOptions {
        checkpoint: Some(ckpt.clone()),
        resume: a.resume,
        on_epoch: Some(Box::new(move |e| {
            eprintln!(
                "epoch {}/{}: Lg {:.6} Ld {:.6} L {:.6}",
                e.epoch + 1,
                epochs,
                e.lg,
                e.ld,
                e.total
            );
        })),
        ..TrainOptions::default()
    };
    let out = train(t, opts)?;
    let report_path = run_dir.join("report.json");
    out.report.save(&report_path)?;
    let test = out.report.split(Split::Test);
    println!(
        "{} seed {}: test PSNR {} dB, SSIM {} ({} params, {:.1} s)",
        t.mode,
        t.seed,
        fmt_opt(test.and_then(|m| m.psnr_mean), 3),
        fmt_opt(test.and_then(|m| m.ssim_mean), 4),
        out.report.param_count,
        out.report.wall_clock_s
    );
    Ok(Outcome::ok(
        vec![ckpt, report_path],
        details(json!({
            "mode": t.mode,
            "effective_lambda": t.effective_lambda(),
            "epochs_done": out.checkpoint.header.epochs_done,
            "test_psnr": test.and_then(|m| m.psnr_mean),
            "test_ssim": test.and_then(|m| m.ssim_mean),
        })),
    ))
}

fn cmd_eval(a: &EvalArgs, root: &Path, run_dir: &Path) -> Result<Outcome, Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let dir = a
        .data
        .as_ref()
        .map_or_else(|| ckpt.header.config.dataset.clone(), |d| anchor(root, d));
    require_dataset(&dir)?;
    let dataset = Dataset::open(&dir)?;
    let dump = a.dump.then(|| run_dir.join("outputs"));
    let report = evaluate(&ckpt, &dataset, a.split, dump.as_deref())?;
    let path = run_dir.join("eval.json");
    std::fs::create_dir_all(run_dir)
        .map_err(|e| Failure::new(Exit::Runtime, format!("{}: {e}", run_dir.display())))?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::new(Exit::Runtime, e.to_string()))?;
    std::fs::write(&path, text)
        .map_err(|e| Failure::new(Exit::Runtime, format!("{}: {e}", path.display())))?;
    let m = &report.metrics;
    println!(
        "{} on {} ({} samples): PSNR {} dB ({} infinite), SSIM {}",
        report.mode,
        a.split,
        m.n,
        fmt_opt(m.psnr_mean, 3),
        m.psnr_inf_excluded,
        fmt_opt(m.ssim_mean, 4)
    );
    let mut artifacts = vec![path];
    artifacts.extend(dump);
    Ok(Outcome::ok(
        artifacts,
        details(json!({
            "checkpoint": a.checkpoint,
            "dataset": dir,
            "split": a.split,
            "n": m.n,
            "psnr_mean": m.psnr_mean,
            "ssim_mean": m.ssim_mean,
            "psnr_inf_excluded": m.psnr_inf_excluded,
        })),
    ))
}

fn cmd_ablate(cfg: &RunConfig, run_dir: &Path) -> Result<Outcome, Failure> {
    require_dataset(&cfg.train.dataset)?;
    let variants = cfg.ablation.resolve_variants()?;
    let opts = AblationOptions {
        out_dir: Some(run_dir.to_path_buf()),
        parallel: cfg.ablation.parallel,
        on_run: Some(Box::new(|r: &AblationRun| {
            match (&r.error, r.test_metrics()) {
                (Some(e), _) => eprintln!("{} seed {}: FAILED: {e}", r.label, r.seed),
                (None, Some((p, s))) => eprintln!(
                    "{} seed {}: test PSNR {p:.3} dB, SSIM {s:.4}",
                    r.label, r.seed
                ),
                (None, None) => eprintln!("{} seed {}: no test metrics", r.label, r.seed),
            }
        })),
    };
    let table = run_ablation_suite(&cfg.train, &cfg.ablation.seeds, &variants, &opts)?;
    print!("{}", table.to_csv());
    if let Some(c) = &table.full_vs_none {
        println!(
            "full - none: mean PSNR gap {} dB over seeds {:?}, paired sign {}",
            fmt_opt(c.mean_gap, 3),
            c.seeds,
            c.sign()
        );
    }
    let failed: usize = table.rows.iter().map(|r| r.failed).sum();
    let mut out = Outcome::ok(
        vec![run_dir.join("ablation.csv"), run_dir.join("ablation.json")],
        details(json!({
            "rows": table.rows.len(),
            "failed_runs": failed,
            "full_vs_none": table.full_vs_none,
        })),
    );
    if failed > 0 {
        out.exit = Exit::PartialAblation;
        out.message = Some(format!(
            "{failed} ablation run(s) failed; see ablation.json"
        ));
    }
    Ok(out)
}

fn cmd_verify(a: &VerifyArgs, run_dir: &Path) -> Result<Outcome, Failure> {
    let fault = std::env::var(FAULT_ENV).ok().filter(|s| !s.is_empty());
    let report = verify::run_all(a.cases, fault.as_deref())?;
    for c in &report.checks {
        println!(
            "{} {:<48} cases {:>4}  tolerance {:.1e}  observed {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.tolerance,
            c.observed
        );
    }
    println!(
        "max relative gradient error: {:.3e}",
        report.max_gradient_error()
    );
    std::fs::create_dir_all(run_dir)
        .map_err(|e| Failure::new(Exit::Runtime, format!("{}: {e}", run_dir.display())))?;
    let path = run_dir.join("verify.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::new(Exit::Runtime, e.to_string()))?;
    std::fs::write(&path, text)
        .map_err(|e| Failure::new(Exit::Runtime, format!("{}: {e}", path.display())))?;
    let failing: Vec<&str> = report.failing().map(|c| c.name.as_str()).collect();
    let mut out = Outcome::ok(
        vec![path],
        details(json!({
            "checks": report.checks.len(),
            "failing": failing,
            "max_gradient_error": report.max_gradient_error(),
        })),
    );
    if !failing.is_empty() {
        out.exit = Exit::VerifyFailed;
        out.message = Some(format!("failing checks: {}", failing.join(", ")));
    }
    Ok(out)
}

fn cmd_plot(a: &PlotArgs, root: &Path, run_dir: &Path) -> Result<Outcome, Failure> {
    let mut reports = Vec::with_capacity(a.reports.len());
    for p in &a.reports {
        let r = MetricsReport::load(p)?;
        let mut name = plot::label(&r);
        if reports
            .iter()
            .any(|(n, _): &(String, MetricsReport)| *n == name)
        {
            name = format!("{name} #{}", reports.len() + 1);
        }
        reports.push((name, r));
    }
    let out_dir = a
        .out
        .as_ref()
        .map_or_else(|| run_dir.to_path_buf(), |d| anchor(root, d));
    let files = plot::write_all(&reports, &out_dir)
        .map_err(|e| Failure::new(Exit::Runtime, format!("plot: {e}")))?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(Outcome::ok(files, details(json!({ "reports": a.reports }))))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli, argv: Vec<String>) -> i32 {
    let started = now();
    let root = cli.common.output_root.clone();
    let command = cli.command.name();
    let loaded = RunConfig::load(cli.common.config.as_deref());
    let mut cfg = loaded.clone().unwrap_or_default();
    let default_name = resolve(&mut cfg, &cli.command);
    cfg.anchor_paths(&root);
    let run_dir = root.join(cli.common.name.clone().unwrap_or(default_name));
    let args = match &cli.command {
        Command::Eval(a) => {
            json!({ "checkpoint": a.checkpoint, "split": a.split, "data": a.data, "dump": a.dump })
        }
        Command::Verify(a) => json!({ "cases": a.cases, "fault": std::env::var(FAULT_ENV).ok() }),
        Command::Plot(a) => json!({ "reports": a.reports, "out": a.out }),
        Command::Train(a) => json!({ "resume": a.resume }),
        _ => json!({}),
    };
    let resolved = json!({ "config": cfg, "args": args });
    let mut manifest = RunManifest {
        command: command.into(),
        argv,
        config_hash: config_hash(&resolved).unwrap_or_default(),
        resolved_config: resolved,
        artifacts: Vec::new(),
        started,
        finished: String::new(),
        status: String::new(),
        exit_code: -1,
        message: None,
        details: Map::new(),
    };

    let result = loaded
        .and_then(|_| cfg.validate())
        .and_then(|_| match &cli.command {
            Command::Synth(_) => cmd_synth(&cfg),
            Command::Train(a) => cmd_train(&cfg, a, &run_dir),
            Command::Eval(a) => cmd_eval(a, &root, &run_dir),
            Command::Ablate(_) => cmd_ablate(&cfg, &run_dir),
            Command::Verify(a) => cmd_verify(a, &run_dir),
            Command::Plot(a) => cmd_plot(a, &root, &run_dir),
        });
    let (exit, message) = match result {
        Ok(o) => {
            manifest.artifacts = o.artifacts;
            manifest.details = o.details;
            (o.exit, o.message)
        }
        Err(f) => (f.code, Some(f.message)),
    };
    if let Some(m) = &message {
        eprintln!("error: {m}");
    }
    manifest.finish(exit, message);
    match manifest.save(&run_dir) {
        Ok(_) => exit.code(),
        Err(e) => {
            eprintln!(
                "error: cannot write run manifest in {}: {e}",
                run_dir.display()
            );
            Exit::Runtime.code()
        }
    }
}
