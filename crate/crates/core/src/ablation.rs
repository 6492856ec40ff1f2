//! Ablation grid: trains every variant over every seed and tabulates test metrics.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhancer::FusionMode;
use crate::error::{Error, Result};
use crate::synth::Split;
use crate::train::{mean_std, train, MetricsReport, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    /// Row label; also the per-variant output directory name.
    pub label: String,
    pub mode: FusionMode,
    pub lambda_scale: f64,
}

impl AblationVariant {
    pub fn new(label: impl Into<String>, mode: FusionMode, lambda_scale: f64) -> Self {
        Self {
            label: label.into(),
            mode,
            lambda_scale,
        }
    }

    pub fn plain(mode: FusionMode) -> Self {
        Self::new(mode.as_str(), mode, 1.0)
    }

    /// The seven standard rows: every fusion mode plus the two λ probes on `full`.
    pub fn standard() -> Vec<Self> {
        let mut v: Vec<Self> = FusionMode::ALL.iter().map(|&m| Self::plain(m)).collect();
        v.push(Self::new("full-lambda-x5", FusionMode::Full, 5.0));
        v.push(Self::new("full-lambda-div5", FusionMode::Full, 0.2));
        v
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            lambda_scale: base.lambda_scale * self.lambda_scale,
            seed,
            ..base.clone()
        }
    }
}

/// One (variant, seed) cell of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRun {
    pub fn test_metrics(&self) -> Option<(f64, f64)> {
        let t = self.report.as_ref()?.split(Split::Test)?;
        Some((t.psnr_mean?, t.ssim_mean?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: FusionMode,
    /// Effective λ.
    pub lambda: f64,
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    /// Seeds that produced metrics.
    pub n: usize,
    pub failed: usize,
}

/// Per-seed PSNR differences `a − b` over the seeds where both runs succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: String,
    pub b: String,
    pub seeds: Vec<u64>,
    pub diffs: Vec<f64>,
    pub mean_gap: Option<f64>,
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
}

impl PairedComparison {
    pub fn new(runs: &[AblationRun], a: &str, b: &str) -> Self {
        let (mut seeds, mut diffs) = (Vec::new(), Vec::new());
        for ra in runs.iter().filter(|r| r.label == a) {
            let rb = runs.iter().find(|r| r.label == b && r.seed == ra.seed);
            if let (Some((pa, _)), Some((pb, _))) =
                (ra.test_metrics(), rb.and_then(AblationRun::test_metrics))
            {
                seeds.push(ra.seed);
                diffs.push(pa - pb);
            }
        }
        Self {
            a: a.into(),
            b: b.into(),
            mean_gap: mean_std(&diffs).map(|m| m.0),
            positive: diffs.iter().filter(|d| **d > 0.0).count(),
            negative: diffs.iter().filter(|d| **d < 0.0).count(),
            ties: diffs.iter().filter(|d| **d == 0.0).count(),
            seeds,
            diffs,
        }
    }

    /// `+k/-m/=t`.
    pub fn sign(&self) -> String {
        format!("+{}/-{}/={}", self.positive, self.negative, self.ties)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
    /// `full` against `none`, when both are in the grid.
    pub full_vs_none: Option<PairedComparison>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| format!("{x:.6}"))
}

impl AblationTable {
    pub fn from_runs(
        base: &TrainConfig,
        seeds: &[u64],
        variants: &[AblationVariant],
        runs: Vec<AblationRun>,
    ) -> Self {
        let rows = variants
            .iter()
            .map(|v| {
                let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.label == v.label).collect();
                let ok: Vec<(f64, f64)> = mine.iter().filter_map(|r| r.test_metrics()).collect();
                let p = mean_std(&ok.iter().map(|m| m.0).collect::<Vec<_>>());
                let s = mean_std(&ok.iter().map(|m| m.1).collect::<Vec<_>>());
                AblationRow {
                    label: v.label.clone(),
                    mode: v.mode,
                    lambda: v.apply(base, 0).effective_lambda(),
                    psnr_mean: p.map(|x| x.0),
                    psnr_std: p.map(|x| x.1),
                    ssim_mean: s.map(|x| x.0),
                    ssim_std: s.map(|x| x.1),
                    n: ok.len(),
                    failed: mine.len() - ok.len(),
                }
            })
            .collect();
        let has = |l: &str| variants.iter().any(|v| v.label == l);
        let full_vs_none =
            (has("full") && has("none")).then(|| PairedComparison::new(&runs, "full", "none"));
        Self {
            seeds: seeds.to_vec(),
            rows,
            runs,
            full_vs_none,
        }
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Header plus one line per variant; metric cells of variants with no successful seed read `failed`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("label,mode,lambda,psnr_mean,psnr_std,ssim_mean,ssim_std,n,failed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.mode,
                r.lambda,
                cell(r.psnr_mean),
                cell(r.psnr_std),
                cell(r.ssim_mean),
                cell(r.ssim_std),
                r.n,
                r.failed
            );
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

pub type RunCallback = Box<dyn Fn(&AblationRun) + Send + Sync>;

#[derive(Default)]
pub struct AblationOptions {
    /// Each run writes `<out_dir>/<label>/seed<k>/{checkpoint.ckpt,report.json}`.
    pub out_dir: Option<PathBuf>,
    /// Train runs concurrently instead of one after another.
    pub parallel: bool,
    pub on_run: Option<RunCallback>,
}

pub fn run_dir(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    out_dir.join(label).join(format!("seed{seed}"))
}

fn run_one(
    base: &TrainConfig,
    v: &AblationVariant,
    seed: u64,
    out_dir: Option<&Path>,
) -> AblationRun {
    let cfg = v.apply(base, seed);
    let dir = out_dir.map(|d| run_dir(d, &v.label, seed));
    let attempt = || -> Result<MetricsReport> {
        let opts = TrainOptions {
            checkpoint: dir.as_ref().map(|d| d.join("checkpoint.ckpt")),
            eval_splits: vec![Split::Test],
            ..TrainOptions::default()
        };
        let out = train(&cfg, opts)?;
        if let Some(d) = &dir {
            out.report.save(&d.join("report.json"))?;
        }
        Ok(out.report)
    };
    let result = match catch_unwind(AssertUnwindSafe(attempt)) {
        Ok(r) => r.map_err(|e| e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    };
    let (report, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    AblationRun {
        label: v.label.clone(),
        seed,
        report,
        error,
    }
}

/// Trains `variants × seeds`. A failing run is recorded in its cell and does not stop the others.
pub fn run_ablation_suite(
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[AblationVariant],
    opts: &AblationOptions,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].iter().any(|w| w.label == v.label) {
            return Err(Error::Config(format!(
                "duplicate ablation label `{}`",
                v.label
            )));
        }
        if !(v.lambda_scale.is_finite() && v.lambda_scale >= 0.0) {
            return Err(Error::Config(format!(
                "ablation `{}`: lambda_scale must be finite and non-negative",
                v.label
            )));
        }
    }
    base.check_paths()?;
    let cells: Vec<(&AblationVariant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let go = |&(v, s): &(&AblationVariant, u64)| {
        let run = run_one(base, v, s, opts.out_dir.as_deref());
        if let Some(cb) = &opts.on_run {
            cb(&run);
        }
        run
    };
    let runs: Vec<AblationRun> = if opts.parallel {
        cells.par_iter().map(go).collect()
    } else {
        cells.iter().map(go).collect()
    };
    let table = AblationTable::from_runs(base, seeds, variants, runs);
    if let Some(d) = &opts.out_dir {
        table.save(d)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_run(label: &str, seed: u64, psnr: Option<f64>) -> AblationRun {
        use crate::train::{SampleMetrics, SplitMetrics};
        let report = psnr.map(|p| {
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let m = SplitMetrics::from_samples(
                Split::Test,
                vec![SampleMetrics {
                    id: "test-00000".into(),
                    psnr: p,
                    ssim: 0.5,
                }],
            );
            MetricsReport::stub(cfg, vec![m])
        });
        AblationRun {
            label: label.into(),
            seed,
            error: report.is_none().then(|| "boom".into()),
            report,
        }
    }

    #[test]
    fn standard_grid_has_seven_distinct_rows() {
        let v = AblationVariant::standard();
        assert_eq!(v.len(), 7);
        let base = TrainConfig::default();
        let lambdas: Vec<f64> = v
            .iter()
            .map(|x| x.apply(&base, 0).effective_lambda())
            .collect();
        assert!((lambdas[5] - 0.5).abs() < 1e-12);
        assert!((lambdas[6] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn paired_sign_and_failed_cells() {
        let runs = vec![
            fake_run("full", 0, Some(20.0)),
            fake_run("full", 1, Some(19.0)),
            fake_run("full", 2, None),
            fake_run("none", 0, Some(19.5)),
            fake_run("none", 1, Some(19.0)),
            fake_run("none", 2, Some(18.0)),
        ];
        let variants = vec![
            AblationVariant::plain(FusionMode::Full),
            AblationVariant::plain(FusionMode::None),
        ];
        let t = AblationTable::from_runs(&TrainConfig::default(), &[0, 1, 2], &variants, runs);
        let cmp = t.full_vs_none.as_ref().unwrap();
        assert_eq!(cmp.seeds, vec![0, 1]);
        assert_eq!(cmp.sign(), "+1/-0/=1");
        assert!((cmp.mean_gap.unwrap() - 0.25).abs() < 1e-12);
        let full = t.row("full").unwrap();
        assert_eq!((full.n, full.failed), (2, 1));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv
            .lines()
            .next()
            .unwrap()
            .contains("psnr_mean,psnr_std,ssim_mean,ssim_std"));
    }

    #[test]
    fn all_failed_row_is_marked() {
        let variants = vec![AblationVariant::plain(FusionMode::None)];
        let t = AblationTable::from_runs(
            &TrainConfig::default(),
            &[0],
            &variants,
            vec![fake_run("none", 0, None)],
        );
        assert!(t
            .to_csv()
            .lines()
            .nth(1)
            .unwrap()
            .contains("failed,failed,failed,failed,0,1"));
    }
}
