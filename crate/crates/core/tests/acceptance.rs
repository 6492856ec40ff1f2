//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 6-8 and 10 check correctness and make the process fail.
//! Criteria 5 and 9 are empirical outcomes of the synthetic benchmark; they
//! are reported with all numbers but do not fail the run.
//!
//! `GEOLLE_ACCEPTANCE_EPOCHS=<n>` shortens training for local iteration; the
//! output then says it is not the pinned protocol.

use std::time::Instant;

use geolle_core::ablation::{
    run_ablation_suite, AblationOptions, AblationRun, AblationTable, AblationVariant,
};
use geolle_core::metrics::{psnr, ssim};
use geolle_core::synth::{export_dataset, Split, SynthConfig};
use geolle_core::train::{mean_std, train, TrainConfig, TrainOptions};
use geolle_core::{verify, FusionMode, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_CASES: usize = 50;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_SECONDS: f64 = 10.0;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const IDENTITY_INPUTS: usize = 10;
const INVARIANT_CASES: usize = 100;
const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 30;
const MIN_PSNR_GAIN_DB: f64 = 0.2;
const MIN_FULL_OVER_ADDITIVE_SEEDS: usize = 2;
/// Wall-clock budget for the grid, stated for a 4-core machine.
const GRID_BUDGET_SECONDS: f64 = 45.0 * 60.0;
const LEDGER_TOL: f64 = 1e-6;
const PSNR_OFFSET_TOL: f64 = 1e-10;
const SSIM_SELF_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-12;
const LAMBDA_PROBE_SEED: u64 = 0;
const LAMBDA_BAND_DB: f64 = 1.5;

/// Benchmark model: the default three-level layout at half width with one block per level.
fn bench_model() -> ModelConfig {
    ModelConfig {
        widths: vec![8, 16, 32],
        blocks_per_level: 1,
        depth_base_width: 8,
        ..ModelConfig::default()
    }
}

struct Report {
    hard_failures: Vec<u8>,
}

impl Report {
    fn line(&mut self, id: u8, enforced: bool, passed: bool, name: &str, detail: String) {
        let verdict = if passed { "PASS" } else { "FAIL" };
        let note = if !passed && !enforced {
            " (reported, not enforced)"
        } else {
            ""
        };
        println!("criterion {id:>2} [{verdict}] {name}: {detail}{note}");
        if enforced && !passed {
            self.hard_failures.push(id);
        }
    }
}

fn random_image(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

fn test_psnr(run: &AblationRun) -> Option<f64> {
    run.test_metrics().map(|m| m.0)
}

fn runs<'a>(t: &'a AblationTable, label: &str) -> Vec<&'a AblationRun> {
    t.runs.iter().filter(|r| r.label == label).collect()
}

fn main() {
    let mut rep = Report {
        hard_failures: Vec::new(),
    };
    let epochs: usize = std::env::var("GEOLLE_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(EPOCHS);
    if epochs != EPOCHS {
        println!("note: {epochs} epochs instead of {EPOCHS}; training criteria do not follow the pinned protocol");
    }

    // 1
    let t = Instant::now();
    let oracle = verify::oracle_equivalence(ORACLE_CASES, 1).expect("oracle suite runs");
    let secs = t.elapsed().as_secs_f64();
    rep.line(
        1,
        true,
        oracle.observed < ORACLE_TOL && secs < ORACLE_SECONDS,
        "oracle equivalence",
        format!(
            "max |graph - loop| {:.2e} (< {ORACLE_TOL:.0e}) over {} instances in {secs:.2} s (< {ORACLE_SECONDS} s)",
            oracle.observed, oracle.cases
        ),
    );

    // 2
    let t = Instant::now();
    let mut groups = verify::gradient_check_block(5, None).expect("block gradient check runs");
    for mode in FusionMode::ALL {
        groups.extend(
            verify::gradient_check_model(mode, 6, None).expect("model gradient check runs"),
        );
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = groups
        .iter()
        .max_by(|a, b| a.observed.total_cmp(&b.observed))
        .expect("groups");
    rep.line(
        2,
        true,
        worst.observed < GRAD_TOL && secs < GRAD_SECONDS,
        "gradient correctness",
        format!(
            "{} parameter groups, max relative error {:.2e} at `{}` (< {GRAD_TOL:.0e}) in {secs:.1} s (< {GRAD_SECONDS} s)",
            groups.len(),
            worst.observed,
            worst.name
        ),
    );

    // 3
    let none = Model::new(bench_model(), FusionMode::None).expect("model");
    let full = Model::new(bench_model(), FusionMode::Full).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identical = 0;
    for i in 0..IDENTITY_INPUTS {
        let p_none = none.init_params::<f32>(i as u64);
        let mut p_full = full.init_params::<f32>(i as u64);
        for (_, t) in p_full.iter_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.05f32..0.05));
        }
        let mut p_none_matched = p_none.clone();
        for (name, t) in p_none_matched.iter_mut() {
            *t = p_full.get(name).expect("shared parameter").clone();
        }
        p_full.zero_prefix("fuse.");
        let x = Tensor::<f32>::from_fn(vec![1, 3, 64, 64], |_| rng.random::<f32>());
        let (a, _) = none.forward(&p_none_matched, &x).expect("forward");
        let (b, _) = full.forward(&p_full, &x).expect("forward");
        identical += usize::from(a == b);
    }
    rep.line(
        3,
        true,
        identical == IDENTITY_INPUTS,
        "zero-parameter identity",
        format!("full with zeroed fusion equals none bit-for-bit on {identical}/{IDENTITY_INPUTS} random inputs"),
    );

    // 4
    let suites = [
        verify::attention_row_sums(INVARIANT_CASES, 2).expect("suite"),
        verify::attention_key_permutation(INVARIANT_CASES, 3).expect("suite"),
        verify::attention_uniform_limit(INVARIANT_CASES, 4).expect("suite"),
    ];
    rep.line(
        4,
        true,
        suites
            .iter()
            .all(|s| s.passed && s.cases >= INVARIANT_CASES),
        "attention invariants",
        suites
            .iter()
            .map(|s| {
                format!(
                    "{} {:.1e} < {:.0e} ({} cases)",
                    s.name, s.observed, s.tolerance, s.cases
                )
            })
            .collect::<Vec<_>>()
            .join("; "),
    );

    // 8 (no training needed)
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::<f64>::from_fn(vec![1, 3, 32, 32], |_| rng.random_range(0.0..0.9));
    let mut b = a.clone();
    b.data_mut().iter_mut().for_each(|v| *v += 0.1);
    let offset = psnr(&a, &b).expect("psnr");
    let (x, y) = (
        random_image(&mut rng, vec![1, 3, 32, 32]),
        random_image(&mut rng, vec![1, 3, 32, 32]),
    );
    let self_ssim = ssim(&x, &x).expect("ssim");
    let psnr_asym = (psnr(&x, &y).expect("psnr") - psnr(&y, &x).expect("psnr")).abs();
    let ssim_asym = (ssim(&x, &y).expect("ssim") - ssim(&y, &x).expect("ssim")).abs();
    rep.line(
        8,
        true,
        (offset - 20.0).abs() < PSNR_OFFSET_TOL
            && (self_ssim - 1.0).abs() < SSIM_SELF_TOL
            && psnr_asym < SYMMETRY_TOL
            && ssim_asym < SYMMETRY_TOL,
        "metric correctness",
        format!(
            "offset-0.1 PSNR {offset:.12} dB, ssim(x,x) - 1 = {:.1e}, asymmetry psnr {psnr_asym:.1e} ssim {ssim_asym:.1e}",
            self_ssim - 1.0
        ),
    );

    // Training runs shared by 5, 6, 7, 9, 10.
    let data = tempfile::tempdir().expect("tempdir");
    let t = Instant::now();
    export_dataset(&SynthConfig::default(), data.path()).expect("export default benchmark");
    eprintln!(
        "exported default benchmark in {:.1} s",
        t.elapsed().as_secs_f64()
    );
    let base = TrainConfig {
        epochs,
        dataset: data.path().to_path_buf(),
        model: bench_model(),
        ..TrainConfig::default()
    };
    let progress = AblationOptions {
        on_run: Some(Box::new(|r: &AblationRun| match (&r.error, &r.report) {
            (None, Some(m)) => eprintln!(
                "  {} seed {}: test PSNR {:.3} dB SSIM {:.4} ({:.0} s)",
                r.label,
                r.seed,
                r.test_metrics().map_or(f64::NAN, |m| m.0),
                r.test_metrics().map_or(f64::NAN, |m| m.1),
                m.wall_clock_s
            ),
            (e, _) => eprintln!("  {} seed {}: failed: {e:?}", r.label, r.seed),
        })),
        ..AblationOptions::default()
    };
    let t = Instant::now();
    let grid = run_ablation_suite(
        &base,
        &SEEDS,
        &[
            AblationVariant::plain(FusionMode::Full),
            AblationVariant::plain(FusionMode::None),
            AblationVariant::plain(FusionMode::Additive),
        ],
        &progress,
    )
    .expect("ablation grid");
    let grid_secs = t.elapsed().as_secs_f64();
    for row in &grid.rows {
        println!(
            "  {:<9} lambda {:<5} test PSNR {:.3} +- {:.3} dB, SSIM {:.4} +- {:.4} over {} seeds",
            row.label,
            row.lambda,
            row.psnr_mean.unwrap_or(f64::NAN),
            row.psnr_std.unwrap_or(f64::NAN),
            row.ssim_mean.unwrap_or(f64::NAN),
            row.ssim_std.unwrap_or(f64::NAN),
            row.n
        );
    }

    // 5
    let per_seed = |label: &str| -> Vec<Option<f64>> {
        runs(&grid, label).iter().map(|r| test_psnr(r)).collect()
    };
    let (f, n, ad) = (per_seed("full"), per_seed("none"), per_seed("additive"));
    let cmp = grid.full_vs_none.clone().expect("full and none in grid");
    let gain = cmp.mean_gap.unwrap_or(f64::NEG_INFINITY);
    let all_ran = cmp.seeds.len() == SEEDS.len();
    let over_additive = f
        .iter()
        .zip(&ad)
        .filter(|(a, b)| matches!((a, b), (Some(a), Some(b)) if a >= b))
        .count();
    let fmt = |v: &[Option<f64>]| {
        v.iter()
            .map(|x| x.map_or("failed".into(), |x| format!("{x:.3}")))
            .collect::<Vec<_>>()
            .join(", ")
    };
    rep.line(
        5,
        false,
        all_ran && gain >= MIN_PSNR_GAIN_DB,
        "direction of effect",
        format!(
            "mean PSNR gain full - none {gain:+.3} dB (>= +{MIN_PSNR_GAIN_DB}), paired sign {}; per seed full [{}] none [{}] additive [{}]; full >= additive on {over_additive}/{} seeds (soft, >= {MIN_FULL_OVER_ADDITIVE_SEEDS}); grid {:.0} s on {} thread(s) (budget {GRID_BUDGET_SECONDS} s on 4 cores)",
            cmp.sign(),
            fmt(&f),
            fmt(&n),
            fmt(&ad),
            SEEDS.len(),
            grid_secs,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );
    println!(
        "  soft check full >= additive: {}",
        if over_additive >= MIN_FULL_OVER_ADDITIVE_SEEDS {
            "PASS"
        } else {
            "FAIL"
        }
    );

    // 6
    let reports: Vec<_> = grid.runs.iter().filter_map(|r| r.report.as_ref()).collect();
    let ledger = reports
        .iter()
        .map(|r| r.ledger_max_error())
        .fold(0.0, f64::max);
    let steps: usize = reports.iter().map(|r| r.steps.len()).sum();
    rep.line(
        6,
        true,
        reports.len() == grid.runs.len() && ledger < LEDGER_TOL,
        "loss ledger",
        format!("max |L - (Lg + lambda Ld)| {ledger:.2e} (< {LEDGER_TOL:.0e}) over {steps} steps of {} runs", reports.len()),
    );

    // 7
    let depth: Vec<String> = grid
        .runs
        .iter()
        .filter(|r| r.label != "none")
        .map(|r| {
            let rep = r.report.as_ref();
            let (i, f) = (
                rep.and_then(|x| x.depth_mse_init),
                rep.and_then(|x| x.depth_mse_final),
            );
            format!(
                "{} s{} {:.4}->{:.4}",
                r.label,
                r.seed,
                i.unwrap_or(f64::NAN),
                f.unwrap_or(f64::NAN)
            )
        })
        .collect();
    let depth_ok = grid.runs.iter().filter(|r| r.label != "none").all(|r| {
        r.report.as_ref().is_some_and(
            |x| matches!((x.depth_mse_init, x.depth_mse_final), (Some(i), Some(f)) if f < i),
        )
    });
    rep.line(
        7,
        true,
        depth_ok,
        "distillation sanity",
        format!("held-out depth MSE init->final: {}", depth.join(", ")),
    );

    // 9
    let base_mean = mean_std(&f.iter().flatten().copied().collect::<Vec<_>>()).map(|m| m.0);
    let probes = run_ablation_suite(
        &base,
        &[LAMBDA_PROBE_SEED],
        &[
            AblationVariant::new("full-lambda-x5", FusionMode::Full, 5.0),
            AblationVariant::new("full-lambda-div5", FusionMode::Full, 0.2),
        ],
        &progress,
    )
    .expect("lambda probes");
    let probe_text: Vec<String> = probes
        .runs
        .iter()
        .map(|r| match (test_psnr(r), base_mean) {
            (Some(p), Some(b)) => format!("{} {p:.3} dB ({:+.3})", r.label, p - b),
            _ => format!(
                "{} failed: {}",
                r.label,
                r.error.clone().unwrap_or_default()
            ),
        })
        .collect();
    let probes_ok = probes.runs.iter().all(|r| match (test_psnr(r), base_mean) {
        (Some(p), Some(b)) => (p - b).abs() <= LAMBDA_BAND_DB,
        _ => false,
    });
    rep.line(
        9,
        false,
        probes_ok,
        "lambda robustness probe",
        format!(
            "seed {LAMBDA_PROBE_SEED}: {} vs base mean {:.3} dB (band +-{LAMBDA_BAND_DB} dB)",
            probe_text.join(", "),
            base_mean.unwrap_or(f64::NAN)
        ),
    );

    // 10
    let original = runs(&grid, "none")
        .into_iter()
        .find(|r| r.seed == SEEDS[0])
        .and_then(|r| r.report.clone());
    let rerun = train(
        &TrainConfig {
            mode: FusionMode::None,
            seed: SEEDS[0],
            ..base.clone()
        },
        TrainOptions {
            eval_splits: vec![Split::Test],
            ..TrainOptions::default()
        },
    )
    .expect("rerun")
    .report;
    let same = original.as_ref().is_some_and(|o| {
        o.steps == rerun.steps
            && o.epochs == rerun.epochs
            && o.eval == rerun.eval
            && o.depth_mse_final == rerun.depth_mse_final
    });
    rep.line(
        10,
        true,
        same,
        "reproducibility",
        format!(
            "rerun of none seed {}: {} logged steps and test metrics {}",
            SEEDS[0],
            rerun.steps.len(),
            if same {
                "identical bit-for-bit"
            } else {
                "differ"
            }
        ),
    );

    if rep.hard_failures.is_empty() {
        println!("acceptance: all enforced criteria pass");
    } else {
        println!(
            "acceptance: enforced criteria failed: {:?}",
            rep.hard_failures
        );
        std::process::exit(1);
    }
}
