//! Self-checks: loop-oracle equivalence of the fusion block, attention
//! invariants, and central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{FusionMode, Model, ModelConfig};
use crate::error::Result;
use crate::fusion::{self, oracle, FusionVariant, HdgffmParams};
use crate::graph::Graph;
use crate::params::{stream_rng, ParamSet};
use crate::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const PERMUTATION_TOL: f64 = 1e-12;
pub const UNIFORM_LIMIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub tolerance: f64,
    /// Worst observed error.
    pub observed: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, cases: usize, tolerance: f64, observed: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            tolerance,
            passed: observed < tolerance,
            observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn max_gradient_error(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with("gradient"))
            .map(|c| c.observed)
            .fold(0.0, f64::max)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// One seeded random block instance with `C·H·W` small enough for the oracle.
pub struct Instance {
    pub img: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub params: HdgffmParams<f64>,
    pub variant: FusionVariant,
}

pub fn random_instance(seed: u64, max_c: usize, max_hw: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=max_c);
    let cd = rng.random_range(1..=max_c);
    let (h, w) = (rng.random_range(1..=max_hw), rng.random_range(1..=max_hw));
    let n = rng.random_range(1..=2);
    let variant = [
        FusionVariant::Gated,
        FusionVariant::Ungated,
        FusionVariant::Additive,
    ][rng.random_range(0..3)];
    let share_query = rng.random_bool(0.5);
    let tau = rng.random_range(0.05..2.0);
    let divisors: Vec<usize> = (1..=c).filter(|d| c % d == 0).collect();
    let heads = divisors[rng.random_range(0..divisors.len())];
    let scale = rng.random_range(0.5..2.0);
    let params = HdgffmParams::random(c, cd, variant, share_query, rng.random(), scale)
        .with_tau(tau)
        .with_heads(heads);
    Instance {
        img: rand_tensor(&mut rng, vec![n, c, h, w], -1.0, 1.0),
        depth: rand_tensor(&mut rng, vec![n, cd, h, w], -1.0, 1.0),
        params,
        variant,
    }
}

/// Graph implementation vs nested-loop reference on `cases` random instances (C ≤ 8, H, W ≤ 5).
pub fn oracle_equivalence(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let inst = random_instance(seed.wrapping_add(i as u64), 8, 5);
        let got =
            fusion::hdgffm_forward_variant(&inst.img, &inst.depth, &inst.params, inst.variant)?;
        let want =
            oracle::hdgffm_oracle_variant(&inst.img, &inst.depth, &inst.params, inst.variant)?;
        worst = worst.max(got.max_abs_diff(&want));
    }
    Ok(CheckResult::new(
        "oracle equivalence",
        cases,
        ORACLE_TOL,
        worst,
    ))
}

fn attention_case(
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, f64) {
    let cq = rng.random_range(1..=8);
    let ck = rng.random_range(1..=8);
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let q = rand_tensor(rng, vec![1, cq, h, w], -2.0, 2.0);
    let k = rand_tensor(rng, vec![1, ck, h, w], -2.0, 2.0);
    let wq = rand_tensor(rng, vec![cq, cq, 1, 1], -1.0, 1.0);
    let wk = rand_tensor(rng, vec![ck, ck, 1, 1], -1.0, 1.0);
    (q, k, wq, wk, rng.random_range(0.01..5.0))
}

/// Every attention row sums to one.
pub fn attention_row_sums(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (q, k, wq, wk, tau) = attention_case(&mut rng);
        let a = fusion::channel_attention_map(&q, &k, &wq, &wk, tau)?;
        worst = worst.max(a.max_row_sum_error());
    }
    Ok(CheckResult::new(
        "attention row sums",
        cases,
        ROW_SUM_TOL,
        worst,
    ))
}

/// Permuting key channels permutes the attention columns the same way, and
/// permuting keys and values together leaves the attention output unchanged.
pub fn attention_key_permutation(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (q, k, wq, wk, tau) = attention_case(&mut rng);
        let ck = wk.shape()[0];
        let mut perm: Vec<usize> = (0..ck).collect();
        for i in (1..ck).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute_rows = |t: &Tensor<f64>| {
            let cols = t.shape()[1];
            Tensor::from_fn(t.shape().to_vec(), |i| {
                t.data()[perm[i / cols] * cols + i % cols]
            })
        };
        let wk_p = permute_rows(&wk);
        let a = fusion::channel_attention_map(&q, &k, &wq, &wk, tau)?;
        let ap = fusion::channel_attention_map(&q, &k, &wq, &wk_p, tau)?;
        for i in 0..a.c_query {
            for j in 0..ck {
                worst = worst.max((ap.get(0, i, j) - a.get(0, i, perm[j])).abs());
            }
        }
        // Output invariance through the graph op with jointly permuted K and V.
        let wv = rand_tensor(&mut rng, vec![ck, ck, 1, 1], -1.0, 1.0);
        let wv_p = permute_rows(&wv);
        let out = |wk: &Tensor<f64>, wv: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::new();
            let (x, y) = (g.input(q.clone()), g.input(k.clone()));
            let (wq, wk, wv) = (
                g.input(wq.clone()),
                g.input(wk.clone()),
                g.input(wv.clone()),
            );
            let qq = g.conv2d(x, wq, None, 1, 0)?;
            let kk = g.conv2d(y, wk, None, 1, 0)?;
            let vv = g.conv2d(y, wv, None, 1, 0)?;
            let o = g.channel_attention(qq, kk, vv, tau, 1)?;
            Ok(g.value(o).clone())
        };
        worst = worst.max(out(&wk, &wv)?.max_abs_diff(&out(&wk_p, &wv_p)?));
    }
    Ok(CheckResult::new(
        "attention key permutation",
        cases,
        PERMUTATION_TOL,
        worst,
    ))
}

/// As τ → 0 every row approaches the uniform distribution `1 / C_k`.
pub fn attention_uniform_limit(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (q, k, wq, wk, _) = attention_case(&mut rng);
        let a = fusion::channel_attention_map(&q, &k, &wq, &wk, 1e-12)?;
        let u = 1.0 / a.c_key as f64;
        worst = worst.max(a.data.iter().map(|v| (v - u).abs()).fold(0.0, f64::max));
    }
    Ok(CheckResult::new(
        "attention uniform limit",
        cases,
        UNIFORM_LIMIT_TOL,
        worst,
    ))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor on the denominator for all-zero groups.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares analytic and central-difference gradients per named parameter
/// tensor. `fault` scales the analytic gradient of groups starting with that
/// name, to prove a wrong gradient is caught.
fn fd_check(
    label: &str,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    loss: &dyn Fn(&ParamSet<f64>) -> Result<f64>,
    fault: Option<&str>,
) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let mut fd = vec![0.0; t.numel()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig + FD_STEP;
            let plus = loss(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig - FD_STEP;
            let minus = loss(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let mut an: Vec<f64> = analytic
            .get(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        if fault.is_some_and(|f| name.starts_with(f)) {
            for v in &mut an {
                *v = *v * 1.05 + 1e-3;
            }
        }
        out.push(CheckResult::new(
            format!("gradient {label} {name}"),
            t.numel(),
            GRAD_TOL,
            relative_error(&fd, &an),
        ));
    }
    Ok(out)
}

/// Configuration of the tiny end-to-end model used for gradient checks.
pub fn tiny_model(mode: FusionMode) -> Result<Model> {
    Model::new(
        ModelConfig {
            widths: vec![4, 8],
            blocks_per_level: 1,
            depth_base_width: 4,
            ..ModelConfig::default()
        },
        mode,
    )
}

/// Every parameter redrawn at random (zero-initialized ones included) so
/// that all gradient paths are exercised.
pub fn randomized_params(model: &Model, seed: u64) -> ParamSet<f64> {
    let mut p = model.init_params::<f64>(seed);
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let t = p.get_mut(&name).expect("listed");
        let fan_in: usize = t.shape().iter().skip(1).product::<usize>().max(1);
        let bound = if t.rank() == 1 {
            0.1
        } else {
            (3.0 / fan_in as f64).sqrt()
        };
        let mut rng = stream_rng(seed ^ 0x5eed, &name);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Finite-difference check of `Lg + λ·Ld` for the tiny model (L = 2,
/// widths [4, 8], 8×8 input), float64, all parameter groups.
pub fn gradient_check_model(
    mode: FusionMode,
    seed: u64,
    fault: Option<&str>,
) -> Result<Vec<CheckResult>> {
    let model = tiny_model(mode)?;
    let params = randomized_params(&model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = rand_tensor(&mut rng, vec![1, 3, 8, 8], 0.0, 1.0);
    let normal = rand_tensor(&mut rng, vec![1, 3, 8, 8], 0.0, 1.0);
    let teacher = rand_tensor(&mut rng, vec![1, 1, 8, 8], 0.0, 1.0);
    let lambda = crate::train::DEFAULT_LAMBDA;

    let build =
        |p: &ParamSet<f64>| -> Result<(Graph<f64>, crate::params::ParamVars, crate::graph::Var)> {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let x = g.input(low.clone());
            let y = g.input(normal.clone());
            let out = model.forward_graph(&mut g, &vars, x)?;
            let lg = g.charbonnier(out.enhanced, y, crate::enhancer::CHARBONNIER_EPS)?;
            let total = match out.depth {
                Some(d) => {
                    let t = g.input(teacher.clone());
                    let ld = g.mse(d.depth, t)?;
                    g.weighted_sum(lg, ld, lambda)?
                }
                None => lg,
            };
            Ok((g, vars, total))
        };
    let (g, vars, total) = build(&params)?;
    let mut grads = g.backward(total)?;
    let mut analytic = ParamSet::new();
    for (name, var) in vars.iter() {
        if let Some(t) = grads.take(*var) {
            analytic.insert(name.clone(), t);
        }
    }
    let loss = |p: &ParamSet<f64>| -> Result<f64> {
        let (g, _, total) = build(p)?;
        Ok(g.scalar_value(total))
    };
    fd_check(mode.as_str(), &params, &analytic, &loss, fault)
}

/// Finite-difference check of a standalone fusion block under `Σ out² / 2`.
pub fn gradient_check_block(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let inst = random_instance(seed, 6, 4);
    let (_, analytic) =
        fusion::hdgffm_half_sq_gradients(&inst.img, &inst.depth, &inst.params, inst.variant)?;
    let params = inst.params.to_params("");
    let loss = |p: &ParamSet<f64>| -> Result<f64> {
        let hp = HdgffmParams::from_params(p, "", inst.params.tau, inst.params.heads)?;
        let out = fusion::hdgffm_forward_variant(&inst.img, &inst.depth, &hp, inst.variant)?;
        Ok(out.data().iter().map(|v| v * v).sum::<f64>() / 2.0)
    };
    fd_check("block", &params, &analytic, &loss, fault)
}

/// Every check run by `geolle verify`.
/// Every suite: `cases` random instances per oracle and attention check, then the
/// finite-difference checks of the fusion block and of the tiny model in every mode.
pub fn run_all(cases: usize, fault: Option<&str>) -> Result<VerifyReport> {
    let cases = cases.max(1);
    let mut checks = vec![
        oracle_equivalence(cases, 1)?,
        attention_row_sums(cases, 2)?,
        attention_key_permutation(cases, 3)?,
        attention_uniform_limit(cases, 4)?,
    ];
    checks.extend(gradient_check_block(5, fault)?);
    for mode in FusionMode::ALL {
        checks.extend(gradient_check_model(mode, 6, fault)?);
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let r = gradient_check_block(11, None).unwrap();
        assert!(r.iter().all(|c| c.passed), "{r:?}");
    }

    #[test]
    fn injected_fault_names_its_group() {
        let r = gradient_check_block(11, Some("ffn.in")).unwrap();
        let failing: Vec<_> = r
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(failing, vec!["gradient block ffn.in"]);
    }
}
