//! Enhancement network: a U-shaped baseline whose encoder (or decoder) levels
//! can be refined by depth-guided fusion blocks fed from the depth branch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::depth::{DepthBranch, DepthPyramid, DepthTaps};
use crate::error::{Error, Result};
use crate::fusion::{self, BlockVars, FusionVariant, Tau};
use crate::graph::{Graph, Var};
use crate::layers::{
    conv, conv_param_count, register_conv, register_res_block, res_block, res_block_param_count,
};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{check_same_dims, Real, Tensor};

/// `(N, 3, H, W)` RGB in `[0, 1]`.
pub type ImageBatch<T> = Tensor<T>;

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Which fusion wiring a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Gated fusion after every encoder level.
    Full,
    /// Gated fusion after every decoder level, keyed to depth decoder features.
    DecoderFusion,
    /// Encoder fusion with the gate's sigmoid removed.
    NoCorrelation,
    /// Encoder fusion with `f̄ = f'' + f' + f`.
    Additive,
    /// Baseline only; the depth branch is not built.
    None,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Full,
        FusionMode::DecoderFusion,
        FusionMode::NoCorrelation,
        FusionMode::Additive,
        FusionMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::DecoderFusion => "decoder_fusion",
            FusionMode::NoCorrelation => "no_correlation",
            FusionMode::Additive => "additive",
            FusionMode::None => "none",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}` (expected one of full, decoder_fusion, no_correlation, additive, none)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSite {
    Encoder,
    Decoder,
}

/// Structural description of a fusion mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub mode: FusionMode,
    pub site: Option<FusionSite>,
    pub variant: Option<FusionVariant>,
    pub uses_depth_branch: bool,
    pub description: String,
}

pub fn ablation_wiring(mode: FusionMode) -> Wiring {
    let (site, variant, description) = match mode {
        FusionMode::Full => (
            Some(FusionSite::Encoder),
            Some(FusionVariant::Gated),
            "fusion block after each encoder level; sigmoid correlation gate",
        ),
        FusionMode::DecoderFusion => (
            Some(FusionSite::Decoder),
            Some(FusionVariant::Gated),
            "fusion block after each decoder level, keyed to depth-branch decoder features; sigmoid gate",
        ),
        FusionMode::NoCorrelation => (
            Some(FusionSite::Encoder),
            Some(FusionVariant::Ungated),
            "encoder fusion; gate is the raw projection without sigmoid (unbounded)",
        ),
        FusionMode::Additive => (
            Some(FusionSite::Encoder),
            Some(FusionVariant::Additive),
            "encoder fusion; cross-attention output added with weight 1, no gate",
        ),
        FusionMode::None => (None, None, "baseline enhancer only; no depth branch"),
    };
    Wiring {
        mode,
        site,
        variant,
        uses_depth_branch: site.is_some(),
        description: description.into(),
    }
}

/// Per-level temperature, either one setting for all levels or a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    All(Tau),
    PerLevel(Vec<Tau>),
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec::All(Tau::default())
    }
}

impl TauSpec {
    pub fn level(&self, l: usize) -> Tau {
        match self {
            TauSpec::All(t) => *t,
            TauSpec::PerLevel(v) => v[l],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Enhancer channel width per level, finest first.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    /// Depth branch width at level 0; doubles per level.
    pub depth_base_width: usize,
    pub tau: TauSpec,
    pub heads: usize,
    /// Reuse the self-attention query projection for cross attention.
    pub share_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            blocks_per_level: 2,
            depth_base_width: 8,
            tau: TauSpec::default(),
            heads: 1,
            share_query: true,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "model.widths must be a non-empty list of positive widths".into(),
            ));
        }
        if self.depth_base_width == 0 {
            return Err(Error::Config(
                "model.depth_base_width must be positive".into(),
            ));
        }
        if self.heads == 0 {
            return Err(Error::Config("model.heads must be positive".into()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.heads != 0) {
            return Err(Error::Config(format!(
                "model.heads = {} does not divide width {w}",
                self.heads
            )));
        }
        match &self.tau {
            TauSpec::All(t) => t.validate()?,
            TauSpec::PerLevel(v) => {
                if v.len() != self.levels() {
                    return Err(Error::Config(format!(
                        "model.tau lists {} levels but the model has {}",
                        v.len(),
                        self.levels()
                    )));
                }
                for t in v {
                    t.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// Enhancer plus (mode-dependent) depth branch and fusion blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub mode: FusionMode,
    pub wiring: Wiring,
    pub depth: DepthBranch,
}

/// Outputs of one joint forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub enhanced: Var,
    pub depth: Option<DepthTaps>,
}

impl Model {
    pub fn new(cfg: ModelConfig, mode: FusionMode) -> Result<Self> {
        cfg.validate()?;
        let depth = DepthBranch::new(cfg.levels(), cfg.depth_base_width)?;
        Ok(Self {
            wiring: ablation_wiring(mode),
            cfg,
            mode,
            depth,
        })
    }

    pub fn levels(&self) -> usize {
        self.cfg.levels()
    }

    /// Rejects input sizes the pyramid cannot represent.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.depth.check_input(h, w)
    }

    fn fusion_prefix(&self, l: usize) -> String {
        match self.wiring.site {
            Some(FusionSite::Decoder) => format!("fuse.dec{l}"),
            _ => format!("fuse.enc{l}"),
        }
    }

    /// Seeded parameters. Baseline weights depend only on `seed` and their
    /// names, so every mode starts from the same baseline.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let w = &self.cfg.widths;
        let last = w.len() - 1;
        register_conv(&mut p, seed, "g.stem", 3, w[0], 3, 1.0);
        for l in 0..w.len() {
            if l > 0 {
                register_conv(&mut p, seed, &format!("g.down{l}"), w[l - 1], w[l], 3, 1.0);
            }
            for b in 0..self.cfg.blocks_per_level {
                register_res_block(&mut p, seed, &format!("g.enc{l}.rb{b}"), w[l]);
            }
        }
        for l in (0..=last).rev() {
            if l < last {
                register_conv(
                    &mut p,
                    seed,
                    &format!("g.merge{l}"),
                    w[l + 1] + w[l],
                    w[l],
                    3,
                    1.0,
                );
            }
            for b in 0..self.cfg.blocks_per_level {
                register_res_block(&mut p, seed, &format!("g.dec{l}.rb{b}"), w[l]);
            }
        }
        register_conv(&mut p, seed, "g.head", w[0], 3, 3, 0.1);

        if let Some(variant) = self.wiring.variant {
            self.depth.register(&mut p, seed);
            for l in 0..w.len() {
                fusion::register_block(
                    &mut p,
                    seed,
                    &self.fusion_prefix(l),
                    w[l],
                    self.depth.width(l),
                    variant,
                    self.cfg.share_query,
                );
            }
        }
        p
    }

    pub fn baseline_param_count(&self) -> usize {
        let w = &self.cfg.widths;
        let b = self.cfg.blocks_per_level;
        let mut n = conv_param_count(3, w[0], 3) + conv_param_count(w[0], 3, 3);
        for l in 0..w.len() {
            if l > 0 {
                n += conv_param_count(w[l - 1], w[l], 3);
            }
            if l + 1 < w.len() {
                n += conv_param_count(w[l + 1] + w[l], w[l], 3);
            }
            n += 2 * b * res_block_param_count(w[l]);
        }
        n
    }

    /// Parameters of one fusion block at level `l`.
    pub fn fusion_block_param_count(&self, l: usize) -> usize {
        let Some(variant) = self.wiring.variant else {
            return 0;
        };
        let c = self.cfg.widths[l];
        let cd = self.depth.width(l);
        let mut n = 5 * c * c + 2 * fusion::FFN_EXPANSION * c * c + c * cd;
        if !self.cfg.share_query {
            n += c * c;
        }
        if variant.has_gate() {
            n += 2 * c * c + c;
        }
        n
    }

    /// Closed-form total parameter count for this mode.
    pub fn expected_param_count(&self) -> usize {
        let mut n = self.baseline_param_count();
        if self.wiring.uses_depth_branch {
            n += self.depth.param_count();
            n += (0..self.levels())
                .map(|l| self.fusion_block_param_count(l))
                .sum::<usize>();
        }
        n
    }

    /// Records the joint forward pass. `depth_override` substitutes external
    /// depth features for the depth branch's (its length must equal the level count).
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        low: Var,
    ) -> Result<ForwardOut> {
        let depth = if self.wiring.uses_depth_branch {
            Some(self.depth.forward_graph(g, vars, low)?)
        } else {
            None
        };
        let taps = depth.as_ref().map(|d| match self.wiring.site {
            Some(FusionSite::Decoder) => d.decoder.clone(),
            _ => d.encoder.clone(),
        });
        let enhanced = self.enhance_graph(g, vars, low, taps.as_deref(), false)?;
        Ok(ForwardOut { enhanced, depth })
    }

    /// The enhancer given depth features per level (ignored for `none`).
    pub fn enhance_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        low: Var,
        depth_taps: Option<&[Var]>,
        validate: bool,
    ) -> Result<Var> {
        let (_, c, h, wd) = g.value(low).dims4()?;
        if c != 3 {
            return Err(Error::dim_in("channels", 3, c, "enhancer input"));
        }
        self.check_input(h, wd)?;
        let levels = self.levels();
        let taps = match (self.wiring.variant, depth_taps) {
            (None, _) => None,
            (Some(_), Some(t)) if t.len() == levels => Some(t),
            (Some(_), Some(t)) => {
                return Err(Error::dim_in("levels", levels, t.len(), "depth pyramid"))
            }
            (Some(_), None) => {
                return Err(Error::Config(format!(
                    "mode {} needs depth features",
                    self.mode
                )))
            }
        };
        let fuse = |g: &mut Graph<T>, l: usize, x: Var, site: FusionSite| -> Result<Var> {
            let (Some(taps), Some(variant)) = (taps, self.wiring.variant) else {
                return Ok(x);
            };
            if self.wiring.site != Some(site) {
                return Ok(x);
            }
            let xd = g.value(x).dims4()?;
            let dd = g.value(taps[l]).dims4()?;
            check_same_dims(
                (xd.0, 0, xd.2, xd.3),
                (dd.0, 0, dd.2, dd.3),
                &format!("depth pyramid level {l}"),
            )?;
            let bv = BlockVars::lookup(vars, &self.fusion_prefix(l))?;
            let tau = self.cfg.tau.level(l).resolve(xd.2, xd.3);
            let trace =
                fusion::block_forward(g, &bv, x, taps[l], variant, tau, self.cfg.heads, validate)?;
            Ok(trace.out)
        };

        let mut x = conv(g, vars, "g.stem", low, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                x = conv(g, vars, &format!("g.down{l}"), x, 2)?;
            }
            for b in 0..self.cfg.blocks_per_level {
                x = res_block(g, vars, &format!("g.enc{l}.rb{b}"), x)?;
            }
            x = fuse(g, l, x, FusionSite::Encoder)?;
            skips.push(x);
        }
        let mut y = skips[levels - 1];
        for l in (0..levels).rev() {
            if l + 1 < levels {
                let up = g.upsample2(y)?;
                let cat = g.concat_channels(up, skips[l])?;
                y = conv(g, vars, &format!("g.merge{l}"), cat, 1)?;
            }
            for b in 0..self.cfg.blocks_per_level {
                y = res_block(g, vars, &format!("g.dec{l}.rb{b}"), y)?;
            }
            y = fuse(g, l, y, FusionSite::Decoder)?;
        }
        let y = g.silu(y);
        let residual = conv(g, vars, "g.head", y, 1)?;
        g.add(low, residual)
    }

    /// Enhancer forward on concrete tensors with an externally supplied pyramid.
    pub fn enhance_forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        low_light: &ImageBatch<T>,
        depth_pyramid: Option<&DepthPyramid<T>>,
    ) -> Result<ImageBatch<T>> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let low = g.input(low_light.clone());
        let taps: Option<Vec<Var>> = depth_pyramid.map(|p| {
            let levels = match self.wiring.site {
                Some(FusionSite::Decoder) => &p.decoder_levels,
                _ => &p.levels,
            };
            levels.iter().map(|t| g.input(t.clone())).collect()
        });
        let out = self.enhance_graph(&mut g, &vars, low, taps.as_deref(), true)?;
        Ok(g.value(out).clone())
    }

    /// Joint forward on concrete tensors: `(enhanced, depth prediction)`.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        low_light: &ImageBatch<T>,
    ) -> Result<(ImageBatch<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let low = g.input(low_light.clone());
        let out = self.forward_graph(&mut g, &vars, low)?;
        let depth = out.depth.map(|d| g.value(d.depth).clone());
        Ok((g.value(out.enhanced).clone(), depth))
    }
}

/// Charbonnier loss `mean(sqrt((pred − target)² + ε²))`, ε = 1e−3.
pub fn restoration_loss<T: Real>(pred: &ImageBatch<T>, target: &ImageBatch<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        check_same_dims(target.dims4()?, pred.dims4()?, "prediction vs target")?;
    }
    let mut g = Graph::new();
    let a = g.input(pred.clone());
    let b = g.input(target.clone());
    let l = g.charbonnier(a, b, CHARBONNIER_EPS)?;
    Ok(g.scalar_value(l).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8],
            blocks_per_level: 1,
            depth_base_width: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert!("decoder".parse::<FusionMode>().is_err());
    }

    #[test]
    fn param_counts_match_closed_form() {
        for mode in FusionMode::ALL {
            for share_query in [true, false] {
                let cfg = ModelConfig {
                    share_query,
                    ..ModelConfig::default()
                };
                let m = Model::new(cfg, mode).unwrap();
                let p = m.init_params::<f32>(0);
                assert_eq!(p.count(), m.expected_param_count(), "{mode}");
            }
        }
    }

    #[test]
    fn full_and_additive_differ_by_gate_size() {
        let cfg = ModelConfig::default();
        let full = Model::new(cfg.clone(), FusionMode::Full).unwrap();
        let add = Model::new(cfg.clone(), FusionMode::Additive).unwrap();
        let gate: usize = cfg.widths.iter().map(|&c| 2 * c * c + c).sum();
        assert_eq!(
            full.expected_param_count() - add.expected_param_count(),
            gate
        );
        let p = add.init_params::<f32>(0);
        assert_eq!(p.names().filter(|n| n.contains(".gate.")).count(), 0);
    }

    #[test]
    fn output_shape_matches_input_for_every_mode() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 64, 64], |i| (i % 13) as f32 / 13.0);
        for mode in FusionMode::ALL {
            let m = Model::new(small_cfg(), mode).unwrap();
            let p = m.init_params::<f32>(3);
            let (y, d) = m.forward(&p, &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(d.is_some(), mode != FusionMode::None);
        }
    }

    #[test]
    fn zero_fusion_matches_baseline_bit_for_bit() {
        let none = Model::new(small_cfg(), FusionMode::None).unwrap();
        let full = Model::new(small_cfg(), FusionMode::Full).unwrap();
        let p_none = none.init_params::<f32>(5);
        let mut p_full = full.init_params::<f32>(5);
        p_full.zero_prefix("fuse.");
        let x = Tensor::<f32>::from_fn(vec![1, 3, 16, 16], |i| ((i * 31) % 17) as f32 / 17.0);
        let (a, _) = none.forward(&p_none, &x).unwrap();
        let (b, _) = full.forward(&p_full, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn misaligned_pyramid_names_level() {
        let m = Model::new(small_cfg(), FusionMode::Full).unwrap();
        let p = m.init_params::<f32>(0);
        let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
        let pyr = DepthPyramid {
            levels: vec![
                Tensor::zeros(vec![1, 2, 8, 8]),
                Tensor::zeros(vec![1, 4, 2, 2]),
            ],
            decoder_levels: vec![],
        };
        let err = m.enhance_forward(&p, &x, Some(&pyr)).unwrap_err();
        assert!(err.to_string().contains("level 1"), "{err}");
    }

    #[test]
    fn charbonnier_closed_forms() {
        let a = Tensor::<f64>::from_fn(vec![1, 3, 2, 2], |i| i as f64 / 12.0);
        assert!((restoration_loss(&a, &a).unwrap() - 1e-3).abs() < 1e-18);
        let b = a.map(|v| v + 0.1);
        let want = (0.01f64 + 1e-6).sqrt();
        assert!((restoration_loss(&b, &a).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.10000499).abs() < 1e-8);
    }

    #[test]
    fn charbonnier_matches_loop() {
        let a = Tensor::<f64>::from_fn(vec![1, 3, 3, 3], |i| ((i * 7919) % 97) as f64 / 97.0);
        let b = Tensor::<f64>::from_fn(vec![1, 3, 3, 3], |i| ((i * 104729) % 89) as f64 / 89.0);
        let mut s = 0.0;
        for i in 0..27 {
            let r: f64 = a.data()[i] - b.data()[i];
            s += (r * r + 1e-6).sqrt();
        }
        assert!((restoration_loss(&a, &b).unwrap() - s / 27.0).abs() < 1e-15);
    }
}
