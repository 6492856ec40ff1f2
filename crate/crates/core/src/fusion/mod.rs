//! Depth-guided feature fusion block.
//!
//! One block fuses an image feature map `f` with raw depth features `f_d` of
//! the same spatial size:
//!
//! ```text
//! f̂_d  = E(f_d)                                   depth embedding (1×1)
//! A    = softmax(τ · W_q f · (W_k f)ᵀ)             channel self attention
//! f'   = A · W_v f
//! Â    = softmax(τ · W_q f · (Ŵ_k f̂_d)ᵀ)           depth cross attention
//! f''  = Â · Ŵ_v f̂_d
//! w    = sigmoid(O(f' ⊕ f''))                      correlation gate
//! f̄    = w ⊙ f'' + f' + f
//! out  = FFN(f̄) + f
//! ```
//!
//! Attention is over channels: spatial positions are flattened, so `A` is
//! `C × C` and each row is a distribution over key channels.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSet, ParamVars};
use crate::tensor::{check_same_dims, Real, Tensor};

/// Feature maps are `(N, C, H, W)` tensors.
pub type FeatureMap<T> = Tensor<T>;

/// How the cross-attention output enters the residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// `w = sigmoid(O(f' ⊕ f''))`.
    Gated,
    /// `w = O(f' ⊕ f'')`, unbounded.
    Ungated,
    /// `w ≡ 1`; no gate parameters.
    Additive,
}

impl FusionVariant {
    pub fn has_gate(self) -> bool {
        !matches!(self, FusionVariant::Additive)
    }
}

/// Attention temperature: fixed, or `(H·W)^(-1/2)` of the level it runs at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tau {
    Fixed(f64),
    Auto(AutoTau),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTau {
    Auto,
}

impl Default for Tau {
    fn default() -> Self {
        Tau::Auto(AutoTau::Auto)
    }
}

impl Tau {
    pub fn resolve(self, h: usize, w: usize) -> f64 {
        match self {
            Tau::Fixed(t) => t,
            Tau::Auto(_) => 1.0 / ((h * w) as f64).sqrt(),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Tau::Fixed(t) if !(t > 0.0 && t.is_finite()) => Err(Error::Config(format!(
                "tau must be positive and finite, got {t}"
            ))),
            _ => Ok(()),
        }
    }
}

/// A row-stochastic `(N, C_q, C_k)` attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T> {
    pub n: usize,
    pub c_query: usize,
    pub c_key: usize,
    pub data: Vec<T>,
}

impl<T: Real> AttentionMatrix<T> {
    pub fn row(&self, n: usize, i: usize) -> &[T] {
        let start = (n * self.c_query + i) * self.c_key;
        &self.data[start..start + self.c_key]
    }

    pub fn get(&self, n: usize, i: usize, j: usize) -> T {
        self.data[(n * self.c_query + i) * self.c_key + j]
    }

    /// Largest `|Σ_j A[n,i,j] − 1|` over all rows.
    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks(self.c_key)
            .map(|row| (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// All learnable weights of one fusion block. Projections are stored as
/// `(C_out, C_in, 1, 1)` convolution kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct HdgffmParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Separate cross-attention query; `None` shares `w_q`.
    pub w_q_cross: Option<Tensor<T>>,
    pub w_k_depth: Tensor<T>,
    pub w_v_depth: Tensor<T>,
    /// `(C, 2C, 1, 1)`; absent for the additive variant.
    pub gate_w: Option<Tensor<T>>,
    pub gate_b: Option<Tensor<T>>,
    pub ffn_in: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub embed: Tensor<T>,
    pub tau: f64,
    pub heads: usize,
}

pub const FFN_EXPANSION: usize = 2;

fn proj_shape(cout: usize, cin: usize) -> [usize; 4] {
    [cout, cin, 1, 1]
}

/// Parameter names and shapes of one block, relative to its prefix.
pub fn block_layout(
    channels: usize,
    depth_channels: usize,
    variant: FusionVariant,
    share_query: bool,
) -> Vec<(&'static str, Vec<usize>)> {
    let c = channels;
    let mut out: Vec<(&'static str, Vec<usize>)> = vec![
        ("wq", proj_shape(c, c).to_vec()),
        ("wk", proj_shape(c, c).to_vec()),
        ("wv", proj_shape(c, c).to_vec()),
        ("wk_depth", proj_shape(c, c).to_vec()),
        ("wv_depth", proj_shape(c, c).to_vec()),
        ("ffn.in", proj_shape(FFN_EXPANSION * c, c).to_vec()),
        ("ffn.out", proj_shape(c, FFN_EXPANSION * c).to_vec()),
        ("embed", proj_shape(c, depth_channels).to_vec()),
    ];
    if !share_query {
        out.push(("wq_cross", proj_shape(c, c).to_vec()));
    }
    if variant.has_gate() {
        out.push(("gate.w", proj_shape(c, 2 * c).to_vec()));
        out.push(("gate.b", vec![c]));
    }
    out
}

/// Registers a block's parameters under `prefix`: projections random, gate and
/// FFN output zero, so a fresh block is the identity map.
pub fn register_block<T: Real>(
    params: &mut ParamSet<T>,
    seed: u64,
    prefix: &str,
    channels: usize,
    depth_channels: usize,
    variant: FusionVariant,
    share_query: bool,
) {
    for (name, shape) in block_layout(channels, depth_channels, variant, share_query) {
        let init = match name {
            "ffn.out" | "gate.w" | "gate.b" => Init::Zeros,
            _ => Init::Uniform { gain: 1.0 },
        };
        params.register(seed, &format!("{prefix}.{name}"), &shape, init);
    }
}

impl<T: Real> HdgffmParams<T> {
    /// Every weight zero; the gated block is then exactly the identity.
    pub fn zeros(channels: usize, depth_channels: usize, variant: FusionVariant) -> Self {
        let mut p = ParamSet::new();
        for (name, shape) in block_layout(channels, depth_channels, variant, true) {
            p.register(0, name, &shape, Init::Zeros);
        }
        Self::from_params(&p, "", 1.0, 1).expect("layout is complete")
    }

    /// All weights drawn uniformly from `±scale·sqrt(3/fan_in)`.
    pub fn random(
        channels: usize,
        depth_channels: usize,
        variant: FusionVariant,
        share_query: bool,
        seed: u64,
        scale: f64,
    ) -> Self {
        let mut p = ParamSet::new();
        for (name, shape) in block_layout(channels, depth_channels, variant, share_query) {
            p.register(seed, name, &shape, Init::Uniform { gain: scale });
        }
        Self::from_params(&p, "", 1.0, 1).expect("layout is complete")
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn depth_channels(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn variant(&self) -> FusionVariant {
        if self.gate_w.is_some() {
            FusionVariant::Gated
        } else {
            FusionVariant::Additive
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn from_params(p: &ParamSet<T>, prefix: &str, tau: f64, heads: usize) -> Result<Self> {
        let key = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        let req = |n: &str| {
            p.get(&key(n))
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", key(n))))
        };
        let out = Self {
            w_q: req("wq")?,
            w_k: req("wk")?,
            w_v: req("wv")?,
            w_q_cross: p.get(&key("wq_cross")).cloned(),
            w_k_depth: req("wk_depth")?,
            w_v_depth: req("wv_depth")?,
            gate_w: p.get(&key("gate.w")).cloned(),
            gate_b: p.get(&key("gate.b")).cloned(),
            ffn_in: req("ffn.in")?,
            ffn_out: req("ffn.out")?,
            embed: req("embed")?,
            tau,
            heads,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_params(&self, prefix: &str) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let key = |n: &str| {
            if prefix.is_empty() {
                n.to_string()
            } else {
                format!("{prefix}.{n}")
            }
        };
        p.insert(key("wq"), self.w_q.clone());
        p.insert(key("wk"), self.w_k.clone());
        p.insert(key("wv"), self.w_v.clone());
        if let Some(w) = &self.w_q_cross {
            p.insert(key("wq_cross"), w.clone());
        }
        p.insert(key("wk_depth"), self.w_k_depth.clone());
        p.insert(key("wv_depth"), self.w_v_depth.clone());
        if let (Some(w), Some(b)) = (&self.gate_w, &self.gate_b) {
            p.insert(key("gate.w"), w.clone());
            p.insert(key("gate.b"), b.clone());
        }
        p.insert(key("ffn.in"), self.ffn_in.clone());
        p.insert(key("ffn.out"), self.ffn_out.clone());
        p.insert(key("embed"), self.embed.clone());
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        let c = self.w_q.shape().first().copied().unwrap_or(0);
        let cd = self.embed.shape().get(1).copied().unwrap_or(0);
        if c == 0 || cd == 0 {
            return Err(Error::Shape("fusion block with zero channels".into()));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {c} channels",
                self.heads
            )));
        }
        let check = |t: &Tensor<T>, want: [usize; 4], what: &'static str| -> Result<()> {
            if t.shape() != want {
                return Err(Error::Shape(format!(
                    "{what}: expected {want:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check(&self.w_q, proj_shape(c, c), "w_q")?;
        check(&self.w_k, proj_shape(c, c), "w_k")?;
        check(&self.w_v, proj_shape(c, c), "w_v")?;
        if let Some(w) = &self.w_q_cross {
            check(w, proj_shape(c, c), "w_q_cross")?;
        }
        check(&self.w_k_depth, proj_shape(c, c), "w_k_depth")?;
        check(&self.w_v_depth, proj_shape(c, c), "w_v_depth")?;
        check(&self.ffn_in, proj_shape(FFN_EXPANSION * c, c), "ffn_in")?;
        check(&self.ffn_out, proj_shape(c, FFN_EXPANSION * c), "ffn_out")?;
        check(&self.embed, proj_shape(c, cd), "embed")?;
        match (&self.gate_w, &self.gate_b) {
            (Some(w), Some(b)) => {
                check(w, proj_shape(c, 2 * c), "gate_w")?;
                if b.numel() != c {
                    return Err(Error::dim_in("channels", c, b.numel(), "gate bias"));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "gate weight and bias must both be present".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Graph handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wq_cross: Option<Var>,
    pub wk_depth: Var,
    pub wv_depth: Var,
    pub gate: Option<(Var, Var)>,
    pub ffn_in: Var,
    pub ffn_out: Var,
    pub embed: Var,
}

impl BlockVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        let k = |n: &str| format!("{prefix}.{n}");
        let gate = match (vars.try_get(&k("gate.w")), vars.try_get(&k("gate.b"))) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        };
        Ok(Self {
            wq: vars.get(&k("wq"))?,
            wk: vars.get(&k("wk"))?,
            wv: vars.get(&k("wv"))?,
            wq_cross: vars.try_get(&k("wq_cross")),
            wk_depth: vars.get(&k("wk_depth"))?,
            wv_depth: vars.get(&k("wv_depth"))?,
            gate,
            ffn_in: vars.get(&k("ffn.in"))?,
            ffn_out: vars.get(&k("ffn.out"))?,
            embed: vars.get(&k("embed"))?,
        })
    }

    fn bind<T: Real>(g: &mut Graph<T>, p: &HdgffmParams<T>) -> Self {
        Self {
            wq: g.param(p.w_q.clone()),
            wk: g.param(p.w_k.clone()),
            wv: g.param(p.w_v.clone()),
            wq_cross: p.w_q_cross.as_ref().map(|w| g.param(w.clone())),
            wk_depth: g.param(p.w_k_depth.clone()),
            wv_depth: g.param(p.w_v_depth.clone()),
            gate: match (&p.gate_w, &p.gate_b) {
                (Some(w), Some(b)) => Some((g.param(w.clone()), g.param(b.clone()))),
                _ => None,
            },
            ffn_in: g.param(p.ffn_in.clone()),
            ffn_out: g.param(p.ffn_out.clone()),
            embed: g.param(p.embed.clone()),
        }
    }
}

/// Intermediate handles of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub embedded: Var,
    pub self_out: Var,
    pub cross_out: Var,
    pub gate: Option<Var>,
    pub fused: Var,
    pub out: Var,
}

fn project<T: Real>(g: &mut Graph<T>, w: Var, x: Var) -> Result<Var> {
    g.conv2d(x, w, None, 1, 0)
}

fn checked<T: Real>(g: &Graph<T>, v: Var, stage: &str, validate: bool) -> Result<Var> {
    if validate {
        g.value(v).ensure_finite(stage)?;
    }
    Ok(v)
}

/// Records one fusion block on `g`. With `validate`, every stage is checked
/// for non-finite values and the first failing stage is reported.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    w: &BlockVars,
    img: Var,
    depth_raw: Var,
    variant: FusionVariant,
    tau: f64,
    heads: usize,
    validate: bool,
) -> Result<BlockTrace> {
    let img_dims = g.value(img).dims4()?;
    let depth_dims = g.value(depth_raw).dims4()?;
    check_same_dims(
        (img_dims.0, 0, img_dims.2, img_dims.3),
        (depth_dims.0, 0, depth_dims.2, depth_dims.3),
        "depth features vs image features",
    )?;

    let embedded = project(g, w.embed, depth_raw)?;
    let embedded = checked(g, embedded, "depth embedding", validate)?;

    let q = project(g, w.wq, img)?;
    let k = project(g, w.wk, img)?;
    let v = project(g, w.wv, img)?;
    let self_out = g.channel_attention(q, k, v, tau, heads)?;
    let self_out = checked(g, self_out, "self attention", validate)?;

    let q_cross = match w.wq_cross {
        Some(wq) => project(g, wq, img)?,
        None => q,
    };
    let kd = project(g, w.wk_depth, embedded)?;
    let vd = project(g, w.wv_depth, embedded)?;
    let cross_out = g.channel_attention(q_cross, kd, vd, tau, heads)?;
    let cross_out = checked(g, cross_out, "cross attention", validate)?;

    let (gated, gate) = match (variant, w.gate) {
        (FusionVariant::Additive, _) => (cross_out, None),
        (_, None) => {
            return Err(Error::Config(format!(
                "{variant:?} fusion needs gate parameters"
            )));
        }
        (_, Some((gw, gb))) => {
            let cat = g.concat_channels(self_out, cross_out)?;
            let logits = g.conv2d(cat, gw, Some(gb), 1, 0)?;
            let weight = if variant == FusionVariant::Gated {
                g.sigmoid(logits)
            } else {
                logits
            };
            let weight = checked(g, weight, "correlation gate", validate)?;
            (g.mul(weight, cross_out)?, Some(weight))
        }
    };
    let partial = g.add(gated, self_out)?;
    let fused = g.add(partial, img)?;
    let fused = checked(g, fused, "gated residual fusion", validate)?;

    let hidden = project(g, w.ffn_in, fused)?;
    let hidden = g.silu(hidden);
    let ffn = project(g, w.ffn_out, hidden)?;
    let out = g.add(ffn, img)?;
    let out = checked(g, out, "feed-forward output", validate)?;
    Ok(BlockTrace {
        embedded,
        self_out,
        cross_out,
        gate,
        fused,
        out,
    })
}

fn validate_feature<T: Real>(
    x: &FeatureMap<T>,
    what: &str,
) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 || dims.3 == 0 {
        return Err(Error::Shape(format!(
            "{what}: empty axis in {:?}",
            x.shape()
        )));
    }
    x.ensure_finite(what)?;
    Ok(dims)
}

fn check_proj<T: Real>(w: &Tensor<T>, cin: usize, what: &'static str) -> Result<usize> {
    let (cout, wcin, kh, kw) = w.dims4()?;
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!(
            "{what}: expected a 1x1 projection, got {kh}x{kw}"
        )));
    }
    if wcin != cin {
        return Err(Error::dim_in("channels", wcin, cin, what));
    }
    Ok(cout)
}

/// `softmax_rows(τ · W_q(q) · W_k(k)ᵀ)` over the key-channel axis.
pub fn channel_attention_map<T: Real>(
    query_feat: &FeatureMap<T>,
    key_feat: &FeatureMap<T>,
    w_query: &Tensor<T>,
    w_key: &Tensor<T>,
    tau: f64,
) -> Result<AttentionMatrix<T>> {
    let (n, cq_in, h, w) = validate_feature(query_feat, "query features")?;
    let (nk, ck_in, hk, wk) = validate_feature(key_feat, "key features")?;
    check_same_dims((n, 0, h, w), (nk, 0, hk, wk), "query vs key features")?;
    let cq = check_proj(w_query, cq_in, "query projection")?;
    let ck = check_proj(w_key, ck_in, "key projection")?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let (qf, kf) = (g.input(query_feat.clone()), g.input(key_feat.clone()));
    let (wq, wk) = (g.input(w_query.clone()), g.input(w_key.clone()));
    let q = project(&mut g, wq, qf)?;
    let k = project(&mut g, wk, kf)?;
    let att = g.channel_attention(q, k, k, tau, 1)?;
    let data = g.attention_probs(att).expect("attention node").to_vec();
    Ok(AttentionMatrix {
        n,
        c_query: cq,
        c_key: ck,
        data,
    })
}

fn run_block<T: Real>(
    img_feat: &FeatureMap<T>,
    depth_feat_raw: &FeatureMap<T>,
    params: &HdgffmParams<T>,
    variant: FusionVariant,
) -> Result<(Graph<T>, BlockTrace)> {
    params.validate()?;
    let (_, c, _, _) = validate_feature(img_feat, "image features")?;
    let (_, cd, _, _) = validate_feature(depth_feat_raw, "depth features")?;
    if c != params.channels() {
        return Err(Error::dim_in(
            "channels",
            params.channels(),
            c,
            "image features vs block width",
        ));
    }
    if cd != params.depth_channels() {
        return Err(Error::dim_in(
            "channels",
            params.depth_channels(),
            cd,
            "depth features vs embedding",
        ));
    }
    let mut g = Graph::new();
    let vars = BlockVars::bind(&mut g, params);
    let img = g.input(img_feat.clone());
    let depth = g.input(depth_feat_raw.clone());
    let trace = block_forward(
        &mut g,
        &vars,
        img,
        depth,
        variant,
        params.tau,
        params.heads,
        true,
    )?;
    Ok((g, trace))
}

/// `A · W_v(f)` with `A` the channel self-attention map of `f`.
pub fn self_attention<T: Real>(
    feat: &FeatureMap<T>,
    params: &HdgffmParams<T>,
) -> Result<FeatureMap<T>> {
    params.validate()?;
    let (_, c, _, _) = validate_feature(feat, "image features")?;
    if c != params.channels() {
        return Err(Error::dim_in(
            "channels",
            params.channels(),
            c,
            "image features vs block width",
        ));
    }
    let mut g = Graph::new();
    let x = g.input(feat.clone());
    let (wq, wk, wv) = (
        g.input(params.w_q.clone()),
        g.input(params.w_k.clone()),
        g.input(params.w_v.clone()),
    );
    let q = project(&mut g, wq, x)?;
    let k = project(&mut g, wk, x)?;
    let v = project(&mut g, wv, x)?;
    let out = g.channel_attention(q, k, v, params.tau, params.heads)?;
    Ok(g.value(out).clone())
}

/// `Â · Ŵ_v(f̂_d)` with queries from the image features and keys/values from
/// already-embedded depth features.
pub fn cross_attention<T: Real>(
    img_feat: &FeatureMap<T>,
    depth_feat_embedded: &FeatureMap<T>,
    params: &HdgffmParams<T>,
) -> Result<FeatureMap<T>> {
    params.validate()?;
    let dims = validate_feature(img_feat, "image features")?;
    let ddims = validate_feature(depth_feat_embedded, "embedded depth features")?;
    check_same_dims(dims, ddims, "embedded depth features vs image features")?;
    if dims.1 != params.channels() {
        return Err(Error::dim_in(
            "channels",
            params.channels(),
            dims.1,
            "image features vs block width",
        ));
    }
    let mut g = Graph::new();
    let x = g.input(img_feat.clone());
    let d = g.input(depth_feat_embedded.clone());
    let wq = g.input(params.w_q_cross.as_ref().unwrap_or(&params.w_q).clone());
    let (wk, wv) = (
        g.input(params.w_k_depth.clone()),
        g.input(params.w_v_depth.clone()),
    );
    let q = project(&mut g, wq, x)?;
    let k = project(&mut g, wk, d)?;
    let v = project(&mut g, wv, d)?;
    let out = g.channel_attention(q, k, v, params.tau, params.heads)?;
    Ok(g.value(out).clone())
}

/// `sigmoid(O(self_out ⊕ cross_out))`, per pixel and channel.
pub fn correlation_gate<T: Real>(
    self_out: &FeatureMap<T>,
    cross_out: &FeatureMap<T>,
    params: &HdgffmParams<T>,
) -> Result<FeatureMap<T>> {
    let dims = validate_feature(self_out, "self-attention output")?;
    let cdims = validate_feature(cross_out, "cross-attention output")?;
    check_same_dims(dims, cdims, "gate inputs")?;
    let (Some(gw), Some(gb)) = (&params.gate_w, &params.gate_b) else {
        return Err(Error::Config("block has no gate parameters".into()));
    };
    let cout = check_proj(gw, 2 * dims.1, "gate projection")?;
    if gb.numel() != cout {
        return Err(Error::dim_in("channels", cout, gb.numel(), "gate bias"));
    }
    let mut g = Graph::new();
    let a = g.input(self_out.clone());
    let b = g.input(cross_out.clone());
    let (w, bias) = (g.input(gw.clone()), g.input(gb.clone()));
    let cat = g.concat_channels(a, b)?;
    let logits = g.conv2d(cat, w, Some(bias), 1, 0)?;
    let gate = g.sigmoid(logits);
    Ok(g.value(gate).clone())
}

/// Full block forward with the gated fusion (the variant implied by the
/// presence of gate parameters: gated if present, additive otherwise).
pub fn hdgffm_forward<T: Real>(
    img_feat: &FeatureMap<T>,
    depth_feat_raw: &FeatureMap<T>,
    params: &HdgffmParams<T>,
) -> Result<FeatureMap<T>> {
    hdgffm_forward_variant(img_feat, depth_feat_raw, params, params.variant())
}

pub fn hdgffm_forward_variant<T: Real>(
    img_feat: &FeatureMap<T>,
    depth_feat_raw: &FeatureMap<T>,
    params: &HdgffmParams<T>,
    variant: FusionVariant,
) -> Result<FeatureMap<T>> {
    let (g, trace) = run_block(img_feat, depth_feat_raw, params, variant)?;
    Ok(g.value(trace.out).clone())
}

/// Gradients of `Σ out² / 2` with respect to every block weight, keyed like
/// [`HdgffmParams::to_params`] with an empty prefix.
pub fn hdgffm_half_sq_gradients(
    img_feat: &FeatureMap<f64>,
    depth_feat_raw: &FeatureMap<f64>,
    params: &HdgffmParams<f64>,
    variant: FusionVariant,
) -> Result<(f64, ParamSet<f64>)> {
    let set = params.to_params("p");
    let mut g = Graph::new();
    let vars = set.bind(&mut g);
    let bv = BlockVars::lookup(&vars, "p")?;
    let img = g.input(img_feat.clone());
    let depth = g.input(depth_feat_raw.clone());
    let trace = block_forward(
        &mut g,
        &bv,
        img,
        depth,
        variant,
        params.tau,
        params.heads,
        true,
    )?;
    let loss = g.half_sum_sq(trace.out);
    let mut grads = g.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, var) in vars.iter() {
        let t = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(set.get(name).expect("bound").shape().to_vec()));
        out.insert(name.trim_start_matches("p.").to_string(), t);
    }
    Ok((g.scalar_value(loss), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(c: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_features_give_uniform_attention() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        let a = channel_attention_map(&x, &x, &identity(3), &identity(3), 0.7).unwrap();
        assert!(a.data.iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn single_channel_attention_is_one() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 1], vec![5.0, -3.0]).unwrap();
        for tau in [1e-3, 1.0, 40.0] {
            let a = channel_attention_map(&x, &x, &identity(1), &identity(1), tau).unwrap();
            assert_eq!(a.data, vec![1.0]);
        }
    }

    #[test]
    fn two_channel_closed_form() {
        let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let a = channel_attention_map(&x, &x, &identity(2), &identity(2), 1.0).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (got, want) in a.data.iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_map_rejects_spatial_mismatch() {
        let q = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let k = Tensor::<f64>::zeros(vec![1, 2, 2, 3]);
        let err = channel_attention_map(&q, &k, &identity(2), &identity(2), 1.0).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn attention_map_rejects_non_finite() {
        let mut q = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        q.data_mut()[3] = f64::NAN;
        assert!(matches!(
            channel_attention_map(&q, &q, &identity(2), &identity(2), 1.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn zero_projection_self_attention_vanishes() {
        let p = HdgffmParams::<f64>::zeros(3, 2, FusionVariant::Gated);
        let x = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64 * 0.1);
        let out = self_attention(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_channel_self_attention_is_passthrough() {
        let mut p = HdgffmParams::<f64>::zeros(1, 1, FusionVariant::Gated);
        p.w_q = identity(1);
        p.w_k = identity(1);
        p.w_v = identity(1);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(self_attention(&x, &p).unwrap(), x);
    }

    #[test]
    fn cross_attention_with_mirrored_inputs_equals_self_attention() {
        let mut p = HdgffmParams::<f64>::random(4, 2, FusionVariant::Gated, true, 9, 1.0);
        p.w_k_depth = p.w_k.clone();
        p.w_v_depth = p.w_v.clone();
        let x = Tensor::from_fn(vec![2, 4, 3, 3], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        assert_eq!(
            cross_attention(&x, &x, &p).unwrap(),
            self_attention(&x, &p).unwrap()
        );
    }

    #[test]
    fn zero_depth_values_give_zero_cross_output() {
        let mut p = HdgffmParams::<f64>::random(4, 2, FusionVariant::Gated, true, 1, 1.0);
        p.w_v_depth = Tensor::zeros(vec![4, 4, 1, 1]);
        let x = Tensor::from_fn(vec![1, 4, 2, 2], |i| i as f64);
        let d = Tensor::from_fn(vec![1, 4, 2, 2], |i| -(i as f64));
        assert!(cross_attention(&x, &d, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cross_attention_rejects_spatial_mismatch() {
        let p = HdgffmParams::<f64>::zeros(2, 2, FusionVariant::Gated);
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let d = Tensor::zeros(vec![1, 2, 2, 2]);
        let err = cross_attention(&x, &d, &p).unwrap_err();
        assert!(
            matches!(err, Error::Dimension { axis: "height", .. }),
            "{err}"
        );
    }

    #[test]
    fn zero_gate_is_one_half() {
        let p = HdgffmParams::<f64>::zeros(3, 1, FusionVariant::Gated);
        let a = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(vec![1, 3, 2, 2], |i| -(i as f64) * 2.0);
        let w = correlation_gate(&a, &b, &p).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scalar_gate_closed_form() {
        let mut p = HdgffmParams::<f64>::zeros(1, 1, FusionVariant::Gated);
        p.gate_w = Some(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
        let a = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let w = correlation_gate(&a, &b, &p).unwrap();
        let want = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((w.data()[0] - want).abs() < 1e-15);
        assert!((w.data()[0] - 0.95257).abs() < 1e-5);
    }

    #[test]
    fn zero_params_are_identity_exactly() {
        for shape in [[1, 4, 3, 5], [2, 8, 2, 2]] {
            let p = HdgffmParams::<f32>::zeros(shape[1], 3, FusionVariant::Gated);
            let x = Tensor::from_fn(shape.to_vec(), |i| (i as f32 * 0.37).sin());
            let d = Tensor::from_fn(vec![shape[0], 3, shape[2], shape[3]], |i| (i as f32).cos());
            let out = hdgffm_forward(&x, &d, &p).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert_eq!(out, x);
        }
    }

    #[test]
    fn tau_must_be_positive() {
        let p = HdgffmParams::<f64>::zeros(2, 2, FusionVariant::Gated).with_tau(0.0);
        let x = Tensor::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(hdgffm_forward(&x, &x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_stage_is_named() {
        let mut p = HdgffmParams::<f64>::random(2, 2, FusionVariant::Gated, true, 4, 1.0);
        p.embed.data_mut()[0] = f64::INFINITY;
        let x = Tensor::full(vec![1, 2, 2, 2], 1.0);
        match hdgffm_forward(&x, &x, &p) {
            Err(Error::NonFinite { stage }) => assert_eq!(stage, "depth embedding"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
