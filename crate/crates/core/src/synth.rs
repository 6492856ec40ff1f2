//! Procedural scenes in which illumination depends on geometry.
//!
//! Each scene starts from a depth map (a tilted background plane plus tilted
//! rectangles and spherical caps). Surface normals are taken from the depth
//! map, and the normal-light image is albedo times Lambertian shading under a
//! random directional light, attenuated with depth, plus a smooth ambient
//! field. Shading is therefore a function of geometry, so a depth prior carries
//! real information about the illumination. The low-light image is
//! `clip(scale · normal^gamma + noise)`.
//!
//! Export layout under the output directory:
//!
//! ```text
//! manifest.jsonl                 header line, then one line per sample
//! <split>/<id>.normal.arr        (1, 3, H, W) f32
//! <split>/<id>.low.arr           (1, 3, H, W) f32
//! <split>/<id>.depth.arr         (1, 1, H, W) f32
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io;
use crate::digest;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: &str = "geolle-synth";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Inclusive `[lo, hi]` ranges sampled uniformly per scene.
    pub gamma: [f64; 2],
    pub scale: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Number of foreground primitives per scene, inclusive.
    pub shapes: [usize; 2],
    /// Largest background tilt across the image, in depth units.
    pub ramp: f64,
    /// Depth-to-pixel gain used when deriving normals.
    pub relief: f64,
    /// Optional Poisson shot noise applied before the Gaussian term,
    /// with this many photons at full scale.
    pub shot_noise_peak: Option<f64>,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train: 400,
            val: 50,
            test: 50,
            gamma: [2.0, 3.5],
            scale: [0.1, 0.3],
            noise_sigma: [0.01, 0.05],
            shapes: [2, 6],
            ramp: 0.3,
            relief: 16.0,
            shot_noise_peak: None,
            master_seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < min {
        return Err(Error::Config(format!(
            "synth.{name} = [{}, {}] must be an ordered range with lower bound >= {min}",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 {
            return Err(Error::Config("synth.image_size must be at least 2".into()));
        }
        check_range("gamma", self.gamma, f64::MIN_POSITIVE)?;
        check_range("scale", self.scale, 0.0)?;
        check_range("noise_sigma", self.noise_sigma, 0.0)?;
        if self.shapes[0] > self.shapes[1] {
            return Err(Error::Config(
                "synth.shapes must be an ordered range".into(),
            ));
        }
        if !(self.ramp.is_finite() && self.ramp >= 0.0) {
            return Err(Error::Config(
                "synth.ramp must be finite and non-negative".into(),
            ));
        }
        if !(self.relief.is_finite() && self.relief >= 0.0) {
            return Err(Error::Config(
                "synth.relief must be finite and non-negative".into(),
            ));
        }
        if let Some(p) = self.shot_noise_peak {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Config(
                    "synth.shot_noise_peak must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn hash(&self) -> Result<String> {
        digest::config_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown split `{s}` (expected train, val or test)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    /// `(1, 3, H, W)`.
    pub normal: Tensor<f32>,
    /// `(1, 3, H, W)`.
    pub low: Tensor<f32>,
    /// `(1, 1, H, W)`.
    pub depth: Tensor<f32>,
    pub seed: u64,
    pub degradation: Degradation,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-split scene seeds. Seeds are distinct across all splits; on the
/// (astronomically unlikely) event of a collision the next candidate is used.
pub fn split_seeds(cfg: &SynthConfig) -> Vec<(Split, Vec<u64>)> {
    let mut used = HashSet::new();
    Split::ALL
        .into_iter()
        .enumerate()
        .map(|(tag, split)| {
            let base = splitmix64(cfg.master_seed ^ splitmix64(tag as u64 + 1));
            let mut counter = 0u64;
            let seeds = (0..cfg.count(split))
                .map(|_| loop {
                    let s = splitmix64(base.wrapping_add(counter));
                    counter += 1;
                    if used.insert(s) {
                        break s;
                    }
                })
                .collect();
            (split, seeds)
        })
        .collect()
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{split}-{index:05}")
}

/// Unit normals `normalize(−∂x d, −∂y d, 1)` of `(N, 1, H, W)` depth maps.
///
/// Derivatives are central differences in the interior and one-sided at the
/// borders, so planar depth gives exactly constant normals.
pub fn depth_to_normals<T: Real>(depth: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = depth.dims4()?;
    if c != 1 {
        return Err(Error::dim_in("channels", 1, c, "depth map"));
    }
    let d = depth.data();
    let mut out = Tensor::zeros(vec![n, 3, h, w]);
    let half = T::from_f64(0.5);
    let plane = h * w;
    let o = out.data_mut();
    for s in 0..n {
        let ds = &d[s * plane..(s + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| ds[yy * w + xx];
                let gx = if w == 1 {
                    T::zero()
                } else if x == 0 {
                    at(y, 1) - at(y, 0)
                } else if x == w - 1 {
                    at(y, w - 1) - at(y, w - 2)
                } else {
                    (at(y, x + 1) - at(y, x - 1)) * half
                };
                let gy = if h == 1 {
                    T::zero()
                } else if y == 0 {
                    at(1, x) - at(0, x)
                } else if y == h - 1 {
                    at(h - 1, x) - at(h - 2, x)
                } else {
                    (at(y + 1, x) - at(y - 1, x)) * half
                };
                let inv = T::one() / (gx * gx + gy * gy + T::one()).sqrt();
                let base = s * 3 * plane + y * w + x;
                o[base] = -gx * inv;
                o[base + plane] = -gy * inv;
                o[base + 2 * plane] = inv;
            }
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // Still consume a draw so the stream layout does not depend on the range.
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

enum Primitive {
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        base: f64,
        tx: f64,
        ty: f64,
    },
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
        base: f64,
        cap: f64,
    },
}

impl Primitive {
    /// Depth of the primitive at `(x, y)` if it covers the pixel.
    fn depth_at(&self, x: f64, y: f64, size: f64) -> Option<f64> {
        match *self {
            Primitive::Rect {
                cx,
                cy,
                hw,
                hh,
                base,
                tx,
                ty,
            } => ((x - cx).abs() <= hw && (y - cy).abs() <= hh)
                .then(|| base + tx * (x - cx) / size + ty * (y - cy) / size),
            Primitive::Disk {
                cx,
                cy,
                r,
                base,
                cap,
            } => {
                let q = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (r * r);
                (q <= 1.0).then(|| base + cap * (1.0 - q).sqrt())
            }
        }
    }
}

/// Generates one scene; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> ScenePair {
    let s = cfg.image_size;
    let sf = s as f64;
    let plane = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let d0 = rng.random_range(0.25..0.55);
    let gx = uniform(&mut rng, [-cfg.ramp, cfg.ramp]);
    let gy = uniform(&mut rng, [-cfg.ramp, cfg.ramp]);
    let bg_albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.9));

    let k = if cfg.shapes[0] == cfg.shapes[1] {
        cfg.shapes[0]
    } else {
        rng.random_range(cfg.shapes[0]..=cfg.shapes[1])
    };
    let mut prims = Vec::with_capacity(k);
    for _ in 0..k {
        let cx = rng.random_range(0.1..0.9) * sf;
        let cy = rng.random_range(0.1..0.9) * sf;
        let base = rng.random_range(0.3..0.85);
        let albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
        let p = if rng.random_bool(0.5) {
            Primitive::Rect {
                cx,
                cy,
                hw: rng.random_range(0.06..0.22) * sf,
                hh: rng.random_range(0.06..0.22) * sf,
                base,
                tx: rng.random_range(-0.5..0.5),
                ty: rng.random_range(-0.5..0.5),
            }
        } else {
            Primitive::Disk {
                cx,
                cy,
                r: rng.random_range(0.08..0.25) * sf,
                base,
                cap: rng.random_range(0.05..0.2),
            }
        };
        prims.push((p, albedo));
    }

    let lz: f64 = rng.random_range(0.35..1.0);
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let lxy = (1.0 - lz * lz).sqrt();
    let light = [az.cos() * lxy, az.sin() * lxy, lz];

    let a0 = rng.random_range(0.08..0.18);
    let a1 = rng.random_range(0.0..0.05);
    let fx = rng.random_range(-1.0..1.0);
    let fy = rng.random_range(-1.0..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let degradation = Degradation {
        gamma: uniform(&mut rng, cfg.gamma),
        scale: uniform(&mut rng, cfg.scale),
        noise_sigma: uniform(&mut rng, cfg.noise_sigma),
    };

    // Geometry and albedo; later primitives occlude earlier ones.
    let denom = (sf - 1.0).max(1.0);
    let mut depth = vec![0f64; plane];
    let mut albedo = vec![[0f64; 3]; plane];
    for y in 0..s {
        for x in 0..s {
            let (u, v) = (x as f64 / denom, y as f64 / denom);
            let mut d = d0 + gx * (u - 0.5) + gy * (v - 0.5);
            let mut a = bg_albedo;
            for (p, pa) in &prims {
                if let Some(pd) = p.depth_at(x as f64, y as f64, sf) {
                    d = pd;
                    a = *pa;
                }
            }
            depth[y * s + x] = d.clamp(0.0, 1.0);
            albedo[y * s + x] = a;
        }
    }

    let relief = Tensor::new(
        vec![1, 1, s, s],
        depth.iter().map(|d| d * cfg.relief).collect(),
    )
    .expect("depth plane");
    let normals = depth_to_normals(&relief).expect("depth plane");
    let nd = normals.data();

    let mut normal = vec![0f32; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let (u, v) = (x as f64 / denom, y as f64 / denom);
            let ambient = a0 + a1 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            let lambert =
                (nd[i] * light[0] + nd[i + plane] * light[1] + nd[i + 2 * plane] * light[2])
                    .max(0.0);
            let shading = ambient + 0.85 * lambert * (0.35 + 0.65 * depth[i]);
            for c in 0..3 {
                normal[c * plane + i] = (albedo[i][c] * shading).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let peak = cfg.shot_noise_peak;
    let low: Vec<f32> = normal
        .iter()
        .map(|&n| {
            let mut v = degradation.scale * (n as f64).powf(degradation.gamma);
            if let Some(peak) = peak {
                let lambda = (v * peak).max(0.0);
                v = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map(|p| p.sample(&mut rng))
                        .unwrap_or(lambda)
                        / peak
                } else {
                    0.0
                };
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            (v + degradation.noise_sigma * z).clamp(0.0, 1.0) as f32
        })
        .collect();

    ScenePair {
        normal: Tensor::new(vec![1, 3, s, s], normal).expect("image"),
        low: Tensor::new(vec![1, 3, s, s], low).expect("image"),
        depth: Tensor::new(vec![1, 1, s, s], depth.iter().map(|&d| d as f32).collect())
            .expect("depth"),
        seed,
        degradation,
    }
}

/// Rec. 601 luma of a `(1, 3, H, W)` image.
pub fn luminance(img: &Tensor<f32>) -> Vec<f64> {
    let plane = img.numel() / 3;
    let d = img.data();
    (0..plane)
        .map(|i| {
            0.299 * d[i] as f64 + 0.587 * d[i + plane] as f64 + 0.114 * d[i + 2 * plane] as f64
        })
        .collect()
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Correlation between depth and normal-light luminance within one scene.
pub fn depth_luminance_correlation(pair: &ScenePair) -> f64 {
    let d: Vec<f64> = pair.depth.data().iter().map(|&v| v as f64).collect();
    pearson(&d, &luminance(&pair.normal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub config: SynthConfig,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub degradation: Degradation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.samples {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Reads `<dir>/manifest.jsonl`; parse errors carry the line number.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(err(
                1,
                format!("unsupported manifest {} v{}", header.format, header.version),
            ));
        }
        let samples = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Self { header, samples })
    }
}

pub fn sample_path(dir: &Path, split: Split, id: &str, kind: &str) -> PathBuf {
    dir.join(split.as_str()).join(format!("{id}.{kind}.arr"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub manifest: Manifest,
    pub files_written: usize,
    pub files_unchanged: usize,
}

impl ExportSummary {
    /// True when every file already existed with identical bytes.
    pub fn unchanged(&self) -> bool {
        self.files_written == 0
    }
}

/// Writes `bytes` unless the file already holds exactly them. Returns whether it wrote.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// Generates every split and writes arrays plus manifest. Re-exporting the
/// same config reproduces every file byte for byte (and skips rewriting them).
pub fn export_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<ExportSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        config_hash: cfg.hash()?,
    };
    let (mut written, mut unchanged) = (0, 0);
    let mut samples = Vec::new();
    for (split, seeds) in split_seeds(cfg) {
        let scenes: Vec<ScenePair> = seeds.par_iter().map(|&s| generate_scene(s, cfg)).collect();
        for (i, scene) in scenes.iter().enumerate() {
            let id = sample_id(split, i);
            for (kind, t) in [
                ("normal", &scene.normal),
                ("low", &scene.low),
                ("depth", &scene.depth),
            ] {
                if write_if_changed(
                    &sample_path(out_dir, split, &id, kind),
                    &array_io::encode(t),
                )? {
                    written += 1;
                } else {
                    unchanged += 1;
                }
            }
            samples.push(ManifestEntry {
                id,
                split,
                seed: scene.seed,
                degradation: scene.degradation,
            });
        }
    }
    let manifest = Manifest { header, samples };
    if write_if_changed(
        &out_dir.join(MANIFEST_FILE),
        manifest.to_jsonl()?.as_bytes(),
    )? {
        written += 1;
    } else {
        unchanged += 1;
    }
    Ok(ExportSummary {
        manifest,
        files_written: written,
        files_unchanged: unchanged,
    })
}

/// One exported sample loaded back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub normal: Tensor<f32>,
    pub low: Tensor<f32>,
    pub depth: Tensor<f32>,
}

/// An exported dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::load(dir)?,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.header.config_hash
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let size = self.manifest.header.config.image_size;
        self.manifest
            .entries(split)
            .map(|e| {
                let read = |kind: &str, c: usize| -> Result<Tensor<f32>> {
                    let path = sample_path(&self.dir, split, &e.id, kind);
                    let t: Tensor<f32> = array_io::read_array(&path)?;
                    if t.shape() != [1, c, size, size] {
                        return Err(Error::Format {
                            path,
                            reason: format!(
                                "expected shape [1, {c}, {size}, {size}], got {:?}",
                                t.shape()
                            ),
                        });
                    }
                    Ok(t)
                };
                Ok(Sample {
                    id: e.id.clone(),
                    normal: read("normal", 3)?,
                    low: read("low", 3)?,
                    depth: read("depth", 1)?,
                })
            })
            .collect()
    }
}
