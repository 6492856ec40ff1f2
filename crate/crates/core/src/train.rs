//! Joint training of the enhancer and the depth branch, evaluation, and the
//! JSON report that records every logged loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array_io;
use crate::checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
use crate::depth::{FileTeacher, SyntheticTeacher, TeacherDepthProvider};
use crate::digest;
use crate::enhancer::{FusionMode, Model, ModelConfig, Wiring, CHARBONNIER_EPS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::optim::{Adam, OptimConfig};
use crate::params::ParamSet;
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Where distillation targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TeacherConfig {
    /// Ground-truth depth exported with the dataset.
    #[default]
    Synthetic,
    /// `<dir>/<sample id>.arr` depth maps.
    Files { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: FusionMode,
    /// Base depth-loss weight.
    pub lambda: f64,
    /// Multiplier on `lambda`; the effective weight is `lambda · lambda_scale`.
    pub lambda_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Directory holding an exported dataset (`manifest.jsonl`).
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub teacher: TeacherConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Full,
            lambda: DEFAULT_LAMBDA,
            lambda_scale: 1.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            optimizer: OptimConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_lambda(&self) -> f64 {
        self.lambda * self.lambda_scale
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("train.lambda must be finite and >= 0".into()));
        }
        if !(self.lambda_scale.is_finite() && self.lambda_scale >= 0.0) {
            return Err(Error::Config(
                "train.lambda_scale must be finite and >= 0".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()
    }

    /// Checks that every referenced path exists.
    pub fn check_paths(&self) -> Result<()> {
        let manifest = self.dataset.join(crate::synth::MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::io(
                &manifest,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
            ));
        }
        if let TeacherConfig::Files { dir } = &self.teacher {
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "teacher depth directory not found",
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        digest::config_hash(self)
    }
}

/// Losses of one optimization step, recorded before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lg: f64,
    pub ld: f64,
    /// `lg + lambda · ld` as computed by the training graph.
    pub total: f64,
    pub lr: f64,
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lg: f64,
    pub ld: f64,
    pub total: f64,
}

/// `f64` that serializes `+∞` as the string `"inf"`.
pub mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub n: usize,
    /// Over finite PSNR values only.
    pub psnr_mean: Option<f64>,
    pub psnr_std: Option<f64>,
    /// Samples whose PSNR was infinite (identical images).
    pub psnr_inf_excluded: usize,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
    pub samples: Vec<SampleMetrics>,
}

impl SplitMetrics {
    pub fn from_samples(split: Split, samples: Vec<SampleMetrics>) -> Self {
        let finite: Vec<f64> = samples
            .iter()
            .map(|s| s.psnr)
            .filter(|p| p.is_finite())
            .collect();
        let ssims: Vec<f64> = samples.iter().map(|s| s.ssim).collect();
        let p = mean_std(&finite);
        let s = mean_std(&ssims);
        Self {
            split,
            n: samples.len(),
            psnr_mean: p.map(|x| x.0),
            psnr_std: p.map(|x| x.1),
            psnr_inf_excluded: samples.len() - finite.len(),
            ssim_mean: s.map(|x| x.0),
            ssim_std: s.map(|x| x.1),
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: FusionMode,
    pub wiring: Wiring,
    /// Effective depth-loss weight.
    pub lambda: f64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub teacher: String,
    pub param_count: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub eval: Vec<SplitMetrics>,
    /// Held-out (test split) depth MSE of the depth branch before and after training.
    pub depth_mse_init: Option<f64>,
    pub depth_mse_final: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn split(&self, split: Split) -> Option<&SplitMetrics> {
        self.eval.iter().find(|m| m.split == split)
    }

    /// Largest `|total − (lg + lambda·ld)|` over all logged steps.
    pub fn ledger_max_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| (s.total - (s.lg + self.lambda * s.ld)).abs())
            .fold(0.0, f64::max)
    }

    #[cfg(test)]
    pub(crate) fn stub(config: TrainConfig, eval: Vec<SplitMetrics>) -> Self {
        Self {
            mode: config.mode,
            wiring: crate::enhancer::ablation_wiring(config.mode),
            lambda: config.effective_lambda(),
            config_hash: String::new(),
            dataset_hash: String::new(),
            teacher: String::new(),
            param_count: 0,
            steps: Vec::new(),
            epochs: Vec::new(),
            eval,
            depth_mse_init: None,
            depth_mse_final: None,
            wall_clock_s: 0.0,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

pub type EpochCallback = Box<dyn FnMut(&EpochRecord) + Send>;

pub struct TrainOptions {
    /// Written after every epoch; also the resume source.
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
    /// Stop (without evaluating) once this many epochs are done, as if interrupted.
    pub stop_after_epochs: Option<usize>,
    pub eval_splits: Vec<Split>,
    pub on_epoch: Option<EpochCallback>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            resume: false,
            stop_after_epochs: None,
            eval_splits: vec![Split::Val, Split::Test],
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    /// False when stopped early by `stop_after_epochs`.
    pub completed: bool,
}

struct Loaded {
    dataset: Dataset,
    splits: Vec<(Split, Vec<Sample>)>,
    teacher: Box<dyn TeacherDepthProvider>,
}

impl Loaded {
    fn split(&self, split: Split) -> &[Sample] {
        self.splits
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

fn load(cfg: &TrainConfig) -> Result<Loaded> {
    cfg.check_paths()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let splits = Split::ALL
        .into_iter()
        .map(|s| Ok((s, dataset.load_split(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let teacher: Box<dyn TeacherDepthProvider> = match &cfg.teacher {
        TeacherConfig::Synthetic => {
            let mut t = SyntheticTeacher::new();
            for (_, samples) in &splits {
                for s in samples {
                    t.insert(s.id.clone(), s.depth.clone());
                }
            }
            Box::new(t)
        }
        TeacherConfig::Files { dir } => Box::new(FileTeacher::new(dir)),
    };
    Ok(Loaded {
        dataset,
        splits,
        teacher,
    })
}

fn teacher_depths(
    teacher: &dyn TeacherDepthProvider,
    samples: &[Sample],
) -> Result<Vec<Tensor<f32>>> {
    samples
        .iter()
        .map(|s| {
            let d = teacher.teacher_depth(&s.id)?;
            let (_, _, h, w) = s.normal.dims4()?;
            crate::tensor::check_same_dims(
                (1, 1, h, w),
                d.dims4()?,
                &format!("teacher depth for `{}`", s.id),
            )?;
            Ok(d)
        })
        .collect()
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = items.collect();
    Tensor::stack_batch(&parts)
}

/// Mean depth MSE of the depth branch over `samples`, or `None` for modes without one.
pub fn depth_mse(
    model: &Model,
    params: &ParamSet<f32>,
    samples: &[Sample],
    teachers: &[Tensor<f32>],
    batch: usize,
) -> Result<Option<f64>> {
    if !model.wiring.uses_depth_branch || samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (chunk, tchunk) in samples.chunks(batch).zip(teachers.chunks(batch)) {
        let low = stack(chunk.iter().map(|s| &s.low))?;
        let teacher = stack(tchunk.iter())?;
        let (_, pred) = model.depth.forward(params, &low)?;
        total += crate::depth::depth_loss(&pred, &teacher)? * chunk.len() as f64;
    }
    Ok(Some(total / samples.len() as f64))
}

/// Clamped enhancer outputs for `samples`, in order.
pub fn enhance_samples(
    model: &Model,
    params: &ParamSet<f32>,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let low = stack(chunk.iter().map(|s| &s.low))?;
        let (y, _) = model.forward(params, &low)?;
        let y = y.map(|v| v.clamp(0.0, 1.0));
        for i in 0..chunk.len() {
            out.push(y.sample(i)?);
        }
    }
    Ok(out)
}

/// PSNR/SSIM of clamped outputs over one split; optionally dumps each output
/// as `<dump>/<id>.enhanced.arr`.
pub fn evaluate_samples(
    model: &Model,
    params: &ParamSet<f32>,
    split: Split,
    samples: &[Sample],
    batch: usize,
    dump: Option<&Path>,
) -> Result<SplitMetrics> {
    let outputs = enhance_samples(model, params, samples, batch)?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, y) in samples.iter().zip(&outputs) {
            array_io::write_array(&dir.join(format!("{}.enhanced.arr", s.id)), y)?;
        }
    }
    let per = samples
        .iter()
        .zip(&outputs)
        .map(|(s, y)| {
            Ok(SampleMetrics {
                id: s.id.clone(),
                psnr: metrics::psnr(y, &s.normal)?,
                ssim: metrics::ssim(y, &s.normal)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitMetrics::from_samples(split, per))
}

/// Trains one model. Deterministic for a given config: initialization,
/// shuffling and every reduction depend only on the seed.
pub fn train(cfg: &TrainConfig, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let model = Model::new(cfg.model.clone(), cfg.mode)?;
    let data = load(cfg)?;
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let size = data.dataset.manifest.header.config.image_size;
    model.check_input(size, size)?;
    let lambda = cfg.effective_lambda();
    let config_hash = cfg.hash()?;
    let dataset_hash = data.dataset.config_hash().to_string();

    let uses_depth = model.wiring.uses_depth_branch;
    let train_teacher = if uses_depth {
        teacher_depths(data.teacher.as_ref(), train_set)?
    } else {
        Vec::new()
    };
    let test_set = data.split(Split::Test);
    let test_teacher = if uses_depth {
        teacher_depths(data.teacher.as_ref(), test_set)?
    } else {
        Vec::new()
    };

    let mut params = model.init_params::<f32>(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer.clone(), &params);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut depth_mse_init = depth_mse(&model, &params, test_set, &test_teacher, cfg.batch_size)?;
    let mut elapsed_before = 0.0;

    if opts.resume {
        if let Some(path) = opts.checkpoint.as_ref().filter(|p| p.exists()) {
            let ck = Checkpoint::load(path)?;
            if ck.header.config_hash != config_hash {
                return Err(Error::Incompatible(format!(
                    "{} was written for config {} but the current config hashes to {config_hash}",
                    path.display(),
                    ck.header.config_hash
                )));
            }
            if ck.header.dataset_hash != dataset_hash {
                return Err(Error::Incompatible(format!(
                    "{} was trained on dataset {} but {} holds {dataset_hash}",
                    path.display(),
                    ck.header.dataset_hash,
                    cfg.dataset.display()
                )));
            }
            adam = ck.adam(cfg.optimizer.clone());
            params = ck.params;
            steps = ck.header.steps;
            epochs = ck.header.epochs;
            depth_mse_init = ck.header.depth_mse_init;
            elapsed_before = ck.header.wall_clock_s;
        }
    }

    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let lg_weight = lambda;

    let make_checkpoint = |params: &ParamSet<f32>,
                           adam: &Adam<f32>,
                           steps: &[StepRecord],
                           epochs: &[EpochRecord],
                           secs: f64| Checkpoint {
        header: CheckpointHeader {
            version: FORMAT_VERSION,
            mode: cfg.mode,
            config: cfg.clone(),
            config_hash: config_hash.clone(),
            dataset_hash: dataset_hash.clone(),
            epochs_done: epochs.len(),
            adam_step: adam.step,
            steps: steps.to_vec(),
            epochs: epochs.to_vec(),
            depth_mse_init,
            wall_clock_s: secs,
        },
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
    };

    let mut completed = true;
    for epoch in epochs.len()..cfg.epochs {
        if opts.stop_after_epochs.is_some_and(|k| epoch >= k) {
            completed = false;
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
        let (mut sum_g, mut sum_d, mut sum_t) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let low = stack(idx.iter().map(|&i| &train_set[i].low))?;
            let normal = stack(idx.iter().map(|&i| &train_set[i].normal))?;
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let x = g.input(low);
            let target = g.input(normal);
            let out = model.forward_graph(&mut g, &vars, x)?;
            let lg = g.charbonnier(out.enhanced, target, CHARBONNIER_EPS)?;
            let (ld, total) = match &out.depth {
                Some(taps) => {
                    let t = g.input(stack(idx.iter().map(|&i| &train_teacher[i]))?);
                    let ld = g.mse(taps.depth, t)?;
                    (Some(ld), g.weighted_sum(lg, ld, lg_weight)?)
                }
                None => (None, lg),
            };
            let lr = cfg.optimizer.lr_at(adam.step, total_steps);
            let rec = StepRecord {
                epoch,
                batch: b,
                lg: g.scalar_value(lg) as f64,
                ld: ld.map_or(0.0, |v| g.scalar_value(v) as f64),
                total: g.scalar_value(total) as f64,
                lr,
            };
            if !(rec.lg.is_finite() && rec.ld.is_finite() && rec.total.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let mut grads = g.backward(total)?;
            let mut gset = ParamSet::new();
            for (name, var) in vars.iter() {
                if let Some(t) = grads.take(*var) {
                    if !t.all_finite() {
                        return Err(Error::Diverged { epoch, batch: b });
                    }
                    gset.insert(name.clone(), t);
                }
            }
            adam.update(&mut params, &gset, lr)?;
            sum_g += rec.lg;
            sum_d += rec.ld;
            sum_t += rec.total;
            steps.push(rec);
        }
        let k = batches as f64;
        let er = EpochRecord {
            epoch,
            lg: sum_g / k,
            ld: sum_d / k,
            total: sum_t / k,
        };
        epochs.push(er);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&er);
        }
        if let Some(path) = &opts.checkpoint {
            make_checkpoint(
                &params,
                &adam,
                &steps,
                &epochs,
                elapsed_before + start.elapsed().as_secs_f64(),
            )
            .save(path)?;
        }
    }

    let mut eval = Vec::new();
    let mut depth_mse_final = None;
    if completed {
        for &split in &opts.eval_splits {
            eval.push(evaluate_samples(
                &model,
                &params,
                split,
                data.split(split),
                cfg.batch_size,
                None,
            )?);
        }
        depth_mse_final = depth_mse(&model, &params, test_set, &test_teacher, cfg.batch_size)?;
    }
    let wall = elapsed_before + start.elapsed().as_secs_f64();
    let checkpoint = make_checkpoint(&params, &adam, &steps, &epochs, wall);
    let report = MetricsReport {
        mode: cfg.mode,
        wiring: model.wiring.clone(),
        lambda,
        config: cfg.clone(),
        config_hash,
        dataset_hash,
        teacher: data.teacher.describe(),
        param_count: params.count(),
        steps,
        epochs,
        eval,
        depth_mse_init,
        depth_mse_final,
        wall_clock_s: wall,
    };
    Ok(TrainOutcome {
        checkpoint,
        report,
        completed,
    })
}

/// Result of evaluating a checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: FusionMode,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs_done: usize,
    pub metrics: SplitMetrics,
}

/// Deterministic metrics of a checkpoint on one split of `dataset`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    dump: Option<&Path>,
) -> Result<EvalReport> {
    let h = &checkpoint.header;
    if h.dataset_hash != dataset.config_hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained on dataset config {} but {} has {}",
            h.dataset_hash,
            dataset.dir.display(),
            dataset.config_hash()
        )));
    }
    if h.config.hash()? != h.config_hash {
        return Err(Error::Incompatible(
            "checkpoint config does not match its recorded hash".into(),
        ));
    }
    let model = Model::new(h.config.model.clone(), h.mode)?;
    let expected = model.init_params::<f32>(0);
    for (name, t) in expected.iter() {
        match checkpoint.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Incompatible(format!("parameter `{name}` missing"))),
        }
    }
    let samples = dataset.load_split(split)?;
    let metrics = evaluate_samples(
        &model,
        &checkpoint.params,
        split,
        &samples,
        h.config.batch_size,
        dump,
    )?;
    Ok(EvalReport {
        mode: h.mode,
        config_hash: h.config_hash.clone(),
        dataset_hash: h.dataset_hash.clone(),
        epochs_done: h.epochs_done,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_inf_serializes_as_string() {
        let m = SampleMetrics {
            id: "a".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""), "{s}");
        let back: SampleMetrics = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn split_metrics_exclude_infinite_psnr() {
        let mk = |p: f64| SampleMetrics {
            id: String::new(),
            psnr: p,
            ssim: 0.5,
        };
        let m =
            SplitMetrics::from_samples(Split::Test, vec![mk(20.0), mk(f64::INFINITY), mk(22.0)]);
        assert_eq!(m.psnr_inf_excluded, 1);
        assert_eq!(m.psnr_mean, Some(21.0));
        assert!((m.psnr_std.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let empty = SplitMetrics::from_samples(Split::Val, vec![]);
        assert_eq!((empty.n, empty.psnr_mean), (0, None));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
