//! Lightweight depth branch: a small U-shaped network whose encoder levels line
//! up with the enhancer's encoder, plus the distillation loss and the sources
//! of teacher depth.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::array_io;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{conv, conv_param_count, register_conv};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{check_same_dims, Real, Tensor};

/// `(N, 1, H, W)` inverse-depth-style score; ground truth lies in `[0, 1]`.
pub type DepthMap<T> = Tensor<T>;

/// Encoder features of the depth branch, finest level first. Level `l` has
/// `base · 2^l` channels at `1 / 2^l` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPyramid<T> {
    pub levels: Vec<Tensor<T>>,
    /// Decoder features at the same resolutions, used only by decoder-side fusion.
    pub decoder_levels: Vec<Tensor<T>>,
}

/// Shape of the depth branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthBranch {
    pub levels: usize,
    pub base_width: usize,
}

/// Graph handles produced by one depth-branch evaluation.
#[derive(Debug, Clone)]
pub struct DepthTaps {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub depth: Var,
}

impl DepthBranch {
    pub fn new(levels: usize, base_width: usize) -> Result<Self> {
        if levels == 0 || base_width == 0 {
            return Err(Error::Config(
                "depth branch needs at least one level and a positive width".into(),
            ));
        }
        Ok(Self { levels, base_width })
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Input sides must be divisible by `2^(L−1)`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} required by {} levels",
                self.levels - 1,
                self.levels
            )));
        }
        Ok(())
    }

    pub fn register<T: Real>(&self, p: &mut ParamSet<T>, seed: u64) {
        register_conv(p, seed, "depth.stem", 3, self.width(0), 3, 1.0);
        for l in 0..self.levels {
            if l > 0 {
                register_conv(
                    p,
                    seed,
                    &format!("depth.down{l}"),
                    self.width(l - 1),
                    self.width(l),
                    3,
                    1.0,
                );
            }
            register_conv(
                p,
                seed,
                &format!("depth.enc{l}"),
                self.width(l),
                self.width(l),
                3,
                1.0,
            );
        }
        let last = self.levels - 1;
        register_conv(
            p,
            seed,
            &format!("depth.dec{last}"),
            self.width(last),
            self.width(last),
            3,
            1.0,
        );
        for l in (0..last).rev() {
            register_conv(
                p,
                seed,
                &format!("depth.merge{l}"),
                self.width(l + 1) + self.width(l),
                self.width(l),
                3,
                1.0,
            );
        }
        register_conv(p, seed, "depth.head", self.width(0), 1, 3, 1.0);
    }

    /// Closed-form parameter count of [`DepthBranch::register`].
    pub fn param_count(&self) -> usize {
        let mut n = conv_param_count(3, self.width(0), 3);
        for l in 0..self.levels {
            if l > 0 {
                n += conv_param_count(self.width(l - 1), self.width(l), 3);
            }
            n += conv_param_count(self.width(l), self.width(l), 3);
        }
        let last = self.levels - 1;
        n += conv_param_count(self.width(last), self.width(last), 3);
        for l in 0..last {
            n += conv_param_count(self.width(l + 1) + self.width(l), self.width(l), 3);
        }
        n + conv_param_count(self.width(0), 1, 3)
    }

    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        img: Var,
    ) -> Result<DepthTaps> {
        let (_, c, h, w) = g.value(img).dims4()?;
        if c != 3 {
            return Err(Error::dim_in("channels", 3, c, "depth branch input"));
        }
        self.check_input(h, w)?;
        let mut x = conv(g, vars, "depth.stem", img, 1)?;
        x = g.silu(x);
        let mut encoder = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            if l > 0 {
                x = conv(g, vars, &format!("depth.down{l}"), x, 2)?;
                x = g.silu(x);
            }
            x = conv(g, vars, &format!("depth.enc{l}"), x, 1)?;
            x = g.silu(x);
            encoder.push(x);
        }
        let last = self.levels - 1;
        let mut y = conv(g, vars, &format!("depth.dec{last}"), encoder[last], 1)?;
        y = g.silu(y);
        let mut decoder = vec![y; self.levels];
        for l in (0..last).rev() {
            let up = g.upsample2(y)?;
            let cat = g.concat_channels(up, encoder[l])?;
            y = conv(g, vars, &format!("depth.merge{l}"), cat, 1)?;
            y = g.silu(y);
            decoder[l] = y;
        }
        let depth = conv(g, vars, "depth.head", y, 1)?;
        Ok(DepthTaps {
            encoder,
            decoder,
            depth,
        })
    }

    /// Evaluates the branch on concrete tensors.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        low_light: &Tensor<T>,
    ) -> Result<(DepthPyramid<T>, DepthMap<T>)> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let img = g.input(low_light.clone());
        let taps = self.forward_graph(&mut g, &vars, img)?;
        let pyramid = DepthPyramid {
            levels: taps.encoder.iter().map(|&v| g.value(v).clone()).collect(),
            decoder_levels: taps.decoder.iter().map(|&v| g.value(v).clone()).collect(),
        };
        Ok((pyramid, g.value(taps.depth).clone()))
    }
}

/// Mean squared error between predicted and teacher depth.
pub fn depth_loss<T: Real>(pred: &DepthMap<T>, teacher: &DepthMap<T>) -> Result<f64> {
    if pred.shape() != teacher.shape() {
        check_same_dims(
            teacher.dims4()?,
            pred.dims4()?,
            "depth prediction vs teacher",
        )?;
    }
    let mut g = Graph::new();
    let a = g.input(pred.clone());
    let b = g.input(teacher.clone());
    let l = g.mse(a, b)?;
    Ok(g.scalar_value(l).as_f64())
}

/// Source of distillation targets: the teacher's depth of the normal-light image.
pub trait TeacherDepthProvider: Send + Sync {
    /// `(1, 1, H, W)` depth for the given sample.
    fn teacher_depth(&self, sample_id: &str) -> Result<DepthMap<f32>>;

    fn describe(&self) -> String;
}

/// Ground-truth depth produced by the scene generator.
#[derive(Debug, Default)]
pub struct SyntheticTeacher {
    depths: HashMap<String, DepthMap<f32>>,
}

impl SyntheticTeacher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, depth: DepthMap<f32>) {
        self.depths.insert(id.into(), depth);
    }
}

impl TeacherDepthProvider for SyntheticTeacher {
    fn teacher_depth(&self, sample_id: &str) -> Result<DepthMap<f32>> {
        self.depths
            .get(sample_id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no synthetic depth for sample `{sample_id}`")))
    }

    fn describe(&self) -> String {
        "synthetic".into()
    }
}

/// Precomputed depth maps stored as `<dir>/<sample id>.arr` array containers,
/// e.g. the outputs of an external monocular depth model run on the
/// normal-light images.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    dir: PathBuf,
}

impl FileTeacher {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, sample_id: &str) -> PathBuf {
        self.dir.join(format!("{sample_id}.arr"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl TeacherDepthProvider for FileTeacher {
    fn teacher_depth(&self, sample_id: &str) -> Result<DepthMap<f32>> {
        let path = self.path_for(sample_id);
        let t: Tensor<f32> = array_io::read_array(&path)?;
        let t = match t.rank() {
            2 => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                t.reshape(vec![1, 1, h, w])?
            }
            3 if t.shape()[0] == 1 => {
                let (h, w) = (t.shape()[1], t.shape()[2]);
                t.reshape(vec![1, 1, h, w])?
            }
            4 if t.shape()[0] == 1 && t.shape()[1] == 1 => t,
            _ => {
                return Err(Error::Format {
                    path,
                    reason: format!(
                        "expected a single-channel depth map, got shape {:?}",
                        t.shape()
                    ),
                })
            }
        };
        Ok(t)
    }

    fn describe(&self) -> String {
        format!("file:{}", self.dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes() {
        let branch = DepthBranch::new(3, 8).unwrap();
        let mut p = ParamSet::<f32>::new();
        branch.register(&mut p, 1);
        let x = Tensor::from_fn(vec![1, 3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let (pyr, depth) = branch.forward(&p, &x).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 8, 32, 32], vec![1, 16, 16, 16], vec![1, 32, 8, 8]]
        );
        assert_eq!(depth.shape(), &[1, 1, 32, 32]);
        assert_eq!(p.count(), branch.param_count());
    }

    #[test]
    fn zero_weights_give_bias_map() {
        let branch = DepthBranch::new(2, 4).unwrap();
        let mut p = ParamSet::<f64>::new();
        branch.register(&mut p, 1);
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        p.get_mut("depth.head.b").unwrap().data_mut()[0] = 0.37;
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i as f64).sin());
        let (_, depth) = branch.forward(&p, &x).unwrap();
        assert!(depth.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let branch = DepthBranch::new(3, 8).unwrap();
        assert!(matches!(branch.check_input(30, 32), Err(Error::Config(_))));
        assert!(branch.check_input(32, 8).is_ok());
    }

    #[test]
    fn depth_loss_cases() {
        let a = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| i as f64 / 16.0);
        assert_eq!(depth_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((depth_loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(depth_loss(&a, &b).unwrap(), depth_loss(&b, &a).unwrap());
        let c = Tensor::<f64>::zeros(vec![1, 1, 4, 5]);
        assert!(matches!(
            depth_loss(&a, &c),
            Err(Error::Dimension { axis: "width", .. })
        ));
    }

    #[test]
    fn depth_loss_matches_loop() {
        let a = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| ((i * 7919) % 97) as f64 / 97.0);
        let b = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| ((i * 104729) % 89) as f64 / 89.0);
        let mut s = 0.0;
        for i in 0..16 {
            let d = a.data()[i] - b.data()[i];
            s += d * d;
        }
        assert!((depth_loss(&a, &b).unwrap() - s / 16.0).abs() < 1e-15);
    }
}
