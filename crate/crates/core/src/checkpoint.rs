//! Single-file checkpoints.
//!
//! ```text
//! "GEOCKPT1"                         magic
//! u64 LE                             header length in bytes
//! header                             JSON (see CheckpointHeader)
//! u32 LE                             number of named arrays
//! per array: u32 LE name length, UTF-8 name, array container
//! ```
//!
//! Array names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array_io;
use crate::enhancer::FusionMode;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::train::{EpochRecord, StepRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"GEOCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub mode: FusionMode,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the dataset config the model was trained on.
    pub dataset_hash: String,
    pub epochs_done: usize,
    pub adam_step: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub depth_mse_init: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &crate::tensor::Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    array_io::encode_into(t, out);
}

impl Checkpoint {
    pub fn adam(&self, cfg: crate::optim::OptimConfig) -> Adam<f32> {
        Adam {
            cfg,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            step: self.header.adam_step,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let count = self.params.len() + self.adam_m.len() + self.adam_v.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, set) in [
            ("param", &self.params),
            ("adam.m", &self.adam_m),
            ("adam.v", &self.adam_v),
        ] {
            for (name, t) in set.iter() {
                put_array(&mut out, &format!("{prefix}/{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(*pos..*pos + n).ok_or("truncated checkpoint")?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let hlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, hlen)?)
            .map_err(|e| format!("bad header: {e}"))?;
        if header.version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {}", header.version));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
        let (mut params, mut adam_m, mut adam_v) =
            (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(&mut pos, nlen)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let (t, used) = array_io::decode_prefix::<f32>(&bytes[pos..])?;
            pos += used;
            let (set, key) = match name.split_once('/') {
                Some(("param", k)) => (&mut params, k),
                Some(("adam.m", k)) => (&mut adam_m, k),
                Some(("adam.v", k)) => (&mut adam_v, k),
                _ => return Err(format!("unexpected array `{name}`")),
            };
            set.insert(key.to_string(), t);
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}
