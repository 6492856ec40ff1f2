//! The run config file: one TOML document with `[synth]`, `[train]` and `[ablation]` sections.
//!
//! Every section and every key is optional; missing values take their defaults.
//! Unknown keys are rejected so typos never silently fall back to a default.

use std::path::{Path, PathBuf};

use geolle_core::ablation::AblationVariant;
use geolle_core::synth::SynthConfig;
use geolle_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{Exit, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Train the grid cells concurrently.
    pub parallel: bool,
    /// Row labels to run; empty means the seven standard rows.
    pub variants: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            parallel: false,
            variants: Vec::new(),
        }
    }
}

impl AblationConfig {
    pub fn resolve_variants(&self) -> Result<Vec<AblationVariant>, Failure> {
        let standard = AblationVariant::standard();
        if self.variants.is_empty() {
            return Ok(standard);
        }
        self.variants
            .iter()
            .map(|label| {
                standard
                    .iter()
                    .find(|v| &v.label == label)
                    .cloned()
                    .ok_or_else(|| {
                        let known: Vec<&str> = standard.iter().map(|v| v.label.as_str()).collect();
                        Failure::new(
                            Exit::Usage,
                            format!(
                                "unknown ablation variant `{label}` (known: {})",
                                known.join(", ")
                            ),
                        )
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| {
            Failure::new(
                Exit::Usage,
                format!("{}: {}", path.display(), e.to_string().trim_end()),
            )
        })
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Failure::new(Exit::MissingInput, format!("{}: {e}", p.display()))
                })?;
                Self::parse(&text, p)
            }
        }
    }

    /// Makes relative dataset and teacher paths relative to `root`.
    pub fn anchor_paths(&mut self, root: &Path) {
        self.train.dataset = anchor(root, &self.train.dataset);
        if let geolle_core::train::TeacherConfig::Files { dir } = &mut self.train.teacher {
            *dir = anchor(root, dir);
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.synth.validate().map_err(Failure::from)?;
        self.train.validate().map_err(Failure::from)?;
        if self.ablation.seeds.is_empty() {
            return Err(Failure::new(
                Exit::Usage,
                "ablation.seeds must not be empty",
            ));
        }
        self.ablation.resolve_variants().map(|_| ())
    }
}

pub fn anchor(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
