//! TOML run configuration. Relative paths resolve against the config
//! file's directory; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use advpatch_core::detector::toy;
use advpatch_core::detector::{Detector, DetectorHandle};
use advpatch_core::eval::EvalSettings;
use advpatch_core::trainer::AttackConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub name: String,
    /// Darknet cfg and weights; both absent selects the bundled toy detector.
    pub cfg: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// One class name per line; the person class is looked up by name.
    pub class_file: Option<PathBuf>,
    #[serde(default = "default_person_name")]
    pub person_class: String,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
}

fn default_person_name() -> String {
    "person".into()
}

fn default_conf() -> f64 {
    0.5
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            name: toy::TOY_NAME.into(),
            cfg: None,
            weights: None,
            class_file: None,
            person_class: default_person_name(),
            conf_threshold: default_conf(),
        }
    }
}

impl DetectorSpec {
    pub fn load(&self) -> CliResult<Detector> {
        let det = match (&self.cfg, &self.weights) {
            (None, None) => {
                let d = toy::toy_detector()?;
                let mut h = d.handle().clone();
                h.conf_threshold = self.conf_threshold;
                Detector::new(h, d.network().clone(), d.weights_digest())?
            }
            (Some(cfg), Some(weights)) => {
                let person = match &self.class_file {
                    Some(p) => {
                        let names =
                            fs::read_to_string(p).map_err(|e| CliError::Detector(format!("{}: {e}", p.display())))?;
                        names
                            .lines()
                            .map(str::trim)
                            .filter(|l| !l.is_empty())
                            .position(|l| l == self.person_class)
                            .ok_or_else(|| {
                                CliError::Detector(format!(
                                    "class {:?} not found in {}",
                                    self.person_class,
                                    p.display()
                                ))
                            })?
                    }
                    None => 0,
                };
                let mut h = DetectorHandle::new(self.name.clone(), person);
                h.conf_threshold = self.conf_threshold;
                Detector::load_darknet(h, cfg, weights)?
            }
            _ => {
                return Err(CliError::Config(
                    "detector.cfg and detector.weights must be given together".into(),
                ))
            }
        };
        Ok(det)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Optional subdirectory (e.g. `train`, `test`) of both directories.
    pub split: Option<String>,
    /// Label class id of persons; other boxes are dropped.
    #[serde(default)]
    pub person_label: usize,
}

impl DatasetSpec {
    pub fn dirs(&self) -> (PathBuf, PathBuf) {
        match &self.split {
            Some(s) => (self.images.join(s), self.labels.join(s)),
            None => (self.images.clone(), self.labels.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub guide_image: PathBuf,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.guide_image);
        fix(&mut self.output_dir);
        fix(&mut self.dataset.images);
        fix(&mut self.dataset.labels);
        for p in [
            &mut self.detector.cfg,
            &mut self.detector.weights,
            &mut self.detector.class_file,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Fails fast on any referenced path that does not exist.
    pub fn check_paths(&self) -> CliResult<()> {
        let (img, lbl) = self.dataset.dirs();
        let mut required = vec![
            ("guide_image", self.guide_image.clone()),
            ("dataset.images", img),
            ("dataset.labels", lbl),
        ];
        for (k, p) in [
            ("detector.cfg", &self.detector.cfg),
            ("detector.weights", &self.detector.weights),
            ("detector.class_file", &self.detector.class_file),
        ] {
            if let Some(p) = p {
                required.push((k, p.clone()));
            }
        }
        for (key, p) in required {
            if !p.exists() {
                return Err(CliError::Config(format!("{key}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.attack.validate()?;
        self.eval.render.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the effective config serialization.
    pub fn digest(&self) -> CliResult<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}
