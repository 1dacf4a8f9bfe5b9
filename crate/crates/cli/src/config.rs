//! Experiment configuration: TOML schema, validation and the config hash.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use akd_core::data::{gen_gaussian_blobs, gen_two_moons, load_idx_images};
use akd_core::model::{validate_beta, Architecture};
use akd_core::seed;
use akd_core::{AttackConfig, Dataset, LossVariant, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub teacher: Option<TeacherConfig>,
    pub student: Option<StudentConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoMoons {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianBlobs {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image/label files; the validation split is carved out of the
    /// training files with a seeded permutation.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes: Option<Vec<usize>>,
        n_val: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Hidden widths only; input and output sizes come from the dataset.
    Mlp { hidden: Vec<usize> },
    TinyConv { channels: usize, kernel: usize, hidden: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "one")]
    pub members: usize,
    /// One training seed per member; replaces `train.seed`.
    pub seeds: Vec<u64>,
    /// Ensemble weights; uniform when absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub train: TrainConfig,
    /// Distill from this teacher epoch instead of the designated one.
    #[serde(default)]
    pub teacher_epoch: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub attacks: Vec<NamedAttack>,
}

/// An attack plus the name used for it in metrics; written inline as
/// `{ name = "pgd20", method = "pgd", ... }`.
#[derive(Clone, Debug, Serialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub attack: AttackConfig,
}

impl<'de> Deserialize<'de> for NamedAttack {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::deserialize(d)?;
        let name = match map.remove("name") {
            Some(serde_json::Value::String(s)) => s,
            _ => return Err(D::Error::custom("attack entry needs a string `name`")),
        };
        let attack = serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(NamedAttack { name, attack })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
    #[serde(default = "default_extremes")]
    pub extremes: usize,
    /// Adds adversarial trajectories when present.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            enabled: false,
            smoothing_window: default_window(),
            extremes: default_extremes(),
            attack: None,
        }
    }
}

fn one() -> usize {
    1
}
fn default_window() -> usize {
    51
}
fn default_extremes() -> usize {
    32
}

/// A parsed and validated config with its hash.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub hash: String,
    /// Directory the config file lives in; relative data paths resolve here.
    pub base_dir: PathBuf,
}

/// SHA-256 (hex) of the config with keys sorted and whitespace stripped.
pub fn config_hash(text: &str) -> CliResult<String> {
    let value: toml::Value = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    let json = serde_json::to_value(value).map_err(|e| CliError::config(e.to_string()))?;
    let canonical = serde_json::to_string(&sorted(json)).expect("json value serializes");
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

fn sorted(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

pub fn parse(text: &str) -> CliResult<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
}

/// Reads, parses and validates a config file. Nothing is written.
pub fn load(path: &Path, output_override: Option<&Path>) -> CliResult<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let hash = config_hash(&text)?;
    let mut config = parse(&text)?;
    if let Some(dir) = output_override {
        config.output_dir = dir.to_path_buf();
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if config.output_dir.is_relative() {
        config.output_dir = base_dir.join(&config.output_dir);
    }
    let loaded = Loaded { config, hash, base_dir };
    loaded.config.validate()?;
    Ok(loaded)
}

fn field(name: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::config(format!("`{name}`: {detail}"))
}

fn core_field(name: &str, e: akd_core::Error) -> CliError {
    field(name, e)
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.name.trim().is_empty() {
            return Err(field("name", "must not be empty"));
        }
        self.validate_dataset()?;
        match &self.model {
            ModelConfig::Mlp { hidden } if hidden.contains(&0) => return Err(field("model.hidden", "widths must be positive")),
            ModelConfig::TinyConv { channels, kernel, hidden } if *channels == 0 || *kernel == 0 || *hidden == 0 => {
                return Err(field("model", "channels, kernel and hidden must be positive"))
            }
            ModelConfig::TinyConv { .. } if !matches!(self.dataset, DatasetConfig::Idx { .. }) => {
                return Err(field("model.kind", "tiny_conv needs an image dataset"))
            }
            _ => {}
        }

        if let Some(t) = &self.teacher {
            if t.members == 0 {
                return Err(field("teacher.members", "must be >= 1"));
            }
            if t.seeds.len() != t.members {
                return Err(field("teacher.seeds", format!("{} seeds for {} members", t.seeds.len(), t.members)));
            }
            if t.seeds.iter().collect::<BTreeSet<_>>().len() != t.seeds.len() {
                return Err(field("teacher.seeds", "member seeds must be distinct"));
            }
            if let Some(beta) = &t.beta {
                validate_beta(beta, t.members).map_err(|e| core_field("teacher.beta", e))?;
            }
            t.train.validate().map_err(|e| core_field("teacher.train", e))?;
            if t.train.loss.needs_teacher() {
                return Err(field("teacher.train.loss", "teachers are trained without a teacher; use kind = \"ce\""));
            }
            if self.analysis.enabled && !t.train.checkpoint_every_epoch {
                return Err(field("teacher.train.checkpoint_every_epoch", "analysis needs per-epoch teacher checkpoints"));
            }
        }

        if let Some(s) = &self.student {
            s.train.validate().map_err(|e| core_field("student.train", e))?;
            if s.train.loss.needs_teacher() {
                let t = self
                    .teacher
                    .as_ref()
                    .ok_or_else(|| field("teacher", format!("{} loss needs a teacher block", s.train.loss.name())))?;
                if let LossVariant::EnsembleAkd { beta, .. } = &s.train.loss {
                    if beta.len() != t.members {
                        return Err(field("student.train.loss.beta", format!("{} weights for {} teachers", beta.len(), t.members)));
                    }
                }
                if let Some(k) = s.teacher_epoch {
                    if k == 0 || k > t.train.epochs {
                        return Err(field("student.teacher_epoch", format!("{k} outside 1..={}", t.train.epochs)));
                    }
                    if !t.train.checkpoint_every_epoch {
                        return Err(field("student.teacher_epoch", "needs teacher.train.checkpoint_every_epoch"));
                    }
                }
            } else if s.teacher_epoch.is_some() {
                return Err(field("student.teacher_epoch", "set but the loss uses no teacher"));
            }
            if matches!(s.train.early_stop, Some(akd_core::EarlyStop::BestRobust)) {
                return Err(field("student.train.early_stop", "students are reported at their final epoch"));
            }
            if self.analysis.enabled && !s.train.checkpoint_every_epoch {
                return Err(field("student.train.checkpoint_every_epoch", "analysis needs per-epoch student checkpoints"));
            }
        }

        let mut names = BTreeSet::new();
        for a in &self.eval.attacks {
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(field("eval.attacks.name", format!("{:?} must be non-empty [A-Za-z0-9_-]", a.name)));
            }
            if !names.insert(a.name.as_str()) {
                return Err(field("eval.attacks.name", format!("duplicate {:?}", a.name)));
            }
            a.attack.validate().map_err(|e| core_field("eval.attacks", e))?;
        }

        if self.analysis.enabled {
            let (Some(t), Some(s)) = (&self.teacher, &self.student) else {
                return Err(field("analysis.enabled", "analysis needs teacher and student blocks"));
            };
            if t.train.epochs != s.train.epochs {
                return Err(field("analysis.enabled", "teacher and student must run the same number of epochs"));
            }
            if self.analysis.smoothing_window == 0 || self.analysis.smoothing_window % 2 == 0 {
                return Err(field("analysis.smoothing_window", "must be odd and >= 1"));
            }
            if let Some(a) = &self.analysis.attack {
                a.validate().map_err(|e| core_field("analysis.attack", e))?;
            }
        }
        Ok(())
    }

    fn validate_dataset(&self) -> CliResult<()> {
        let counts = |n_train: usize, n_val: usize, n_test: usize| {
            if n_train == 0 || n_test == 0 {
                return Err(field("dataset", "n_train and n_test must be positive"));
            }
            if n_val == 0 && self.needs_validation() {
                return Err(field("dataset.n_val", "best_robust early stopping needs a validation split"));
            }
            Ok(())
        };
        match &self.dataset {
            DatasetConfig::TwoMoons { n_train, n_val, n_test, noise, .. } => {
                counts(*n_train, *n_val, *n_test)?;
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(field("dataset.noise", "must be >= 0"));
                }
            }
            DatasetConfig::GaussianBlobs { n_train, n_val, n_test, dim, classes, separation, .. } => {
                counts(*n_train, *n_val, *n_test)?;
                if *dim == 0 || *classes < 2 || n_train < classes || n_test < classes {
                    return Err(field("dataset", "need dim >= 1, classes >= 2 and at least one sample per class"));
                }
                if !(*separation > 0.0) {
                    return Err(field("dataset.separation", "must be positive"));
                }
            }
            DatasetConfig::Idx { classes, n_val, .. } => {
                counts(1, *n_val, 1)?;
                if let Some(c) = classes {
                    if c.len() < 2 || c.iter().collect::<BTreeSet<_>>().len() != c.len() {
                        return Err(field("dataset.classes", "need at least two distinct classes"));
                    }
                }
            }
        }
        Ok(())
    }

    fn needs_validation(&self) -> bool {
        let best = |c: &TrainConfig| matches!(c.early_stop, Some(akd_core::EarlyStop::BestRobust));
        self.teacher.as_ref().is_some_and(|t| best(&t.train)) || self.student.as_ref().is_some_and(|s| best(&s.train))
    }

    /// Per-member training config with the member seed filled in.
    pub fn member_config(&self, member: usize) -> TrainConfig {
        let t = self.teacher.as_ref().expect("teacher block validated");
        TrainConfig {
            seed: t.seeds[member],
            ..t.train.clone()
        }
    }

    pub fn eval_attacks(&self) -> &[NamedAttack] {
        &self.eval.attacks
    }
}

/// The train, validation and test splits of a config.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl Loaded {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    /// Fails with a missing-artifact error when input files are absent.
    pub fn check_inputs(&self) -> CliResult<()> {
        if let DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, .. } = &self.config.dataset {
            for p in [train_images, train_labels, test_images, test_labels] {
                let p = self.resolve(p);
                if !p.is_file() {
                    return Err(CliError::Missing(format!("dataset file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn datasets(&self) -> CliResult<Splits> {
        let tagged = |s: u64, tag: u64| seed::derive(s, &[seed::DATA, tag]);
        Ok(match &self.config.dataset {
            DatasetConfig::TwoMoons { n_train, n_val, n_test, noise, seed } => Splits {
                train: gen_two_moons(*n_train, *noise, tagged(*seed, 0))?,
                val: (*n_val > 0).then(|| gen_two_moons(*n_val, *noise, tagged(*seed, 1))).transpose()?,
                test: test_split(gen_two_moons(*n_test, *noise, tagged(*seed, 2))?),
            },
            DatasetConfig::GaussianBlobs { n_train, n_val, n_test, dim, classes, separation, seed } => Splits {
                train: gen_gaussian_blobs(*n_train, *dim, *classes, *separation, tagged(*seed, 0))?,
                val: (*n_val > 0)
                    .then(|| gen_gaussian_blobs(*n_val, *dim, *classes, *separation, tagged(*seed, 1)))
                    .transpose()?,
                test: test_split(gen_gaussian_blobs(*n_test, *dim, *classes, *separation, tagged(*seed, 2))?),
            },
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, classes, n_val, seed } => {
                self.check_inputs()?;
                let filter = classes.as_deref();
                let full = load_idx_images(&self.resolve(train_images), &self.resolve(train_labels), filter)?;
                let test = load_idx_images(&self.resolve(test_images), &self.resolve(test_labels), filter)?;
                if *n_val >= full.len() {
                    return Err(field("dataset.n_val", format!("{n_val} leaves no training samples out of {}", full.len())));
                }
                if test.num_classes != full.num_classes || test.input_dim() != full.input_dim() {
                    return Err(field("dataset", "train and test IDX files disagree on classes or image size"));
                }
                let perm = akd_core::data::epoch_permutation(full.len(), tagged(*seed, 1), 0);
                let (val_idx, train_idx) = perm.split_at(*n_val);
                let mut train_idx = train_idx.to_vec();
                let mut val_idx = val_idx.to_vec();
                train_idx.sort_unstable();
                val_idx.sort_unstable();
                Splits {
                    train: full.subset(&train_idx),
                    val: (*n_val > 0).then(|| full.subset(&val_idx)),
                    test: test_split(test),
                }
            }
        })
    }

    pub fn model_spec(&self, data: &Dataset) -> CliResult<ModelSpec> {
        let spec = match &self.config.model {
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(data.input_dim(), hidden, data.num_classes),
            ModelConfig::TinyConv { channels, kernel, hidden } => {
                let shape = data
                    .image_shape
                    .ok_or_else(|| field("model.kind", "tiny_conv needs an image dataset"))?;
                ModelSpec {
                    arch: Architecture::TinyConv {
                        channels: *channels,
                        kernel: *kernel,
                        hidden: *hidden,
                    },
                    input_shape: shape.to_vec(),
                    num_classes: data.num_classes,
                }
            }
        };
        spec.validate().map_err(|e| core_field("model", e))?;
        Ok(spec)
    }
}

fn test_split(mut ds: Dataset) -> Dataset {
    ds.split = akd_core::Split::Test;
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
name = "t"
output_dir = "out"

[dataset]
kind = "two_moons"
n_train = 40
n_val = 20
n_test = 20
noise = 0.05

[model]
kind = "mlp"
hidden = [8]
"#;

    #[test]
    fn hash_ignores_formatting_and_key_order() {
        let a = "name = \"x\"\n[dataset]\nkind = \"two_moons\"\nnoise = 0.1\n";
        let b = "name=\"x\"\n\n[dataset]\nnoise = 0.1   # comment\nkind = \"two_moons\"\n";
        assert_eq!(config_hash(a).unwrap(), config_hash(b).unwrap());
        let c = "name = \"x\"\n[dataset]\nkind = \"two_moons\"\nnoise = 0.2\n";
        assert_ne!(config_hash(a).unwrap(), config_hash(c).unwrap());
        assert_eq!(config_hash(a).unwrap().len(), 64);
    }

    #[test]
    fn minimal_config_validates() {
        let c = parse(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.analysis.smoothing_window, 51);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse(&format!("{MINIMAL}\nbogus = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn beta_must_be_a_distribution() {
        let text = format!(
            "{MINIMAL}\n[teacher]\nmembers = 4\nseeds = [1, 2, 3, 4]\nbeta = [0.25, 0.25, 0.25, 0.15]\n[teacher.train]\nbatch_size = 8\nschedule = {{ kind = \"constant\", base_lr = 0.1 }}\nloss = {{ kind = \"ce\" }}\n"
        );
        let err = parse(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("teacher.beta"), "{err}");
        let ok = text.replace("0.15]", "0.25]");
        parse(&ok).unwrap().validate().unwrap();
    }

    #[test]
    fn distillation_without_teacher_names_the_field() {
        let text = format!(
            "{MINIMAL}\n[student.train]\nbatch_size = 8\nschedule = {{ kind = \"constant\", base_lr = 0.1 }}\nloss = {{ kind = \"akd\", alpha = 0.5 }}\nattack = {{ method = \"fgsm\", epsilon = 0.1, step_size = 0.1 }}\n"
        );
        let err = parse(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("`teacher`"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
