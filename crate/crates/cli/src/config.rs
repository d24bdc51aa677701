//! Run configuration, read from a TOML file with `[dataset]`, `[model]`,
//! `[training]`, `[output]` and `[variance_study]` tables. Every field except
//! `dataset.format` has a default; relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use autogp::data::{Normalization, Task};
use autogp::training::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainSchedule,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub variance_study: VarianceStudyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Idx,
    Sparse,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One input, one noisy sinusoidal output.
    Regression1d,
    /// One input, two outputs mixing a shared node function.
    GprnToy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DataFormat,
    /// csv or sparse file, or the idx image file.
    pub path: Option<PathBuf>,
    /// idx label file.
    pub labels: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// csv columns holding targets.
    pub label_columns: Vec<String>,
    /// Required for csv and sparse files; idx data is always classification.
    pub task: Option<Task>,
    /// sparse files: number of features (inferred from the data when absent).
    pub input_dim: Option<usize>,
    pub generator: Option<Generator>,
    pub num_points: usize,
    pub noise_std: f64,
    /// Keep only these classes, relabelled in the listed order.
    pub classes: Option<Vec<usize>>,
    /// Use only the first this many points of the training file.
    pub max_points: Option<usize>,
    /// Hold out this fraction as test data when no test file is given.
    pub test_fraction: Option<f64>,
    pub normalization: Normalization,
    /// Seed for synthetic generation and the train/test split.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DataFormat::Csv,
            path: None,
            labels: None,
            test_path: None,
            test_labels: None,
            label_columns: vec!["label".to_string()],
            task: None,
            input_dim: None,
            generator: None,
            num_points: 200,
            noise_std: 0.1,
            classes: None,
            max_points: None,
            test_fraction: None,
            normalization: Normalization::None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Squared exponential with one lengthscale per input dimension.
    RbfArd,
    /// Squared exponential with a single shared lengthscale.
    RbfIso,
    ArcCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    Logistic,
    Softmax,
    Gprn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingInit {
    /// k-means++ followed by Lloyd iterations on the training inputs.
    Kmeans,
    /// The first M training inputs.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: KernelKind,
    pub variance: f64,
    /// RBF initial lengthscale; the median pairwise input distance when absent.
    pub lengthscale: Option<f64>,
    pub degree: u32,
    pub depth: u32,
    pub likelihood: LikelihoodKind,
    /// Gaussian and regression-network noise variance.
    pub noise_variance: f64,
    /// Softmax class count; taken from the data when absent.
    pub num_classes: Option<usize>,
    /// Regression-network latent node count.
    pub nodes: usize,
    pub num_inducing: usize,
    pub num_components: usize,
    pub shared_inducing: bool,
    pub inducing_init: InducingInit,
    pub relative_jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: KernelKind::RbfArd,
            variance: 1.0,
            lengthscale: None,
            degree: 1,
            depth: 1,
            likelihood: LikelihoodKind::Gaussian,
            noise_variance: 0.1,
            num_classes: None,
            nodes: 1,
            num_inducing: 100,
            num_components: 1,
            shared_inducing: true,
            inducing_init: InducingInit::Kmeans,
            relative_jitter: autogp::model::DEFAULT_RELATIVE_JITTER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint: PathBuf::from("checkpoint.json"),
            metrics: PathBuf::from("metrics.tsv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceStudyConfig {
    /// Points in the fixed batch whose gradient is studied.
    pub batch_size: usize,
    pub redraws: usize,
    pub sample_counts: Vec<usize>,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        VarianceStudyConfig {
            batch_size: 20,
            redraws: 1000,
            sample_counts: vec![10, 100, 1000, 10000],
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            CliError::config("config", message)
        })?;
        let d = &mut cfg.dataset;
        for p in [&mut d.path, &mut d.labels, &mut d.test_path, &mut d.test_labels] {
            resolve(base, p);
        }
        for p in [&mut cfg.output.checkpoint, &mut cfg.output.metrics] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, base)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        let need = |field: &str, p: &Option<PathBuf>| -> CliResult<()> {
            match p {
                None => Err(CliError::config(format!("dataset.{field}"), "required for this format")),
                Some(path) if !path.is_file() => Err(CliError::config(
                    format!("dataset.{field}"),
                    format!("no such file: {}", path.display()),
                )),
                Some(_) => Ok(()),
            }
        };
        let optional = |field: &str, p: &Option<PathBuf>| -> CliResult<()> {
            if p.is_some() {
                need(field, p)?;
            }
            Ok(())
        };
        match d.format {
            DataFormat::Csv | DataFormat::Sparse => {
                need("path", &d.path)?;
                optional("test_path", &d.test_path)?;
                if d.task.is_none() {
                    return Err(CliError::config("dataset.task", "required for csv and sparse data"));
                }
                if d.format == DataFormat::Csv && d.label_columns.is_empty() {
                    return Err(CliError::config("dataset.label_columns", "at least one label column is needed"));
                }
            }
            DataFormat::Idx => {
                need("path", &d.path)?;
                need("labels", &d.labels)?;
                if d.test_path.is_some() || d.test_labels.is_some() {
                    need("test_path", &d.test_path)?;
                    need("test_labels", &d.test_labels)?;
                }
            }
            DataFormat::Synthetic => {
                if d.generator.is_none() {
                    return Err(CliError::config("dataset.generator", "required for synthetic data"));
                }
                if d.num_points < 2 {
                    return Err(CliError::config("dataset.num_points", "at least 2 points are needed"));
                }
                if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
                    return Err(CliError::config("dataset.noise_std", "must be finite and non-negative"));
                }
            }
        }
        if let Some(f) = d.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::config("dataset.test_fraction", format!("must lie in (0, 1), got {f}")));
            }
            if d.test_path.is_some() {
                return Err(CliError::config("dataset.test_fraction", "cannot be combined with test_path"));
            }
        }
        if d.max_points == Some(0) {
            return Err(CliError::config("dataset.max_points", "must be at least 1"));
        }

        let m = &self.model;
        let positive = |field: &str, v: f64| -> CliResult<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(format!("model.{field}"), format!("must be positive and finite, got {v}")))
            }
        };
        positive("variance", m.variance)?;
        positive("noise_variance", m.noise_variance)?;
        if let Some(l) = m.lengthscale {
            positive("lengthscale", l)?;
        }
        if m.kernel == KernelKind::ArcCosine {
            if m.degree > 2 {
                return Err(CliError::config("model.degree", "arc-cosine degree must be 0, 1 or 2"));
            }
            if m.depth == 0 {
                return Err(CliError::config("model.depth", "arc-cosine depth must be at least 1"));
            }
        }
        if m.num_inducing == 0 {
            return Err(CliError::config("model.num_inducing", "must be at least 1"));
        }
        if m.num_components == 0 {
            return Err(CliError::config("model.num_components", "must be at least 1"));
        }
        if m.nodes == 0 {
            return Err(CliError::config("model.nodes", "must be at least 1"));
        }
        if !(m.relative_jitter >= 0.0 && m.relative_jitter.is_finite()) {
            return Err(CliError::config("model.relative_jitter", "must be finite and non-negative"));
        }
        self.training
            .validate()
            .map_err(|e| CliError::config("training", e.to_string()))?;

        let v = &self.variance_study;
        if v.batch_size == 0 {
            return Err(CliError::config("variance_study.batch_size", "must be at least 1"));
        }
        if v.redraws < 2 {
            return Err(CliError::config("variance_study.redraws", "at least 2 redraws are needed"));
        }
        if v.sample_counts.is_empty() || v.sample_counts.contains(&0) {
            return Err(CliError::config("variance_study.sample_counts", "must be a non-empty list of positive counts"));
        }
        Ok(())
    }
}
