//! Turns a [`RunConfig`] into datasets and an initial model.

use std::path::Path;

use autogp::data::{self, synthetic, Dataset, LabelRemap, Targets, Task, Transform};
use autogp::kernels::{ArcCosineParams, KernelParams, RbfArdParams};
use autogp::likelihoods::LikelihoodConfig;
use autogp::math::{draw_standard_normals, DenseMatrix, RandomStream};
use autogp::model::{InducingSet, ModelState, ParamGroup};
use log::info;

use crate::config::{DataFormat, DatasetConfig, Generator, InducingInit, KernelKind, LikelihoodKind, ModelConfig};
use crate::error::{CliError, CliResult, Stage};

const SPLIT_STREAM: u64 = 1;
const KMEANS_STREAM: u64 = 5;
const SYMMETRY_STREAM: u64 = 6;

/// Normalized training data, optional test data, and the fitted transform.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub transform: Transform,
}

impl PreparedData {
    /// The test split when there is one, otherwise the training data.
    pub fn evaluation_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

fn report_remap(field: &str, remap: &Option<LabelRemap>) {
    if let Some(r) = remap {
        let pairs: Vec<String> = r.original.iter().enumerate().map(|(i, s)| format!("{s}->{i}")).collect();
        info!("{field}: labels remapped {}", pairs.join(", "));
    }
}

fn load_file(cfg: &DatasetConfig, path: &Path, labels: Option<&Path>, dim: Option<usize>, field: &str) -> CliResult<(Dataset, Option<LabelRemap>)> {
    let task = cfg.task.unwrap_or(Task::Classification);
    let loaded = match cfg.format {
        DataFormat::Csv => data::load_csv(path, &cfg.label_columns, task),
        DataFormat::Sparse => data::load_sparse(path, dim, task),
        DataFormat::Idx => {
            let labels = labels.ok_or_else(|| CliError::config(field, "idx data needs a label file"))?;
            data::load_idx(path, labels).map(|d| (d, None))
        }
        DataFormat::Synthetic => unreachable!("synthetic data has no files"),
    };
    let (d, remap) = loaded.map_err(|e| CliError::config(field, e.to_string()))?;
    report_remap(field, &remap);
    Ok((d, remap))
}

fn generate(cfg: &DatasetConfig) -> CliResult<Dataset> {
    let stream = RandomStream::new(cfg.seed, 0);
    let generator = cfg.generator.ok_or_else(|| CliError::config("dataset.generator", "required for synthetic data"))?;
    match generator {
        Generator::Regression1d => synthetic::regression_1d(cfg.num_points, cfg.noise_std, &stream),
        Generator::GprnToy => synthetic::gprn_toy(cfg.num_points, cfg.noise_std, &stream),
    }
    .stage("dataset.generator")
}

/// Training and optional test data as read from disk, after class filtering,
/// truncation and splitting but before normalization.
pub fn load_raw(cfg: &DatasetConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    let (mut train, mut test) = match cfg.format {
        DataFormat::Synthetic => (generate(cfg)?, None),
        _ => {
            let path = cfg.path.as_deref().ok_or_else(|| CliError::config("dataset.path", "required for this format"))?;
            let (train, remap) = load_file(cfg, path, cfg.labels.as_deref(), cfg.input_dim, "dataset.path")?;
            let test = match &cfg.test_path {
                Some(tp) => {
                    let (test, test_remap) =
                        load_file(cfg, tp, cfg.test_labels.as_deref(), Some(train.input_dim()), "dataset.test_path")?;
                    if test_remap != remap {
                        return Err(CliError::config(
                            "dataset.test_path",
                            "test labels map to different classes than the training labels",
                        ));
                    }
                    Some(test)
                }
                None => None,
            };
            (train, test)
        }
    };
    if let Some(classes) = &cfg.classes {
        train = train.filter_classes(classes).stage("dataset.classes")?;
        test = test.map(|t| t.filter_classes(classes)).transpose().stage("dataset.classes")?;
    }
    if let Some(max) = cfg.max_points {
        if max < train.len() {
            train = train.subset(&(0..max).collect::<Vec<_>>());
        }
    }
    if let Some(f) = cfg.test_fraction {
        let (tr, te) = data::split(&train, f, &RandomStream::new(cfg.seed, SPLIT_STREAM)).stage("dataset.test_fraction")?;
        train = tr;
        test = Some(te);
    }
    Ok((train, test))
}

/// Loads the configured data and normalizes it; test data reuses the
/// training statistics.
pub fn load_data(cfg: &DatasetConfig) -> CliResult<PreparedData> {
    let (train, test) = load_raw(cfg)?;
    if train.len() < 2 {
        return Err(CliError::config("dataset", format!("need at least 2 training points, got {}", train.len())));
    }
    let train = data::normalize(&train, cfg.normalization).stage("dataset.normalization")?;
    let transform = train.transform.clone();
    let test = test.map(|t| transform.apply(&t)).transpose().stage("dataset.normalization")?;
    info!(
        "data: {} training points, {} test points, {} inputs",
        train.len(),
        test.as_ref().map_or(0, |t| t.len()),
        train.input_dim()
    );
    Ok(PreparedData { train, test, transform })
}

/// Median Euclidean distance between pairs drawn from at most 500 evenly
/// spaced rows; 1 when every sampled distance is zero.
pub fn median_pairwise_distance(x: &DenseMatrix) -> f64 {
    let n = x.rows();
    let take = n.min(500);
    let rows: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    let mut dists = Vec::with_capacity(take * take.saturating_sub(1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists[dists.len() / 2];
    if mid > 0.0 {
        mid
    } else {
        1.0
    }
}

fn likelihood(cfg: &ModelConfig, train: &Dataset) -> CliResult<LikelihoodConfig> {
    let log_noise = cfg.noise_variance.ln();
    match (cfg.likelihood, &train.targets) {
        (LikelihoodKind::Gaussian, Targets::Real(y)) => Ok(LikelihoodConfig::gaussian(y.cols(), log_noise)),
        (LikelihoodKind::Gprn, Targets::Real(y)) => Ok(LikelihoodConfig::Gprn {
            outputs: y.cols(),
            nodes: cfg.nodes,
            log_noise_variance: log_noise,
        }),
        (LikelihoodKind::Logistic, Targets::Classes { num_classes, .. }) => {
            if *num_classes != 2 {
                return Err(CliError::config(
                    "model.likelihood",
                    format!("logistic likelihood needs 2 classes, data has {num_classes}"),
                ));
            }
            Ok(LikelihoodConfig::Logistic)
        }
        (LikelihoodKind::Softmax, Targets::Classes { num_classes, .. }) => {
            let c = cfg.num_classes.unwrap_or(*num_classes);
            if c < *num_classes || c < 2 {
                return Err(CliError::config(
                    "model.num_classes",
                    format!("{c} classes configured, data has {num_classes}"),
                ));
            }
            Ok(LikelihoodConfig::Softmax { num_classes: c })
        }
        (kind, _) => Err(CliError::config(
            "model.likelihood",
            format!("{kind:?} likelihood does not fit {} targets", task_name(&train.targets)).to_lowercase(),
        )),
    }
}

fn task_name(t: &Targets) -> &'static str {
    if t.is_classification() {
        "classification"
    } else {
        "regression"
    }
}

fn kernel(cfg: &ModelConfig, train: &Dataset) -> CliResult<KernelParams> {
    let log_variance = cfg.variance.ln();
    match cfg.kernel {
        KernelKind::RbfArd | KernelKind::RbfIso => {
            let l = cfg.lengthscale.unwrap_or_else(|| median_pairwise_distance(&train.x));
            let d = train.input_dim();
            Ok(KernelParams::Rbf(if cfg.kernel == KernelKind::RbfArd {
                RbfArdParams::ard(log_variance, vec![l.ln(); d])
            } else {
                RbfArdParams::isotropic(log_variance, l.ln(), d)
            }))
        }
        KernelKind::ArcCosine => Ok(KernelParams::ArcCosine(
            ArcCosineParams::new(cfg.degree, cfg.depth, log_variance).stage("model.kernel")?,
        )),
    }
}

/// Initial model: kernels from the config, inducing inputs from k-means (or
/// the leading training rows), prior-like posterior. Mixture components get
/// small random mean offsets so they can separate during training.
pub fn build_model(cfg: &ModelConfig, train: &Dataset, seed: u64) -> CliResult<ModelState> {
    let lik = likelihood(cfg, train)?;
    let q = lik.num_latent();
    let m = cfg.num_inducing;
    if m > train.len() {
        return Err(CliError::config(
            "model.num_inducing",
            format!("{m} inducing points but only {} training points", train.len()),
        ));
    }
    let z = match cfg.inducing_init {
        InducingInit::Kmeans => autogp::training::kmeans_init(&train.x, m, &RandomStream::new(seed, KMEANS_STREAM))
            .stage("model.inducing_init")?,
        InducingInit::Data => train.x.select_rows(&(0..m).collect::<Vec<_>>()),
    };
    let inducing = if cfg.shared_inducing {
        InducingSet::shared(z)
    } else {
        InducingSet::per_latent(vec![z; q])
    }
    .stage("model")?;
    let k = kernel(cfg, train)?;
    let mut state = ModelState::new(vec![k; q], inducing, lik, cfg.num_components).stage("model")?;
    state.relative_jitter = cfg.relative_jitter;
    if cfg.num_components > 1 {
        let mut p = state.params(ParamGroup::Posterior);
        let (means_start, factors_start) = state.posterior.layout();
        let (noise, _) = draw_standard_normals(&RandomStream::new(seed, SYMMETRY_STREAM), factors_start - means_start);
        for (v, e) in p[means_start..factors_start].iter_mut().zip(noise) {
            *v += 0.1 * e;
        }
        state.set_params(ParamGroup::Posterior, &p).stage("model")?;
    }
    Ok(state)
}

/// Checks that `data` has the shape the model was trained for.
pub fn check_compatible(state: &ModelState, data: &Dataset) -> CliResult<()> {
    if data.input_dim() != state.input_dim() {
        return Err(CliError::config(
            "dataset.input_dim",
            format!("model expects {} inputs, data has {}", state.input_dim(), data.input_dim()),
        ));
    }
    let lik = &state.likelihood;
    match &data.targets {
        Targets::Classes { labels, .. } => {
            let Some(c) = lik.num_classes() else {
                return Err(CliError::config("dataset.task", "regression model given classification data"));
            };
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(CliError::config(
                    "dataset.num_classes",
                    format!("label {bad} out of range for a {c}-class model"),
                ));
            }
        }
        Targets::Real(y) => {
            let Some(p) = lik.output_dim() else {
                return Err(CliError::config("dataset.task", "classification model given regression data"));
            };
            if y.cols() != p {
                return Err(CliError::config(
                    "dataset.outputs",
                    format!("model expects {p} outputs, data has {}", y.cols()),
                ));
            }
        }
    }
    Ok(())
}
