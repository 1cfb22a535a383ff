//! Experiment configuration: a JSON file describing the dataset, network,
//! head, training hyperparameters, OOD sets, and seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cosood::data::{self, BlobSpec, Dataset, NoiseKind, Split};
use cosood::error::{Error, Result};
use cosood::heads::HeadConfig;
use cosood::model::{LayerSpec, ModelConfig};
use cosood::train::TrainConfig;

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Where the in-distribution data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Synthetic Gaussian blobs; train and test splits share class means.
    Blobs(BlobConfig),
    /// Pre-generated dataset files.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    #[serde(flatten)]
    pub base: BlobSpec,
    /// Test-split size; defaults to the train size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_n_per_class: Option<usize>,
}

/// One out-of-distribution evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodSpec {
    /// Uniform noise over the ID training bounding box.
    Uniform { n: usize, seed: u64 },
    /// Gaussian noise matched to the ID training range.
    Gaussian { n: usize, seed: u64 },
    /// Blob distribution with class means displaced by `shift * spread`
    /// (near OOD). Requires a blob ID dataset.
    Shifted {
        shift: f64,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_per_class: Option<usize>,
    },
    /// Pre-generated dataset file with role `ood`.
    File { path: PathBuf },
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub network: Vec<LayerSpec>,
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ood: Vec<OodSpec>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| config_err("<root>", format!("invalid JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Blobs(b) = &self.dataset {
            if b.base.classes < 2 {
                return Err(config_err("dataset.blobs.classes", "must be >= 2"));
            }
        }
        self.head
            .validate()
            .map_err(|e| config_err("head", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| config_err("train", e.to_string()))?;
        for (i, ood) in self.ood.iter().enumerate() {
            match ood {
                OodSpec::Uniform { n, .. } | OodSpec::Gaussian { n, .. } => {
                    if *n == 0 {
                        return Err(config_err(&format!("ood[{i}].n"), "must be >= 1"));
                    }
                }
                OodSpec::Shifted { shift, .. } => {
                    if shift.is_nan() || *shift <= 0.0 {
                        return Err(config_err(
                            &format!("ood[{i}].shift"),
                            "must be > 0 (0 would alias the ID distribution)",
                        ));
                    }
                    if !matches!(self.dataset, DatasetSpec::Blobs(_)) {
                        return Err(config_err(
                            &format!("ood[{i}]"),
                            "shifted OOD requires a blob ID dataset",
                        ));
                    }
                }
                OodSpec::File { .. } => {}
            }
        }
        Ok(())
    }

    /// Seeds for this invocation: command-line overrides, then the config.
    pub fn resolve_seeds(&self, cli_seeds: &[u64]) -> Result<Vec<u64>> {
        let seeds = if cli_seeds.is_empty() {
            self.seeds.clone()
        } else {
            cli_seeds.to_vec()
        };
        if seeds.is_empty() {
            return Err(config_err("seeds", "need at least one seed"));
        }
        Ok(seeds)
    }

    pub fn resolve_out_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| config_err("out_dir", "set out_dir in the config or pass --out"))
    }

    pub fn id_train(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs(b) => data::gen_blobs(&b.base, Split::Train),
            DatasetSpec::Files { train, .. } => {
                let ds = data::read_dataset(train)?;
                if ds.labels().is_none() {
                    return Err(config_err("dataset.files.train", "file carries no labels"));
                }
                Ok(ds)
            }
        }
    }

    pub fn id_test(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs(b) => {
                let mut spec = b.base.clone();
                if let Some(n) = b.test_n_per_class {
                    spec.n_per_class = n;
                }
                data::gen_blobs(&spec, Split::Test)
            }
            DatasetSpec::Files { test, .. } => {
                let ds = data::read_dataset(test)?;
                if ds.labels().is_none() {
                    return Err(config_err("dataset.files.test", "file carries no labels"));
                }
                Ok(ds)
            }
        }
    }

    /// Materialize every configured OOD set. Noise generators take their
    /// feature range from the ID training data.
    pub fn ood_sets(&self, id_train: &Dataset) -> Result<Vec<Dataset>> {
        if self.ood.is_empty() {
            return Err(config_err("ood", "need at least one OOD set for evaluation"));
        }
        self.ood
            .iter()
            .map(|spec| match spec {
                OodSpec::Uniform { n, seed } => {
                    data::gen_noise_ood(NoiseKind::Uniform, *n, *seed, id_train)
                }
                OodSpec::Gaussian { n, seed } => {
                    data::gen_noise_ood(NoiseKind::Gaussian, *n, *seed, id_train)
                }
                OodSpec::Shifted {
                    shift,
                    seed,
                    n_per_class,
                } => {
                    let DatasetSpec::Blobs(b) = &self.dataset else {
                        return Err(config_err("ood", "shifted OOD requires a blob ID dataset"));
                    };
                    let mut base = b.base.clone();
                    if let Some(n) = n_per_class {
                        base.n_per_class = *n;
                    }
                    data::gen_shifted_ood(&base, *shift, *seed)
                }
                OodSpec::File { path } => {
                    let ds = data::read_dataset(path)?;
                    if ds.role() != data::DataRole::Ood {
                        return Err(config_err(
                            "ood",
                            format!("{} is not an OOD dataset", path.display()),
                        ));
                    }
                    Ok(ds)
                }
            })
            .collect()
    }

    /// Model architecture for this experiment, with the head swapped in
    /// (use [`ExperimentConfig::head`] for the configured head).
    pub fn model_config(&self, id_train: &Dataset, head: HeadConfig) -> ModelConfig {
        ModelConfig {
            input_shape: id_train.feature_shape().to_vec(),
            layers: self.network.clone(),
            classes: id_train.classes(),
            head,
        }
    }

    /// Single-line JSON of the resolved config, embedded in reports.
    pub fn provenance(&self, seeds: &[u64]) -> String {
        let mut resolved = self.clone();
        resolved.seeds = seeds.to_vec();
        serde_json::to_string(&resolved).expect("config serializes")
    }
}
