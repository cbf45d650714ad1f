//! Dataset references, model choice and run flags, shared by the command
//! line and the session-creation endpoint.

use std::fs;
use std::path::{Path, PathBuf};

use latentloop_core::data::{dataset_from_idx, gen_rings, parse_csv, DataError, Dataset, BLOBS_HARD};
use latentloop_core::diffcore::OptimizerConfig;
use latentloop_core::guidance::GuidanceConfig;
use latentloop_core::models::BackboneSpec;
use latentloop_core::strategies::{InterventionPlan, StrategyError};
use latentloop_core::trainer::{Mode, SessionConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown dataset `{0}` (expected blobs-hard, rings, csv:PATH or idx:PATH[,LABELS])")]
    UnknownDataset(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: DataError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown model `{0}` (expected mlp or conv1d)")]
    UnknownModel(String),
    #[error("model `{model}` cannot take inputs of shape {shape:?}")]
    ModelShape { model: String, shape: Vec<usize> },
    #[error("interventions: {0}")]
    Plan(#[from] StrategyError),
    #[error(transparent)]
    Config(#[from] TrainError),
}

/// Resolves a dataset reference: `blobs-hard`, `rings`, `csv:PATH`,
/// `idx:IMAGES,LABELS`, or `idx:PATH` with the label file found by
/// replacing `images` with `labels` in the file name.
pub fn load_dataset(reference: &str, seed: u64) -> Result<Dataset, SpecError> {
    let read = |p: &Path| fs::read(p).map_err(|source| SpecError::Read { path: p.to_path_buf(), source });
    match reference {
        "blobs-hard" => Ok(BLOBS_HARD.generate(seed)?),
        "rings" => Ok(gen_rings(3, 200, 0.15, seed)?),
        _ => {
            if let Some(path) = reference.strip_prefix("csv:") {
                let path = Path::new(path);
                let text = String::from_utf8_lossy(&read(path)?).into_owned();
                let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
                return parse_csv(&text, &name).map_err(|source| SpecError::Parse { path: path.into(), source });
            }
            if let Some(rest) = reference.strip_prefix("idx:") {
                let (images, labels) = match rest.split_once(',') {
                    Some((a, b)) => (PathBuf::from(a), PathBuf::from(b)),
                    None => {
                        let images = PathBuf::from(rest);
                        let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                        if !name.contains("images") {
                            return Err(SpecError::UnknownDataset(format!(
                                "{reference}: give the label file as idx:IMAGES,LABELS"
                            )));
                        }
                        let labels = images.with_file_name(name.replace("images", "labels"));
                        (images, labels)
                    }
                };
                let samples = read(&images)?;
                let label_bytes = read(&labels)?;
                let name = images.file_stem().map_or("idx".into(), |s| s.to_string_lossy().into_owned());
                return dataset_from_idx(&samples, &label_bytes, &name)
                    .map_err(|source| SpecError::Parse { path: images, source });
            }
            Err(SpecError::UnknownDataset(reference.to_string()))
        }
    }
}

/// Default backbone for a dataset. `conv1d` accepts `[L]` samples (read as
/// one channel) or `[channels, L]`.
pub fn backbone_for(model: &str, dataset: Dataset) -> Result<(BackboneSpec, Dataset), SpecError> {
    let shape = dataset.input_shape().to_vec();
    let classes = dataset.num_classes();
    match (model, shape.as_slice()) {
        ("mlp", [d]) => Ok((BackboneSpec::default_mlp(*d, classes), dataset)),
        ("mlp", _) => {
            let d = shape.iter().product();
            Ok((BackboneSpec::default_mlp(d, classes), dataset.with_input_shape(&[d])?))
        }
        ("conv1d", [l]) => {
            let l = *l;
            Ok((BackboneSpec::default_conv1d(1, l, classes), dataset.with_input_shape(&[1, l])?))
        }
        ("conv1d", [c, l]) => Ok((BackboneSpec::default_conv1d(*c, *l, classes), dataset)),
        ("conv1d", _) => Err(SpecError::ModelShape { model: model.into(), shape }),
        _ => Err(SpecError::UnknownModel(model.to_string())),
    }
}

/// Flat description of a run, as given on the command line or posted to
/// the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub dataset: String,
    pub model: String,
    pub epochs: u32,
    pub pretrain: u32,
    /// Strategy plan (`compact:0.6+sep:1.5@25,30`) or, for interactive
    /// sessions, a bare epoch list (`25,30`).
    pub interventions: Option<String>,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snapshot_size: Option<usize>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            dataset: "blobs-hard".into(),
            model: "mlp".into(),
            epochs: 45,
            pretrain: 25,
            interventions: None,
            alpha: 0.5,
            lambda: 0.1,
            seed: 0,
            batch_size: 32,
            learning_rate: 1e-3,
            snapshot_size: None,
        }
    }
}

fn parse_epochs(list: &str) -> Option<Vec<u32>> {
    list.split(',').map(|e| e.trim().parse().ok()).collect()
}

impl RunSpec {
    /// Scripted when a strategy plan is given, baseline otherwise.
    pub fn headless(&self) -> Result<(SessionConfig, Dataset), SpecError> {
        let (mode, epochs) = match &self.interventions {
            Some(text) => {
                let plan: InterventionPlan = text.parse()?;
                (Mode::Scripted { strategy: plan.strategy }, plan.epochs)
            }
            None => (Mode::Baseline, Vec::new()),
        };
        self.build(mode, epochs)
    }

    /// Interactive: pauses at the listed epochs for a human.
    pub fn interactive(&self) -> Result<(SessionConfig, Dataset), SpecError> {
        let epochs = match &self.interventions {
            None => Vec::new(),
            Some(text) => match parse_epochs(text) {
                Some(e) => e,
                None => text.parse::<InterventionPlan>()?.epochs,
            },
        };
        self.build(Mode::Interactive, epochs)
    }

    fn build(&self, mode: Mode, intervention_epochs: Vec<u32>) -> Result<(SessionConfig, Dataset), SpecError> {
        let dataset = load_dataset(&self.dataset, self.seed)?;
        let (model, dataset) = backbone_for(&self.model, dataset)?;
        let mut config = SessionConfig::new(&self.dataset, model, mode);
        config.optimizer = OptimizerConfig::adam(self.learning_rate);
        config.guidance = GuidanceConfig { alpha: self.alpha, lambda: self.lambda, ..GuidanceConfig::default() };
        config.batch_size = self.batch_size;
        config.epochs = self.epochs;
        config.pretrain_epochs = self.pretrain;
        config.intervention_epochs = intervention_epochs;
        config.seed = self.seed;
        config.snapshot_size = self.snapshot_size;
        config.validate()?;
        Ok((config, dataset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentloop_core::strategies::Strategy;

    #[test]
    fn study_flags_build_scripted_config() {
        let spec =
            RunSpec { interventions: Some("compact:0.6+sep:1.5@25,30,35,40".into()), seed: 7, ..RunSpec::default() };
        let (config, data) = spec.headless().unwrap();
        assert_eq!(config.intervention_epochs, vec![25, 30, 35, 40]);
        assert_eq!(config.mode, Mode::Scripted { strategy: Strategy::study_analog() });
        assert_eq!(data.input_shape(), &[16]);
        assert_eq!(data.num_classes(), 5);
    }

    #[test]
    fn interactive_accepts_bare_epochs() {
        let spec = RunSpec { interventions: Some("25, 30".into()), ..RunSpec::default() };
        assert_eq!(spec.interactive().unwrap().0.intervention_epochs, vec![25, 30]);
        assert!(spec.headless().is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let spec = RunSpec { alpha: 1.5, ..RunSpec::default() };
        assert!(matches!(spec.headless(), Err(SpecError::Config(_))));
        let spec = RunSpec { dataset: "csv:/nonexistent/file.csv".into(), ..RunSpec::default() };
        assert!(matches!(spec.headless(), Err(SpecError::Read { .. })));
        let spec = RunSpec { model: "resnet".into(), ..RunSpec::default() };
        assert!(matches!(spec.headless(), Err(SpecError::UnknownModel(_))));
        assert!(serde_json::from_str::<RunSpec>(r#"{"alhpa": 0.3}"#).is_err());
    }

    #[test]
    fn conv1d_reads_vectors_as_one_channel() {
        let spec = RunSpec { model: "conv1d".into(), ..RunSpec::default() };
        let (config, data) = spec.headless().unwrap();
        assert_eq!(config.model.input_shape, vec![1, 16]);
        assert_eq!(data.input_shape(), &[1, 16]);
    }
}
