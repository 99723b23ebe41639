//! Named models served by one server.
//!
//! ```toml
//! [models.full]
//! config = "pipeline.toml"   # PipelineConfig file, relative to this file
//! weights = "model.epvrw"    # implies the toy-neural predictor
//!
//! [models.truth]
//! predictor = "replay"
//! poses = "groundtruth.jsonl"
//! ablate = ["filter", "kpo"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use epvr_core::pipeline::{
    build_predictor, PipelineConfig, PipelineError, PredictorBackend, PredictorKind, Session,
};
use epvr_core::skeleton::KinematicTree;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("model {name:?}: {source}")]
    Model { name: String, source: PipelineError },
    #[error("registry defines no models")]
    Empty,
    #[error("unknown model {0:?}")]
    UnknownModel(String),
}

/// Creates a fresh pipeline session for a named model.
pub trait PipelineFactory: Send + Sync {
    fn create(&self, model: &str) -> Result<Session, RegistryError>;
    fn models(&self) -> Vec<String>;
}

struct Model {
    config: PipelineConfig,
    tree: Arc<KinematicTree>,
    predictor: Arc<dyn PredictorBackend>,
}

/// Models loaded once at startup; sessions share their predictors.
#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Model>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    models: BTreeMap<String, ModelEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelEntry {
    config: Option<PathBuf>,
    weights: Option<PathBuf>,
    predictor: Option<PredictorKind>,
    poses: Option<PathBuf>,
    #[serde(default)]
    ablate: Vec<String>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        config: PipelineConfig,
        predictor: Arc<dyn PredictorBackend>,
    ) -> Result<(), RegistryError> {
        let name = name.into();
        let wrap = |source| RegistryError::Model { name: name.clone(), source };
        config.validate().map_err(wrap)?;
        let tree = Arc::new(config.load_skeleton().map_err(wrap)?);
        self.models.insert(name, Model { config, tree, predictor });
        Ok(())
    }

    /// Builds the predictor named by `config` and registers it.
    pub fn insert_config(&mut self, name: impl Into<String>, config: PipelineConfig) -> Result<(), RegistryError> {
        let name = name.into();
        let predictor = build_predictor(&config.predictor, None)
            .map_err(|source| RegistryError::Model { name: name.clone(), source })?;
        self.insert(name, config, predictor.into())
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| RegistryError::Io { path: path.to_path_buf(), source })?;
        let file: RegistryFile = toml::from_str(&text)
            .map_err(|e| RegistryError::Parse { path: path.to_path_buf(), message: e.message().to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut registry = Self::new();
        for (name, entry) in file.models {
            let wrap = |source| RegistryError::Model { name: name.clone(), source };
            let mut config = match &entry.config {
                Some(p) => PipelineConfig::load(&base.join(p)).map_err(wrap)?,
                None => PipelineConfig::default(),
            };
            if let Some(skeleton) = &config.skeleton {
                config.skeleton = Some(base.join(skeleton));
            }
            if let Some(kind) = entry.predictor {
                config.predictor.kind = kind;
            }
            if let Some(w) = entry.weights {
                config.predictor.kind = PredictorKind::ToyNeural;
                config.predictor.weights = Some(base.join(w));
            }
            if let Some(p) = entry.poses {
                config.predictor.poses = Some(base.join(p));
            }
            for stage in &entry.ablate {
                config.stages.ablate(stage).map_err(wrap)?;
            }
            registry.insert_config(name.clone(), config)?;
        }
        if registry.models.is_empty() {
            return Err(RegistryError::Empty);
        }
        Ok(registry)
    }

    pub fn config(&self, model: &str) -> Option<&PipelineConfig> {
        self.models.get(model).map(|m| &m.config)
    }
}

impl PipelineFactory for ModelRegistry {
    fn create(&self, model: &str) -> Result<Session, RegistryError> {
        let m = self.models.get(model).ok_or_else(|| RegistryError::UnknownModel(model.to_string()))?;
        Session::new(m.config.clone(), m.tree.clone(), m.predictor.clone())
            .map_err(|source| RegistryError::Model { name: model.to_string(), source })
    }

    fn models(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_relative_paths_and_ablations() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.toml"), "window = 10\n[predictor]\nkind = \"heuristic\"\n").unwrap();
        std::fs::write(
            dir.path().join("models.toml"),
            "[models.a]\nconfig = \"p.toml\"\nablate = [\"kpo\"]\n\n[models.b]\npredictor = \"heuristic\"\n",
        )
        .unwrap();
        let reg = ModelRegistry::load(&dir.path().join("models.toml")).unwrap();
        assert_eq!(reg.models(), vec!["a".to_string(), "b".to_string()]);
        let a = reg.config("a").unwrap();
        assert_eq!(a.window, 10);
        assert!(!a.stages.use_kpo);
        reg.create("b").unwrap();
        assert!(matches!(reg.create("c"), Err(RegistryError::UnknownModel(_))));
    }

    #[test]
    fn reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.toml");
        let err = ModelRegistry::load(&missing).err().unwrap();
        assert!(err.to_string().contains("none.toml"));
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[models.a]\nweights = 3\n").unwrap();
        assert!(matches!(ModelRegistry::load(&bad), Err(RegistryError::Parse { .. })));
        std::fs::write(&bad, "[models]\n").unwrap();
        assert!(matches!(ModelRegistry::load(&bad), Err(RegistryError::Empty)));
        std::fs::write(&bad, "[models.r]\npredictor = \"replay\"\n").unwrap();
        assert!(matches!(ModelRegistry::load(&bad), Err(RegistryError::Model { .. })));
    }
}
