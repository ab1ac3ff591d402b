//! Trained parameters plus the configuration that produced them.

use std::path::Path;

use crate::config::ModelConfig;
use crate::container::{Container, ContainerKind, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{AmpnNet, Model};
use crate::optim::AdamState;
use crate::params::{Initializer, ParamStore};

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub training_step: u64,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, training_step: u64, optimizer: Option<&AdamState>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            params: model.params.clone(),
            training_step,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: ContainerKind::Checkpoint,
            header: self.config.to_text(),
            step: self.training_step,
            tensors: self.params.iter().map(|(_, n, t)| (n.to_owned(), t.clone())).collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::Checkpoint {
            return Err(Error::Checkpoint("container is not a model checkpoint".into()));
        }
        let config = ModelConfig::from_text(&c.header)?;
        let mut params = ParamStore::new();
        for (name, t) in c.tensors {
            params.add(name, t);
        }
        if let Some(state) = &c.optimizer {
            state.check_matches(&params)?;
        }
        Ok(Checkpoint { format_version: FORMAT_VERSION, config, params, training_step: c.step, optimizer: c.optimizer })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Loads and rejects a checkpoint whose architecture differs from
    /// `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if !ckpt.config.same_architecture(expected) {
            return Err(Error::Config("checkpoint was trained with a different model configuration".into()));
        }
        Ok(ckpt)
    }

    /// Rebuilds the network and installs the stored parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut fresh = ParamStore::<f32>::new();
        let net = AmpnNet::new(&self.config, &mut fresh, &mut Initializer::new(0))?;
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((_, want_name, want), (_, name, have)) in fresh.iter().zip(self.params.iter()) {
            if want_name != name || want.shape() != have.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {want_name} {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Model { net, params: self.params.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rebuilds_identical_model() {
        let model = Model::new(&ModelConfig::default(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, 12, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ampn");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.training_step, 12);
        assert_eq!(back.config, model.config().clone());
        let rebuilt = back.to_model().unwrap();
        for ((_, _, a), (_, _, b)) in rebuilt.params.iter().zip(model.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let model = Model::new(&ModelConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ampn");
        Checkpoint::from_model(&model, 0, None).save(&path).unwrap();
        let other = ModelConfig { base_width: 16, ..ModelConfig::default() };
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Config(_))));
        assert!(Checkpoint::load_expecting(&path, &ModelConfig::default()).is_ok());
        let mut forged = Checkpoint::load(&path).unwrap();
        forged.config = other;
        assert!(forged.to_model().is_err());
        assert!(matches!(Checkpoint::load(dir.path().join("nope.ampn")), Err(Error::MissingFile(_))));
    }
}
