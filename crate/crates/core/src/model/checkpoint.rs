use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelError, Result, TransformerRegressor};
use crate::ingest::Scaling;

pub const CHECKPOINT_FORMAT: &str = "lto-health-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: config, seed, optional feature scaling, and every
/// tensor by name in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub scaling: Option<Scaling>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerRegressor) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            seed: model.seed,
            scaling: model.scaling.clone(),
            tensors: model
                .layout
                .specs
                .iter()
                .map(|s| NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: model.params[s.range()].to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<TransformerRegressor> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        self.config.validate()?;
        let layout = Layout::new(&self.config);
        let mut params = vec![0.0; layout.total_len()];
        if self.tensors.len() != layout.specs.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.specs.len(),
                self.tensors.len()
            )));
        }
        for t in &self.tensors {
            let spec = layout
                .find(&t.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{}`", t.name)))?;
            if spec.shape != t.shape || t.data.len() != spec.len() {
                return Err(ModelError::Checkpoint(format!("tensor `{}` has the wrong shape", t.name)));
            }
            params[spec.range()].copy_from_slice(&t.data);
        }
        let mut model = TransformerRegressor::from_parts(self.config, layout, params, self.seed);
        model.scaling = self.scaling;
        Ok(model)
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer(sink, self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn read<R: Read>(source: R) -> Result<Self> {
        serde_json::from_reader(source).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let model = TransformerRegressor::new(ModelConfig::new(3), 5).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model).write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap().into_model().unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn wrong_shape_rejected() {
        let model = TransformerRegressor::new(ModelConfig::new(3), 5).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.tensors[0].data.pop();
        assert!(matches!(ck.into_model(), Err(ModelError::Checkpoint(_))));
    }
}
