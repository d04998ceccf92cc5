//! Precision-erased predictor models.

use std::path::Path;

use anyhow::{bail, Context, Result};
use duoserve_core::predictor::{model_from_bytes, model_header, ExpertMlp, ExpertPredictor, MlpPredictor, ModelHeader};
use duoserve_core::TraceStats;

/// A model file loaded in the precision it was trained in.
pub enum LoadedModel {
    F32(ExpertMlp<f32>, ModelHeader),
    F64(ExpertMlp<f64>, ModelHeader),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let header = model_header(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        let model = match header.scalar.as_str() {
            "f32" => {
                let (net, header) = model_from_bytes::<f32>(&bytes)?;
                LoadedModel::F32(net, header)
            }
            "f64" => {
                let (net, header) = model_from_bytes::<f64>(&bytes)?;
                LoadedModel::F64(net, header)
            }
            other => bail!("{}: unknown scalar type {other:?}", path.display()),
        };
        Ok(model)
    }

    pub fn header(&self) -> &ModelHeader {
        match self {
            LoadedModel::F32(_, h) | LoadedModel::F64(_, h) => h,
        }
    }

    /// Binds the network to the statistics it reads its inputs from.
    pub fn predictor<'a>(&'a self, stats: &'a TraceStats) -> Result<Box<dyn ExpertPredictor + 'a>> {
        Ok(match self {
            LoadedModel::F32(net, h) => Box::new(MlpPredictor::new(net, stats, h.layout)?),
            LoadedModel::F64(net, h) => Box::new(MlpPredictor::new(net, stats, h.layout)?),
        })
    }
}
