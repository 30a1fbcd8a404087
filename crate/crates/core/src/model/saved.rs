//! Either model behind one type, and checkpoints that carry everything
//! needed to decode: architecture, task, tokenizer and truecaser.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DualSourceConfig, DualSourceModel, Example, InputLayout, Seq2Seq, Seq2SeqConfig, Seq2SeqModel, TaskMode};
use crate::decoding::Scorer;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Real, Var};
use crate::tokenize::{SubwordModel, Truecaser};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Dual(DualSourceConfig),
    Basic(Seq2SeqConfig),
}

impl ModelSpec {
    /// The dual model reads article and property names separately; the
    /// baseline reads them concatenated.
    pub fn layout(&self) -> InputLayout {
        match self {
            ModelSpec::Dual(_) => InputLayout::DualSource,
            ModelSpec::Basic(_) => InputLayout::Concatenated,
        }
    }

    pub fn max_positions(&self) -> usize {
        match self {
            ModelSpec::Dual(c) => c.max_positions,
            ModelSpec::Basic(c) => c.max_positions,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            ModelSpec::Dual(c) => c.vocab,
            ModelSpec::Basic(c) => c.vocab,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelSpec,
    pub task: TaskMode,
    pub tokenizer: SubwordModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truecaser: Option<Truecaser>,
    pub tool_version: String,
}

pub enum AnyModel<T> {
    Dual(DualSourceModel<T>),
    Basic(Seq2SeqModel<T>),
}

impl<T: Real> AnyModel<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Dual(c) => AnyModel::Dual(DualSourceModel::new(c.clone(), seed)?),
            ModelSpec::Basic(c) => AnyModel::Basic(Seq2SeqModel::new(c.clone(), seed)?),
        })
    }

    pub fn set_exec(&mut self, mode: ExecMode) {
        match self {
            AnyModel::Dual(m) => m.exec = mode,
            AnyModel::Basic(m) => m.exec = mode,
        }
    }

    /// Scorer that never sees the article. Only the dual model has one.
    pub fn ablated_scorer<'a>(&'a self, ex: &Example) -> Result<Box<dyn Scorer + 'a>> {
        match self {
            AnyModel::Dual(m) => Ok(Box::new(m.dual_scorer(ex, true)?)),
            AnyModel::Basic(_) => Err(Error::Config("article ablation needs the dual-source model".into())),
        }
    }
}

impl<T: Real> Seq2Seq<T> for AnyModel<T> {
    fn store(&self) -> &ParamStore<T> {
        match self {
            AnyModel::Dual(m) => m.store(),
            AnyModel::Basic(m) => m.store(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            AnyModel::Dual(m) => m.store_mut(),
            AnyModel::Basic(m) => m.store_mut(),
        }
    }

    fn exec_mode(&self) -> ExecMode {
        match self {
            AnyModel::Dual(m) => m.exec_mode(),
            AnyModel::Basic(m) => m.exec_mode(),
        }
    }

    fn label_smoothing(&self) -> f64 {
        match self {
            AnyModel::Dual(m) => m.label_smoothing(),
            AnyModel::Basic(m) => m.label_smoothing(),
        }
    }

    fn loss(&self, g: &mut Graph<T>, batch: &[&Example], smoothing: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match self {
            AnyModel::Dual(m) => m.loss(g, batch, smoothing, rng),
            AnyModel::Basic(m) => m.loss(g, batch, smoothing, rng),
        }
    }

    fn scorer<'a>(&'a self, example: &Example) -> Result<Box<dyn Scorer + 'a>> {
        match self {
            AnyModel::Dual(m) => m.scorer(example),
            AnyModel::Basic(m) => m.scorer(example),
        }
    }
}

pub fn save_model<T: Real>(path: &Path, model: &AnyModel<T>, meta: &ModelMeta, step: u64) -> Result<()> {
    save_checkpoint(path, model.store(), step, serde_json::to_value(meta)?)
}

/// Rebuilds the model from its recorded spec and loads the stored values.
pub fn load_model<T: Real>(path: &Path) -> Result<(AnyModel<T>, ModelMeta, u64)> {
    let (store, header) = load_checkpoint::<T>(path)?;
    let meta: ModelMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::Data(format!("{}: checkpoint metadata: {e}", path.display())))?;
    let mut model = AnyModel::new(&meta.model, 0)?;
    if model.store().len() != store.len() {
        return Err(Error::Data(format!(
            "{}: {} tensors stored, architecture has {}",
            path.display(),
            store.len(),
            model.store().len()
        )));
    }
    model.store_mut().load_values_from(&store)?;
    Ok((model, meta, header.step))
}
