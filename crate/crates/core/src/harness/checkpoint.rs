//! JSON checkpoint: a version tag, the experiment config, both vocabularies,
//! the KB, the template spec, and every named parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::SeedResult;
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, KnowledgeItem, KnowledgeVocab};
use crate::knowledge_encoder::{KnowledgeEncoder, KnowledgeEncoderConfig};
use crate::mlm::{MlmVocab, ToyMlm, ToyMlmConfig};
use crate::prompt::{parse_template, KnowledgeModule, PromptModel, Verbalizer};
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub(crate) fn mlm_config(config: &ExperimentConfig) -> ToyMlmConfig {
    ToyMlmConfig {
        d_model: config.d_model,
        n_blocks: config.n_blocks,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        max_len: config.max_seq_len,
        dropout: config.dropout,
        tie_output: config.tie_output,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeState {
    pub encoder: KnowledgeEncoderConfig,
    pub vocab: Vec<String>,
    pub kb: Vec<KnowledgeItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub result: SeedResult,
    pub mlm: ToyMlmConfig,
    pub mlm_vocab: Vec<String>,
    pub knowledge: Option<KnowledgeState>,
    pub template: String,
    pub verbalizer: Verbalizer,
    pub params: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn capture(model: &PromptModel, store: &ParamStore, config: &ExperimentConfig, result: &SeedResult) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            result: result.clone(),
            mlm: mlm_config(config),
            mlm_vocab: model.mlm.vocab().tokens().to_vec(),
            knowledge: model.knowledge.as_ref().map(|k| KnowledgeState {
                encoder: k.encoder.config(),
                vocab: k.vocab.tokens().to_vec(),
                kb: k.kb.items().to_vec(),
            }),
            template: model.template.to_string(),
            verbalizer: model.verbalizer.clone(),
            params: store.named_values(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: version {v}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing version", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Rebuild the model and its parameters.
    pub fn restore(&self) -> Result<(PromptModel, ParamStore)> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            if store.id(name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.add(name.clone(), value.clone());
        }
        let vocab = MlmVocab::from_tokens(self.mlm_vocab.clone())?;
        let mlm = ToyMlm::from_store(&store, vocab, self.mlm)?;
        let knowledge = match &self.knowledge {
            Some(k) => Some(KnowledgeModule {
                kb: KnowledgeBase::from_items(k.kb.iter().cloned()),
                vocab: KnowledgeVocab::from_tokens(k.vocab.clone())?,
                encoder: KnowledgeEncoder::from_store(&store, k.encoder)?,
            }),
            None => None,
        };
        let mut template = parse_template(&self.template)?;
        template.attach_soft_params(&store)?;
        let model = PromptModel::new(
            Box::new(mlm),
            template,
            self.verbalizer.clone(),
            knowledge,
            self.config.max_seq_len,
        )?;
        Ok((model, store))
    }
}
