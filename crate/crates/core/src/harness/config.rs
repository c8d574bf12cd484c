use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::candidate::Scheme;
use crate::error::{Error, Result};
use crate::knowledge_encoder::KnowledgeStrategy;
use crate::prompt::{parse_template, resolve_template_spec};

/// Training-set size: a mention count or the whole training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    Count(usize),
    All,
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::Count(n) => write!(f, "{n}"),
            Shots::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Shots::Count(n)),
            _ => Err(Error::Config(format!("shots must be a positive integer or \"all\", got {s:?}"))),
        }
    }
}

impl Serialize for Shots {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::Count(n) => s.serialize_u64(*n as u64),
            Shots::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(0) => Err(serde::de::Error::custom("shots must be positive")),
            Repr::Count(n) => Ok(Shots::Count(n as usize)),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub shots: Shots,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    /// Learning rate actually used.
    pub lr: f64,
    /// Rate tuned for a large pretrained encoder; echoed, not used.
    pub reference_lr: f64,
    pub dropout: f64,
    pub patience_epochs: usize,
    /// Dev accuracy gain below this does not count as improvement.
    pub min_improvement: f64,
    pub seeds: Vec<u64>,
    pub template: String,
    pub knowledge_strategy: KnowledgeStrategy,
    pub k_candidates: usize,
    pub scheme: Scheme,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_k: usize,
    pub d_h: usize,
    pub tie_output: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub label_words_no: Vec<String>,
    pub label_words_yes: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            shots: Shots::All,
            epochs: 10,
            batch_size: 32,
            max_seq_len: 128,
            lr: 1e-3,
            reference_lr: 1e-5,
            dropout: 0.3,
            patience_epochs: 2,
            min_improvement: 1e-4,
            seeds: vec![1, 2, 3, 4, 5],
            template: "knowledge".into(),
            knowledge_strategy: KnowledgeStrategy::PretrainedSurface,
            k_candidates: 10,
            scheme: Scheme::UnigramBigram,
            d_model: 32,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 64,
            d_k: 16,
            d_h: 32,
            tie_output: true,
            grad_clip: 1.0,
            label_words_no: vec!["不".into(), "没".into()],
            label_words_yes: vec!["是".into(), "对".into()],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn template_spec(&self) -> &str {
        resolve_template_spec(&self.template)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patience_epochs < 1 {
            return fail("patience_epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_candidates == 0 {
            return fail("epochs, batch_size and k_candidates must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 3 {
            return fail("max_seq_len must be at least 3".into());
        }
        let template = parse_template(self.template_spec())?;
        match (self.knowledge_strategy, template.has_knowledge()) {
            (KnowledgeStrategy::None, true) => fail(format!(
                "template {:?} has [know] slots but knowledge_strategy is none",
                self.template
            )),
            (s, false) if s != KnowledgeStrategy::None => fail(format!(
                "knowledge_strategy {s} needs a template with [know] slots"
            )),
            _ => Ok(()),
        }
    }
}
