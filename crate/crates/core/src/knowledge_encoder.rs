//! Knowledge id sequence → single injection vector:
//! embedding lookup, bidirectional GRU, forward/backward final-state sum,
//! then an affine–tanh–affine projection to the MLM width.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeVocab, PAD_ID};
use crate::tensor::{Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnowledgeStrategy {
    PretrainedSurface,
    StaticTable,
    Random,
    None,
}

impl FromStr for KnowledgeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-surface" | "full" => Ok(Self::PretrainedSurface),
            "static-table" | "static" => Ok(Self::StaticTable),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown knowledge strategy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for KnowledgeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PretrainedSurface => "pretrained-surface",
            Self::StaticTable => "static-table",
            Self::Random => "random",
            Self::None => "none",
        })
    }
}

/// Something that can represent a token's surface text as a vector, such
/// as a pretrained encoder.
pub trait SurfaceEncoder {
    fn dim(&self) -> usize;
    fn encode_surface(&self, text: &str) -> Option<Vec<f64>>;
}

/// `token<TAB>v1,v2,...,vd` vector table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl StaticVectors {
    pub fn new(dim: usize) -> Self {
        StaticVectors {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Config(format!(
                "vector of length {} in a {}-dimensional table",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.into(), v);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: Option<StaticVectors> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Malformed(format!("{}:{}: bad vector row", path.display(), i + 1));
            let (token, values) = line.split_once('\t').ok_or_else(bad)?;
            let v: Vec<f64> = values
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let t = table.get_or_insert_with(|| StaticVectors::new(v.len()));
            t.insert(token, v).map_err(|_| {
                Error::Malformed(format!(
                    "{}:{}: inconsistent vector length",
                    path.display(),
                    i + 1
                ))
            })?;
        }
        table.ok_or_else(|| Error::Malformed(format!("{} has no vectors", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        let mut out = String::new();
        for t in tokens {
            let vals: Vec<String> = self.vectors[t].iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{t}\t{}\n", vals.join(",")));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl SurfaceEncoder for StaticVectors {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_surface(&self, text: &str) -> Option<Vec<f64>> {
        self.vectors.get(text).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEncoderConfig {
    pub d_k: usize,
    pub d_h: usize,
    pub d_model: usize,
}

impl Default for KnowledgeEncoderConfig {
    fn default() -> Self {
        KnowledgeEncoderConfig {
            d_k: 128,
            d_h: 128,
            d_model: 128,
        }
    }
}

/// Where embedding rows come from, per strategy.
#[derive(Default, Clone, Copy)]
pub struct EmbeddingSources<'a> {
    pub surface: Option<&'a dyn SurfaceEncoder>,
    pub static_table: Option<&'a StaticVectors>,
}

#[derive(Debug, Clone, Copy)]
struct GruParams {
    wz: ParamId,
    wr: ParamId,
    wn: ParamId,
    uz: ParamId,
    ur: ParamId,
    un: ParamId,
    bz: ParamId,
    br: ParamId,
    bn: ParamId,
    bhn: ParamId,
}

impl GruParams {
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut uniform = |rows, cols| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
            )
        };
        GruParams {
            wz: store.add(format!("{prefix}.w_z"), uniform(d_in, d_h)),
            wr: store.add(format!("{prefix}.w_r"), uniform(d_in, d_h)),
            wn: store.add(format!("{prefix}.w_n"), uniform(d_in, d_h)),
            uz: store.add(format!("{prefix}.u_z"), uniform(d_h, d_h)),
            ur: store.add(format!("{prefix}.u_r"), uniform(d_h, d_h)),
            un: store.add(format!("{prefix}.u_n"), uniform(d_h, d_h)),
            bz: store.add(format!("{prefix}.b_z"), uniform(1, d_h)),
            br: store.add(format!("{prefix}.b_r"), uniform(1, d_h)),
            bn: store.add(format!("{prefix}.b_n"), uniform(1, d_h)),
            bhn: store.add(format!("{prefix}.b_hn"), uniform(1, d_h)),
        }
    }

    fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))
        };
        Ok(GruParams {
            wz: get("w_z")?,
            wr: get("w_r")?,
            wn: get("w_n")?,
            uz: get("u_z")?,
            ur: get("u_r")?,
            un: get("u_n")?,
            bz: get("b_z")?,
            br: get("b_r")?,
            bn: get("b_n")?,
            bhn: get("b_hn")?,
        })
    }

    /// Final hidden state after reading `inputs` rows in the given order.
    fn run(&self, tape: &mut Tape, inputs: Var, order: impl Iterator<Item = usize>, d_h: usize) -> Var {
        let (wz, wr, wn) = (tape.param(self.wz), tape.param(self.wr), tape.param(self.wn));
        let (uz, ur, un) = (tape.param(self.uz), tape.param(self.ur), tape.param(self.un));
        let (bz, br, bn, bhn) = (
            tape.param(self.bz),
            tape.param(self.br),
            tape.param(self.bn),
            tape.param(self.bhn),
        );
        let xz = tape.matmul(inputs, wz);
        let xz = tape.add_row(xz, bz);
        let xr = tape.matmul(inputs, wr);
        let xr = tape.add_row(xr, br);
        let xn = tape.matmul(inputs, wn);
        let xn = tape.add_row(xn, bn);

        let mut h = tape.constant(Matrix::zeros(1, d_h));
        for t in order {
            let xz_t = tape.slice_rows(xz, t, 1);
            let xr_t = tape.slice_rows(xr, t, 1);
            let xn_t = tape.slice_rows(xn, t, 1);

            let hz = tape.matmul(h, uz);
            let z = tape.add(xz_t, hz);
            let z = tape.sigmoid(z);
            let hr = tape.matmul(h, ur);
            let r = tape.add(xr_t, hr);
            let r = tape.sigmoid(r);
            let hn = tape.matmul(h, un);
            let hn = tape.add(hn, bhn);
            let gated = tape.mul(r, hn);
            let n = tape.add(xn_t, gated);
            let n = tape.tanh(n);
            // h' = (1 - z) * n + z * h
            let diff = tape.sub(h, n);
            let keep = tape.mul(z, diff);
            h = tape.add(n, keep);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeEncoder {
    config: KnowledgeEncoderConfig,
    vocab_size: usize,
    embed: ParamId,
    forward: GruParams,
    backward: GruParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Output of [`KnowledgeEncoder::encode_vector`].
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeVector(pub Vec<f64>);

impl KnowledgeEncoder {
    /// Register all knowledge parameters in `store`. The embedding table is
    /// filled per `strategy`; GRU and MLP weights always come from `rng`.
    pub fn init_params<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: &KnowledgeVocab,
        strategy: KnowledgeStrategy,
        sources: EmbeddingSources<'_>,
        config: KnowledgeEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let table = embedding_table(vocab, strategy, sources, config.d_k, rng)?;
        let embed = store.add("know.embed", table);
        let forward = GruParams::register(store, "know.gru_fwd", config.d_k, config.d_h, rng);
        let backward = GruParams::register(store, "know.gru_bwd", config.d_k, config.d_h, rng);
        let hidden = 2 * config.d_h;
        let w1 = store.add(
            "know.mlp.w1",
            Matrix::randn(config.d_h, hidden, (1.0 / config.d_h as f64).sqrt(), rng),
        );
        let b1 = store.add("know.mlp.b1", Matrix::zeros(1, hidden));
        let w2 = store.add(
            "know.mlp.w2",
            Matrix::randn(hidden, config.d_model, (1.0 / hidden as f64).sqrt(), rng),
        );
        let b2 = store.add("know.mlp.b2", Matrix::zeros(1, config.d_model));
        Ok(KnowledgeEncoder {
            config,
            vocab_size: vocab.len(),
            embed,
            forward,
            backward,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Re-attach to parameters already present in `store` (checkpoint load).
    pub fn from_store(store: &ParamStore, config: KnowledgeEncoderConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let embed = get("know.embed")?;
        Ok(KnowledgeEncoder {
            config,
            vocab_size: store.get(embed).rows,
            embed,
            forward: GruParams::lookup(store, "know.gru_fwd")?,
            backward: GruParams::lookup(store, "know.gru_bwd")?,
            w1: get("know.mlp.w1")?,
            b1: get("know.mlp.b1")?,
            w2: get("know.mlp.w2")?,
            b2: get("know.mlp.b2")?,
        })
    }

    pub fn config(&self) -> KnowledgeEncoderConfig {
        self.config
    }

    pub fn embed_table(&self) -> ParamId {
        self.embed
    }

    /// `len × d_k` rows of the embedding table.
    pub fn embed_sequence(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "knowledge id sequence is empty (use the NULL id)".into(),
            ));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "knowledge id {bad} out of range for vocab of {}",
                self.vocab_size
            )));
        }
        Ok(tape.gather(self.embed, ids))
    }

    /// `1 × d_model` injection vector for one entity's knowledge ids.
    pub fn encode(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let x = self.embed_sequence(tape, ids)?;
        let d_h = self.config.d_h;
        let hf = self.forward.run(tape, x, 0..ids.len(), d_h);
        let hb = self.backward.run(tape, x, (0..ids.len()).rev(), d_h);
        let h = tape.add(hf, hb);
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let a = tape.matmul(h, w1);
        let a = tape.add_row(a, b1);
        let a = tape.tanh(a);
        let out = tape.matmul(a, w2);
        let out = tape.add_row(out, b2);
        if !tape.value(out).is_finite() {
            return Err(Error::Divergence(
                "non-finite knowledge encoding".into(),
            ));
        }
        Ok(out)
    }

    /// Final forward and backward hidden states, for inspection.
    pub fn directional_states(&self, store: &ParamStore, ids: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(store);
        let x = self.embed_sequence(&mut tape, ids)?;
        let hf = self.forward.run(&mut tape, x, 0..ids.len(), self.config.d_h);
        let hb = self.backward.run(&mut tape, x, (0..ids.len()).rev(), self.config.d_h);
        Ok((tape.value(hf).data.clone(), tape.value(hb).data.clone()))
    }

    pub fn encode_vector(&self, store: &ParamStore, ids: &[usize]) -> Result<KnowledgeVector> {
        let mut tape = Tape::new(store);
        let out = self.encode(&mut tape, ids)?;
        Ok(KnowledgeVector(tape.value(out).data.clone()))
    }
}

fn embedding_table<R: Rng + ?Sized>(
    vocab: &KnowledgeVocab,
    strategy: KnowledgeStrategy,
    sources: EmbeddingSources<'_>,
    d_k: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let mut table = Matrix::randn(vocab.len(), d_k, 0.02, rng);
    let source: Option<&dyn SurfaceEncoder> = match strategy {
        KnowledgeStrategy::Random => None,
        KnowledgeStrategy::None => {
            return Err(Error::Config(
                "knowledge strategy `none` has no knowledge encoder".into(),
            ))
        }
        KnowledgeStrategy::PretrainedSurface => match (sources.surface, sources.static_table) {
            (Some(enc), _) => Some(enc),
            (None, Some(table)) => {
                log::info!("no surface encoder configured, using the static vector table");
                Some(table)
            }
            (None, None) => {
                return Err(Error::Config(
                    "pretrained-surface needs a surface encoder or a static vector table".into(),
                ))
            }
        },
        KnowledgeStrategy::StaticTable => match sources.static_table {
            Some(table) => Some(table),
            None => {
                return Err(Error::Config(
                    "static-table strategy needs a static vector file".into(),
                ))
            }
        },
    };
    if let Some(source) = source {
        if source.dim() != d_k {
            return Err(Error::Config(format!(
                "knowledge vectors have dimension {}, encoder expects d_k = {d_k}",
                source.dim()
            )));
        }
        let mut missing = 0usize;
        for (id, token) in vocab.tokens().iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            match source.encode_surface(token) {
                Some(v) => table.row_mut(id).copy_from_slice(&v),
                None => {
                    missing += 1;
                    log::debug!("no vector for knowledge token {token:?}, random row kept");
                }
            }
        }
        if missing > 0 {
            log::warn!(
                "{missing} of {} knowledge tokens had no vector and were randomly initialized",
                vocab.len()
            );
        }
    }
    table.row_mut(PAD_ID).fill(0.0);
    Ok(table)
}
