//! The masked-language-model contract used by the prompt layer, and a small
//! character-level transformer encoder that satisfies it.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Gradients, Matrix, ParamId, ParamStore};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Character vocabulary with reserved special tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmVocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl MlmVocab {
    /// Every character of `texts`, in code-point order, after the reserved tokens.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Checkpoint(
                "MLM vocab must start with the reserved tokens".into(),
            ));
        }
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(MlmVocab { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf)).unwrap_or(self.unk_id())
    }

    pub fn pad_id(&self) -> usize {
        0
    }
    pub fn unk_id(&self) -> usize {
        1
    }
    pub fn cls_id(&self) -> usize {
        2
    }
    pub fn sep_id(&self) -> usize {
        3
    }
    pub fn mask_id(&self) -> usize {
        4
    }
}

/// What the prompt layer needs from a masked language model.
///
/// Inputs are continuous `len × d_model` matrices so that soft-token and
/// knowledge vectors can be mixed with ordinary token embeddings.
pub trait MaskedLm {
    fn vocab(&self) -> &MlmVocab;
    fn d_model(&self) -> usize;
    fn max_len(&self) -> usize;

    /// Whether `encode` accepts arbitrary continuous input rows.
    fn supports_embedding_injection(&self) -> bool {
        true
    }

    /// Token embeddings, `ids.len() × d_model`.
    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Var;

    /// Contextual hidden states, same shape as `inputs`. Dropout is applied
    /// only when `dropout_rng` is given.
    fn encode(&self, tape: &mut Tape, inputs: Var, dropout_rng: Option<&mut dyn RngCore>) -> Result<Var>;

    /// Vocabulary logits for each row of `hidden`.
    fn project(&self, tape: &mut Tape, hidden: Var) -> Var;

    fn forward(&self, tape: &mut Tape, inputs: Var, dropout_rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let hidden = self.encode(tape, inputs, dropout_rng)?;
        Ok(self.project(tape, hidden))
    }
}

/// `1 × |V|` logits at `mask_index`.
pub fn mask_logits(
    model: &dyn MaskedLm,
    tape: &mut Tape,
    inputs: Var,
    mask_index: usize,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let len = tape.value(inputs).rows;
    if mask_index >= len {
        return Err(Error::InvalidArgument(format!(
            "mask index {mask_index} outside a sequence of {len}"
        )));
    }
    let hidden = model.encode(tape, inputs, dropout_rng)?;
    let row = tape.slice_rows(hidden, mask_index, 1);
    let logits = model.project(tape, row);
    if !tape.value(logits).is_finite() {
        return Err(Error::Divergence("non-finite logits at the mask position".into()));
    }
    Ok(logits)
}

/// Softmax over the vocabulary at `mask_index`.
pub fn mask_distribution(
    model: &dyn MaskedLm,
    tape: &mut Tape,
    inputs: Var,
    mask_index: usize,
) -> Result<Vec<f64>> {
    let logits = mask_logits(model, tape, inputs, mask_index, None)?;
    let mut p = tape.value(logits).data.clone();
    softmax_in_place(&mut p);
    Ok(p)
}

/// One optimization step: mean cross-entropy of the mask position against
/// the gold word over `batch`, then an Adam update of every parameter that
/// received a gradient. Each batch entry builds its input sequence on the
/// tape and returns `(inputs, mask_index, gold_word_id)`.
pub fn train_step<F>(
    model: &dyn MaskedLm,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    batch: &[F],
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<(Var, usize, usize)>,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let grads = batch_gradients(model, store, batch, reborrow(&mut dropout_rng))?;
    let (mut grads, loss) = grads;
    grads.scale(1.0 / batch.len() as f64);
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    optimizer.step(store, &grads);
    Ok(loss)
}

pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Summed gradients and mean loss over `batch`, without updating.
pub fn batch_gradients<F>(
    model: &dyn MaskedLm,
    store: &ParamStore,
    batch: &[F],
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Gradients, f64)>
where
    F: Fn(&mut Tape) -> Result<(Var, usize, usize)>,
{
    let mut grads = Gradients::new(store.len());
    let mut total = 0.0;
    for build in batch {
        let mut tape = Tape::new(store);
        let (inputs, mask_index, gold) = build(&mut tape)?;
        let logits = mask_logits(model, &mut tape, inputs, mask_index, reborrow(&mut dropout_rng))?;
        let loss = tape.cross_entropy(logits, gold);
        let value = tape.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value}")));
        }
        total += value;
        tape.backward_into(loss, &mut grads);
    }
    Ok((grads, total / batch.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyMlmConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_output: bool,
}

impl Default for ToyMlmConfig {
    fn default() -> Self {
        ToyMlmConfig {
            d_model: 128,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 128,
            dropout: 0.3,
            tie_output: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const BLOCK_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2.g", "ln2.b",
    "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

impl Block {
    fn from_ids(ids: &[ParamId]) -> Self {
        Block {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            bq: ids[3],
            wk: ids[4],
            bk: ids[5],
            wv: ids[6],
            bv: ids[7],
            wo: ids[8],
            bo: ids[9],
            ln2_g: ids[10],
            ln2_b: ids[11],
            w1: ids[12],
            b1: ids[13],
            w2: ids[14],
            b2: ids[15],
        }
    }
}

/// Pre-norm transformer encoder over characters with learned positions.
#[derive(Debug, Clone)]
pub struct ToyMlm {
    config: ToyMlmConfig,
    vocab: MlmVocab,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

impl ToyMlm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: MlmVocab,
        config: ToyMlmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ToyMlmConfig {
            d_model: d,
            n_blocks,
            n_heads,
            d_ff,
            max_len,
            ..
        } = config;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by {n_heads} heads"
            )));
        }
        let v = vocab.len();
        let tok_embed = store.add("mlm.tok_embed", Matrix::randn(v, d, 0.02, rng));
        let pos_embed = store.add("mlm.pos_embed", Matrix::randn(max_len, d, 0.02, rng));
        let proj_std = (1.0 / d as f64).sqrt();
        let resid_std = proj_std / (2.0 * n_blocks.max(1) as f64).sqrt();
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let mut ids = Vec::with_capacity(BLOCK_PARAMS.len());
            for name in BLOCK_PARAMS {
                let value = match name {
                    "ln1.g" | "ln2.g" => Matrix::filled(1, d, 1.0),
                    "ln1.b" | "ln2.b" | "b_q" | "b_k" | "b_v" | "b_o" | "ff.b2" => {
                        Matrix::zeros(1, d)
                    }
                    "w_q" | "w_k" | "w_v" => Matrix::randn(d, d, proj_std, rng),
                    "w_o" => Matrix::randn(d, d, resid_std, rng),
                    "ff.w1" => Matrix::randn(d, d_ff, proj_std, rng),
                    "ff.b1" => Matrix::zeros(1, d_ff),
                    "ff.w2" => Matrix::randn(d_ff, d, resid_std, rng),
                    _ => unreachable!(),
                };
                ids.push(store.add(format!("mlm.block{b}.{name}"), value));
            }
            blocks.push(Block::from_ids(&ids));
        }
        let lnf_g = store.add("mlm.lnf.g", Matrix::filled(1, d, 1.0));
        let lnf_b = store.add("mlm.lnf.b", Matrix::zeros(1, d));
        let out_w = if config.tie_output {
            None
        } else {
            Some(store.add("mlm.out.w", Matrix::randn(v, d, 0.02, rng)))
        };
        let out_b = store.add("mlm.out.b", Matrix::zeros(1, v));
        Ok(ToyMlm {
            config,
            vocab,
            tok_embed,
            pos_embed,
            blocks,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        })
    }

    /// Re-attach to parameters already present in `store`.
    pub fn from_store(store: &ParamStore, vocab: MlmVocab, config: ToyMlmConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let mut blocks = Vec::new();
        for b in 0..config.n_blocks {
            let ids = BLOCK_PARAMS
                .iter()
                .map(|n| get(&format!("mlm.block{b}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block::from_ids(&ids));
        }
        let tok_embed = get("mlm.tok_embed")?;
        if store.get(tok_embed).shape() != (vocab.len(), config.d_model) {
            return Err(Error::Checkpoint("token embedding shape mismatch".into()));
        }
        Ok(ToyMlm {
            config,
            vocab,
            tok_embed,
            pos_embed: get("mlm.pos_embed")?,
            blocks,
            lnf_g: get("mlm.lnf.g")?,
            lnf_b: get("mlm.lnf.b")?,
            out_w: if config.tie_output {
                None
            } else {
                Some(get("mlm.out.w")?)
            },
            out_b: get("mlm.out.b")?,
        })
    }

    pub fn config(&self) -> ToyMlmConfig {
        self.config
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (rows, cols) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let mask = Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                );
                tape.mask_mul(x, mask)
            }
            _ => x,
        }
    }

    fn attention(&self, tape: &mut Tape, block: &Block, x: Var) -> Var {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (
            tape.param(block.wq),
            tape.param(block.bq),
            tape.param(block.wk),
            tape.param(block.bk),
            tape.param(block.wv),
            tape.param(block.bv),
            tape.param(block.wo),
            tape.param(block.bo),
        );
        let q = tape.matmul(x, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(x, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(x, wv);
        let v = tape.add_row(v, bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores);
            outs.push(tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = tape.matmul(cat, wo);
        tape.add_row(o, bo)
    }

    fn feed_forward(&self, tape: &mut Tape, block: &Block, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            tape.param(block.w1),
            tape.param(block.b1),
            tape.param(block.w2),
            tape.param(block.b2),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }
}

impl MaskedLm for ToyMlm {
    fn vocab(&self) -> &MlmVocab {
        &self.vocab
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        tape.gather(self.tok_embed, ids)
    }

    fn encode(&self, tape: &mut Tape, inputs: Var, mut dropout_rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let (len, width) = tape.value(inputs).shape();
        if width != self.config.d_model {
            return Err(Error::InvalidArgument(format!(
                "input width {width}, model width {}",
                self.config.d_model
            )));
        }
        if len == 0 || len > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather(self.pos_embed, &positions);
        let mut x = tape.add(inputs, pos);
        for block in &self.blocks {
            let (g1, b1) = (tape.param(block.ln1_g), tape.param(block.ln1_b));
            let a = tape.layer_norm(x, g1, b1, 1e-5);
            let a = self.attention(tape, block, a);
            let a = self.dropout(tape, a, &mut dropout_rng);
            x = tape.add(x, a);
            let (g2, b2) = (tape.param(block.ln2_g), tape.param(block.ln2_b));
            let f = tape.layer_norm(x, g2, b2, 1e-5);
            let f = self.feed_forward(tape, block, f);
            let f = self.dropout(tape, f, &mut dropout_rng);
            x = tape.add(x, f);
        }
        let (g, b) = (tape.param(self.lnf_g), tape.param(self.lnf_b));
        let out = tape.layer_norm(x, g, b, 1e-5);
        if !tape.value(out).is_finite() {
            return Err(Error::Divergence("non-finite hidden states".into()));
        }
        Ok(out)
    }

    fn project(&self, tape: &mut Tape, hidden: Var) -> Var {
        let w = tape.param(self.out_w.unwrap_or(self.tok_embed));
        let logits = tape.matmul_bt(hidden, w);
        let b = tape.param(self.out_b);
        tape.add_row(logits, b)
    }
}

/// Shape, normalization, and determinism checks every adapter must pass.
pub fn check_conformance(model: &dyn MaskedLm, store: &ParamStore) -> Result<()> {
    let fail = |m: String| Err(Error::Conformance(m));
    if !model.supports_embedding_injection() {
        return fail("model does not accept injected input embeddings".into());
    }
    let vocab = model.vocab();
    for (i, t) in RESERVED.iter().enumerate() {
        if vocab.id(t) != Some(i) {
            return fail(format!("reserved token {t} missing or misplaced"));
        }
    }
    let len = model.max_len().min(7);
    if len < 3 {
        return fail("max_len below 3".into());
    }
    let ids: Vec<usize> = (0..len).map(|i| i % vocab.len()).collect();
    let run = || -> Result<Matrix> {
        let mut tape = Tape::new(store);
        let x = model.embed_tokens(&mut tape, &ids);
        if tape.value(x).shape() != (len, model.d_model()) {
            return Err(Error::Conformance(format!(
                "embedding shape {:?}, expected ({len}, {})",
                tape.value(x).shape(),
                model.d_model()
            )));
        }
        // a continuous row that is no token's embedding
        let injected = tape.constant(Matrix::filled(1, model.d_model(), 0.1));
        let rest = tape.slice_rows(x, 1, len - 1);
        let x = tape.concat_rows(&[injected, rest]);
        let logits = model.forward(&mut tape, x, None)?;
        Ok(tape.value(logits).clone())
    };
    let a = run()?;
    if a.shape() != (len, vocab.len()) {
        return fail(format!(
            "logits shape {:?}, expected ({len}, {})",
            a.shape(),
            vocab.len()
        ));
    }
    for r in 0..a.rows {
        let mut p = a.row(r).to_vec();
        softmax_in_place(&mut p);
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail(format!("softmax at position {r} sums to {s}"));
        }
    }
    if run()? != a {
        return fail("forward pass is not deterministic".into());
    }
    Ok(())
}

/// Accept an externally supplied model after checking it can host soft and
/// knowledge vectors of width `knowledge_d_model`.
pub fn external_adapter(
    model: Box<dyn MaskedLm>,
    store: &ParamStore,
    knowledge_d_model: Option<usize>,
) -> Result<Box<dyn MaskedLm>> {
    if !model.supports_embedding_injection() {
        return Err(Error::Config(
            "adapter does not expose input-embedding injection".into(),
        ));
    }
    if let Some(d) = knowledge_d_model {
        if d != model.d_model() {
            return Err(Error::Config(format!(
                "knowledge encoder width {d} differs from model width {}",
                model.d_model()
            )));
        }
    }
    check_conformance(model.as_ref(), store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_relative_error;
    use crate::optim::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, dropout: f64) -> (ParamStore, ToyMlm) {
        let mut store = ParamStore::new();
        let vocab = MlmVocab::from_texts(["胃静脉套扎术是对不没"]);
        let cfg = ToyMlmConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 12,
            max_len: 16,
            dropout,
            tie_output: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ToyMlm::new(&mut store, vocab, cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn vocab_layout() {
        let v = MlmVocab::from_texts(["ba", "ab"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.tokens()[5], "a");
        assert_eq!(v.char_id('z'), v.unk_id());
        assert_eq!(v.id(MASK), Some(v.mask_id()));
        assert!(MlmVocab::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn forward_preserves_length_and_normalizes() {
        let (store, m) = tiny(1, 0.0);
        let mut tape = Tape::new(&store);
        let x = m.embed_tokens(&mut tape, &[2, 5, 6, 4, 3]);
        let logits = m.forward(&mut tape, x, None).unwrap();
        assert_eq!(tape.value(logits).shape(), (5, m.vocab().len()));
        let x = m.embed_tokens(&mut tape, &[2, 5, 6, 4, 3]);
        let p = mask_distribution(&m, &mut tape, x, 3).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!(mask_distribution(&m, &mut tape, x, 9).is_err());
    }

    #[test]
    fn permutation_symmetry_without_positions() {
        let (mut store, m) = tiny(2, 0.0);
        store.get_mut(m.pos_embed()).data.fill(0.0);
        let dist = |ids: &[usize]| {
            let mut tape = Tape::new(&store);
            let x = m.embed_tokens(&mut tape, ids);
            mask_distribution(&m, &mut tape, x, 2).unwrap()
        };
        let a = dist(&[5, 6, 4, 7, 8]);
        let b = dist(&[7, 6, 4, 5, 8]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (store, m) = tiny(20 + seed, 0.0);
            let (worst, at) = max_relative_error(&store, 1e-5, 1e-6, |t| {
                let x = m.embed_tokens(t, &[2, 5, 9, 4, 3]);
                let logits = mask_logits(&m, t, x, 3, None).unwrap();
                t.cross_entropy(logits, 6)
            });
            assert!(worst < 1e-4, "seed {seed}: {worst} at {at}");
        }
    }

    #[test]
    fn fresh_loss_near_log_vocab() {
        let (mut store, m) = tiny(3, 0.0);
        let v = m.vocab().len() as f64;
        let ids = [2usize, 5, 6, 4, 3];
        let batch = [|t: &mut Tape| Ok((m.embed_tokens(t, &ids), 3, 7))];
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        let before = store.clone();
        let loss = train_step(&m, &mut store, &mut adam, &batch, None).unwrap();
        assert!((loss / v.ln() - 1.0).abs() < 0.2, "loss {loss}");
        assert_eq!(store, before);
    }

    #[test]
    fn dropout_only_with_rng() {
        let (store, m) = tiny(4, 0.5);
        let run = |rng: Option<&mut dyn RngCore>| {
            let mut tape = Tape::new(&store);
            let x = m.embed_tokens(&mut tape, &[2, 5, 6, 4, 3]);
            let h = m.encode(&mut tape, x, rng).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(None), run(None));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(run(None), run(Some(&mut rng)));
    }

    #[test]
    fn toy_model_passes_conformance_and_adapter() {
        let (store, m) = tiny(5, 0.3);
        check_conformance(&m, &store).unwrap();
        let boxed = external_adapter(Box::new(m.clone()), &store, Some(8)).unwrap();
        assert_eq!(boxed.d_model(), 8);
        assert!(matches!(
            external_adapter(Box::new(m), &store, Some(16)),
            Err(Error::Config(_))
        ));
    }

    struct NoInjection(ToyMlm);

    impl MaskedLm for NoInjection {
        fn vocab(&self) -> &MlmVocab {
            self.0.vocab()
        }
        fn d_model(&self) -> usize {
            self.0.d_model()
        }
        fn max_len(&self) -> usize {
            self.0.max_len()
        }
        fn supports_embedding_injection(&self) -> bool {
            false
        }
        fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Var {
            self.0.embed_tokens(tape, ids)
        }
        fn encode(&self, tape: &mut Tape, inputs: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
            self.0.encode(tape, inputs, rng)
        }
        fn project(&self, tape: &mut Tape, hidden: Var) -> Var {
            self.0.project(tape, hidden)
        }
    }

    #[test]
    fn adapter_without_injection_is_rejected() {
        let (store, m) = tiny(6, 0.0);
        let res = external_adapter(Box::new(NoInjection(m)), &store, None);
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
