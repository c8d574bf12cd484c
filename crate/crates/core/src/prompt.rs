//! Cloze templates, rendering into MLM input rows, the verbalizer, and the
//! per-mention selection rule.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::candidate::CandidateSet;
use crate::corpus::{Mention, StandardLibrary, Triplet};
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, KnowledgeVocab};
use crate::knowledge_encoder::KnowledgeEncoder;
use crate::mlm::{mask_distribution, MaskedLm};
use crate::tensor::{Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Original,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateSlot {
    /// One literal character.
    Hard(String),
    /// Trainable vector, optionally initialized from the embedding of a text.
    Soft(Option<String>),
    Placeholder(Role),
    Know(Role),
    Mask,
}

/// Template presets: the five knowledge-template variants plus the three
/// template families.
pub const PRESETS: [(&str, &str); 8] = [
    ("preset:1", "[Original Entity][know][soft:和][Candidate Entity][know][soft:的]意思相同吗？"),
    ("preset:2", "[Original Entity][know]和[Candidate Entity][know]相同吗？"),
    (
        "preset:3",
        "[Original Entity][know][soft:和][Candidate Entity][know][soft:是][soft:不][soft:是][soft:相][soft:同]？",
    ),
    (
        "preset:4",
        "在医学术语中，[Original Entity][know][soft:和][Candidate Entity][know][soft:的]意思相同吗？",
    ),
    (
        "preset:5",
        "从专业医学的角度看，[Original Entity][know]与[Candidate Entity][know]是否指代同一概念？",
    ),
    ("manual", "[Original Entity]和[Candidate Entity]意思相同吗？"),
    (
        "mixed",
        "[Original Entity][soft][soft:和][soft][Candidate Entity][soft:的]意思相同吗？",
    ),
    ("knowledge", "[Original Entity][know][soft:和][Candidate Entity][know][soft:的]意思相同吗？"),
];

/// Spec string for a preset name, or the input itself.
pub fn resolve_template_spec(spec_or_preset: &str) -> &str {
    PRESETS
        .iter()
        .find(|(name, _)| *name == spec_or_preset)
        .map(|(_, spec)| *spec)
        .unwrap_or(spec_or_preset)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub slots: Vec<TemplateSlot>,
    /// One parameter per `Soft` slot, in slot order, once initialized.
    pub soft_params: Vec<ParamId>,
}

impl Template {
    pub fn parse(spec: &str) -> Result<Self> {
        parse_template(spec)
    }

    pub fn num_soft(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, TemplateSlot::Soft(_)))
            .count()
    }

    pub fn has_knowledge(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, TemplateSlot::Know(_)))
    }

    /// Register one trainable vector per soft slot. `[soft:X]` starts from
    /// the mean embedding of the characters of X.
    pub fn init_soft_params<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        mlm: &dyn MaskedLm,
        rng: &mut R,
    ) {
        let d = mlm.d_model();
        let mut params = Vec::new();
        for slot in &self.slots {
            let TemplateSlot::Soft(init) = slot else { continue };
            let value = match init {
                Some(text) => {
                    let ids: Vec<usize> = text.chars().map(|c| mlm.vocab().char_id(c)).collect();
                    let rows = {
                        let mut tape = Tape::new(store);
                        let e = mlm.embed_tokens(&mut tape, &ids);
                        tape.value(e).clone()
                    };
                    let mut mean = Matrix::zeros(1, d);
                    for r in 0..rows.rows {
                        for (m, v) in mean.data.iter_mut().zip(rows.row(r)) {
                            *m += v / rows.rows as f64;
                        }
                    }
                    mean
                }
                None => Matrix::randn(1, d, 0.02, rng),
            };
            let name = format!("soft.{}", params.len());
            params.push(store.add(name, value));
        }
        self.soft_params = params;
    }

    pub fn attach_soft_params(&mut self, store: &ParamStore) -> Result<()> {
        self.soft_params = (0..self.num_soft())
            .map(|i| {
                store
                    .id(&format!("soft.{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter soft.{i}")))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_template(&self.slots))
    }
}

pub fn parse_template(spec: &str) -> Result<Template> {
    let err = |position: usize, message: String| Error::TemplateParse { position, message };
    let chars: Vec<char> = spec.chars().collect();
    let mut slots: Vec<(usize, TemplateSlot)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '[' {
            let close = chars[i..]
                .iter()
                .position(|&x| x == ']')
                .ok_or_else(|| err(i, "unclosed '['".into()))?;
            let tag: String = chars[i + 1..i + close].iter().collect();
            let tag = tag.trim();
            let slot = match tag {
                "Original Entity" => TemplateSlot::Placeholder(Role::Original),
                "Candidate Entity" => TemplateSlot::Placeholder(Role::Candidate),
                "soft" => TemplateSlot::Soft(None),
                "know" => TemplateSlot::Know(Role::Original),
                "mask" => TemplateSlot::Mask,
                t if t.starts_with("soft:") => {
                    let init = t["soft:".len()..].trim();
                    if init.is_empty() {
                        return Err(err(i, "empty soft initializer".into()));
                    }
                    TemplateSlot::Soft(Some(init.to_string()))
                }
                other => return Err(err(i, format!("unknown tag [{other}]"))),
            };
            slots.push((i, slot));
            i += close + 1;
        } else if c == ']' {
            return Err(err(i, "unmatched ']'".into()));
        } else {
            if !c.is_whitespace() {
                slots.push((i, TemplateSlot::Hard(c.to_string())));
            }
            i += 1;
        }
    }

    for role in [Role::Original, Role::Candidate] {
        let positions: Vec<usize> = slots
            .iter()
            .filter(|(_, s)| *s == TemplateSlot::Placeholder(role))
            .map(|(p, _)| *p)
            .collect();
        match positions.len() {
            1 => {}
            0 => return Err(err(chars.len(), format!("missing {role:?} entity placeholder"))),
            _ => return Err(err(positions[1], format!("second {role:?} entity placeholder"))),
        }
    }

    let masks: Vec<usize> = slots
        .iter()
        .filter(|(_, s)| *s == TemplateSlot::Mask)
        .map(|(p, _)| *p)
        .collect();
    if masks.len() > 1 {
        return Err(err(masks[1], "more than one [mask]".into()));
    }

    let mut last_role = None;
    for (pos, slot) in slots.iter_mut() {
        match slot {
            TemplateSlot::Placeholder(r) => last_role = Some(*r),
            TemplateSlot::Know(r) => {
                *r = last_role
                    .ok_or_else(|| err(*pos, "[know] before any entity placeholder".into()))?;
            }
            _ => {}
        }
    }

    let mut slots: Vec<TemplateSlot> = slots.into_iter().map(|(_, s)| s).collect();
    if masks.is_empty() {
        slots.push(TemplateSlot::Mask);
    }
    Ok(Template {
        slots,
        soft_params: Vec::new(),
    })
}

/// Bracket syntax for a slot list; always writes the mask explicitly.
pub fn serialize_template(slots: &[TemplateSlot]) -> String {
    slots
        .iter()
        .map(|s| match s {
            TemplateSlot::Hard(t) => t.clone(),
            TemplateSlot::Soft(None) => "[soft]".into(),
            TemplateSlot::Soft(Some(t)) => format!("[soft:{t}]"),
            TemplateSlot::Placeholder(Role::Original) => "[Original Entity]".into(),
            TemplateSlot::Placeholder(Role::Candidate) => "[Candidate Entity]".into(),
            TemplateSlot::Know(_) => "[know]".into(),
            TemplateSlot::Mask => "[mask]".into(),
        })
        .collect()
}

/// One position of a rendered sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Position {
    Start,
    End,
    Hard(char),
    Entity(Role, char),
    /// Index into the template's soft parameters.
    Soft(usize),
    Know(Role),
    Mask,
}

impl Position {
    fn removable(&self) -> bool {
        matches!(self, Position::Hard(_) | Position::Soft(_) | Position::Entity(..))
    }
}

/// Positions for `(original, candidate)` under `template`, with start and
/// end boundary tokens, right-truncated to `max_len`.
pub fn layout(template: &Template, original: &str, candidate: &str, max_len: usize) -> Result<Vec<Position>> {
    let mut out = vec![Position::Start];
    let mut soft = 0;
    for slot in &template.slots {
        match slot {
            TemplateSlot::Hard(t) => out.extend(t.chars().map(Position::Hard)),
            TemplateSlot::Soft(_) => {
                out.push(Position::Soft(soft));
                soft += 1;
            }
            TemplateSlot::Placeholder(role) => {
                let text = match role {
                    Role::Original => original,
                    Role::Candidate => candidate,
                };
                out.extend(text.chars().map(|c| Position::Entity(*role, c)));
            }
            TemplateSlot::Know(role) => out.push(Position::Know(*role)),
            TemplateSlot::Mask => out.push(Position::Mask),
        }
    }
    out.push(Position::End);

    let entity_len = |out: &[Position], role: Role| {
        out.iter()
            .filter(|p| matches!(p, Position::Entity(r, _) if *r == role))
            .count()
    };
    while out.len() > max_len {
        let victim = out.iter().rposition(|p| match p {
            Position::Entity(role, _) => entity_len(&out, *role) > 1,
            p => p.removable(),
        });
        match victim {
            Some(i) => {
                out.remove(i);
            }
            None => {
                return Err(Error::Render(format!(
                    "pair ({original:?}, {candidate:?}) needs more than {max_len} positions"
                )))
            }
        }
    }
    Ok(out)
}

/// Rendered input rows and where the mask sits.
#[derive(Debug, Clone, Copy)]
pub struct Rendered {
    pub inputs: Var,
    pub mask_index: usize,
}

/// Build the `len × d_model` input for one pair on `tape`. Knowledge
/// vectors are required iff the template has `[know]` slots.
pub fn render(
    tape: &mut Tape,
    template: &Template,
    mlm: &dyn MaskedLm,
    original: &str,
    candidate: &str,
    knowledge: Option<(Var, Var)>,
    max_len: usize,
) -> Result<Rendered> {
    let positions = layout(template, original, candidate, max_len)?;
    let d = mlm.d_model();
    if template.soft_params.len() != template.num_soft() {
        return Err(Error::Render("template soft parameters not initialized".into()));
    }
    if let Some((ko, kc)) = knowledge {
        for k in [ko, kc] {
            if tape.value(k).shape() != (1, d) {
                return Err(Error::Render(format!(
                    "knowledge vector shape {:?}, expected (1, {d})",
                    tape.value(k).shape()
                )));
            }
        }
    }
    let vocab = mlm.vocab();
    let mut segments: Vec<Var> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let mut mask_index = None;
    for (i, p) in positions.iter().enumerate() {
        let token = match p {
            Position::Start => Some(vocab.cls_id()),
            Position::End => Some(vocab.sep_id()),
            Position::Hard(c) | Position::Entity(_, c) => Some(vocab.char_id(*c)),
            Position::Mask => {
                mask_index = Some(i);
                Some(vocab.mask_id())
            }
            Position::Soft(_) | Position::Know(_) => None,
        };
        if let Some(t) = token {
            run.push(t);
            continue;
        }
        if !run.is_empty() {
            segments.push(mlm.embed_tokens(tape, &run));
            run.clear();
        }
        match p {
            Position::Soft(j) => segments.push(tape.param(template.soft_params[*j])),
            Position::Know(role) => {
                let (ko, kc) = knowledge.ok_or_else(|| {
                    Error::Render("template has [know] slots but no knowledge vectors".into())
                })?;
                segments.push(match role {
                    Role::Original => ko,
                    Role::Candidate => kc,
                });
            }
            _ => unreachable!(),
        }
    }
    if !run.is_empty() {
        segments.push(mlm.embed_tokens(tape, &run));
    }
    let inputs = tape.concat_rows(&segments);
    Ok(Rendered {
        inputs,
        mask_index: mask_index.expect("templates always contain a mask"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    /// Label words for y0 (different) and y1 (same).
    pub label_words: [Vec<String>; 2],
}

impl Default for Verbalizer {
    fn default() -> Self {
        Verbalizer {
            label_words: [
                vec!["不".to_string(), "没".to_string()],
                vec!["是".to_string(), "对".to_string()],
            ],
        }
    }
}

/// Verbalizer resolved against an MLM vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbalizerIds {
    pub ids: [Vec<usize>; 2],
}

impl VerbalizerIds {
    /// Target word for a binary label during training: the first word of
    /// the class.
    pub fn gold_word(&self, label: u8) -> usize {
        self.ids[usize::from(label != 0)][0]
    }
}

impl Verbalizer {
    pub fn new(y0: Vec<String>, y1: Vec<String>) -> Result<Self> {
        if y0.is_empty() || y1.is_empty() {
            return Err(Error::Config("verbalizer label word set is empty".into()));
        }
        if let Some(w) = y0.iter().find(|w| y1.contains(w)) {
            return Err(Error::Config(format!("label word {w:?} used for both classes")));
        }
        Ok(Verbalizer {
            label_words: [y0, y1],
        })
    }

    pub fn resolve(&self, mlm: &dyn MaskedLm) -> Result<VerbalizerIds> {
        let lookup = |words: &Vec<String>| {
            words
                .iter()
                .map(|w| {
                    mlm.vocab().id(w).ok_or_else(|| {
                        Error::Config(format!("label word {w:?} is not a single MLM token"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(VerbalizerIds {
            ids: [lookup(&self.label_words[0])?, lookup(&self.label_words[1])?],
        })
    }
}

/// Mean mask probability per class over its label words, renormalized over
/// the two classes. Returns `(p_y0, p_y1)`.
pub fn verbalize(mask_distribution: &[f64], verbalizer: &VerbalizerIds) -> Result<(f64, f64)> {
    let mean = |ids: &[usize]| -> Result<f64> {
        let mut s = 0.0;
        for &i in ids {
            s += *mask_distribution.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("label word id {i} outside the distribution"))
            })?;
        }
        Ok(s / ids.len() as f64)
    };
    let s0 = mean(&verbalizer.ids[0])?;
    let s1 = mean(&verbalizer.ids[1])?;
    let total = s0 + s1;
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Divergence(
            "verbalizer: both class scores are zero".into(),
        ));
    }
    Ok((s0 / total, s1 / total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub candidate: String,
    pub p_y0: f64,
    pub p_y1: f64,
}

/// Every candidate with `p_y1 > p_y0`; when none qualifies, the single
/// highest `p_y1` (ties go to the lower library ordinal).
pub fn select_candidates(scores: &[PairScore], library: &StandardLibrary) -> Vec<String> {
    let chosen: Vec<String> = scores
        .iter()
        .filter(|s| s.p_y1 > s.p_y0)
        .map(|s| s.candidate.clone())
        .collect();
    if !chosen.is_empty() {
        return chosen;
    }
    let ordinal = |s: &PairScore| library.ordinal(&s.candidate).unwrap_or(usize::MAX);
    scores
        .iter()
        .min_by(|a, b| {
            b.p_y1
                .total_cmp(&a.p_y1)
                .then_with(|| ordinal(a).cmp(&ordinal(b)))
        })
        .map(|s| vec![s.candidate.clone()])
        .unwrap_or_default()
}

/// Knowledge base, vocabulary, and encoder used to fill `[know]` slots.
#[derive(Debug, Clone)]
pub struct KnowledgeModule {
    pub kb: KnowledgeBase,
    pub vocab: KnowledgeVocab,
    pub encoder: KnowledgeEncoder,
}

impl KnowledgeModule {
    pub fn ids(&self, entity: &str) -> Result<Vec<usize>> {
        self.vocab.sequence_to_ids(&self.kb.extract(entity))
    }
}

/// Template + verbalizer + MLM (+ knowledge) with parameters in an external
/// [`ParamStore`].
pub struct PromptModel {
    pub mlm: Box<dyn MaskedLm>,
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub verbalizer_ids: VerbalizerIds,
    pub knowledge: Option<KnowledgeModule>,
    pub max_len: usize,
}

impl PromptModel {
    pub fn new(
        mlm: Box<dyn MaskedLm>,
        template: Template,
        verbalizer: Verbalizer,
        knowledge: Option<KnowledgeModule>,
        max_len: usize,
    ) -> Result<Self> {
        let verbalizer_ids = verbalizer.resolve(mlm.as_ref())?;
        match (&knowledge, template.has_knowledge()) {
            (None, true) => {
                return Err(Error::Config(
                    "template has [know] slots but no knowledge module is configured".into(),
                ))
            }
            (Some(k), _) if k.encoder.config().d_model != mlm.d_model() => {
                return Err(Error::Config(format!(
                    "knowledge encoder width {} differs from MLM width {}",
                    k.encoder.config().d_model,
                    mlm.d_model()
                )))
            }
            _ => {}
        }
        let max_len = max_len.min(mlm.max_len());
        Ok(PromptModel {
            mlm,
            template,
            verbalizer,
            verbalizer_ids,
            knowledge,
            max_len,
        })
    }

    /// Render one pair onto `tape`, encoding knowledge when the template asks for it.
    pub fn build(&self, tape: &mut Tape, original: &str, candidate: &str) -> Result<Rendered> {
        let knowledge = match (&self.knowledge, self.template.has_knowledge()) {
            (Some(k), true) => {
                let ko = k.encoder.encode(tape, &k.ids(original)?)?;
                let kc = k.encoder.encode(tape, &k.ids(candidate)?)?;
                Some((ko, kc))
            }
            _ => None,
        };
        render(
            tape,
            &self.template,
            self.mlm.as_ref(),
            original,
            candidate,
            knowledge,
            self.max_len,
        )
    }

    /// Training closure input for one triplet.
    pub fn training_example(&self, tape: &mut Tape, triplet: &Triplet) -> Result<(Var, usize, usize)> {
        let r = self.build(tape, &triplet.mention_part, &triplet.candidate)?;
        Ok((r.inputs, r.mask_index, self.verbalizer_ids.gold_word(triplet.label)))
    }

    pub fn score_pair(&self, store: &ParamStore, original: &str, candidate: &str) -> Result<PairScore> {
        let mut tape = Tape::new(store);
        let r = self.build(&mut tape, original, candidate)?;
        let dist = mask_distribution(self.mlm.as_ref(), &mut tape, r.inputs, r.mask_index)?;
        let (p_y0, p_y1) = verbalize(&dist, &self.verbalizer_ids)?;
        Ok(PairScore {
            candidate: candidate.to_string(),
            p_y0,
            p_y1,
        })
    }

    /// Predicted standard-term set for a mention given its per-part candidates.
    pub fn predict(
        &self,
        store: &ParamStore,
        mention: &Mention,
        candidates: &[CandidateSet],
        library: &StandardLibrary,
    ) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for (part, set) in mention.parts.iter().zip(candidates) {
            if set.ranked.is_empty() {
                log::warn!("mention part {part:?} has no candidates");
                continue;
            }
            let scores = set
                .ranked
                .iter()
                .map(|(c, _)| self.score_pair(store, part, c))
                .collect::<Result<Vec<_>>>()?;
            out.extend(select_candidates(&scores, library));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::{MlmVocab, ToyMlm, ToyMlmConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count(t: &Template, f: impl Fn(&TemplateSlot) -> bool) -> usize {
        t.slots.iter().filter(|s| f(s)).count()
    }

    #[test]
    fn knowledge_template_parses() {
        let t = parse_template(resolve_template_spec("preset:1")).unwrap();
        assert_eq!(count(&t, |s| matches!(s, TemplateSlot::Placeholder(_))), 2);
        assert_eq!(count(&t, |s| matches!(s, TemplateSlot::Know(_))), 2);
        assert_eq!(t.num_soft(), 2);
        assert_eq!(count(&t, |s| matches!(s, TemplateSlot::Hard(_))), 6);
        assert_eq!(t.slots.last(), Some(&TemplateSlot::Mask));
        let roles: Vec<Role> = t
            .slots
            .iter()
            .filter_map(|s| match s {
                TemplateSlot::Know(r) => Some(*r),
                _ => None,
            })
            .collect();
        assert_eq!(roles, vec![Role::Original, Role::Candidate]);
    }

    #[test]
    fn manual_template_has_no_soft_or_know() {
        let t = parse_template(resolve_template_spec("manual")).unwrap();
        assert_eq!(t.num_soft(), 0);
        assert!(!t.has_knowledge());
        assert_eq!(t.slots.len(), 2 + 7 + 1);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_template("[soft][soft]"),
            Err(Error::TemplateParse { .. })
        ));
        let e = parse_template("[Original Entity][Candidate Entity][Original Entity]").unwrap_err();
        assert!(matches!(e, Error::TemplateParse { position: 35, .. }));
        assert!(parse_template("[Original Entity][bogus][Candidate Entity]").is_err());
        assert!(parse_template("[know][Original Entity][Candidate Entity]").is_err());
        assert!(parse_template("[Original Entity][Candidate Entity][mask][mask]").is_err());
        assert!(parse_template("[Original Entity][Candidate Entity").is_err());
    }

    #[test]
    fn explicit_mask_kept_in_place() {
        let t = parse_template("[Original Entity][mask][Candidate Entity]").unwrap();
        assert_eq!(t.slots[1], TemplateSlot::Mask);
        assert_eq!(t.slots.len(), 3);
    }

    #[test]
    fn all_presets_parse() {
        for (name, spec) in PRESETS {
            let t = parse_template(spec).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(parse_template(&t.to_string()).unwrap().slots, t.slots);
        }
    }

    #[test]
    fn layout_counts_and_truncation() {
        let t = parse_template(resolve_template_spec("preset:1")).unwrap();
        let o = "胃静脉套扎术";
        let c = "胃静脉曲张结扎术";
        let full = layout(&t, o, c, 128).unwrap();
        assert_eq!(full.len(), 6 + 8 + 2 + 2 + 6 + 1 + 2);

        let cut = layout(&t, o, c, 20).unwrap();
        assert_eq!(cut.len(), 20);
        assert!(cut.contains(&Position::Mask));
        assert_eq!(cut.iter().filter(|p| matches!(p, Position::Know(_))).count(), 2);

        // boundaries + 2 know + mask + one char per entity = 7
        assert_eq!(layout(&t, o, c, 7).unwrap().len(), 7);
        assert!(matches!(layout(&t, o, c, 6), Err(Error::Render(_))));
    }

    #[test]
    fn verbalizer_arithmetic() {
        let ids = VerbalizerIds {
            ids: [vec![2, 3], vec![0, 1]],
        };
        // 是 0.4, 对 0.2, 不 0.1, 没 0.1, rest elsewhere
        let (p0, p1) = verbalize(&[0.4, 0.2, 0.1, 0.1, 0.2], &ids).unwrap();
        assert!((p1 - 0.75).abs() < 1e-12);
        assert!((p0 - 0.25).abs() < 1e-12);
        assert_eq!(verbalize(&[1.0, 0.0, 0.0, 0.0, 0.0], &ids).unwrap(), (0.0, 1.0));
        assert_eq!(verbalize(&[0.25, 0.25, 0.25, 0.25, 0.0], &ids).unwrap(), (0.5, 0.5));
        assert!(verbalize(&[0.0, 0.0, 0.0, 0.0, 1.0], &ids).is_err());
    }

    #[test]
    fn verbalizer_validation() {
        assert!(Verbalizer::new(vec![], vec!["是".into()]).is_err());
        assert!(Verbalizer::new(vec!["是".into()], vec!["是".into()]).is_err());
    }

    fn score(c: &str, p1: f64) -> PairScore {
        PairScore {
            candidate: c.into(),
            p_y0: 1.0 - p1,
            p_y1: p1,
        }
    }

    #[test]
    fn selection_rule() {
        let lib = StandardLibrary::new(["A", "B", "C"]);
        assert_eq!(select_candidates(&[score("A", 0.9), score("B", 0.3)], &lib), vec!["A"]);
        assert_eq!(select_candidates(&[score("A", 0.2), score("B", 0.4)], &lib), vec!["B"]);
        assert_eq!(select_candidates(&[score("C", 0.4), score("B", 0.4)], &lib), vec!["B"]);
        assert_eq!(
            select_candidates(&[score("C", 0.6), score("A", 0.7)], &lib),
            vec!["C", "A"]
        );
        assert!(select_candidates(&[], &lib).is_empty());
    }

    fn model(template: &str) -> (ParamStore, PromptModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = MlmVocab::from_texts(["胃静脉套扎术曲张结和的意思相同吗？是对不没"]);
        let cfg = ToyMlmConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 64,
            dropout: 0.0,
            tie_output: true,
        };
        let mlm = ToyMlm::new(&mut store, vocab, cfg, &mut rng).unwrap();
        let mut t = parse_template(resolve_template_spec(template)).unwrap();
        t.init_soft_params(&mut store, &mlm, &mut rng);
        let m = PromptModel::new(Box::new(mlm), t, Verbalizer::default(), None, 64).unwrap();
        (store, m)
    }

    #[test]
    fn soft_slots_start_from_named_embedding() {
        let (store, m) = model("mixed");
        assert_eq!(m.template.soft_params.len(), 4);
        let he = m.mlm.vocab().char_id('和');
        let embed = store.get(store.id("mlm.tok_embed").unwrap());
        assert_eq!(store.get(m.template.soft_params[1]).data, embed.row(he));
    }

    #[test]
    fn knowledge_injected_only_at_know_positions() {
        let (mut store, m) = model("manual");
        let mut t = parse_template(resolve_template_spec("preset:1")).unwrap();
        t.init_soft_params(&mut store, m.mlm.as_ref(), &mut ChaCha8Rng::seed_from_u64(1));
        let (o, c) = ("胃静脉", "胃静脉曲张");
        let positions = layout(&t, o, c, 64).unwrap();
        let run = |ko: Vec<f64>, kc: Vec<f64>| {
            let mut tape = Tape::new(&store);
            let a = tape.constant(Matrix::row_vector(ko));
            let b = tape.constant(Matrix::row_vector(kc));
            let r = render(&mut tape, &t, m.mlm.as_ref(), o, c, Some((a, b)), 64).unwrap();
            tape.value(r.inputs).clone()
        };
        let x = vec![1.0; 8];
        let y = vec![-1.0; 8];
        let base = run(x.clone(), y.clone());
        let swapped = run(y.clone(), x.clone());
        assert_eq!(base.rows, positions.len());
        for r in 0..base.rows {
            let differs = base.row(r) != swapped.row(r);
            assert_eq!(differs, matches!(positions[r], Position::Know(_)), "row {r}");
        }
        let mut bumped = x.clone();
        bumped[0] += 0.5;
        let perturbed = run(bumped, y.clone());
        let changed: Vec<usize> = (0..base.rows).filter(|&r| base.row(r) != perturbed.row(r)).collect();
        assert_eq!(changed.len(), 1);
        assert_eq!(positions[changed[0]], Position::Know(Role::Original));
        assert_eq!(run(x.clone(), y.clone()), base);
    }

    #[test]
    fn knowledge_template_requires_module() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = MlmVocab::from_texts(["是对不没"]);
        let mlm = ToyMlm::new(&mut store, vocab, ToyMlmConfig { d_model: 8, n_heads: 2, ..ToyMlmConfig::default() }, &mut rng).unwrap();
        let t = parse_template(resolve_template_spec("preset:2")).unwrap();
        assert!(matches!(
            PromptModel::new(Box::new(mlm), t, Verbalizer::default(), None, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_returns_nonempty_set() {
        let (store, m) = model("manual");
        let lib = StandardLibrary::new(["胃静脉曲张结扎术", "胃静脉"]);
        let mention = Mention {
            raw: "胃静脉套扎术".into(),
            parts: vec!["胃静脉套扎术".into()],
        };
        let cands = vec![CandidateSet {
            mention_part: "胃静脉套扎术".into(),
            ranked: vec![("胃静脉".into(), 0.5), ("胃静脉曲张结扎术".into(), 0.4)],
        }];
        let p = m.predict(&store, &mention, &cands, &lib).unwrap();
        assert!(!p.is_empty());
        let s = m.score_pair(&store, "胃静脉", "胃静脉").unwrap();
        assert!((s.p_y0 + s.p_y1 - 1.0).abs() < 1e-9);
    }

    fn slot_strategy() -> impl Strategy<Value = TemplateSlot> {
        prop_oneof![
            "[a-z和的吗？]".prop_map(TemplateSlot::Hard),
            Just(TemplateSlot::Soft(None)),
            "[a-z和的]{1,2}".prop_map(|s| TemplateSlot::Soft(Some(s))),
        ]
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(
            pre in proptest::collection::vec(slot_strategy(), 0..4),
            mid in proptest::collection::vec(slot_strategy(), 0..4),
            post in proptest::collection::vec(slot_strategy(), 0..4),
            know_o in any::<bool>(),
            know_c in any::<bool>(),
        ) {
            let mut slots = pre;
            slots.push(TemplateSlot::Placeholder(Role::Original));
            if know_o { slots.push(TemplateSlot::Know(Role::Original)); }
            slots.extend(mid);
            slots.push(TemplateSlot::Placeholder(Role::Candidate));
            if know_c { slots.push(TemplateSlot::Know(Role::Candidate)); }
            slots.extend(post);
            slots.push(TemplateSlot::Mask);
            let parsed = parse_template(&serialize_template(&slots)).unwrap();
            prop_assert_eq!(parsed.slots, slots);
        }

        #[test]
        fn verbalize_sums_to_one_and_ignores_other_mass(
            raw in proptest::collection::vec(0.001f64..1.0, 8),
            extra in 0.0f64..5.0,
        ) {
            let ids = VerbalizerIds { ids: [vec![0, 1], vec![2, 3]] };
            let total: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let (p0, p1) = verbalize(&dist, &ids).unwrap();
            prop_assert!((p0 + p1 - 1.0).abs() < 1e-9);
            let mut more = raw.clone();
            more[7] += extra;
            let total2: f64 = more.iter().sum();
            let dist2: Vec<f64> = more.iter().map(|v| v / total2).collect();
            let (q0, q1) = verbalize(&dist2, &ids).unwrap();
            prop_assert!((p0 - q0).abs() < 1e-12 && (p1 - q1).abs() < 1e-12);
        }
    }
}
