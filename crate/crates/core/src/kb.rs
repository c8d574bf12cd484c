//! Subject–predicate knowledge items and longest-match extraction.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "[NULL]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const NULL_ID: usize = 0;
pub const PAD_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub key: String,
    pub relation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    items: Vec<KnowledgeItem>,
    by_key: HashMap<String, String>,
    /// Longest key, in characters.
    max_key_len: usize,
}

impl KnowledgeBase {
    /// Deduplicate items; the first relation seen for a key wins.
    pub fn from_items<I>(items: I) -> Self
    where
        I: IntoIterator<Item = KnowledgeItem>,
    {
        let mut kb = KnowledgeBase::default();
        for item in items {
            kb.insert(item, None);
        }
        kb
    }

    fn insert(&mut self, item: KnowledgeItem, line: Option<usize>) {
        match self.by_key.get(&item.key) {
            Some(existing) if *existing == item.relation => {}
            Some(existing) => {
                let at = line.map(|l| format!("line {l}: ")).unwrap_or_default();
                log::warn!(
                    "{at}key {:?} already has relation {existing:?}, ignoring {:?}",
                    item.key,
                    item.relation
                );
            }
            None => {
                self.max_key_len = self.max_key_len.max(item.key.chars().count());
                self.by_key.insert(item.key.clone(), item.relation.clone());
                self.items.push(item);
            }
        }
    }

    /// Load `subject<TAB>predicate[<TAB>object...]` rows. Malformed rows
    /// are skipped with a warning; a file yielding no items is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kb = KnowledgeBase::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let key = cols.next().unwrap_or("").trim();
            let relation = cols.next().unwrap_or("").trim();
            if key.is_empty() || relation.is_empty() {
                log::warn!("{}:{lineno}: malformed knowledge row skipped", path.display());
                continue;
            }
            kb.insert(
                KnowledgeItem {
                    key: key.to_string(),
                    relation: relation.to_string(),
                },
                Some(lineno),
            );
        }
        if kb.items.is_empty() {
            return Err(Error::Malformed(format!(
                "knowledge file {} contains no items",
                path.display()
            )));
        }
        Ok(kb)
    }

    /// Write the deduplicated KB as `key<TAB>relation` lines.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&format!("{}\t{}\n", item.key, item.relation));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn items(&self) -> &[KnowledgeItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn relation(&self, key: &str) -> Option<&str> {
        self.by_key.get(key).map(String::as_str)
    }

    pub fn max_key_len(&self) -> usize {
        self.max_key_len
    }

    /// Greedy left-to-right scan taking the longest key at each position.
    pub fn extract(&self, entity: &str) -> KnowledgeSequence {
        let chars: Vec<char> = entity.chars().collect();
        let mut matches = Vec::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            let longest = (1..=self.max_key_len.min(chars.len() - pos))
                .rev()
                .find_map(|len| {
                    buf.clear();
                    buf.extend(&chars[pos..pos + len]);
                    self.by_key.get_key_value(buf.as_str()).map(|(k, r)| (len, k, r))
                });
            match longest {
                Some((len, key, relation)) => {
                    matches.push(KnowledgeMatch {
                        start: pos,
                        key: key.clone(),
                        relation: relation.clone(),
                    });
                    pos += len;
                }
                None => pos += 1,
            }
        }
        KnowledgeSequence { matches }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeMatch {
    /// Character offset of the match in the entity.
    pub start: usize,
    pub key: String,
    pub relation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeSequence {
    pub matches: Vec<KnowledgeMatch>,
}

impl KnowledgeSequence {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(&str, &str)> {
        self.matches
            .iter()
            .map(|m| (m.key.as_str(), m.relation.as_str()))
            .collect()
    }
}

pub fn extract_knowledge(entity: &str, kb: &KnowledgeBase) -> KnowledgeSequence {
    kb.extract(entity)
}

/// Dense ids for knowledge keys and relations; `[NULL]` = 0, `[PAD]` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeVocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl KnowledgeVocab {
    pub fn build(kb: &KnowledgeBase) -> Self {
        let mut vocab = KnowledgeVocab {
            tokens: Vec::new(),
            id_of: HashMap::new(),
        };
        vocab.push(NULL_TOKEN);
        vocab.push(PAD_TOKEN);
        for item in kb.items() {
            vocab.push(&item.key);
            vocab.push(&item.relation);
        }
        vocab
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(NULL_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(PAD_TOKEN)
        {
            return Err(Error::Checkpoint(
                "knowledge vocab must start with [NULL], [PAD]".into(),
            ));
        }
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(KnowledgeVocab { tokens, id_of })
    }

    fn push(&mut self, token: &str) {
        if !self.id_of.contains_key(token) {
            self.id_of.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` listing.
    pub fn listing(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    /// `[k1, r1, k2, r2, ...]`, or `[NULL]` for an empty sequence.
    pub fn sequence_to_ids(&self, seq: &KnowledgeSequence) -> Result<Vec<usize>> {
        if seq.is_empty() {
            return Ok(vec![NULL_ID]);
        }
        let lookup = |t: &str| {
            self.id(t).ok_or_else(|| {
                Error::InvalidArgument(format!("knowledge token {t:?} not in vocab"))
            })
        };
        let mut ids = Vec::with_capacity(seq.len() * 2);
        for m in &seq.matches {
            ids.push(lookup(&m.key)?);
            ids.push(lookup(&m.relation)?);
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(k: &str, r: &str) -> KnowledgeItem {
        KnowledgeItem {
            key: k.into(),
            relation: r.into(),
        }
    }

    #[test]
    fn extraction_examples() {
        let kb = KnowledgeBase::from_items([
            item("胃", "部位"),
            item("静脉", "部位"),
            item("套扎术", "手术"),
        ]);
        let seq = kb.extract("胃静脉套扎术");
        assert_eq!(
            seq.pairs(),
            vec![("胃", "部位"), ("静脉", "部位"), ("套扎术", "手术")]
        );
        assert!(kb.extract("心脏").is_empty());

        let kb = KnowledgeBase::from_items([item("静脉", "部位"), item("静脉曲张", "症状")]);
        assert_eq!(kb.extract("静脉曲张").pairs(), vec![("静脉曲张", "症状")]);
    }

    #[test]
    fn load_dedups_and_keeps_first_relation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.tsv");
        std::fs::write(
            &path,
            "胃\t部位\t胃部\n胃\t部位\n胃\t器官\nbad-row\n静脉\t部位\n\t手术\n",
        )
        .unwrap();
        let kb = KnowledgeBase::load(&path).unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.relation("胃"), Some("部位"));
        assert_eq!(kb.max_key_len(), 2);

        std::fs::write(&path, "").unwrap();
        assert!(KnowledgeBase::load(&path).is_err());
    }

    #[test]
    fn vocab_counts_and_ids() {
        let kb = KnowledgeBase::from_items([
            item("胃", "部位"),
            item("静脉", "部位"),
            item("套扎术", "手术"),
        ]);
        let vocab = KnowledgeVocab::build(&kb);
        assert_eq!(vocab.len(), 7);
        assert_eq!(vocab.id(NULL_TOKEN), Some(NULL_ID));
        assert_eq!(vocab.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(vocab, KnowledgeVocab::build(&kb.clone()));

        let seq = kb.extract("胃");
        assert_eq!(
            vocab.sequence_to_ids(&seq).unwrap(),
            vec![vocab.id("胃").unwrap(), vocab.id("部位").unwrap()]
        );
        assert_eq!(
            vocab.sequence_to_ids(&KnowledgeSequence::default()).unwrap(),
            vec![NULL_ID]
        );
        assert_eq!(vocab.sequence_to_ids(&kb.extract("胃静脉")).unwrap().len(), 4);

        let other = KnowledgeBase::from_items([item("肝", "部位")]);
        assert!(vocab.sequence_to_ids(&other.extract("肝")).is_err());
    }

    #[test]
    fn vocab_round_trips_through_token_list() {
        let kb = KnowledgeBase::from_items([item("胃", "部位")]);
        let vocab = KnowledgeVocab::build(&kb);
        let back = KnowledgeVocab::from_tokens(vocab.tokens().to_vec()).unwrap();
        assert_eq!(back.id("部位"), vocab.id("部位"));
        assert_eq!(vocab.listing(), "[NULL]\t0\n[PAD]\t1\n胃\t2\n部位\t3\n");
    }

    fn kb_strategy() -> impl Strategy<Value = Vec<(String, String)>> {
        proptest::collection::vec(("[abc]{1,3}", "[xy]"), 1..8)
    }

    proptest! {
        #[test]
        fn spans_reconstruct_entity(items in kb_strategy(), entity in "[abcd]{1,12}") {
            let kb = KnowledgeBase::from_items(items.iter().map(|(k, r)| item(k, r)));
            let seq = kb.extract(&entity);
            let chars: Vec<char> = entity.chars().collect();
            let mut rebuilt = String::new();
            let mut cursor = 0;
            for m in &seq.matches {
                prop_assert!(m.start >= cursor);
                rebuilt.extend(&chars[cursor..m.start]);
                rebuilt.push_str(&m.key);
                cursor = m.start + m.key.chars().count();
            }
            rebuilt.extend(&chars[cursor..]);
            prop_assert_eq!(rebuilt, entity);
        }

        #[test]
        fn extraction_ignores_row_order(items in kb_strategy(), entity in "[abcd]{1,12}") {
            // first-wins dedup first, then any permutation of the unique items
            let base = KnowledgeBase::from_items(items.iter().map(|(k, r)| item(k, r)));
            let mut shuffled = base.items().to_vec();
            shuffled.reverse();
            let other = KnowledgeBase::from_items(shuffled);
            prop_assert_eq!(base.extract(&entity), other.extract(&entity));
        }

        #[test]
        fn ids_are_injective(items in kb_strategy(), a in "[abcd]{1,8}", b in "[abcd]{1,8}") {
            let kb = KnowledgeBase::from_items(items.iter().map(|(k, r)| item(k, r)));
            let vocab = KnowledgeVocab::build(&kb);
            let (sa, sb) = (kb.extract(&a), kb.extract(&b));
            let (ia, ib) = (vocab.sequence_to_ids(&sa).unwrap(), vocab.sequence_to_ids(&sb).unwrap());
            prop_assert_eq!(sa.pairs() == sb.pairs(), ia == ib);
        }
    }
}
