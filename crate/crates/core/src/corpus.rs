//! Mentions, the standard term library, and the split/label/merge rules that
//! turn composite mentions into binary (part, candidate) decisions and back.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Display;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical separator between sub-entities in every output.
pub const DELIMITER: &str = "##";

/// Separator and junk-character sets used by [`normalize_delimiters`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delimiters {
    pub separators: Vec<String>,
    pub junk: Vec<char>,
}

impl Default for Delimiters {
    fn default() -> Self {
        Delimiters {
            separators: ["；", ";", "，", ",", "、", "+", "##"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            junk: vec![
                ' ', '\t', '\u{3000}', '#', '"', '\'', '“', '”', '‘', '’', '。', '!', '！', '?',
                '？', '`', '*', '~',
            ],
        }
    }
}

enum Piece {
    Sep,
    Char(char),
}

fn scan_once(text: &str, delims: &Delimiters, separators: &[&str]) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(sep) = separators.iter().find(|s| rest.starts_with(**s)) {
            pieces.push(Piece::Sep);
            rest = &rest[sep.len()..];
            continue;
        }
        if !delims.junk.contains(&c) {
            pieces.push(Piece::Char(c));
        }
        rest = &rest[c.len_utf8()..];
    }
    let mut parts = vec![String::new()];
    for piece in pieces {
        match piece {
            Piece::Sep => parts.push(String::new()),
            Piece::Char(c) => parts.last_mut().unwrap().push(c),
        }
    }
    parts.retain(|p| !p.trim().is_empty());
    parts
}

/// Map every configured separator to `##`, drop junk characters, collapse
/// runs of delimiters and strip them from both ends.
pub fn normalize_delimiters(raw: &str, delims: &Delimiters) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::Malformed("empty entity string".into()));
    }
    // longest separators first so "##" wins over a hypothetical "#"
    let mut separators: Vec<&str> = delims
        .separators
        .iter()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect();
    separators.sort_by_key(|s| std::cmp::Reverse(s.chars().count()));

    let mut current = raw.to_string();
    // junk removal can splice new separator occurrences together; iterate to a fixpoint
    loop {
        let next = scan_once(&current, delims, &separators).join(DELIMITER);
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Err(Error::Malformed(format!(
            "entity {raw:?} is empty after cleaning"
        )));
    }
    Ok(current)
}

pub fn split_entity(normalized: &str) -> Vec<String> {
    normalized.split(DELIMITER).map(str::to_string).collect()
}

/// A raw clinical mention and its cleaned sub-entities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub raw: String,
    pub parts: Vec<String>,
}

impl Mention {
    pub fn parse(raw: &str, delims: &Delimiters) -> Result<Self> {
        let normalized = normalize_delimiters(raw, delims)?;
        Ok(Mention {
            raw: raw.to_string(),
            parts: split_entity(&normalized),
        })
    }

    pub fn normalized(&self) -> String {
        self.parts.join(DELIMITER)
    }
}

/// The controlled vocabulary of standard terms, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StandardLibrary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl StandardLibrary {
    /// Build from terms; later duplicates are dropped with a warning.
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lib = StandardLibrary::default();
        for term in terms {
            let term = term.into();
            if lib.index.contains_key(&term) {
                log::warn!("duplicate standard term {term:?} dropped");
                continue;
            }
            lib.index.insert(term.clone(), lib.terms.len());
            lib.terms.push(term);
        }
        lib
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lib = Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
        if lib.is_empty() {
            return Err(Error::Malformed(format!(
                "standard library {} has no terms",
                path.display()
            )));
        }
        Ok(lib)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn ordinal(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }
}

/// The classifier's unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub mention_part: String,
    pub candidate: String,
    pub label: u8,
}

/// One annotated dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAlignment {
    pub id: usize,
    pub mention: Mention,
    pub gold_parts: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relationship {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl GoldAlignment {
    pub fn relationship(&self) -> Relationship {
        match (self.mention.parts.len() > 1, self.gold_parts.len() > 1) {
            (false, false) => Relationship::OneToOne,
            (false, true) => Relationship::OneToMany,
            (true, false) => Relationship::ManyToOne,
            (true, true) => Relationship::ManyToMany,
        }
    }
}

/// Read a `raw_mention<TAB>gold_terms` file. Rows whose gold side is empty
/// after cleaning are dropped with a warning; gold terms missing from the
/// library are a hard error.
pub fn load_dataset(
    path: impl AsRef<Path>,
    library: &StandardLibrary,
    delims: &Delimiters,
) -> Result<Vec<GoldAlignment>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((raw, gold)) = line.split_once('\t') else {
            return Err(Error::Malformed(format!(
                "{}:{lineno}: expected mention<TAB>gold_terms",
                path.display()
            )));
        };
        let mention = Mention::parse(raw, delims).map_err(|e| {
            Error::Malformed(format!("{}:{lineno}: {e}", path.display()))
        })?;
        let gold_parts: BTreeSet<String> = match normalize_delimiters(gold, delims) {
            Ok(g) => split_entity(&g).into_iter().collect(),
            Err(_) => {
                log::warn!(
                    "{}:{lineno}: gold side empty after cleaning, row dropped",
                    path.display()
                );
                continue;
            }
        };
        if let Some(missing) = gold_parts.iter().find(|g| !library.contains(g)) {
            return Err(Error::Data(format!(
                "{}:{lineno}: gold term {missing:?} not in standard library",
                path.display()
            )));
        }
        rows.push(GoldAlignment {
            id: rows.len(),
            mention,
            gold_parts,
        });
    }
    Ok(rows)
}

pub fn write_dataset(path: impl AsRef<Path>, rows: &[GoldAlignment]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in rows {
        let gold: Vec<&str> = row.gold_parts.iter().map(String::as_str).collect();
        out.push_str(&row.mention.raw);
        out.push('\t');
        out.push_str(&gold.join(DELIMITER));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One triplet per (part, candidate); label 1 iff the candidate is a gold term.
pub fn build_triplets(
    mention: &Mention,
    candidates: &[Vec<String>],
    gold: &GoldAlignment,
    library: &StandardLibrary,
) -> Result<Vec<Triplet>> {
    if let Some(missing) = gold.gold_parts.iter().find(|g| !library.contains(g)) {
        return Err(Error::Data(format!(
            "mention #{} ({:?}): gold term {missing:?} not in standard library",
            gold.id, gold.mention.raw
        )));
    }
    if candidates.len() != mention.parts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidate lists for {} mention parts",
            candidates.len(),
            mention.parts.len()
        )));
    }
    let mut triplets = Vec::new();
    for (part, cands) in mention.parts.iter().zip(candidates) {
        for cand in cands {
            triplets.push(Triplet {
                mention_part: part.clone(),
                candidate: cand.clone(),
                label: u8::from(gold.gold_parts.contains(cand)),
            });
        }
    }
    Ok(triplets)
}

/// Join selected terms with `##` in library order. Terms unknown to the
/// library sort after known ones, lexicographically.
pub fn merge_predictions<'a, I>(selected: I, library: &StandardLibrary) -> Result<String>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut terms: Vec<&String> = selected.into_iter().collect();
    if terms.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot merge an empty prediction set".into(),
        ));
    }
    terms.sort_by(|a, b| {
        let ka = (library.ordinal(a).unwrap_or(usize::MAX), a.as_str());
        let kb = (library.ordinal(b).unwrap_or(usize::MAX), b.as_str());
        ka.cmp(&kb)
    });
    terms.dedup();
    Ok(terms
        .iter()
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join(DELIMITER))
}

/// Fraction of mentions whose predicted term set equals the gold set exactly.
pub fn evaluate_accuracy<K>(
    predictions: &HashMap<K, BTreeSet<String>>,
    golds: &HashMap<K, BTreeSet<String>>,
) -> Result<f64>
where
    K: Eq + Hash + Display + Ord,
{
    let mut missing: Vec<String> = Vec::new();
    let mut unexpected: Vec<&K> = predictions.keys().filter(|k| !golds.contains_key(k)).collect();
    let mut absent: Vec<&K> = golds.keys().filter(|k| !predictions.contains_key(k)).collect();
    unexpected.sort();
    absent.sort();
    missing.extend(absent.iter().map(|k| format!("no prediction for {k}")));
    missing.extend(unexpected.iter().map(|k| format!("no gold for {k}")));
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "prediction/gold key mismatch: {}",
            missing.join("; ")
        )));
    }
    if golds.is_empty() {
        return Err(Error::Data("no mentions to evaluate".into()));
    }
    let correct = golds
        .iter()
        .filter(|(k, gold)| predictions[*k] == **gold)
        .count();
    Ok(correct as f64 / golds.len() as f64)
}
