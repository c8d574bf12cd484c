//! Stage-1 retrieval: Jaccard similarity over character n-gram sets.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{GoldAlignment, StandardLibrary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[serde(alias = "unigram")]
    CharUnigram,
    #[serde(alias = "bigram")]
    CharBigram,
    #[default]
    #[serde(alias = "unigram+bigram")]
    UnigramBigram,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char-unigram" | "unigram" => Ok(Scheme::CharUnigram),
            "char-bigram" | "bigram" => Ok(Scheme::CharBigram),
            "unigram+bigram" | "unigram-bigram" => Ok(Scheme::UnigramBigram),
            other => Err(Error::InvalidArgument(format!(
                "unknown segmentation scheme {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::CharUnigram => "char-unigram",
            Scheme::CharBigram => "char-bigram",
            Scheme::UnigramBigram => "unigram+bigram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSet(BTreeSet<String>);

impl TokenSet {
    pub fn tokens(&self) -> &BTreeSet<String> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSet {
    fn from_iter<T: IntoIterator<Item = S>>(iter: T) -> Self {
        TokenSet(
            iter.into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }
}

pub fn segment(entity: &str, scheme: Scheme) -> TokenSet {
    let chars: Vec<char> = entity.chars().collect();
    let unigrams = || chars.iter().map(|c| c.to_string());
    let bigrams = || chars.windows(2).map(|w| w.iter().collect::<String>());
    match scheme {
        Scheme::CharUnigram => unigrams().collect(),
        Scheme::CharBigram if chars.len() < 2 => unigrams().collect(),
        Scheme::CharBigram => bigrams().collect(),
        Scheme::UnigramBigram => unigrams().chain(bigrams()).collect(),
    }
}

pub fn jaccard(a: &TokenSet, b: &TokenSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "jaccard similarity of an empty token set is undefined".into(),
        ));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.0.iter().filter(|t| large.0.contains(*t)).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_part: String,
    pub ranked: Vec<(String, f64)>,
}

impl CandidateSet {
    pub fn terms(&self) -> Vec<String> {
        self.ranked.iter().map(|(t, _)| t.clone()).collect()
    }
}

/// Library index with pre-segmented terms; immutable once built.
#[derive(Debug, Clone)]
pub struct CandidateMatcher {
    library: StandardLibrary,
    scheme: Scheme,
    term_tokens: Vec<TokenSet>,
}

impl CandidateMatcher {
    pub fn new(library: StandardLibrary, scheme: Scheme) -> Result<Self> {
        if library.is_empty() {
            return Err(Error::InvalidArgument("standard library is empty".into()));
        }
        let term_tokens = library.terms().iter().map(|t| segment(t, scheme)).collect();
        Ok(CandidateMatcher {
            library,
            scheme,
            term_tokens,
        })
    }

    pub fn library(&self) -> &StandardLibrary {
        &self.library
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// The `k` highest-scoring terms; equal scores keep library order.
    pub fn top_k(&self, part: &str, k: usize) -> Result<CandidateSet> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let query = segment(part, self.scheme);
        if query.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "mention part {part:?} has no tokens"
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .term_tokens
            .iter()
            .enumerate()
            .map(|(i, toks)| Ok((i, jaccard(&query, toks)?)))
            .collect::<Result<_>>()?;
        // stable sort keeps ordinal order among equal scores
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(CandidateSet {
            mention_part: part.to_string(),
            ranked: scored
                .into_iter()
                .map(|(i, s)| (self.library.terms()[i].clone(), s))
                .collect(),
        })
    }

    /// Candidate sets for every part of a mention.
    pub fn candidates_for(&self, parts: &[String], k: usize) -> Result<Vec<CandidateSet>> {
        parts.iter().map(|p| self.top_k(p, k)).collect()
    }

    /// Fraction of gold terms found among the top-k candidates of any part
    /// of their mention.
    pub fn recall_at_k(&self, alignments: &[GoldAlignment], k: usize) -> Result<f64> {
        let mut found = 0usize;
        let mut total = 0usize;
        for row in alignments {
            let sets = self.candidates_for(&row.mention.parts, k)?;
            for gold in &row.gold_parts {
                total += 1;
                if sets.iter().any(|s| s.ranked.iter().any(|(t, _)| t == gold)) {
                    found += 1;
                }
            }
        }
        if total == 0 {
            return Ok(1.0);
        }
        Ok(found as f64 / total as f64)
    }
}

/// `mention_part<TAB>rank<TAB>term<TAB>score` lines, rank starting at 1.
pub fn format_candidates(sets: &[CandidateSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for (rank, (term, score)) in set.ranked.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                set.mention_part,
                rank + 1,
                term,
                score
            ));
        }
    }
    out
}
