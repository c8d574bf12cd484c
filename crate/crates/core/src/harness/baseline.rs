use std::collections::{BTreeSet, HashMap};

use crate::corpus::{evaluate_accuracy, GoldAlignment, StandardLibrary};
use crate::error::Result;

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest library term per part (ties to the lower ordinal), unioned.
pub fn edit_distance_predict(parts: &[String], library: &StandardLibrary) -> BTreeSet<String> {
    parts
        .iter()
        .filter_map(|part| {
            library
                .terms()
                .iter()
                .min_by_key(|t| levenshtein(part, t))
                .cloned()
        })
        .collect()
}

/// Set accuracy of the edit-distance predictor over `rows`.
pub fn baseline_edit_distance(rows: &[GoldAlignment], library: &StandardLibrary) -> Result<f64> {
    let preds: HashMap<usize, BTreeSet<String>> = rows
        .iter()
        .map(|r| (r.id, edit_distance_predict(&r.mention.parts, library)))
        .collect();
    let golds: HashMap<usize, BTreeSet<String>> =
        rows.iter().map(|r| (r.id, r.gold_parts.clone())).collect();
    evaluate_accuracy(&preds, &golds)
}
