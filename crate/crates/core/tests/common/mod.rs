// Independent reference implementations shared by the integration tests.
// They are deliberately naive: exhaustive scans, full DP tables, exact
// rational comparisons.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;

use kiprompt::autodiff::{Tape, Var};
use kiprompt::candidate::Scheme;
use kiprompt::tensor::ParamStore;
use rand::Rng;

pub fn random_string<R: Rng>(rng: &mut R, alphabet: &[char], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn grams(s: &str, scheme: Scheme) -> HashSet<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = HashSet::new();
    let uni = matches!(scheme, Scheme::CharUnigram | Scheme::UnigramBigram)
        || (scheme == Scheme::CharBigram && chars.len() == 1);
    if uni {
        for c in &chars {
            out.insert(c.to_string());
        }
    }
    if matches!(scheme, Scheme::CharBigram | Scheme::UnigramBigram) {
        for i in 1..chars.len() {
            out.insert(format!("{}{}", chars[i - 1], chars[i]));
        }
    }
    out
}

/// Rank every library term by Jaccard, comparing scores as exact fractions,
/// ties by library position.
pub fn brute_force_top_k(library: &[String], query: &str, scheme: Scheme, k: usize) -> Vec<(String, f64)> {
    let q = grams(query, scheme);
    let mut scored: Vec<(usize, usize, usize)> = library
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let g = grams(t, scheme);
            let inter = q.intersection(&g).count();
            let union = q.union(&g).count();
            (i, inter, union)
        })
        .collect();
    scored.sort_by(|a, b| {
        // a.inter/a.union vs b.inter/b.union, descending
        let lhs = b.1 * a.2;
        let rhs = a.1 * b.2;
        match lhs.cmp(&rhs) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        }
    });
    scored
        .into_iter()
        .take(k)
        .map(|(i, inter, union)| (library[i].clone(), inter as f64 / union as f64))
        .collect()
}

/// Leftmost-longest scan over an explicit item list (first relation per key wins).
pub fn reference_extract(items: &[(String, String)], entity: &str) -> Vec<(usize, String, String)> {
    let mut kb: Vec<(Vec<char>, String, String)> = Vec::new();
    for (k, r) in items {
        if !kb.iter().any(|(_, key, _)| key == k) {
            kb.push((k.chars().collect(), k.clone(), r.clone()));
        }
    }
    let chars: Vec<char> = entity.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut best: Option<&(Vec<char>, String, String)> = None;
        for item in &kb {
            let n = item.0.len();
            if n > 0 && i + n <= chars.len() && chars[i..i + n] == item.0[..] {
                if best.is_none_or(|b| n > b.0.len()) {
                    best = Some(item);
                }
            }
        }
        match best {
            Some((c, k, r)) => {
                out.push((i, k.clone(), r.clone()));
                i += c.len();
            }
            None => i += 1,
        }
    }
    out
}

/// Full (m+1)×(n+1) edit-distance table.
pub fn dp_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn scalar<F: Fn(&mut Tape) -> Var>(store: &ParamStore, f: &F) -> f64 {
    let mut tape = Tape::new(store);
    let out = f(&mut tape);
    tape.value(out).data[0]
}

/// Worst relative error between the tape's gradient and central differences,
/// over every scalar of every parameter. `floor` bounds the denominator.
pub fn finite_difference_error<F>(store: &ParamStore, step: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape);
    let grads = tape.backward(out);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for i in 0..store.get(id).data.len() {
            let x = store.get(id).data[i];
            probe.get_mut(id).data[i] = x + step;
            let up = scalar(&probe, &f);
            probe.get_mut(id).data[i] = x - step;
            let down = scalar(&probe, &f);
            probe.get_mut(id).data[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
