//! Deliberately naive reference versions of the core text algorithms.

use std::collections::{BTreeMap, BTreeSet};

use seeker_core::corpus::{Bm25Params, Document};

/// Lowercase, strip ASCII punctuation, split on whitespace, drop articles.
pub fn tokens(text: &str) -> Vec<String> {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Multiset overlap by pairwise matching with a used flag per gold token.
pub fn overlap(pred: &[String], gold: &[String]) -> usize {
    let mut used = vec![false; gold.len()];
    let mut common = 0;
    for p in pred {
        for (j, g) in gold.iter().enumerate() {
            if !used[j] && g == p {
                used[j] = true;
                common += 1;
                break;
            }
        }
    }
    common
}

pub fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let common = overlap(pred, gold) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / pred.len() as f64;
    let recall = common / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1(pred: &str, gold: &str) -> f64 {
    f1_tokens(&tokens(pred), &tokens(gold))
}

pub fn trigrams(text: &str) -> BTreeSet<Vec<String>> {
    ngrams(&tokens(text), 3)
}

pub fn ngrams(toks: &[String], n: usize) -> BTreeSet<Vec<String>> {
    if toks.len() < n {
        return BTreeSet::new();
    }
    (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
}

/// True when some n-gram occurs twice in `toks`.
pub fn repeats_ngram(toks: &[String], n: usize) -> bool {
    if toks.len() < n {
        return false;
    }
    let grams: Vec<&[String]> = (0..=toks.len() - n).map(|i| &toks[i..i + n]).collect();
    (0..grams.len()).any(|i| (i + 1..grams.len()).any(|j| grams[i] == grams[j]))
}

/// The constrained-decoding contract checked from scratch.
pub fn decode_ok(
    output: &str,
    min_length: usize,
    banned: &BTreeSet<Vec<String>>,
    n: usize,
    block_self: bool,
) -> bool {
    let toks = tokens(output);
    if toks.is_empty() || toks.len() < min_length {
        return false;
    }
    if n == 0 {
        return true;
    }
    if ngrams(&toks, n).iter().any(|g| banned.contains(g)) {
        return false;
    }
    !(block_self && repeats_ngram(&toks, n))
}

/// Location of a sentence in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SentenceRef {
    pub doc_id: String,
    pub index: usize,
}

/// Highest-F1 candidate compared as exact fractions `2c / (p + g)`, ties to
/// the smallest (document id, sentence index). Zero-overlap candidates are
/// never selected.
fn best_by_f1<'a>(
    candidates: impl IntoIterator<Item = (SentenceRef, &'a str)>,
    target: &str,
) -> Option<(SentenceRef, f64)> {
    let target_toks = tokens(target);
    let mut best: Option<(SentenceRef, u64, u64)> = None;
    for (r, text) in candidates {
        let toks = tokens(text);
        let num = 2 * overlap(&toks, &target_toks) as u64;
        let den = (toks.len() + target_toks.len()) as u64;
        if num == 0 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((br, bn, bd)) => num * bd > bn * den || (num * bd == bn * den && r < *br),
        };
        if better {
            best = Some((r, num, den));
        }
    }
    best.map(|(r, num, den)| (r, num as f64 / den as f64))
}

fn eligible<'a>(docs: &'a [Document], target: &'a str, exclude_doc: &'a str) -> impl Iterator<Item = (SentenceRef, &'a str)> {
    docs.iter()
        .filter(move |d| d.id != exclude_doc)
        .flat_map(|d| d.sentences.iter().map(move |s| (d, s)))
        .filter(move |(_, s)| s.text.trim() != target.trim())
        .map(|(d, s)| {
            (
                SentenceRef {
                    doc_id: d.id.clone(),
                    index: s.index,
                },
                s.text.as_str(),
            )
        })
}

/// Scans every sentence of every other document for the highest F1 against
/// `target`.
pub fn exhaustive_nearest(docs: &[Document], target: &str, exclude_doc: &str) -> Option<(SentenceRef, f64)> {
    best_by_f1(eligible(docs, target, exclude_doc), target)
}

/// The same scan restricted to the `pool` best eligible sentences under
/// [`exhaustive_bm25`].
pub fn pooled_nearest(
    docs: &[Document],
    target: &str,
    exclude_doc: &str,
    pool: usize,
    params: Bm25Params,
) -> Option<(SentenceRef, f64)> {
    let text: BTreeMap<SentenceRef, &str> = eligible(docs, target, exclude_doc).collect();
    let ranked: Vec<(SentenceRef, &str)> = exhaustive_bm25(docs, target, params)
        .into_iter()
        .map(|(doc_id, index, _)| SentenceRef { doc_id, index })
        .filter_map(|r| text.get(&r).map(|t| (r, *t)))
        .take(pool)
        .collect();
    best_by_f1(ranked, target)
}

/// Rank of `r` among eligible sentences under [`exhaustive_bm25`], if it
/// scores at all.
pub fn bm25_rank(docs: &[Document], target: &str, exclude_doc: &str, r: &SentenceRef, params: Bm25Params) -> Option<usize> {
    let eligible: BTreeSet<SentenceRef> = eligible(docs, target, exclude_doc).map(|(r, _)| r).collect();
    exhaustive_bm25(docs, target, params)
        .into_iter()
        .map(|(doc_id, index, _)| SentenceRef { doc_id, index })
        .filter(|x| eligible.contains(x))
        .position(|x| x == *r)
}

/// BM25 over sentences by direct evaluation of the formula, query terms
/// deduplicated and summed in sorted order. Returns `(doc_id, index, score)`
/// for every sentence with a positive score, best first, ties by corpus
/// order.
pub fn exhaustive_bm25(docs: &[Document], query: &str, params: Bm25Params) -> Vec<(String, usize, f64)> {
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let units: Vec<(String, usize, Vec<String>)> = sorted
        .iter()
        .flat_map(|d| d.sentences.iter().map(|s| (d.id.clone(), s.index, tokens(&s.text))))
        .filter(|(_, _, t)| !t.is_empty())
        .collect();
    let n = units.len();
    if n == 0 {
        return Vec::new();
    }
    let avg = units.iter().map(|u| u.2.len()).sum::<usize>() as f64 / n as f64;
    let terms: BTreeSet<String> = tokens(query).into_iter().collect();
    let df: BTreeMap<&String, usize> = terms
        .iter()
        .map(|t| (t, units.iter().filter(|u| u.2.contains(t)).count()))
        .collect();
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, (_, _, toks)) in units.iter().enumerate() {
        let mut score = 0.0;
        let mut hit = false;
        for term in &terms {
            let tf = toks.iter().filter(|t| *t == term).count();
            if tf == 0 {
                continue;
            }
            hit = true;
            let df = df[term] as f64;
            let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
            let tf = tf as f64;
            let norm = params.k1 * (1.0 - params.b + params.b * toks.len() as f64 / avg);
            score += idf * tf * (params.k1 + 1.0) / (tf + norm);
        }
        if hit {
            scored.push((i, score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .map(|(i, s)| (units[i].0.clone(), units[i].1, s))
        .collect()
}
