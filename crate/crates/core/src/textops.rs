//! Text primitives shared by every stage: normalization, token-level F1,
//! sentence splitting, n-grams and entity spans.
//!
//! Everything here is a pure function of its input.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
}

/// Lowercased, punctuation-free, article-free tokens with the byte range
/// each token came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizedTokens {
    tokens: Vec<String>,
    spans: Vec<Range<usize>>,
}

impl NormalizedTokens {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Byte offsets of each token in the text it was normalized from.
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// SQuAD-style normalization: lowercase, drop ASCII punctuation, drop the
/// articles `a`/`an`/`the`, split on whitespace.
pub fn normalize(text: &str) -> NormalizedTokens {
    let mut out = NormalizedTokens::default();
    for (range, chunk) in whitespace_chunks(text) {
        let cleaned: String = chunk
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .flat_map(char::to_lowercase)
            .collect();
        if cleaned.is_empty() || ARTICLES.contains(&cleaned.as_str()) {
            continue;
        }
        out.tokens.push(cleaned);
        out.spans.push(range);
    }
    out
}

/// Token-level F1 over multisets: `2·|pred ∩ gold| / (|pred| + |gold|)`.
/// Zero when either side is empty.
pub fn f1_overlap(pred: &NormalizedTokens, gold: &NormalizedTokens) -> f64 {
    f1_tokens(pred.tokens(), gold.tokens())
}

pub(crate) fn f1_tokens<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::with_capacity(gold.len());
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (pred.len() + gold.len()) as f64
}

/// Convenience wrapper normalizing both strings first.
pub fn f1_text(pred: &str, gold: &str) -> f64 {
    f1_overlap(&normalize(pred), &normalize(gold))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte range of `text` inside the source.
    pub range: Range<usize>,
}

/// Rule-based splitter: a whitespace chunk ending in `.`, `!` or `?`
/// (optionally followed by closing quotes or brackets) ends a sentence unless
/// it is a listed abbreviation, a single-letter initial, or the next chunk
/// starts in lowercase.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

const DEFAULT_ABBREVIATIONS: &str = include_str!("../data/abbreviations.txt");

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::from_list(DEFAULT_ABBREVIATIONS)
    }
}

impl SentenceSplitter {
    /// Parses a line-delimited abbreviation list; `#` starts a comment line.
    pub fn from_list(list: &str) -> Self {
        let abbreviations = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.trim_end_matches('.').to_lowercase())
            .collect();
        Self { abbreviations }
    }

    pub fn from_file(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::from_list(&fs::read_to_string(path)?))
    }

    pub fn is_abbreviation(&self, word: &str) -> bool {
        self.abbreviations.contains(&word.to_lowercase())
    }

    pub fn split(&self, text: &str) -> Vec<SentenceSpan> {
        let chunks: Vec<_> = whitespace_chunks(text).collect();
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        for (i, (range, chunk)) in chunks.iter().enumerate() {
            let begin = *start.get_or_insert(range.start);
            let next = chunks.get(i + 1).map(|(_, c)| *c);
            if next.is_none() || self.ends_sentence(chunk, next.unwrap()) {
                let sentence = &text[begin..range.end];
                spans.push(SentenceSpan {
                    doc_id: String::new(),
                    index: spans.len(),
                    text: sentence.to_string(),
                    token_count: normalize(sentence).len(),
                    range: begin..range.end,
                });
                start = None;
            }
        }
        spans
    }

    fn ends_sentence(&self, chunk: &str, next: &str) -> bool {
        let core = chunk.trim_end_matches(is_closer);
        let Some(last) = core.chars().last() else {
            return false;
        };
        if !matches!(last, '.' | '!' | '?') {
            return false;
        }
        if next
            .trim_start_matches(is_opener)
            .chars()
            .next()
            .is_some_and(char::is_lowercase)
        {
            return false;
        }
        if last == '.' && !core.ends_with("..") {
            let word = core.trim_start_matches(is_opener).trim_end_matches('.');
            let mut chars = word.chars();
            let initial = matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase());
            if initial || self.is_abbreviation(word) {
                return false;
            }
        }
        true
    }
}

fn default_splitter() -> &'static SentenceSplitter {
    static SPLITTER: OnceLock<SentenceSplitter> = OnceLock::new();
    SPLITTER.get_or_init(SentenceSplitter::default)
}

/// Splits with the built-in abbreviation list.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    default_splitter().split(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramSet {
    n: usize,
    grams: BTreeSet<Vec<String>>,
}

impl NGramSet {
    pub fn new(n: usize) -> Result<Self, TextError> {
        if n == 0 {
            return Err(TextError::ZeroOrder);
        }
        Ok(Self {
            n,
            grams: BTreeSet::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn contains<S: AsRef<str>>(&self, gram: &[S]) -> bool {
        gram.len() == self.n
            && self
                .grams
                .contains(&gram.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<String>> {
        self.grams.iter()
    }

    /// Adds every contiguous window of `tokens`.
    pub fn extend_from<S: AsRef<str>>(&mut self, tokens: &[S]) {
        for window in tokens.windows(self.n) {
            self.grams
                .insert(window.iter().map(|s| s.as_ref().to_string()).collect());
        }
    }

    pub fn union_with(&mut self, other: &NGramSet) {
        debug_assert_eq!(self.n, other.n);
        self.grams.extend(other.grams.iter().cloned());
    }

    pub fn is_disjoint(&self, other: &NGramSet) -> bool {
        self.grams.is_disjoint(&other.grams)
    }
}

/// All contiguous `n`-token windows, deduplicated.
pub fn ngrams(tokens: &NormalizedTokens, n: usize) -> Result<NGramSet, TextError> {
    let mut set = NGramSet::new(n)?;
    set.extend_from(tokens.tokens());
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub label: Option<String>,
    pub range: Range<usize>,
}

/// Anything that can find named entities in text.
pub trait EntityProvider: Send + Sync {
    fn extract(&self, text: &str) -> Vec<EntitySpan>;
}

/// Words that commonly open a sentence with a capital letter without being a
/// name. A lone sentence-initial word is only an entity when it is absent
/// from this list, or when the same word also shows up capitalized later in
/// a sentence.
const SENTENCE_STARTERS: &[&str] = &[
    "a", "about", "after", "all", "also", "although", "an", "and", "another", "any", "are", "as",
    "at", "because", "before", "both", "but", "by", "can", "could", "did", "do", "does", "each",
    "even", "every", "for", "from", "had", "has", "have", "he", "her", "here", "his", "how", "however",
    "i", "if", "in", "is", "it", "its", "just", "last", "let", "many", "more", "most", "my", "next",
    "no", "not", "now", "of", "on", "once", "one", "only", "or", "our", "over", "perhaps", "she",
    "since", "so", "some", "such", "that", "the", "their", "then", "there", "these", "they", "this",
    "those", "though", "thus", "to", "today", "under", "unlike", "was", "we", "were", "what", "when",
    "where", "which", "while", "who", "why", "will", "with", "would", "yes", "yet", "you", "your",
];

const PRONOUN_I: &[&str] = &["I", "I'm", "I've", "I'd", "I'll"];

/// Default entity finder: maximal runs of capitalized words.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapitalizationHeuristic;

struct Word<'a> {
    core: &'a str,
    range: Range<usize>,
    sentence_initial: bool,
    /// Trailing punctuation (comma, period, ...) separates this word from the next.
    breaks_after: bool,
}

impl CapitalizationHeuristic {
    fn words(text: &str) -> Vec<Word<'_>> {
        let mut words = Vec::new();
        for sentence in split_sentences(text) {
            let sentence_text = &text[sentence.range.clone()];
            for (i, (range, chunk)) in whitespace_chunks(sentence_text).enumerate() {
                let lead = chunk.len() - chunk.trim_start_matches(is_opener).len();
                let trimmed = chunk[lead..].trim_end_matches(|c: char| !c.is_alphanumeric());
                let core = trimmed
                    .strip_suffix("'s")
                    .or_else(|| trimmed.strip_suffix("\u{2019}s"))
                    .unwrap_or(trimmed);
                let start = sentence.range.start + range.start + lead;
                words.push(Word {
                    core,
                    range: start..start + core.len(),
                    sentence_initial: i == 0,
                    breaks_after: core.len() + lead < chunk.len(),
                });
            }
        }
        words
    }

    fn is_capitalized(word: &str) -> bool {
        word.chars().next().is_some_and(char::is_uppercase) && !PRONOUN_I.contains(&word)
    }
}

impl EntityProvider for CapitalizationHeuristic {
    fn extract(&self, text: &str) -> Vec<EntitySpan> {
        let words = Self::words(text);
        let seen_mid_sentence: HashSet<&str> = words
            .iter()
            .filter(|w| !w.sentence_initial && Self::is_capitalized(w.core))
            .map(|w| w.core)
            .collect();

        let mut runs: Vec<Vec<&Word>> = Vec::new();
        let mut current: Vec<&Word> = Vec::new();
        for word in &words {
            if word.sentence_initial && !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
            if Self::is_capitalized(word.core) {
                current.push(word);
                if word.breaks_after {
                    runs.push(std::mem::take(&mut current));
                }
            } else if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }

        runs.into_iter()
            .filter_map(|mut run| {
                let first = run[0];
                if first.sentence_initial
                    && SENTENCE_STARTERS.contains(&first.core.to_lowercase().as_str())
                    && !seen_mid_sentence.contains(first.core)
                {
                    run.remove(0);
                }
                let (head, tail) = (run.first()?, run.last()?);
                let range = head.range.start..tail.range.end;
                Some(EntitySpan {
                    surface: text[range.clone()].to_string(),
                    label: None,
                    range,
                })
            })
            .collect()
    }
}

pub fn extract_entities(text: &str) -> Vec<EntitySpan> {
    CapitalizationHeuristic.extract(text)
}

/// True when some entity of `a` and some entity of `b` match
/// case-insensitively, where a surface also matches any longer surface that
/// contains it as a whole-word run ("Obama" matches "President Obama").
pub fn shared_entity(a: &str, b: &str) -> bool {
    shared_entity_with(&CapitalizationHeuristic, a, b)
}

pub fn shared_entity_with(provider: &dyn EntityProvider, a: &str, b: &str) -> bool {
    let words = |e: EntitySpan| -> Vec<String> {
        e.surface.split_whitespace().map(str::to_lowercase).collect()
    };
    let left: Vec<_> = provider.extract(a).into_iter().map(words).collect();
    let right: Vec<_> = provider.extract(b).into_iter().map(words).collect();
    left.iter().any(|l| {
        right
            .iter()
            .any(|r| contains_run(l, r) || contains_run(r, l))
    })
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '{' | '\u{201C}' | '\u{2018}')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '\u{201D}' | '\u{2019}')
}

/// Whitespace-delimited chunks with their byte ranges.
pub(crate) fn whitespace_chunks(text: &str) -> impl Iterator<Item = (Range<usize>, &str)> {
    let mut rest = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = rest.peek() {
            if c.is_whitespace() {
                rest.next();
            } else {
                break;
            }
        }
        let (start, _) = *rest.peek()?;
        let mut end = start;
        while let Some(&(i, c)) = rest.peek() {
            if c.is_whitespace() {
                break;
            }
            end = i + c.len_utf8();
            rest.next();
        }
        Some((start..end, &text[start..end]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(text: &str) -> Vec<String> {
        normalize(text).tokens().to_vec()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(toks("The cat sat."), ["cat", "sat"]);
        assert!(toks("").is_empty());
        assert_eq!(
            toks("Obama was born in Hawaii"),
            ["obama", "was", "born", "in", "hawaii"]
        );
        assert_eq!(toks("Don't  stop -- an A-team!"), ["dont", "stop", "ateam"]);
    }

    #[test]
    fn normalize_spans_point_into_source() {
        let text = "  The Cat,  sat. ";
        let n = normalize(text);
        assert_eq!(n.spans(), &[6..10, 12..16]);
        assert_eq!(&text[n.spans()[0].clone()], "Cat,");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_text("obama born hawaii", "obama was born in hawaii"), 0.75);
        assert_eq!(f1_text("red fox", "red fox"), 1.0);
        assert_eq!(f1_text("red fox", "blue whale"), 0.0);
        assert_eq!(f1_text("", ""), 0.0);
        assert_eq!(f1_text("the", "cat"), 0.0);
    }

    #[test]
    fn f1_counts_multiplicity() {
        // one shared "x", one shared "y"
        assert_eq!(f1_text("x x y", "x y y"), 2.0 * 2.0 / 6.0);
    }

    #[test]
    fn split_examples() {
        let s = split_sentences("A b. C d.");
        assert_eq!(s.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(), ["A b.", "C d."]);
        assert_eq!(split_sentences("Dr. Smith arrived.").len(), 1);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
    }

    #[test]
    fn split_handles_initials_quotes_and_lowercase_continuation() {
        let texts: Vec<_> = split_sentences("J. R. Tolkien wrote it. \"Really?\" she asked. Then e.g. this one? yes.")
            .into_iter()
            .map(|s| s.text)
            .collect();
        assert_eq!(
            texts,
            ["J. R. Tolkien wrote it.", "\"Really?\" she asked.", "Then e.g. this one? yes."]
        );
    }

    #[test]
    fn split_uses_custom_list() {
        let splitter = SentenceSplitter::from_list("# none\nfoo\n");
        assert_eq!(splitter.split("See foo. Bar now.").len(), 1);
        assert_eq!(splitter.split("Dr. Who.").len(), 2);
    }

    #[test]
    fn ngram_examples() {
        let t = |s: &str| normalize(s);
        let g = ngrams(&t("p q r s"), 3).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.contains(&["p", "q", "r"]) && g.contains(&["q", "r", "s"]));
        assert!(ngrams(&t("p q"), 3).unwrap().is_empty());
        assert_eq!(ngrams(&t("p q p q"), 2).unwrap().len(), 2);
        assert_eq!(ngrams(&t("p q"), 0), Err(TextError::ZeroOrder));
    }

    fn surfaces(text: &str) -> Vec<String> {
        extract_entities(text).into_iter().map(|e| e.surface).collect()
    }

    #[test]
    fn entity_examples() {
        assert_eq!(surfaces("I met Barack Obama in Chicago"), ["Barack Obama", "Chicago"]);
        assert!(surfaces("the quick fox").is_empty());
        assert_eq!(surfaces("Paris is large. Paris wins."), ["Paris", "Paris"]);
        assert_eq!(surfaces("The Beatles met Elvis."), ["Beatles", "Elvis"]);
        assert_eq!(surfaces("He visited Tesla, Inc. yesterday"), ["Tesla", "Inc"]);
    }

    #[test]
    fn entity_ranges_match_surface() {
        let text = "Yesterday (in Rome) we saw Pope Francis's car.";
        for e in extract_entities(text) {
            assert_eq!(&text[e.range.clone()], e.surface);
        }
        assert_eq!(surfaces(text), ["Yesterday", "Rome", "Pope Francis"]);
    }

    #[test]
    fn shared_entity_examples() {
        assert!(shared_entity("Tesla builds cars", "Tesla reported profits"));
        assert!(!shared_entity("cats sleep", "dogs bark"));
        assert!(shared_entity("Obama spoke", "President Obama waved"));
        assert!(!shared_entity("United States grew", "He flew United Airlines"));
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            prop_assert_eq!(f1_text(&a, &b), f1_text(&b, &a));
        }

        #[test]
        fn f1_self_is_one(a in "[a-z]{1,6}( [a-z]{1,6}){0,8}") {
            let n = normalize(&a);
            prop_assume!(!n.is_empty());
            prop_assert_eq!(f1_overlap(&n, &n), 1.0);
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize(&s);
            let twice = normalize(&once.joined());
            prop_assert_eq!(twice.tokens(), once.tokens());
            for (tok, span) in once.tokens().iter().zip(once.spans()) {
                prop_assert!(!tok.is_empty() && !tok.contains(char::is_whitespace));
                prop_assert!(span.end <= s.len());
            }
        }

        #[test]
        fn ngram_windows_are_contiguous(words in proptest::collection::vec("[b-d]", 0..12), n in 1usize..5) {
            let n_toks = normalize(&words.join(" "));
            let set = ngrams(&n_toks, n).unwrap();
            prop_assert!(set.len() <= n_toks.len().saturating_sub(n - 1));
            for g in set.iter() {
                prop_assert_eq!(g.len(), n);
                prop_assert!(n_toks.tokens().windows(n).any(|w| w == g.as_slice()));
            }
        }

        #[test]
        fn sentences_cover_non_whitespace(s in "([A-Za-z]{1,5}[.!?]? ){0,15}") {
            let spans = split_sentences(&s);
            let rebuilt: String = spans.iter().map(|sp| sp.text.as_str()).collect::<Vec<_>>().join(" ");
            let strip = |t: &str| t.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&rebuilt), strip(&s));
            for w in spans.windows(2) {
                prop_assert!(w[0].range.end <= w[1].range.start);
            }
            for sp in &spans {
                prop_assert_eq!(&s[sp.range.clone()], sp.text.as_str());
                prop_assert_eq!(sp.token_count, normalize(&sp.text).len());
            }
        }
    }
}
