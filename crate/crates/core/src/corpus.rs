//! Document store, sentence-level BM25 index and domain allowlist.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textops::{f1_overlap, normalize, split_sentences, SentenceSpan};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: corrupt index: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// On-disk shape of a document: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
}

/// A retrievable text unit. `domain` and `sentences` are derived from `url`
/// and `content` on construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "DocumentRecord", into = "DocumentRecord")]
pub struct Document {
    pub id: String,
    pub url: String,
    pub domain: String,
    pub title: String,
    pub content: String,
    pub sentences: Vec<SentenceSpan>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        url: impl Into<String>,
        title: impl Into<String>,
        content: impl Into<String>,
    ) -> Self {
        let id = id.into();
        let url = url.into();
        let content = content.into();
        let sentences = split_sentences(&content)
            .into_iter()
            .map(|mut s| {
                s.doc_id = id.clone();
                s
            })
            .collect();
        Self {
            domain: domain_of(&url),
            id,
            url,
            title: title.into(),
            content,
            sentences,
        }
    }
}

impl From<DocumentRecord> for Document {
    fn from(r: DocumentRecord) -> Self {
        Document::new(r.id, r.url, r.title, r.content)
    }
}

impl From<Document> for DocumentRecord {
    fn from(d: Document) -> Self {
        DocumentRecord {
            id: d.id,
            url: d.url,
            title: d.title,
            content: d.content,
        }
    }
}

/// Host of `url`, lowercased, with a leading `www.` removed. Bare hosts
/// without a scheme are accepted; anything unparseable yields "".
pub fn domain_of(url: &str) -> String {
    let url = url.trim();
    if url.is_empty() {
        return String::new();
    }
    let parsed = url::Url::parse(url)
        .ok()
        .filter(|u| u.host_str().is_some())
        .or_else(|| url::Url::parse(&format!("http://{url}")).ok());
    let host = parsed
        .as_ref()
        .and_then(|u| u.host_str())
        .unwrap_or_default()
        .trim_end_matches('.')
        .to_lowercase();
    host.strip_prefix("www.").map(str::to_string).unwrap_or(host)
}

pub fn read_documents_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        docs.push(record.into());
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    /// Lucene's idf: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, sentence_count: usize, df: usize) -> f64 {
        let (n, df) = (sentence_count as f64, df as f64);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_weight(&self, tf: usize, len: usize, avg_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * len as f64 / avg_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub matched_sentence: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct SentenceRef {
    doc: usize,
    sentence: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Posting {
    sentence: usize,
    tf: usize,
}

/// Immutable sentence-level inverted index over a document set.
///
/// Documents are stored in ascending id order and sentences are numbered in
/// (doc id, sentence index) order, so sorting by sentence number is the
/// tie-break order everywhere.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    params: Bm25Params,
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    sentences: Vec<SentenceRef>,
    postings: HashMap<String, Vec<Posting>>,
    /// Sentences with at least one token; the collection size for BM25.
    scored: usize,
    avg_len: f64,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: u32,
    params: Bm25Params,
    documents: Vec<Document>,
}

const INDEX_FORMAT: u32 = 1;

impl CorpusIndex {
    pub fn build(docs: Vec<Document>) -> Result<Self, CorpusError> {
        Self::build_with(docs, Bm25Params::default())
    }

    pub fn build_with(mut docs: Vec<Document>, params: Bm25Params) -> Result<Self, CorpusError> {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(pair) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::DuplicateId(pair[0].id.clone()));
        }
        let mut sentences = Vec::new();
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut total_len = 0usize;
        for (d, doc) in docs.iter().enumerate() {
            for (s, span) in doc.sentences.iter().enumerate() {
                let tokens = normalize(&span.text);
                let id = sentences.len();
                let mut tf: HashMap<&str, usize> = HashMap::new();
                for t in tokens.tokens() {
                    *tf.entry(t.as_str()).or_default() += 1;
                }
                for (term, tf) in tf {
                    postings
                        .entry(term.to_string())
                        .or_default()
                        .push(Posting { sentence: id, tf });
                }
                total_len += tokens.len();
                sentences.push(SentenceRef {
                    doc: d,
                    sentence: s,
                    len: tokens.len(),
                });
            }
        }
        let scored = sentences.iter().filter(|s| s.len > 0).count();
        let avg_len = if scored == 0 {
            0.0
        } else {
            total_len as f64 / scored as f64
        };
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
        Ok(Self {
            params,
            documents: docs,
            by_id,
            sentences,
            postings,
            scored,
            avg_len,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    /// Every indexed sentence paired with its document, in tie-break order.
    pub fn sentences(&self) -> impl Iterator<Item = (&Document, &SentenceSpan)> {
        self.sentences
            .iter()
            .map(|r| (&self.documents[r.doc], &self.documents[r.doc].sentences[r.sentence]))
    }

    /// BM25 score for every sentence sharing a term with `query`, keyed by
    /// sentence number. Query terms are deduplicated and visited in sorted
    /// order, so each sentence's sum is accumulated in a fixed order.
    fn score_sentences(&self, query: &str) -> Vec<(usize, f64)> {
        let terms: BTreeSet<String> = normalize(query).tokens().iter().cloned().collect();
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.params.idf(self.scored, list.len());
            for p in list {
                let len = self.sentences[p.sentence].len;
                *scores.entry(p.sentence).or_insert(0.0) +=
                    idf * self.params.term_weight(p.tf, len, self.avg_len);
            }
        }
        let mut ranked: Vec<_> = scores.into_iter().collect();
        ranked.sort_by(|a, b| by_score_then_id(a.1, a.0, b.1, b.0));
        ranked
    }

    /// Top `k` sentences for `query`.
    pub fn search_sentences(&self, query: &str, k: usize) -> Vec<SearchHit> {
        self.score_sentences(query)
            .into_iter()
            .take(k)
            .map(|(s, score)| self.hit(s, score))
            .collect()
    }

    /// Top `k` documents for `query`; a document scores as its best sentence.
    pub fn lexical_search(&self, query: &str, k: usize) -> Vec<SearchHit> {
        let mut seen = vec![false; self.documents.len()];
        let mut hits = Vec::new();
        // Ranked sentences arrive best-first, so the first sentence seen for a
        // document is its best one.
        for (s, score) in self.score_sentences(query) {
            let doc = self.sentences[s].doc;
            if !seen[doc] {
                seen[doc] = true;
                hits.push((doc, s, score));
            }
        }
        hits.sort_by(|a, b| by_score_then_id(a.2, a.0, b.2, b.0));
        hits.into_iter()
            .take(k)
            .map(|(_, s, score)| self.hit(s, score))
            .collect()
    }

    fn hit(&self, sentence: usize, score: f64) -> SearchHit {
        let r = self.sentences[sentence];
        SearchHit {
            doc_id: self.documents[r.doc].id.clone(),
            score,
            matched_sentence: Some(r.sentence),
        }
    }

    /// The sentence closest to `target` by token F1, drawn from the best
    /// `pool` lexical matches that are neither in `exclude_doc` nor
    /// string-identical to the target.
    pub fn nearest_sentence(
        &self,
        target: &str,
        exclude_doc: &str,
        pool: usize,
    ) -> Option<(SentenceSpan, f64)> {
        let target_tokens = normalize(target);
        let wanted = target.trim();
        let mut candidates: Vec<usize> = self
            .score_sentences(target)
            .into_iter()
            .map(|(s, _)| s)
            .filter(|&s| {
                let r = self.sentences[s];
                let doc = &self.documents[r.doc];
                doc.id != exclude_doc && doc.sentences[r.sentence].text.trim() != wanted
            })
            .take(pool)
            .collect();
        candidates.sort_unstable();

        let mut best: Option<(usize, f64)> = None;
        for s in candidates {
            let r = self.sentences[s];
            let text = &self.documents[r.doc].sentences[r.sentence].text;
            let f1 = f1_overlap(&normalize(text), &target_tokens);
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some((s, f1));
            }
        }
        best.map(|(s, f1)| {
            let r = self.sentences[s];
            (self.documents[r.doc].sentences[r.sentence].clone(), f1)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let payload = IndexFile {
            format: INDEX_FORMAT,
            params: self.params,
            documents: self.documents.clone(),
        };
        let mut w = BufWriter::new(file);
        ciborium::into_writer(&payload, &mut w).map_err(|e| CorpusError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    /// Loads a saved index. Postings are rebuilt from the stored documents.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let payload: IndexFile =
            ciborium::from_reader(BufReader::new(file)).map_err(|e| CorpusError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if payload.format != INDEX_FORMAT {
            return Err(CorpusError::Corrupt {
                path: path.to_path_buf(),
                message: format!("unsupported format {}", payload.format),
            });
        }
        Self::build_with(payload.documents, payload.params)
    }
}

fn by_score_then_id(a_score: f64, a_id: usize, b_score: f64, b_id: usize) -> Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}

/// Registrable domains a search result must belong to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainAllowlist {
    domains: BTreeSet<String>,
}

impl DomainAllowlist {
    /// Entries are reduced to bare lowercase hosts, so `https://www.x.org/a`
    /// and `x.org` are the same entry.
    pub fn new<I, S>(domains: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let domains = domains
            .into_iter()
            .map(|d| domain_of(d.as_ref()))
            .filter(|d| !d.is_empty())
            .collect();
        Self { domains }
    }

    /// One domain per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Exact match or subdomain of an entry.
    pub fn allows(&self, domain: &str) -> bool {
        let domain = domain.to_lowercase();
        if self.domains.contains(&domain) {
            return true;
        }
        domain
            .char_indices()
            .filter(|&(_, c)| c == '.')
            .any(|(i, _)| self.domains.contains(&domain[i + 1..]))
    }
}

/// Keeps documents whose domain is allowed, in input order, up to `k`.
pub fn filter_allowlist(hits: Vec<Document>, allow: &DomainAllowlist, k: usize) -> Vec<Document> {
    hits.into_iter()
        .filter(|d| allow.allows(&d.domain))
        .take(k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, content: &str) -> Document {
        Document::new(id, format!("https://{id}.example.com/page"), id, content)
    }

    #[test]
    fn document_derives_domain_and_sentences() {
        let d = Document::new("d1", "https://www.Example.org/path?q=1", "T", "One two. Three four.");
        assert_eq!(d.domain, "example.org");
        assert_eq!(d.sentences.len(), 2);
        assert!(d.sentences.iter().all(|s| s.doc_id == "d1"));
        assert_eq!(domain_of("news.bbc.co.uk/x"), "news.bbc.co.uk");
        assert_eq!(domain_of(""), "");
    }

    #[test]
    fn document_serializes_as_record() {
        let d = doc("a", "Hello there. General Kenobi.");
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(
            json,
            r#"{"id":"a","url":"https://a.example.com/page","title":"a","content":"Hello there. General Kenobi."}"#
        );
        assert_eq!(serde_json::from_str::<Document>(&json).unwrap(), d);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = CorpusIndex::build(vec![]).unwrap();
        assert!(index.lexical_search("anything", 5).is_empty());
        assert!(index.nearest_sentence("anything", "", 50).is_none());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = CorpusIndex::build(vec![doc("x", "a b"), doc("x", "c d")]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "x"));
    }

    #[test]
    fn unique_term_ranks_first() {
        let index = CorpusIndex::build(vec![
            doc("a", "Cats chase mice."),
            doc("b", "Dogs chase zebras."),
            doc("c", "Birds chase worms."),
        ])
        .unwrap();
        let hits = index.lexical_search("zebras", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "b");
        assert!(index.lexical_search("unicorn", 5).is_empty());
        assert!(index.lexical_search("", 5).is_empty());
        // k beyond corpus: every matching doc once, no padding, ties by id
        let all = index.lexical_search("chase", 10);
        assert_eq!(all.iter().map(|h| h.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn nearest_sentence_examples() {
        let index = CorpusIndex::build(vec![
            doc("self", "The sun is a star."),
            doc("other", "The sun is a star indeed. Dogs bark."),
        ])
        .unwrap();
        let (span, f1) = index.nearest_sentence("the sun is a star", "self", 50).unwrap();
        assert_eq!(span.text, "The sun is a star indeed.");
        assert_eq!(span.doc_id, "other");
        assert!((f1 - 2.0 * 3.0 / 7.0).abs() < 1e-12);

        let only_self = CorpusIndex::build(vec![doc("self", "Unique words here.")]).unwrap();
        assert!(only_self.nearest_sentence("Unique words here.", "self", 50).is_none());
    }

    #[test]
    fn nearest_sentence_skips_identical_text_and_breaks_ties_by_position() {
        let index = CorpusIndex::build(vec![
            doc("b", "Red green blue. Red green yellow."),
            doc("a", "Red green blue. Red green purple."),
        ])
        .unwrap();
        let (span, _) = index.nearest_sentence("Red green blue.", "none", 50).unwrap();
        // identical sentences are excluded; three candidates tie at 2/3
        assert_eq!((span.doc_id.as_str(), span.index), ("a", 1));
    }

    #[test]
    fn allowlist_membership_and_filtering() {
        let allow = DomainAllowlist::parse("# comment\nExample.com\nhttps://www.wiki.org/path\n");
        assert_eq!(allow.len(), 2);
        assert!(allow.allows("example.com"));
        assert!(allow.allows("en.wiki.org"));
        assert!(!allow.allows("notexample.com"));

        let docs: Vec<_> = (0..7)
            .map(|i| {
                let host = if i % 2 == 0 { "example.com" } else { "blocked.net" };
                Document::new(format!("d{i}"), format!("https://{host}/{i}"), "", "x")
            })
            .collect();
        let kept = filter_allowlist(docs.clone(), &allow, 5);
        assert_eq!(kept.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["d0", "d2", "d4", "d6"]);
        assert!(filter_allowlist(docs.clone(), &DomainAllowlist::default(), 5).is_empty());
        let everything = DomainAllowlist::new(["example.com", "blocked.net"]);
        assert_eq!(filter_allowlist(docs, &everything, 5).len(), 5);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let index = CorpusIndex::build(vec![doc("a", "Alpha beta. Gamma delta."), doc("b", "Beta gamma.")]).unwrap();
        index.save(&path).unwrap();
        let loaded = CorpusIndex::load(&path).unwrap();
        assert_eq!(loaded.documents(), index.documents());
        assert_eq!(loaded.lexical_search("beta gamma", 5), index.lexical_search("beta gamma", 5));
    }
}
