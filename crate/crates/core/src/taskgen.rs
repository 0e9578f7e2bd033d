//! Fine-tuning example construction for the search, knowledge and response
//! stages, from dialogue datasets and from raw web documents.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{CorpusIndex, Document, DocumentRecord};
use crate::jsonl::{read_jsonl, write_jsonl, write_jsonl_to, JsonlError};
use crate::modelio::{frame_knowledge, ControlTokens, FramingError};
use crate::textops::{extract_entities, f1_text, shared_entity, split_sentences};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("title `{0}` is empty after simplification")]
    DegenerateTitle(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SearchQuery,
    Knowledge,
    Response,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "search" | "search_query" => Ok(TaskKind::SearchQuery),
            "knowledge" => Ok(TaskKind::Knowledge),
            "response" => Ok(TaskKind::Response),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

pub type Meta = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub kind: TaskKind,
    pub context: String,
    pub target: String,
    #[serde(default)]
    pub docs: Vec<Document>,
    #[serde(default)]
    pub meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub msmarco_f1_min: f64,
    pub mining_f1_min: f64,
    pub min_knowledge_words: usize,
    pub require_shared_entity: bool,
    pub candidate_pool: usize,
    pub tokens: ControlTokens,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            msmarco_f1_min: 0.5,
            mining_f1_min: 0.33,
            min_knowledge_words: 5,
            require_shared_entity: true,
            candidate_pool: 50,
            tokens: ControlTokens::default(),
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        for (name, v) in [("msmarco_f1_min", self.msmarco_f1_min), ("mining_f1_min", self.mining_f1_min)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TaskError::Precondition(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.min_knowledge_words == 0 {
            return Err(TaskError::Precondition("min_knowledge_words must be at least 1".into()));
        }
        Ok(())
    }
}

/// Drops parenthesized groups and everything from the first spaced hyphen
/// (` - `) onward.
pub fn simplify_title(title: &str) -> Result<String, TaskError> {
    let mut depth = 0usize;
    let mut kept = String::with_capacity(title.len());
    for c in title.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => kept.push(c),
            _ => {}
        }
    }
    let head = kept.split(" - ").next().unwrap_or_default();
    let simplified = head.split_whitespace().collect::<Vec<_>>().join(" ");
    if simplified.is_empty() {
        return Err(TaskError::DegenerateTitle(title.to_string()));
    }
    Ok(simplified)
}

/// Sentences `[0, end)` of `doc`, space-joined.
pub fn doc_prefix(doc: &Document, end: usize) -> String {
    doc.sentences[..end.min(doc.sentences.len())]
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_sentence_index(doc: &Document, idx: usize, min: usize) -> Result<(), TaskError> {
    if idx < min || idx >= doc.sentences.len() {
        return Err(TaskError::Precondition(format!(
            "sentence index {idx} outside [{min}, {}) for document `{}`",
            doc.sentences.len(),
            doc.id
        )));
    }
    Ok(())
}

/// Title prediction from a document cut after `cut_sentence` sentences.
pub fn build_lm_search_task(
    doc: &Document,
    cut_sentence: usize,
    tokens: &ControlTokens,
) -> Result<TrainingExample, TaskError> {
    check_sentence_index(doc, cut_sentence, 1)?;
    let target = simplify_title(&doc.title)?;
    Ok(TrainingExample {
        kind: TaskKind::SearchQuery,
        context: tokens.query_input(&doc_prefix(doc, cut_sentence)),
        target,
        docs: Vec::new(),
        meta: Meta::from([
            ("source".into(), json!("lm_title")),
            ("doc_id".into(), json!(doc.id)),
            ("cut_sentence".into(), json!(cut_sentence)),
        ]),
    })
}

/// Which filter rejected a mining attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoCandidate,
    TooShort,
    LowOverlap,
    NoSharedEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningSkip {
    pub reason: SkipReason,
    pub meta: Meta,
}

/// Mines the sentence of another document closest to sentence `target_idx`
/// of `doc` and, if it passes the length, overlap and shared-entity filters,
/// turns it into a knowledge target.
pub fn build_lm_knowledge_task(
    doc: &Document,
    target_idx: usize,
    index: &CorpusIndex,
    cfg: &TaskGenConfig,
) -> Result<Result<TrainingExample, MiningSkip>, TaskError> {
    check_sentence_index(doc, target_idx, 0)?;
    let target_sentence = &doc.sentences[target_idx].text;
    let mut meta = Meta::from([
        ("source".into(), json!("lm_mined")),
        ("doc_id".into(), json!(doc.id)),
        ("target_idx".into(), json!(target_idx)),
        ("mining_f1_min".into(), json!(cfg.mining_f1_min)),
        ("min_knowledge_words".into(), json!(cfg.min_knowledge_words)),
        ("require_shared_entity".into(), json!(cfg.require_shared_entity)),
    ]);
    let skip = |reason, mut meta: Meta| {
        meta.insert("skipped".into(), json!(reason));
        Ok(Err(MiningSkip { reason, meta }))
    };

    let Some((mined, f1)) = index.nearest_sentence(target_sentence, &doc.id, cfg.candidate_pool) else {
        return skip(SkipReason::NoCandidate, meta);
    };
    meta.insert("mined_doc_id".into(), json!(mined.doc_id));
    meta.insert("mined_sentence_idx".into(), json!(mined.index));
    meta.insert("mined_token_count".into(), json!(mined.token_count));
    meta.insert("f1".into(), json!(f1));
    if mined.token_count < cfg.min_knowledge_words {
        return skip(SkipReason::TooShort, meta);
    }
    if f1 < cfg.mining_f1_min {
        return skip(SkipReason::LowOverlap, meta);
    }
    let shared = shared_entity(&mined.text, target_sentence);
    meta.insert("shared_entity".into(), json!(shared));
    if cfg.require_shared_entity && !shared {
        return skip(SkipReason::NoSharedEntity, meta);
    }

    let prefix = doc_prefix(doc, target_idx);
    let mut docs = Vec::with_capacity(2);
    if !prefix.is_empty() {
        docs.push(Document::new(format!("{}#prefix", doc.id), &doc.url, &doc.title, prefix.clone()));
    }
    let source = index
        .document(&mined.doc_id)
        .expect("mined sentence belongs to an indexed document");
    docs.push(source.clone());
    Ok(Ok(TrainingExample {
        kind: TaskKind::Knowledge,
        context: prefix,
        target: mined.text,
        docs,
        meta,
    }))
}

/// Companion title task: predict the (simplified) title of the document the
/// mined knowledge came from.
pub fn build_lm_knowledge_title_task(
    knowledge: &TrainingExample,
    tokens: &ControlTokens,
) -> Result<TrainingExample, TaskError> {
    let source = knowledge
        .docs
        .last()
        .filter(|_| knowledge.kind == TaskKind::Knowledge)
        .ok_or_else(|| TaskError::Precondition("expected a mined knowledge example".into()))?;
    let mut meta = Meta::from([
        ("source".into(), json!("lm_knowledge_title")),
        ("mined_doc_id".into(), json!(source.id)),
    ]);
    if let Some(id) = knowledge.meta.get("doc_id") {
        meta.insert("doc_id".into(), id.clone());
    }
    Ok(TrainingExample {
        kind: TaskKind::SearchQuery,
        context: tokens.query_input(&knowledge.context),
        target: simplify_title(&source.title)?,
        docs: Vec::new(),
        meta,
    })
}

/// Next-sentence prediction given the document prefix and framed knowledge.
pub fn build_lm_response_task(
    doc: &Document,
    target_idx: usize,
    knowledge: &str,
    tokens: &ControlTokens,
) -> Result<TrainingExample, TaskError> {
    check_sentence_index(doc, target_idx, 0)?;
    Ok(TrainingExample {
        kind: TaskKind::Response,
        context: frame_knowledge(&doc_prefix(doc, target_idx), knowledge, tokens)?,
        target: doc.sentences[target_idx].text.clone(),
        docs: Vec::new(),
        meta: Meta::from([
            ("source".into(), json!("lm_response")),
            ("doc_id".into(), json!(doc.id)),
            ("target_idx".into(), json!(target_idx)),
        ]),
    })
}

/// The input sentence with the highest F1 against `answer` (earliest wins
/// ties), or `None` when even the best falls below `f1_min`.
pub fn remap_extractive_target<S: AsRef<str>>(
    answer: &str,
    input_sentences: &[S],
    f1_min: f64,
) -> Option<(String, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for s in input_sentences {
        let f1 = f1_text(s.as_ref(), answer);
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((s.as_ref(), f1));
        }
    }
    best.filter(|&(_, f1)| f1 >= f1_min)
        .map(|(s, f1)| (s.to_string(), f1))
}

/// Knowledge target for multi-session chat: the earlier line most similar to
/// the response, under the same threshold rule.
pub fn remap_previous_line<S: AsRef<str>>(
    response: &str,
    previous_lines: &[S],
    f1_min: f64,
) -> Option<(String, f64)> {
    remap_extractive_target(response, previous_lines, f1_min)
}

/// First entity of `response` whose surface also appears verbatim in
/// `context`; used as the knowledge target for chit-chat datasets.
pub fn entity_knowledge(context: &str, response: &str) -> Option<String> {
    extract_entities(response)
        .into_iter()
        .map(|e| e.surface)
        .find(|s| context.contains(s.as_str()))
}

fn require_non_empty(fields: &[(&str, &str)]) -> Result<(), TaskError> {
    match fields.iter().find(|(_, v)| v.trim().is_empty()) {
        Some((name, _)) => Err(TaskError::Precondition(format!("{name} is empty"))),
        None => Ok(()),
    }
}

pub fn build_dialogue_search_example(
    dialogue_context: &str,
    query: &str,
    tokens: &ControlTokens,
) -> Result<TrainingExample, TaskError> {
    require_non_empty(&[("query", query)])?;
    Ok(TrainingExample {
        kind: TaskKind::SearchQuery,
        context: tokens.query_input(dialogue_context),
        target: query.to_string(),
        docs: Vec::new(),
        meta: Meta::new(),
    })
}

pub fn build_dialogue_knowledge_example(
    dialogue_context: &str,
    gold_knowledge: &str,
    docs: Vec<Document>,
) -> Result<TrainingExample, TaskError> {
    require_non_empty(&[("gold_knowledge", gold_knowledge)])?;
    Ok(TrainingExample {
        kind: TaskKind::Knowledge,
        context: dialogue_context.to_string(),
        target: gold_knowledge.to_string(),
        docs,
        meta: Meta::new(),
    })
}

pub fn build_dialogue_response_example(
    dialogue_context: &str,
    gold_knowledge: &str,
    gold_response: &str,
    tokens: &ControlTokens,
) -> Result<TrainingExample, TaskError> {
    require_non_empty(&[
        ("dialogue_context", dialogue_context),
        ("gold_knowledge", gold_knowledge),
        ("gold_response", gold_response),
    ])?;
    Ok(TrainingExample {
        kind: TaskKind::Response,
        context: frame_knowledge(dialogue_context, gold_knowledge, tokens)?,
        target: gold_response.to_string(),
        docs: Vec::new(),
        meta: Meta::new(),
    })
}

/// Common shape that dataset loaders reduce to. Datasets without annotated
/// knowledge fall back to [`entity_knowledge`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dataset: String,
    pub context: String,
    #[serde(default)]
    pub search_query: Option<String>,
    #[serde(default)]
    pub gold_knowledge: Option<String>,
    pub gold_response: String,
    #[serde(default)]
    pub docs: Vec<DocumentRecord>,
    /// Short-answer QA data is used for knowledge only.
    #[serde(default = "default_true")]
    pub use_for_response: bool,
}

fn default_true() -> bool {
    true
}

/// Every example a dialogue record yields, tagged with its dataset.
pub fn dialogue_tasks(record: &DialogueRecord, cfg: &TaskGenConfig) -> Result<Vec<TrainingExample>, TaskError> {
    let mut out = Vec::new();
    if let Some(q) = record.search_query.as_deref().filter(|q| !q.trim().is_empty()) {
        out.push(build_dialogue_search_example(&record.context, q, &cfg.tokens)?);
    }
    let knowledge = record
        .gold_knowledge
        .clone()
        .filter(|k| !k.trim().is_empty())
        .or_else(|| entity_knowledge(&record.context, &record.gold_response));
    if let Some(k) = knowledge {
        let docs = record.docs.iter().cloned().map(Document::from).collect();
        out.push(build_dialogue_knowledge_example(&record.context, &k, docs)?);
        if record.use_for_response {
            out.push(build_dialogue_response_example(
                &record.context,
                &k,
                &record.gold_response,
                &cfg.tokens,
            )?);
        }
    }
    for ex in &mut out {
        ex.meta.insert("source".into(), json!(record.dataset));
    }
    Ok(out)
}

/// Prepends a uniformly sampled dialogue history to `question`.
pub fn with_sampled_history<R: Rng + ?Sized>(question: &str, histories: &[String], rng: &mut R) -> String {
    if histories.is_empty() {
        return question.to_string();
    }
    let pick = &histories[rng.random_range(0..histories.len())];
    format!("{pick}\n{question}")
}

/// One extractive-QA item to remap: the answer is replaced by the passage
/// sentence that overlaps it most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(alias = "query")]
    pub question: String,
    pub answer: String,
    pub passages: Vec<String>,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RemapReport {
    pub total: usize,
    pub retained: usize,
    pub examples: Vec<TrainingExample>,
}

/// Knowledge and response examples for every record whose best sentence
/// clears `f1_min`.
pub fn remap_records(records: &[RemapRecord], f1_min: f64, tokens: &ControlTokens) -> Result<RemapReport, TaskError> {
    let mut report = RemapReport::default();
    for (i, r) in records.iter().enumerate() {
        report.total += 1;
        let id = r.id.clone().unwrap_or_else(|| i.to_string());
        let sentences: Vec<String> = r
            .passages
            .iter()
            .flat_map(|p| split_sentences(p))
            .map(|s| s.text)
            .collect();
        let Some((sentence, f1)) = remap_extractive_target(&r.answer, &sentences, f1_min) else {
            continue;
        };
        report.retained += 1;
        let meta = Meta::from([
            ("source".into(), json!("extractive_remap")),
            ("id".into(), json!(id)),
            ("f1".into(), json!(f1)),
            ("f1_min".into(), json!(f1_min)),
        ]);
        let docs = r
            .passages
            .iter()
            .enumerate()
            .map(|(j, p)| Document::new(format!("{id}-p{j}"), "", "", p.clone()))
            .collect();
        let mut knowledge = build_dialogue_knowledge_example(&r.question, &sentence, docs)?;
        knowledge.meta = meta.clone();
        let mut response = build_dialogue_response_example(&r.question, &sentence, &r.answer, tokens)?;
        response.meta = meta;
        report.examples.push(knowledge);
        report.examples.push(response);
    }
    Ok(report)
}

/// Examples built from a whole corpus plus counts of mining skips.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct LmTaskReport {
    pub examples: Vec<TrainingExample>,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub degenerate_titles: usize,
}

/// Builds language-modeling tasks for every document with at least two
/// sentences. Each document is cut at a random sentence boundary drawn from
/// a ChaCha8 stream seeded with `seed`; that sentence is the mining and
/// response target. Output is ordered by document id.
pub fn generate_lm_tasks(
    index: &CorpusIndex,
    cfg: &TaskGenConfig,
    seed: u64,
    kinds: &BTreeSet<TaskKind>,
) -> Result<LmTaskReport, TaskError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LmTaskReport::default();
    for doc in index.documents() {
        if doc.sentences.len() < 2 {
            continue;
        }
        let cut = rng.random_range(1..doc.sentences.len());
        let stamp = |mut ex: TrainingExample| {
            ex.meta.insert("seed".into(), json!(seed));
            ex
        };
        if kinds.contains(&TaskKind::SearchQuery) {
            match build_lm_search_task(doc, cut, &cfg.tokens) {
                Ok(ex) => report.examples.push(stamp(ex)),
                Err(TaskError::DegenerateTitle(_)) => report.degenerate_titles += 1,
                Err(e) => return Err(e),
            }
        }
        if !kinds.contains(&TaskKind::Knowledge) && !kinds.contains(&TaskKind::Response) {
            continue;
        }
        let knowledge = match build_lm_knowledge_task(doc, cut, index, cfg)? {
            Ok(ex) => ex,
            Err(skip) => {
                *report.skipped.entry(skip.reason).or_default() += 1;
                continue;
            }
        };
        let mined = knowledge.target.clone();
        if kinds.contains(&TaskKind::SearchQuery) {
            match build_lm_knowledge_title_task(&knowledge, &cfg.tokens) {
                Ok(ex) => report.examples.push(stamp(ex)),
                Err(TaskError::DegenerateTitle(_)) => report.degenerate_titles += 1,
                Err(e) => return Err(e),
            }
        }
        if kinds.contains(&TaskKind::Knowledge) {
            report.examples.push(stamp(knowledge));
        }
        if kinds.contains(&TaskKind::Response) {
            report
                .examples
                .push(stamp(build_lm_response_task(doc, cut, &mined, &cfg.tokens)?));
        }
    }
    Ok(report)
}

pub fn write_examples<W: Write>(examples: &[TrainingExample], w: W) -> io::Result<usize> {
    write_jsonl_to(examples, w)
}

/// Writes one JSON object per line and returns the line count.
pub fn serialize_examples(examples: &[TrainingExample], path: impl AsRef<Path>) -> Result<usize, TaskError> {
    Ok(write_jsonl(examples, path)?)
}

pub fn deserialize_examples(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>, TaskError> {
    Ok(read_jsonl(path)?)
}
