//! The three-stage search → knowledge → response loop for dialogue turns
//! and prompt completion.

mod oracle;
mod search;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::CopyOracleBackend;
pub use search::{
    LocalIndexProvider, RemoteSearchConfig, RemoteSearchProvider, SearchError, SearchProvider,
    StaticProvider,
};

use crate::corpus::{filter_allowlist, Document, DomainAllowlist};
use crate::modelio::{
    collect_banned_ngrams, decode_with_constraints, frame_knowledge, pack_fid, pack_prepend,
    BlockSource, ControlTokens, DecodeError, DecodingSpec, DefaultSpecs, FramingError,
    GenerationBackend, PackedInput, PackingError,
};
use crate::textops::{NGramSet, TextError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Search,
    Retrieve,
    Knowledge,
    Response,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Search => "search",
            Stage::Retrieve => "retrieve",
            Stage::Knowledge => "knowledge",
            Stage::Response => "response",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageFailure,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Precondition(_) => None,
        }
    }
}

fn at<E: Into<StageFailure>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub accumulated_knowledge: Vec<String>,
    #[serde(default)]
    pub persona: Option<String>,
}

impl ConversationState {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
            accumulated_knowledge: Vec::new(),
            persona: None,
        }
    }

    pub fn with_persona(mut self, persona: impl Into<String>) -> Self {
        self.persona = Some(persona.into());
        self
    }

    pub fn model_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::Model).count()
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::User)
            .map(|t| t.text.as_str())
    }

    /// Newline-joined turns with control tokens defused, preceded by the
    /// persona line. With a token limit the oldest turns are dropped first;
    /// a single over-long turn keeps its tail.
    pub fn context(&self, tokens: &ControlTokens, max_tokens: Option<usize>) -> String {
        let mut lines: Vec<String> = self.turns.iter().map(|t| tokens.escape(&t.text)).collect();
        let persona = self.persona.as_ref().map(|p| format!("your persona: {}", tokens.escape(p)));
        if let Some(limit) = max_tokens {
            let count = |s: &str| s.split_whitespace().count();
            let mut budget = limit.saturating_sub(persona.as_deref().map_or(0, count));
            let mut kept = Vec::new();
            while let Some(line) = lines.pop() {
                let n = count(&line);
                if n <= budget {
                    budget -= n;
                    kept.push(line);
                } else {
                    if kept.is_empty() && budget > 0 {
                        let words: Vec<&str> = line.split_whitespace().collect();
                        kept.push(words[words.len() - budget..].join(" "));
                    }
                    break;
                }
            }
            kept.reverse();
            lines = kept;
        }
        persona.into_iter().chain(lines).collect::<Vec<_>>().join("\n")
    }
}

/// Offsets from the start of the turn, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub start_us: u64,
    pub duration_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub query: String,
    pub retrieved: Vec<Document>,
    pub knowledge: String,
    pub response: String,
    pub stage_timings: BTreeMap<Stage, StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub prompt: String,
    pub query: String,
    pub retrieved: Vec<String>,
    pub knowledge: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k_docs: usize,
    /// How many results to request from the provider before allowlisting.
    pub fetch_n: usize,
    pub specs: DefaultSpecs,
    pub tokens: ControlTokens,
    /// When set, retrieved documents must come from these domains.
    pub allowlist: Option<DomainAllowlist>,
    pub date_suffix: Option<String>,
    pub search_every_turn: bool,
    /// Turn a provider failure into an empty document list.
    pub allow_empty_retrieval: bool,
    pub fid_doc_tokens: usize,
    pub prepend_doc_tokens: usize,
    /// Overrides the backend's advertised context limit.
    pub max_context_tokens: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_docs: 5,
            fetch_n: 10,
            specs: DefaultSpecs::default(),
            tokens: ControlTokens::default(),
            allowlist: None,
            date_suffix: None,
            search_every_turn: true,
            allow_empty_retrieval: false,
            fid_doc_tokens: 256,
            prepend_doc_tokens: 512,
            max_context_tokens: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k_docs == 0 {
            return Err(PipelineError::Precondition("k_docs must be at least 1".into()));
        }
        if self.fid_doc_tokens == 0 || self.prepend_doc_tokens == 0 {
            return Err(PipelineError::Precondition("document token budgets must be at least 1".into()));
        }
        for (name, spec) in [
            ("search", &self.specs.search),
            ("knowledge", &self.specs.knowledge),
            ("response", &self.specs.response),
            ("lm_completion", &self.specs.lm_completion),
        ] {
            spec.validate()
                .map_err(|e| PipelineError::Precondition(format!("{name} spec: {e}")))?;
        }
        Ok(())
    }

    fn context_limit(&self, backend: &dyn GenerationBackend) -> Option<usize> {
        self.max_context_tokens.or(backend.capabilities().max_context_tokens)
    }
}

fn banned_for(spec: &DecodingSpec, context: &str, past: &[String]) -> Result<NGramSet, TextError> {
    if spec.block_n == 0 {
        return NGramSet::new(1);
    }
    let mut sources: Vec<&str> = Vec::new();
    if spec.blocks(BlockSource::Context) {
        sources.push(context);
    }
    if spec.blocks(BlockSource::PastKnowledge) {
        sources.extend(past.iter().map(String::as_str));
    }
    collect_banned_ngrams(&sources, spec.block_n)
}

fn query_from(
    context: &str,
    backend: &dyn GenerationBackend,
    cfg: &PipelineConfig,
) -> Result<String, PipelineError> {
    let input = PackedInput::bare(cfg.tokens.query_input(context));
    let banned = banned_for(&cfg.specs.search, context, &[]).map_err(at(Stage::Search))?;
    let query = decode_with_constraints(backend, &input, &cfg.specs.search, &banned)
        .map_err(at(Stage::Search))?;
    Ok(match cfg.date_suffix.as_deref().map(str::trim) {
        Some(suffix) if !suffix.is_empty() => format!("{query} {suffix}"),
        _ => query,
    })
}

/// Search query for the current context, with the date suffix appended.
pub fn generate_query(
    state: &ConversationState,
    backend: &dyn GenerationBackend,
    cfg: &PipelineConfig,
) -> Result<String, PipelineError> {
    if state.last_user_text().is_none() {
        return Err(PipelineError::Precondition("no user turn to search for".into()));
    }
    let context = state.context(&cfg.tokens, cfg.context_limit(backend));
    query_from(&context, backend, cfg)
}

/// Provider results, allowlisted and cut to `k_docs`.
pub fn retrieve(
    query: &str,
    provider: &dyn SearchProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<Document>, PipelineError> {
    if query.trim().is_empty() {
        return Err(PipelineError::Precondition("query is empty".into()));
    }
    let hits = match provider.search(query, cfg.fetch_n.max(cfg.k_docs)) {
        Ok(hits) => hits,
        Err(e) if cfg.allow_empty_retrieval => {
            tracing::warn!(error = %e, "retrieval failed; continuing without documents");
            Vec::new()
        }
        Err(e) => return Err(at(Stage::Retrieve)(e)),
    };
    Ok(match &cfg.allowlist {
        Some(allow) => filter_allowlist(hits, allow, cfg.k_docs),
        None => hits.into_iter().take(cfg.k_docs).collect(),
    })
}

/// Knowledge sentence for the current context, blocked against the context
/// and all earlier knowledge; appended to the state on success.
pub fn generate_knowledge(
    state: &mut ConversationState,
    docs: &[Document],
    backend: &dyn GenerationBackend,
    cfg: &PipelineConfig,
) -> Result<String, PipelineError> {
    let context = state.context(&cfg.tokens, cfg.context_limit(backend));
    let input = if backend.capabilities().fusion_in_decoder {
        pack_fid(&context, docs, cfg.fid_doc_tokens)
    } else {
        pack_prepend(&context, docs, cfg.prepend_doc_tokens).map_err(at(Stage::Knowledge))?
    };
    let spec = &cfg.specs.knowledge;
    let banned =
        banned_for(spec, &context, &state.accumulated_knowledge).map_err(at(Stage::Knowledge))?;
    let knowledge =
        decode_with_constraints(backend, &input, spec, &banned).map_err(at(Stage::Knowledge))?;
    state.accumulated_knowledge.push(knowledge.clone());
    Ok(knowledge)
}

/// Final reply given framed knowledge, blocked against the dialogue context.
pub fn generate_response(
    state: &ConversationState,
    knowledge: &str,
    backend: &dyn GenerationBackend,
    cfg: &PipelineConfig,
) -> Result<String, PipelineError> {
    if knowledge.trim().is_empty() {
        return Err(PipelineError::Precondition("knowledge is empty".into()));
    }
    let context = state.context(&cfg.tokens, cfg.context_limit(backend));
    let framed = frame_knowledge(&context, knowledge, &cfg.tokens).map_err(at(Stage::Response))?;
    let spec = &cfg.specs.response;
    let banned = banned_for(spec, &context, &[]).map_err(at(Stage::Response))?;
    decode_with_constraints(backend, &PackedInput::bare(framed), spec, &banned)
        .map_err(at(Stage::Response))
}

struct Clock(Instant);

impl Clock {
    fn time<T>(
        &self,
        timings: &mut BTreeMap<Stage, StageTiming>,
        stage: Stage,
        f: impl FnOnce() -> T,
    ) -> T {
        let start = self.0.elapsed();
        let out = f();
        let end = self.0.elapsed();
        timings.insert(
            stage,
            StageTiming {
                start_us: start.as_micros() as u64,
                duration_us: (end - start).as_micros() as u64,
            },
        );
        out
    }
}

/// One dialogue turn. On any stage failure the state is restored to exactly
/// what it was before the call.
pub fn run_turn(
    state: &mut ConversationState,
    user_message: &str,
    backend: &dyn GenerationBackend,
    provider: &dyn SearchProvider,
    cfg: &PipelineConfig,
) -> Result<TurnTrace, PipelineError> {
    if user_message.trim().is_empty() {
        return Err(PipelineError::Precondition("user message is empty".into()));
    }
    cfg.validate()?;
    let snapshot = state.clone();
    let result = turn_inner(state, user_message, backend, provider, cfg);
    if result.is_err() {
        *state = snapshot;
    }
    result
}

fn turn_inner(
    state: &mut ConversationState,
    user_message: &str,
    backend: &dyn GenerationBackend,
    provider: &dyn SearchProvider,
    cfg: &PipelineConfig,
) -> Result<TurnTrace, PipelineError> {
    let clock = Clock(Instant::now());
    let mut timings = BTreeMap::new();
    state.turns.push(Turn {
        speaker: Speaker::User,
        text: user_message.to_string(),
    });
    let (query, retrieved) = if cfg.search_every_turn {
        let query = clock.time(&mut timings, Stage::Search, || generate_query(state, backend, cfg))?;
        let docs = clock.time(&mut timings, Stage::Retrieve, || retrieve(&query, provider, cfg))?;
        (query, docs)
    } else {
        (String::new(), Vec::new())
    };
    let knowledge = clock.time(&mut timings, Stage::Knowledge, || {
        generate_knowledge(state, &retrieved, backend, cfg)
    })?;
    let response = clock.time(&mut timings, Stage::Response, || {
        generate_response(state, &knowledge, backend, cfg)
    })?;
    state.turns.push(Turn {
        speaker: Speaker::Model,
        text: response.clone(),
    });
    Ok(TurnTrace {
        query,
        retrieved,
        knowledge,
        response,
        stage_timings: timings,
    })
}

/// The same loop for a language-model prompt: prepend packing, knowledge
/// blocked against the prompt, and a greedy final decode.
pub fn complete_prompt(
    prompt: &str,
    backend: &dyn GenerationBackend,
    provider: &dyn SearchProvider,
    cfg: &PipelineConfig,
) -> Result<Completion, PipelineError> {
    if prompt.trim().is_empty() {
        return Err(PipelineError::Precondition("prompt is empty".into()));
    }
    cfg.validate()?;
    let context = cfg.tokens.escape(prompt);
    let query = query_from(&context, backend, cfg)?;
    let docs = retrieve(&query, provider, cfg)?;
    let input = pack_prepend(&context, &docs, cfg.prepend_doc_tokens).map_err(at(Stage::Knowledge))?;
    let spec = &cfg.specs.knowledge;
    let banned = banned_for(spec, &context, &[]).map_err(at(Stage::Knowledge))?;
    let knowledge =
        decode_with_constraints(backend, &input, spec, &banned).map_err(at(Stage::Knowledge))?;
    let framed = frame_knowledge(&context, &knowledge, &cfg.tokens).map_err(at(Stage::Response))?;
    let spec = &cfg.specs.lm_completion;
    let banned = banned_for(spec, &context, &[]).map_err(at(Stage::Response))?;
    let text = decode_with_constraints(backend, &PackedInput::bare(framed), spec, &banned)
        .map_err(at(Stage::Response))?;
    Ok(Completion {
        prompt: prompt.to_string(),
        query,
        retrieved: docs.into_iter().map(|d| d.url).collect(),
        knowledge,
        text,
    })
}

/// A backend, a search provider and a configuration bundled together.
#[derive(Clone)]
pub struct Pipeline {
    pub backend: Arc<dyn GenerationBackend>,
    pub provider: Arc<dyn SearchProvider>,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        backend: Arc<dyn GenerationBackend>,
        provider: Arc<dyn SearchProvider>,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            backend,
            provider,
            config,
        })
    }

    pub fn run_turn(&self, state: &mut ConversationState, user_message: &str) -> Result<TurnTrace, PipelineError> {
        run_turn(state, user_message, self.backend.as_ref(), self.provider.as_ref(), &self.config)
    }

    pub fn complete(&self, prompt: &str) -> Result<Completion, PipelineError> {
        complete_prompt(prompt, self.backend.as_ref(), self.provider.as_ref(), &self.config)
    }
}

#[cfg(test)]
mod tests;
