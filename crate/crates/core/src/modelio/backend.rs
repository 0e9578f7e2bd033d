use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::packing::PackedInput;
use super::spec::DecodingSpec;
use crate::textops::NGramSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no scripted output matches the input")]
    Unmatched,
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("request {request_id}: transport failure: {message}")]
    Transport { request_id: String, message: String },
    #[error("request {request_id}: HTTP {status}: {body}")]
    Status {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id}: protocol error: {message}")]
    Protocol { request_id: String, message: String },
    #[error("request {request_id}: backend reported: {message}")]
    Remote { request_id: String, message: String },
    #[error("{0}")]
    Other(String),
}

/// Total negative log-likelihood of a continuation and its token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub nll: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Accepts fusion-in-decoder slots; otherwise documents are prepended.
    pub fusion_in_decoder: bool,
    /// Calls must not overlap.
    pub single_flight: bool,
    pub scoring: bool,
    /// Longest context, in whitespace tokens, the backend accepts.
    pub max_context_tokens: Option<usize>,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            fusion_in_decoder: true,
            single_flight: false,
            scoring: false,
            max_context_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub input: PackedInput,
    pub spec: DecodingSpec,
    pub banned: NGramSet,
}

/// Anything that can produce text for a packed input. `generate` returns
/// candidates best-first; the decoding wrapper picks the first one that
/// satisfies the constraints.
pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str {
        "backend"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError>;

    fn score(&self, _input: &PackedInput, _continuation: &str) -> Result<Score, BackendError> {
        Err(BackendError::Unsupported("scoring"))
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        (**self).generate(request)
    }
    fn score(&self, input: &PackedInput, continuation: &str) -> Result<Score, BackendError> {
        (**self).score(input, continuation)
    }
}

/// Lookup-table backend for tests: the first entry whose pattern occurs in
/// the rendered input wins. Every request is recorded.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: Vec<(String, Vec<String>)>,
    capabilities: Capabilities,
    log: Mutex<Vec<GenerationRequest>>,
}

impl ScriptedBackend {
    pub fn new<P, O>(script: impl IntoIterator<Item = (P, O)>) -> Self
    where
        P: Into<String>,
        O: Into<String>,
    {
        Self::with_candidates(script.into_iter().map(|(p, o)| (p, vec![o.into()])))
    }

    pub fn with_candidates<P: Into<String>>(
        script: impl IntoIterator<Item = (P, Vec<String>)>,
    ) -> Self {
        Self {
            script: script.into_iter().map(|(p, o)| (p.into(), o)).collect(),
            capabilities: Capabilities::default(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        self.log.lock().unwrap().push(request.clone());
        let rendered = request.input.render();
        self.script
            .iter()
            .find(|(pattern, _)| rendered.contains(pattern.as_str()))
            .map(|(_, out)| out.clone())
            .ok_or(BackendError::Unmatched)
    }
}

/// Backend driven by a closure.
pub struct FnBackend<F> {
    name: String,
    capabilities: Capabilities,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<Vec<String>, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            capabilities: Capabilities::default(),
            f,
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }
}

impl<F> GenerationBackend for FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<Vec<String>, BackendError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        (self.f)(request)
    }
}

/// Serializes every call into the wrapped backend.
pub struct SingleFlight<B> {
    inner: B,
    gate: Mutex<()>,
}

impl<B: GenerationBackend> SingleFlight<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            gate: Mutex::new(()),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for SingleFlight<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let _guard = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.generate(request)
    }

    fn score(&self, input: &PackedInput, continuation: &str) -> Result<Score, BackendError> {
        let _guard = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.score(input, continuation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::DecodingSpec;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn request(text: &str) -> GenerationRequest {
        GenerationRequest {
            input: PackedInput::bare(text),
            spec: DecodingSpec::greedy(0),
            banned: NGramSet::new(3).unwrap(),
        }
    }

    #[test]
    fn scripted_lookup() {
        let b = ScriptedBackend::new([("alpha", "one"), ("beta", "two"), ("alph", "shadowed")]);
        assert_eq!(b.generate(&request("x alpha y")).unwrap(), ["one"]);
        assert_eq!(b.generate(&request("beta")).unwrap(), ["two"]);
        assert_eq!(b.generate(&request("gamma")), Err(BackendError::Unmatched));
        assert_eq!(b.requests().len(), 3);
        assert!(b.score(&PackedInput::bare("x"), "y").is_err());
    }

    #[test]
    fn single_flight_never_overlaps() {
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (a, p) = (active.clone(), peak.clone());
        let backend = Arc::new(SingleFlight::new(FnBackend::new("slow", move |_| {
            let now = a.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            a.fetch_sub(1, Ordering::SeqCst);
            Ok(vec!["ok".into()])
        })));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let b = backend.clone();
                std::thread::spawn(move || b.generate(&request("x")).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(peak.load(Ordering::SeqCst), 1);
    }
}
