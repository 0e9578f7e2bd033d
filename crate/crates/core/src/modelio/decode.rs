use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use super::backend::{BackendError, GenerationBackend, GenerationRequest};
use super::packing::PackedInput;
use super::spec::{BlockSource, DecodingSpec};
use crate::textops::{normalize, NGramSet, TextError};

/// Why a candidate output was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    TooShort { length: usize, min: usize },
    Banned(Vec<String>),
    Repeated(Vec<String>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty output"),
            Violation::TooShort { length, min } => {
                write!(f, "output has {length} tokens, minimum is {min}")
            }
            Violation::Banned(g) => write!(f, "output contains blocked n-gram `{}`", g.join(" ")),
            Violation::Repeated(g) => write!(f, "output repeats n-gram `{}`", g.join(" ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("invalid decoding spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned no candidates")]
    NoCandidates,
    #[error("no candidate satisfies the decoding constraints ({tried} tried; first: {first})")]
    Unsatisfiable { tried: usize, first: Violation },
}

/// Union of the `n`-grams of every source after normalization.
pub fn collect_banned_ngrams<S: AsRef<str>>(sources: &[S], n: usize) -> Result<NGramSet, TextError> {
    let mut set = NGramSet::new(n)?;
    for s in sources {
        set.extend_from(normalize(s.as_ref()).tokens());
    }
    Ok(set)
}

/// Checks one output against `spec` at the normalized-token level.
pub fn check_output(text: &str, spec: &DecodingSpec, banned: &NGramSet) -> Result<(), Violation> {
    let tokens = normalize(text);
    if text.trim().is_empty() {
        return Err(Violation::Empty);
    }
    if tokens.len() < spec.min_length {
        return Err(Violation::TooShort {
            length: tokens.len(),
            min: spec.min_length,
        });
    }
    if spec.block_n == 0 {
        return Ok(());
    }
    let self_block = spec.blocks(BlockSource::SelfGenerated);
    let mut seen = HashSet::new();
    for window in tokens.tokens().windows(spec.block_n) {
        if banned.contains(window) {
            return Err(Violation::Banned(window.to_vec()));
        }
        if self_block && !seen.insert(window) {
            return Err(Violation::Repeated(window.to_vec()));
        }
    }
    Ok(())
}

/// Asks the backend for candidates and returns the first one meeting the
/// length and blocking constraints. Never falls back to an unconstrained
/// output.
pub fn decode_with_constraints(
    backend: &dyn GenerationBackend,
    input: &PackedInput,
    spec: &DecodingSpec,
    banned: &NGramSet,
) -> Result<String, DecodeError> {
    spec.validate().map_err(DecodeError::InvalidSpec)?;
    if spec.block_n > 0 && banned.n() != spec.block_n {
        return Err(DecodeError::InvalidSpec(format!(
            "banned set has order {}, spec blocks order {}",
            banned.n(),
            spec.block_n
        )));
    }
    let request = GenerationRequest {
        input: input.clone(),
        spec: spec.clone(),
        banned: banned.clone(),
    };
    let candidates = backend.generate(&request)?;
    let mut first = None;
    for candidate in &candidates {
        match check_output(candidate, spec, banned) {
            Ok(()) => return Ok(candidate.trim().to_string()),
            Err(v) => {
                tracing::debug!(backend = backend.name(), violation = %v, "candidate rejected");
                first.get_or_insert(v);
            }
        }
    }
    match first {
        None => Err(DecodeError::NoCandidates),
        Some(first) => Err(DecodeError::Unsatisfiable {
            tried: candidates.len(),
            first,
        }),
    }
}
