use crate::modelio::{BackendError, ControlTokens, GenerationBackend, GenerationRequest};
use crate::textops::{f1_text, normalize, split_sentences};

/// Deterministic stand-in for a trained model.
///
/// * search input: the last context line, verbatim
/// * knowledge input: every sentence of every packed document, ranked by F1
///   against the last context line (ties keep document order)
/// * response input: the framed knowledge followed by filler words that are
///   unique to the context length
#[derive(Debug, Clone, Default)]
pub struct CopyOracleBackend {
    tokens: ControlTokens,
}

impl CopyOracleBackend {
    pub fn new(tokens: ControlTokens) -> Self {
        Self { tokens }
    }
}

fn last_line(text: &str) -> &str {
    text.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

impl GenerationBackend for CopyOracleBackend {
    fn name(&self) -> &str {
        "copy-oracle"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let input = &request.input;
        let context = input.context.as_str();
        if let Some(before) = context.strip_suffix(self.tokens.generate_query.as_str()) {
            return Ok(vec![last_line(before).to_string()]);
        }
        if let (Some(open), Some(close)) = (
            context.rfind(self.tokens.knowledge_open.as_str()),
            context.rfind(self.tokens.knowledge_close.as_str()),
        ) {
            let knowledge = context[open + self.tokens.knowledge_open.len()..close].trim();
            let lines = context.lines().count();
            let filler_len = request.spec.min_length.max(1);
            let filler: Vec<String> = (0..filler_len).map(|i| format!("note{lines}x{i}")).collect();
            return Ok(vec![format!("{knowledge} {}", filler.join(" "))]);
        }
        let anchor = last_line(context);
        let mut ranked: Vec<(f64, usize, String)> = input
            .doc_bodies()
            .into_iter()
            .flat_map(split_sentences)
            .filter(|s| normalize(&s.text).len() >= request.spec.min_length)
            .enumerate()
            .map(|(i, s)| (f1_text(&s.text, anchor), i, s.text))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(ranked.into_iter().map(|(_, _, s)| s).collect())
    }
}
