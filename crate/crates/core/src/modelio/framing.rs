use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlTokens {
    pub generate_query: String,
    pub knowledge_open: String,
    pub knowledge_close: String,
}

impl Default for ControlTokens {
    fn default() -> Self {
        Self {
            generate_query: "__generate-query__".into(),
            knowledge_open: "__knowledge__".into(),
            knowledge_close: "__endknowledge__".into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FramingError {
    #[error("knowledge is empty")]
    EmptyKnowledge,
    #[error("text already contains control token `{0}`")]
    ContainsControlToken(String),
    #[error("expected exactly one framed knowledge segment, found {0}")]
    SegmentCount(usize),
    #[error("malformed knowledge frame")]
    Malformed,
}

impl ControlTokens {
    pub fn all(&self) -> [&str; 3] {
        [&self.generate_query, &self.knowledge_open, &self.knowledge_close]
    }

    pub fn find_in(&self, text: &str) -> Option<&str> {
        self.all().into_iter().find(|t| text.contains(t))
    }

    /// Defuses control tokens in untrusted text by splitting their leading
    /// underscore pair, e.g. `__knowledge__` becomes `_ _knowledge__`.
    pub fn escape(&self, text: &str) -> String {
        let mut out = text.to_string();
        for token in self.all() {
            if token.len() < 2 || !out.contains(token) {
                continue;
            }
            let (head, tail) = token.split_at(1);
            out = out.replace(token, &format!("{head} {tail}"));
        }
        out
    }

    /// Context as seen by the search stage: the query token on its own line
    /// after the context.
    pub fn query_input(&self, context: &str) -> String {
        if context.is_empty() {
            self.generate_query.clone()
        } else {
            format!("{context}\n{}", self.generate_query)
        }
    }
}

/// `context`, newline, then `open knowledge close`.
pub fn frame_knowledge(
    context: &str,
    knowledge: &str,
    tokens: &ControlTokens,
) -> Result<String, FramingError> {
    if knowledge.trim().is_empty() {
        return Err(FramingError::EmptyKnowledge);
    }
    for text in [context, knowledge] {
        if let Some(t) = tokens.find_in(text) {
            return Err(FramingError::ContainsControlToken(t.to_string()));
        }
    }
    let segment = format!("{} {knowledge} {}", tokens.knowledge_open, tokens.knowledge_close);
    Ok(if context.is_empty() {
        segment
    } else {
        format!("{context}\n{segment}")
    })
}

/// Inverse of [`frame_knowledge`].
pub fn unframe_knowledge(
    framed: &str,
    tokens: &ControlTokens,
) -> Result<(String, String), FramingError> {
    let opens = framed.matches(tokens.knowledge_open.as_str()).count();
    let closes = framed.matches(tokens.knowledge_close.as_str()).count();
    if opens != 1 || closes != 1 {
        return Err(FramingError::SegmentCount(opens.max(closes)));
    }
    let open_at = framed.find(tokens.knowledge_open.as_str()).unwrap();
    let head = &framed[..open_at];
    let body = framed[open_at + tokens.knowledge_open.len()..]
        .strip_suffix(tokens.knowledge_close.as_str())
        .and_then(|b| b.strip_prefix(' '))
        .and_then(|b| b.strip_suffix(' '))
        .ok_or(FramingError::Malformed)?;
    let context = if head.is_empty() {
        ""
    } else {
        head.strip_suffix('\n').ok_or(FramingError::Malformed)?
    };
    Ok((context.to_string(), body.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_round_trip() {
        let t = ControlTokens::default();
        let framed = frame_knowledge("hi there", "K", &t).unwrap();
        assert_eq!(framed, "hi there\n__knowledge__ K __endknowledge__");
        assert_eq!(unframe_knowledge(&framed, &t).unwrap(), ("hi there".into(), "K".into()));
        let bare = frame_knowledge("", "K", &t).unwrap();
        assert_eq!(unframe_knowledge(&bare, &t).unwrap(), (String::new(), "K".into()));
    }

    #[test]
    fn frame_rejections() {
        let t = ControlTokens::default();
        assert_eq!(frame_knowledge("c", "  ", &t), Err(FramingError::EmptyKnowledge));
        let nested = frame_knowledge("c", "K", &t).unwrap();
        assert!(matches!(
            frame_knowledge(&nested, "K2", &t),
            Err(FramingError::ContainsControlToken(_))
        ));
        assert!(matches!(
            frame_knowledge("c", "__endknowledge__", &t),
            Err(FramingError::ContainsControlToken(_))
        ));
        assert_eq!(unframe_knowledge("no frame", &t), Err(FramingError::SegmentCount(0)));
    }

    #[test]
    fn escape_removes_tokens() {
        let t = ControlTokens::default();
        let escaped = t.escape("say __knowledge__ and __generate-query__ now");
        assert_eq!(escaped, "say _ _knowledge__ and _ _generate-query__ now");
        assert!(t.find_in(&escaped).is_none());
        assert_eq!(t.query_input("ctx"), "ctx\n__generate-query__");
    }

    proptest! {
        #[test]
        fn frame_unframe_inverse(context in "\\PC{0,40}", knowledge in "\\PC{1,40}") {
            let t = ControlTokens::default();
            prop_assume!(!knowledge.trim().is_empty());
            let context = t.escape(&context);
            let knowledge = t.escape(&knowledge);
            prop_assume!(t.find_in(&context).is_none() && t.find_in(&knowledge).is_none());
            let framed = frame_knowledge(&context, &knowledge, &t).unwrap();
            prop_assert_eq!(unframe_knowledge(&framed, &t).unwrap(), (context, knowledge));
        }
    }
}
