use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::textops::whitespace_chunks;

/// Separator placed between documents, and between the last document and
/// the context, in prepend packing.
pub const PREPEND_SEPARATOR: &str = "\n---\n";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PackingError {
    #[error("token budget must be at least 1")]
    ZeroBudget,
}

/// One fusion-in-decoder encoder slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub header: String,
    pub body: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum Packing {
    FusionSlots { slots: Vec<Slot> },
    Prepend { flat_text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedInput {
    #[serde(flatten)]
    pub packing: Packing,
    pub context: String,
    pub per_doc_token_budget: usize,
}

impl PackedInput {
    /// Context-only input with no documents.
    pub fn bare(context: impl Into<String>) -> Self {
        let context = context.into();
        Self {
            packing: Packing::Prepend {
                flat_text: context.clone(),
            },
            context,
            per_doc_token_budget: 0,
        }
    }

    /// Single string view of everything the model sees.
    pub fn render(&self) -> String {
        match &self.packing {
            Packing::Prepend { flat_text } => flat_text.clone(),
            Packing::FusionSlots { slots } => slots
                .iter()
                .map(|s| {
                    [s.header.as_str(), s.body.as_str(), s.context.as_str()]
                        .into_iter()
                        .filter(|p| !p.is_empty())
                        .collect::<Vec<_>>()
                        .join("\n")
                })
                .collect::<Vec<_>>()
                .join("\n\n"),
        }
    }

    /// Document bodies as packed (possibly truncated).
    pub fn doc_bodies(&self) -> Vec<&str> {
        match &self.packing {
            Packing::FusionSlots { slots } => slots
                .iter()
                .filter(|s| !(s.header.is_empty() && s.body.is_empty()))
                .map(|s| s.body.as_str())
                .collect(),
            Packing::Prepend { flat_text } => {
                let parts: Vec<&str> = flat_text.split(PREPEND_SEPARATOR).collect();
                // the context may itself contain the separator; only the
                // leading parts before the last-context boundary are docs
                let ctx_parts = self.context.split(PREPEND_SEPARATOR).count();
                parts[..parts.len().saturating_sub(ctx_parts)].to_vec()
            }
        }
    }
}

/// First `budget` whitespace tokens of `text`, re-joined with single spaces,
/// and how many tokens were kept.
pub fn truncate_tokens(text: &str, budget: usize) -> (String, usize) {
    let words: Vec<&str> = whitespace_chunks(text).map(|(_, w)| w).take(budget).collect();
    (words.join(" "), words.len())
}

/// One slot per document, each carrying the full context; with no documents
/// a single context-only slot.
pub fn pack_fid(context: &str, docs: &[Document], per_doc_budget: usize) -> PackedInput {
    let mut slots: Vec<Slot> = docs
        .iter()
        .map(|d| Slot {
            header: d.title.clone(),
            body: truncate_tokens(&d.content, per_doc_budget).0,
            context: context.to_string(),
        })
        .collect();
    if slots.is_empty() {
        slots.push(Slot {
            header: String::new(),
            body: String::new(),
            context: context.to_string(),
        });
    }
    PackedInput {
        packing: Packing::FusionSlots { slots },
        context: context.to_string(),
        per_doc_token_budget: per_doc_budget,
    }
}

/// Truncated documents joined by [`PREPEND_SEPARATOR`], then the context.
/// `budget` is split evenly with the remainder going to earlier documents.
pub fn pack_prepend(
    context: &str,
    docs: &[Document],
    budget: usize,
) -> Result<PackedInput, PackingError> {
    if budget == 0 {
        return Err(PackingError::ZeroBudget);
    }
    if docs.is_empty() {
        return Ok(PackedInput {
            per_doc_token_budget: budget,
            ..PackedInput::bare(context)
        });
    }
    let (base, extra) = (budget / docs.len(), budget % docs.len());
    let mut parts: Vec<String> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| truncate_tokens(&d.content, base + usize::from(i < extra)).0)
        .collect();
    parts.push(context.to_string());
    Ok(PackedInput {
        packing: Packing::Prepend {
            flat_text: parts.join(PREPEND_SEPARATOR),
        },
        context: context.to_string(),
        per_doc_token_budget: base,
    })
}

/// Splits prepend-packed text back into `doc_count` document segments and
/// the context.
pub fn split_prepend(flat_text: &str, doc_count: usize) -> (Vec<&str>, &str) {
    let mut parts: Vec<&str> = flat_text.splitn(doc_count + 1, PREPEND_SEPARATOR).collect();
    let context = if parts.len() > doc_count { parts.pop().unwrap() } else { "" };
    (parts, context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(i: usize, words: usize) -> Document {
        let content = (0..words).map(|w| format!("w{i}x{w}")).collect::<Vec<_>>().join(" ");
        Document::new(format!("d{i}"), "https://example.com", format!("title {i}"), content)
    }

    #[test]
    fn fid_slots() {
        let docs: Vec<_> = (0..5).map(|i| doc(i, 10)).collect();
        let packed = pack_fid("ctx", &docs, 4);
        let Packing::FusionSlots { slots } = &packed.packing else { panic!() };
        assert_eq!(slots.len(), 5);
        assert!(slots.iter().all(|s| s.context == "ctx"));
        assert!(slots.iter().all(|s| s.body.split(' ').count() == 4));

        let empty = pack_fid("ctx", &[], 4);
        let Packing::FusionSlots { slots } = &empty.packing else { panic!() };
        assert_eq!(slots.len(), 1);
        assert!(empty.doc_bodies().is_empty());
    }

    #[test]
    fn prepend_even_split() {
        let docs = [doc(0, 80), doc(1, 80)];
        let packed = pack_prepend("the context", &docs, 100).unwrap();
        assert_eq!(packed.per_doc_token_budget, 50);
        let Packing::Prepend { flat_text } = &packed.packing else { panic!() };
        let (segments, context) = split_prepend(flat_text, 2);
        assert_eq!(context, "the context");
        assert!(segments.iter().all(|s| s.split(' ').count() == 50));

        let alone = pack_prepend("just context", &[], 10).unwrap();
        assert_eq!(alone.render(), "just context");
        assert_eq!(pack_prepend("c", &docs, 0), Err(PackingError::ZeroBudget));
    }

    #[test]
    fn prepend_remainder_goes_first() {
        let docs = [doc(0, 20), doc(1, 20), doc(2, 20)];
        let packed = pack_prepend("c", &docs, 10).unwrap();
        let counts: Vec<_> = packed.doc_bodies().iter().map(|b| b.split(' ').count()).collect();
        assert_eq!(counts, [4, 3, 3]);
    }

    proptest! {
        #[test]
        fn prepend_parse_back(lens in proptest::collection::vec(0usize..30, 0..6), budget in 1usize..60, ctx in "[a-z ]{0,20}(\n---\n[a-z]{0,5})?") {
            let docs: Vec<_> = lens.iter().enumerate().map(|(i, &n)| doc(i, n)).collect();
            let packed = pack_prepend(&ctx, &docs, budget).unwrap();
            let Packing::Prepend { flat_text } = &packed.packing else { panic!() };
            let (segments, context) = split_prepend(flat_text, docs.len());
            prop_assert_eq!(segments.len(), docs.len());
            prop_assert_eq!(context, ctx.as_str());
            let total: usize = segments.iter().map(|s| s.split_whitespace().count()).sum();
            prop_assert!(total <= budget);
            for (seg, d) in segments.iter().zip(&docs) {
                prop_assert!(d.content.starts_with(seg));
            }
            prop_assert_eq!(packed.doc_bodies(), segments);
        }
    }
}
