use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

/// Where banned n-grams come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSource {
    /// The dialogue context (or LM prompt).
    Context,
    /// Knowledge responses generated earlier in the same conversation.
    PastKnowledge,
    /// The output may not repeat one of its own n-grams.
    SelfGenerated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingSpec {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Minimum output length in normalized tokens.
    pub min_length: usize,
    /// N-gram blocking order; 0 disables blocking.
    pub block_n: usize,
    #[serde(default)]
    pub block_sources: BTreeSet<BlockSource>,
}

impl DecodingSpec {
    pub fn greedy(min_length: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_size: 1,
            min_length,
            block_n: 0,
            block_sources: BTreeSet::new(),
        }
    }

    pub fn beam(
        beam_size: usize,
        min_length: usize,
        block_n: usize,
        sources: impl IntoIterator<Item = BlockSource>,
    ) -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_size,
            min_length,
            block_n,
            block_sources: sources.into_iter().collect(),
        }
    }

    pub fn blocks(&self, source: BlockSource) -> bool {
        self.block_n > 0 && self.block_sources.contains(&source)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.beam_size == 0 {
            return Err("beam_size must be at least 1".into());
        }
        if self.strategy == Strategy::Greedy && self.beam_size != 1 {
            return Err(format!("greedy decoding with beam_size {}", self.beam_size));
        }
        Ok(())
    }
}

/// Decoding settings for each stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefaultSpecs {
    pub search: DecodingSpec,
    pub knowledge: DecodingSpec,
    pub response: DecodingSpec,
    pub lm_completion: DecodingSpec,
}

impl Default for DefaultSpecs {
    fn default() -> Self {
        use BlockSource::*;
        Self {
            search: DecodingSpec::greedy(2),
            knowledge: DecodingSpec::beam(3, 10, 3, [Context, PastKnowledge, SelfGenerated]),
            response: DecodingSpec::beam(10, 20, 3, [Context, SelfGenerated]),
            lm_completion: DecodingSpec::greedy(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_constants() {
        let d = DefaultSpecs::default();
        assert_eq!((d.search.strategy, d.search.beam_size, d.search.min_length), (Strategy::Greedy, 1, 2));
        assert_eq!(d.search.block_n, 0);
        assert_eq!(
            (d.knowledge.strategy, d.knowledge.beam_size, d.knowledge.min_length, d.knowledge.block_n),
            (Strategy::Beam, 3, 10, 3)
        );
        assert!(d.knowledge.blocks(BlockSource::Context));
        assert!(d.knowledge.blocks(BlockSource::PastKnowledge));
        assert!(d.knowledge.blocks(BlockSource::SelfGenerated));
        assert_eq!(
            (d.response.strategy, d.response.beam_size, d.response.min_length, d.response.block_n),
            (Strategy::Beam, 10, 20, 3)
        );
        assert!(d.response.blocks(BlockSource::Context));
        assert!(!d.response.blocks(BlockSource::PastKnowledge));
        assert_eq!(d.lm_completion.strategy, Strategy::Greedy);
        for spec in [&d.search, &d.knowledge, &d.response, &d.lm_completion] {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn greedy_requires_beam_one() {
        let mut s = DecodingSpec::greedy(2);
        s.beam_size = 4;
        assert!(s.validate().is_err());
    }
}
