//! Seeded synthetic corpora and dialogue turns.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use seeker_core::corpus::Document;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "s", "x"];

/// Sentence openers that the entity heuristic ignores at sentence start.
const OPENERS: [&str; 5] = ["The", "It", "This", "They", "We"];

/// Pronounceable pseudo-words plus capitalized entity names.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub words: Vec<String>,
    pub entities: Vec<String>,
    cumulative: Vec<f64>,
}

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}{}",
        ONSETS.choose(rng).unwrap(),
        VOWELS.choose(rng).unwrap(),
        CODAS.choose(rng).unwrap()
    )
}

impl Vocab {
    /// `n_words` distinct lowercase words sampled with Zipf-like weights and
    /// `n_entities` distinct capitalized names.
    pub fn new<R: Rng>(rng: &mut R, n_words: usize, n_entities: usize) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let mut fresh = |rng: &mut R, syllables: usize| {
            for attempt in 0.. {
                let w: String = (0..syllables + attempt / 32).map(|_| syllable(rng)).collect();
                if seen.insert(w.clone()) {
                    return w;
                }
            }
            unreachable!()
        };
        let words: Vec<String> = (0..n_words).map(|i| fresh(rng, 1 + i % 3)).collect();
        let entities = (0..n_entities)
            .map(|_| {
                let w = fresh(rng, 3);
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                format!("{first}{}", c.as_str())
            })
            .collect();
        let mut acc = 0.0;
        let cumulative = (0..n_words)
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        Self {
            words,
            entities,
            cumulative,
        }
    }

    pub fn word<R: Rng>(&self, rng: &mut R) -> &str {
        let x = rng.random::<f64>() * self.cumulative.last().unwrap();
        let i = self.cumulative.partition_point(|&c| c < x);
        &self.words[i.min(self.words.len() - 1)]
    }

    pub fn entity<R: Rng>(&self, rng: &mut R) -> &str {
        self.entities.choose(rng).unwrap()
    }

    /// `len` words including one entity, opened by a stop-listed word or by
    /// the entity itself, ending with a period.
    pub fn sentence<R: Rng>(&self, rng: &mut R, len: usize) -> String {
        let entity = self.entity(rng).to_string();
        let mut words: Vec<String> = Vec::with_capacity(len);
        if rng.random_bool(0.5) {
            words.push(entity.clone());
        } else {
            words.push(OPENERS.choose(rng).unwrap().to_string());
        }
        while words.len() < len.max(3) - 1 {
            words.push(self.word(rng).to_string());
        }
        if words[0] != entity {
            let at = rng.random_range(1..words.len());
            words.insert(at, entity);
        } else {
            words.push(self.word(rng).to_string());
        }
        format!("{}.", words.join(" "))
    }
}

/// Replaces `k` non-entity words of `sentence` with fresh vocabulary words.
pub fn paraphrase<R: Rng>(rng: &mut R, vocab: &Vocab, sentence: &str, k: usize) -> String {
    let body = sentence.trim_end_matches('.');
    let mut words: Vec<String> = body.split_whitespace().map(str::to_string).collect();
    let mut slots: Vec<usize> = (1..words.len())
        .filter(|&i| !words[i].starts_with(|c: char| c.is_ascii_uppercase()))
        .collect();
    slots.shuffle(rng);
    for &i in slots.iter().take(k) {
        words[i] = vocab.word(rng).to_string();
    }
    format!("{}.", words.join(" "))
}

#[derive(Debug, Clone)]
pub struct MiningCorpus {
    pub docs: Vec<Document>,
    /// `(doc position, sentence index)` pairs to mine for.
    pub targets: Vec<(usize, usize)>,
    pub planted: usize,
}

/// `n_docs` documents of 5 to 8 sentences. For half of the `n_targets`
/// targets a lightly paraphrased copy is planted in another document; the
/// rest are ordinary sentences.
pub fn mining_corpus<R: Rng>(rng: &mut R, n_docs: usize, n_targets: usize) -> MiningCorpus {
    let vocab = Vocab::new(rng, 900, 150);
    let mut bodies: Vec<Vec<String>> = (0..n_docs)
        .map(|_| {
            let n = rng.random_range(5..=8);
            (0..n).map(|_| {
                let len = rng.random_range(8..=18);
                vocab.sentence(rng, len)
            }).collect()
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    while pairs.len() < n_targets {
        let d = rng.random_range(0..n_docs);
        let s = rng.random_range(0..bodies[d].len());
        if !pairs.contains(&(d, s)) {
            pairs.push((d, s));
        }
    }
    let planted = n_targets / 2;
    for &(d, s) in &pairs[..planted] {
        let mut host = rng.random_range(0..n_docs);
        while host == d {
            host = rng.random_range(0..n_docs);
        }
        let k = rng.random_range(1..=4);
        let copy = paraphrase(rng, &vocab, &bodies[d][s].clone(), k);
        bodies[host].push(copy);
    }
    let docs = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Document::new(
                format!("doc{i:03}"),
                format!("https://site{}.example.org/page/{i}", i % 25),
                format!("{} overview", vocab.entities[i % vocab.entities.len()]),
                b.join(" "),
            )
        })
        .collect();
    MiningCorpus {
        docs,
        targets: pairs,
        planted,
    }
}

/// Documents with long sentences spread over `n_domains` hosts.
pub fn dialogue_corpus<R: Rng>(rng: &mut R, n_docs: usize, n_domains: usize) -> (Vec<Document>, Vocab) {
    let vocab = Vocab::new(rng, 1500, 200);
    let docs = (0..n_docs)
        .map(|i| {
            let n = rng.random_range(4..=7);
            let body: Vec<String> = (0..n).map(|_| {
                let len = rng.random_range(12..=20);
                vocab.sentence(rng, len)
            }).collect();
            Document::new(
                format!("doc{i:03}"),
                format!("https://www.host{}.example.com/a/{i}", i % n_domains),
                format!("{} notes", vocab.entities[i % vocab.entities.len()]),
                body.join(" "),
            )
        })
        .collect();
    (docs, vocab)
}

/// A short user message: a few words of a random document, shuffled so it
/// shares vocabulary but not phrasing.
pub fn user_message<R: Rng>(rng: &mut R, docs: &[Document]) -> String {
    let doc = docs.choose(rng).unwrap();
    let mut words: Vec<&str> = doc
        .content
        .split_whitespace()
        .map(|w| w.trim_end_matches('.'))
        .filter(|w| w.len() > 3)
        .collect();
    words.shuffle(rng);
    words.truncate(rng.random_range(3..=5));
    format!("tell me about {}", words.join(" or "))
}
