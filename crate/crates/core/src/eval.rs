//! Automatic metrics, topical prompts and annotation aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::modelio::{BackendError, GenerationBackend, PackedInput};
use crate::textops::f1_text;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold examples")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("gold example {0} has an empty response")]
    EmptyGoldResponse(usize),
    #[error("backend `{0}` does not support scoring")]
    ScoringUnsupported(String),
    #[error("perplexity over zero tokens is undefined")]
    ZeroTokens,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExample {
    #[serde(default)]
    pub context: String,
    pub gold_response: String,
    #[serde(default)]
    pub gold_knowledge: Vec<String>,
    #[serde(default)]
    pub gold_docs: Option<Vec<Document>>,
}

/// A prediction line: a bare JSON string or an object with `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Text(String),
    Record {
        #[serde(alias = "response")]
        text: String,
    },
}

impl Prediction {
    pub fn text(&self) -> &str {
        match self {
            Prediction::Text(t) | Prediction::Record { text: t } => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub f1: f64,
    pub kf1: f64,
    pub ppl: Option<f64>,
    /// Examples with no gold knowledge; they score 0 knowledge F1.
    pub kf1_missing_knowledge: usize,
}

/// Order-independent mean: values are summed in sorted order.
fn mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Knowledge F1 of one prediction; gold sentences are joined with spaces.
pub fn knowledge_f1(pred: &str, gold_knowledge: &[String]) -> f64 {
    if gold_knowledge.is_empty() {
        return 0.0;
    }
    f1_text(pred, &gold_knowledge.join(" "))
}

pub fn eval_generations<S: AsRef<str>>(preds: &[S], golds: &[GoldExample]) -> Result<EvalReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = golds.iter().position(|g| g.gold_response.trim().is_empty()) {
        return Err(EvalError::EmptyGoldResponse(i));
    }
    let f1 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| f1_text(p.as_ref(), &g.gold_response))
        .collect();
    let kf1 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| knowledge_f1(p.as_ref(), &g.gold_knowledge))
        .collect();
    Ok(EvalReport {
        n: preds.len(),
        f1: mean(f1),
        kf1: mean(kf1),
        ppl: None,
        kf1_missing_knowledge: golds.iter().filter(|g| g.gold_knowledge.is_empty()).count(),
    })
}

/// Running negative log-likelihood total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllTotal {
    pub nll: f64,
    pub tokens: usize,
}

impl NllTotal {
    pub fn add(&mut self, nll: f64, tokens: usize) {
        self.nll += nll;
        self.tokens += tokens;
    }

    pub fn merge(self, other: NllTotal) -> NllTotal {
        NllTotal {
            nll: self.nll + other.nll,
            tokens: self.tokens + other.tokens,
        }
    }

    pub fn perplexity(&self) -> Result<f64, EvalError> {
        if self.tokens == 0 {
            return Err(EvalError::ZeroTokens);
        }
        Ok((self.nll / self.tokens as f64).exp())
    }
}

/// Scores every `(context, target)` pair and pools them.
pub fn score_examples<C: AsRef<str>, T: AsRef<str>>(
    backend: &dyn GenerationBackend,
    examples: &[(C, T)],
) -> Result<NllTotal, EvalError> {
    if !backend.capabilities().scoring {
        return Err(EvalError::ScoringUnsupported(backend.name().to_string()));
    }
    let mut total = NllTotal::default();
    for (context, target) in examples {
        let score = backend
            .score(&PackedInput::bare(context.as_ref()), target.as_ref())
            .map_err(|e| match e {
                BackendError::Unsupported(_) => EvalError::ScoringUnsupported(backend.name().to_string()),
                e => e.into(),
            })?;
        total.add(score.nll, score.token_count);
    }
    Ok(total)
}

/// `exp(Σ nll / Σ tokens)` over all examples.
pub fn perplexity<C: AsRef<str>, T: AsRef<str>>(
    backend: &dyn GenerationBackend,
    examples: &[(C, T)],
) -> Result<f64, EvalError> {
    score_examples(backend, examples)?.perplexity()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicalPrompt {
    pub topic: String,
    pub prompt: String,
}

pub fn topical_prompt(topic: &str) -> String {
    format!("In recent developments, we have learned the following about {topic}.")
}

/// One prompt per topic, skipping topics that mention covid in any case.
pub fn build_topical_prompts<S: AsRef<str>>(topics: &[S]) -> Vec<TopicalPrompt> {
    topics
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !t.to_lowercase().contains("covid"))
        .map(|t| TopicalPrompt {
            topic: t.to_string(),
            prompt: topical_prompt(t),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnAnnotation {
    pub consistent: bool,
    pub knowledgeable: bool,
    pub factually_incorrect: bool,
    pub engaging: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionAnnotation {
    pub sensible: bool,
    pub true_info: bool,
    pub hallucination: bool,
    pub topical: bool,
}

fn pct(count: usize, of: usize) -> f64 {
    if of == 0 {
        0.0
    } else {
        100.0 * count as f64 / of as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCounts {
    pub n: usize,
    pub consistent: usize,
    pub knowledgeable: usize,
    pub factually_incorrect: usize,
    pub engaging: usize,
    pub knowledgeable_and_engaging: usize,
}

impl TurnCounts {
    pub fn add(&mut self, a: &TurnAnnotation) {
        self.n += 1;
        self.consistent += usize::from(a.consistent);
        self.knowledgeable += usize::from(a.knowledgeable);
        self.factually_incorrect += usize::from(a.factually_incorrect);
        self.engaging += usize::from(a.engaging);
        self.knowledgeable_and_engaging += usize::from(a.knowledgeable && a.engaging);
    }
}

/// Per-model percentages of annotated turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub counts: TurnCounts,
    pub consistent: f64,
    pub knowledgeable: f64,
    pub factually_incorrect: f64,
    pub engaging: f64,
    pub knowledgeable_and_engaging: f64,
    /// Share of knowledgeable turns that were also engaging; absent when no
    /// turn was knowledgeable.
    pub engaging_given_knowledgeable: Option<f64>,
}

impl From<TurnCounts> for TurnSummary {
    fn from(c: TurnCounts) -> Self {
        Self {
            counts: c,
            consistent: pct(c.consistent, c.n),
            knowledgeable: pct(c.knowledgeable, c.n),
            factually_incorrect: pct(c.factually_incorrect, c.n),
            engaging: pct(c.engaging, c.n),
            knowledgeable_and_engaging: pct(c.knowledgeable_and_engaging, c.n),
            engaging_given_knowledgeable: (c.knowledgeable > 0)
                .then(|| pct(c.knowledgeable_and_engaging, c.knowledgeable)),
        }
    }
}

impl TurnSummary {
    /// Consistent, knowledgeable, factually incorrect, engaging, both, and
    /// engaging given knowledgeable.
    pub fn row(&self) -> [Option<f64>; 6] {
        [
            Some(self.consistent),
            Some(self.knowledgeable),
            Some(self.factually_incorrect),
            Some(self.engaging),
            Some(self.knowledgeable_and_engaging),
            self.engaging_given_knowledgeable,
        ]
    }
}

pub fn aggregate_turn_annotations<M: AsRef<str>>(records: &[(M, TurnAnnotation)]) -> BTreeMap<String, TurnSummary> {
    let mut counts: BTreeMap<String, TurnCounts> = BTreeMap::new();
    for (model, a) in records {
        counts.entry(model.as_ref().to_string()).or_default().add(a);
    }
    counts.into_iter().map(|(m, c)| (m, c.into())).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionCounts {
    pub n: usize,
    pub sensible: usize,
    pub true_info: usize,
    pub hallucination: usize,
    pub topical: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub counts: CompletionCounts,
    pub sensible: f64,
    pub true_info: f64,
    pub hallucination: f64,
    pub topical: f64,
}

impl From<CompletionCounts> for CompletionSummary {
    fn from(c: CompletionCounts) -> Self {
        Self {
            counts: c,
            sensible: pct(c.sensible, c.n),
            true_info: pct(c.true_info, c.n),
            hallucination: pct(c.hallucination, c.n),
            topical: pct(c.topical, c.n),
        }
    }
}

impl CompletionSummary {
    /// Sensible, true, hallucination, topical.
    pub fn row(&self) -> [f64; 4] {
        [self.sensible, self.true_info, self.hallucination, self.topical]
    }
}

pub fn aggregate_completion_annotations<M: AsRef<str>>(
    records: &[(M, CompletionAnnotation)],
) -> BTreeMap<String, CompletionSummary> {
    let mut counts: BTreeMap<String, CompletionCounts> = BTreeMap::new();
    for (model, a) in records {
        let c = counts.entry(model.as_ref().to_string()).or_default();
        c.n += 1;
        c.sensible += usize::from(a.sensible);
        c.true_info += usize::from(a.true_info);
        c.hallucination += usize::from(a.hallucination);
        c.topical += usize::from(a.topical);
    }
    counts.into_iter().map(|(m, c)| (m, c.into())).collect()
}

/// Two decimals and a percent sign, e.g. `78.47%`; `-` when absent.
pub fn format_pct2(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.2}%"))
}

/// Whole percent, rounding halves away from zero.
pub fn format_pct0(value: f64) -> String {
    format!("{}%", value.round() as i64)
}

pub const TURN_COLUMNS: [&str; 6] = [
    "Consistent",
    "Knowledgeable",
    "Factually Incorrect",
    "Engaging",
    "Knowl. & Eng.",
    "Eng. | Knowl.",
];

pub const COMPLETION_COLUMNS: [&str; 4] = ["Sensible", "True", "Hallucination", "Topical"];

/// Published dialogue human-evaluation row, used to check formatting.
pub const TURN_TABLE_FIXTURE: (&str, [f64; 6]) = ("SeeKeR", [78.47, 46.49, 3.94, 90.41, 44.03, 94.71]);

/// Published topical-prompt row, used to check formatting.
pub const COMPLETION_TABLE_FIXTURE: (&str, [f64; 4]) = ("SeeKeR XL", [77.0, 43.0, 58.0, 15.0]);

/// Published automatic metrics (PPL, F1, KF1) for reference rows.
pub const AUTOMATIC_TABLE_FIXTURE: [(&str, [f64; 3]); 3] = [
    ("2.7B search", [15.2, 16.7, 8.3]),
    ("2.7B gold docs", [12.7, 20.1, 12.7]),
    ("2.7B gold knowledge", [8.6, 24.5, 21.6]),
];

fn table(columns: &[&str], rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).chain([5]).max().unwrap_or(5);
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| rows.iter().map(|(_, r)| r[i].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Model");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

pub fn turn_table(rows: &[(String, [Option<f64>; 6])]) -> String {
    let rows: Vec<_> = rows
        .iter()
        .map(|(l, r)| (l.clone(), r.iter().map(|v| format_pct2(*v)).collect()))
        .collect();
    table(&TURN_COLUMNS, &rows)
}

pub fn completion_table(rows: &[(String, [f64; 4])]) -> String {
    let rows: Vec<_> = rows
        .iter()
        .map(|(l, r)| (l.clone(), r.iter().map(|v| format_pct0(*v)).collect()))
        .collect();
    table(&COMPLETION_COLUMNS, &rows)
}

/// PPL, F1 and KF1 columns; F1 values are given as percentages.
pub fn automatic_table(rows: &[(String, Option<f64>, f64, f64)]) -> String {
    let rows: Vec<_> = rows
        .iter()
        .map(|(l, ppl, f1, kf1)| {
            (
                l.clone(),
                vec![
                    ppl.map_or_else(|| "-".into(), |p| format!("{p:.1}")),
                    format!("{f1:.1}"),
                    format!("{kf1:.1}"),
                ],
            )
        })
        .collect();
    table(&["PPL", "F1", "KF1"], &rows)
}

impl EvalReport {
    pub fn table(&self, label: &str) -> String {
        automatic_table(&[(label.to_string(), self.ppl, 100.0 * self.f1, 100.0 * self.kf1)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::{Capabilities, Score, ScriptedBackend};
    use proptest::prelude::*;

    fn gold(resp: &str, knowledge: &[&str]) -> GoldExample {
        GoldExample {
            context: String::new(),
            gold_response: resp.into(),
            gold_knowledge: knowledge.iter().map(|s| s.to_string()).collect(),
            gold_docs: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let golds = vec![gold("hello there friend", &["x y"]), gold("bye now", &[])];
        let r = eval_generations(&["hello there friend", "bye now"], &golds).unwrap();
        assert_eq!((r.n, r.f1, r.kf1_missing_knowledge), (2, 1.0, 1));
        assert_eq!(r.kf1, 0.0);
    }

    #[test]
    fn knowledge_f1_example() {
        let r = eval_generations(&["the sun is a star"], &[gold("x", &["the sun is a huge star"])]).unwrap();
        assert!((r.kf1 - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(knowledge_f1("a b", &["a".into(), "b".into()]), f1_text("a b", "a b"));
    }

    #[test]
    fn eval_rejects_bad_input() {
        assert!(matches!(eval_generations::<&str>(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            eval_generations(&["a"], &[]),
            Err(EvalError::LengthMismatch { preds: 1, golds: 0 })
        ));
        assert!(matches!(eval_generations(&["a"], &[gold(" ", &[])]), Err(EvalError::EmptyGoldResponse(0))));
    }

    struct Uniform;

    impl GenerationBackend for Uniform {
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                scoring: true,
                ..Default::default()
            }
        }
        fn generate(&self, _: &crate::modelio::GenerationRequest) -> Result<Vec<String>, BackendError> {
            Ok(vec![])
        }
        fn score(&self, _: &PackedInput, continuation: &str) -> Result<Score, BackendError> {
            let n = continuation.split_whitespace().count();
            Ok(Score {
                nll: n as f64 * 8f64.ln(),
                token_count: n,
            })
        }
    }

    #[test]
    fn perplexity_closed_form() {
        let ppl = perplexity(&Uniform, &[("c", "a b c"), ("d", "e f")]).unwrap();
        assert!((ppl - 8.0).abs() < 1e-9);
        assert!(matches!(perplexity(&Uniform, &[("c", "")]), Err(EvalError::ZeroTokens)));
        assert!(matches!(perplexity::<&str, &str>(&Uniform, &[]), Err(EvalError::ZeroTokens)));
        assert!(matches!(
            perplexity(&ScriptedBackend::default(), &[("c", "x")]),
            Err(EvalError::ScoringUnsupported(_))
        ));
    }

    #[test]
    fn perplexity_pools_additively() {
        let a = NllTotal { nll: 3.0, tokens: 2 };
        let b = NllTotal { nll: 5.5, tokens: 7 };
        let pooled = a.merge(b).perplexity().unwrap();
        assert!((pooled - (8.5f64 / 9.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn topical_prompts() {
        let out = build_topical_prompts(&["Pfizer", "COVID-19 booster", "Tesla", "post-Covid travel"]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].prompt, "In recent developments, we have learned the following about Pfizer.");
        assert_eq!(out[1].topic, "Tesla");
    }

    fn ann(k: bool, e: bool) -> TurnAnnotation {
        TurnAnnotation {
            knowledgeable: k,
            engaging: e,
            ..Default::default()
        }
    }

    #[test]
    fn turn_aggregation_example() {
        let recs: Vec<_> = [(true, true), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(k, e)| ("m", ann(k, e)))
            .collect();
        let s = aggregate_turn_annotations(&recs)["m"];
        assert_eq!((s.knowledgeable, s.engaging, s.knowledgeable_and_engaging), (75.0, 75.0, 50.0));
        assert!((s.engaging_given_knowledgeable.unwrap() - 200.0 / 3.0).abs() < 1e-12);

        let none = aggregate_turn_annotations(&[("m", TurnAnnotation::default()); 3])["m"];
        assert_eq!(none.row()[..5], [Some(0.0); 5]);
        assert_eq!(none.engaging_given_knowledgeable, None);
        assert!(aggregate_turn_annotations::<&str>(&[]).is_empty());
    }

    #[test]
    fn completion_aggregation() {
        let all = CompletionAnnotation {
            sensible: true,
            true_info: true,
            hallucination: true,
            topical: true,
        };
        let s = aggregate_completion_annotations(&[("x", all), ("x", all)])["x"];
        assert_eq!(s.row(), [100.0; 4]);
        assert!(aggregate_completion_annotations::<&str>(&[]).is_empty());
        let zero = CompletionSummary::from(CompletionCounts::default());
        assert_eq!((zero.counts.n, zero.row()), (0, [0.0; 4]));
    }

    #[test]
    fn fixture_rows_format_exactly() {
        let (name, row) = TURN_TABLE_FIXTURE;
        let cells: Vec<String> = row.iter().map(|v| format_pct2(Some(*v))).collect();
        assert_eq!(cells.join(" "), "78.47% 46.49% 3.94% 90.41% 44.03% 94.71%");
        let t = turn_table(&[(name.into(), row.map(Some))]);
        assert!(t.lines().nth(1).unwrap().starts_with("SeeKeR"));
        assert!(t.contains("94.71%"));

        let (name, row) = COMPLETION_TABLE_FIXTURE;
        assert_eq!(row.map(format_pct0).join(" "), "77% 43% 58% 15%");
        assert!(completion_table(&[(name.into(), row)]).contains("SeeKeR XL"));
        assert_eq!(format_pct0(42.5), "43%");

        let rows: Vec<_> = AUTOMATIC_TABLE_FIXTURE
            .iter()
            .map(|(l, [p, f, k])| (l.to_string(), Some(*p), *f, *k))
            .collect();
        let t = automatic_table(&rows);
        assert!(t.lines().next().unwrap().contains("PPL"));
        assert!(t.contains("15.2") && t.contains("24.5") && t.contains("21.6"));
    }

    #[test]
    fn predictions_parse_both_shapes() {
        let a: Prediction = serde_json::from_str(r#""hi""#).unwrap();
        let b: Prediction = serde_json::from_str(r#"{"text":"hi"}"#).unwrap();
        let c: Prediction = serde_json::from_str(r#"{"response":"hi"}"#).unwrap();
        assert!([a, b, c].iter().all(|p| p.text() == "hi"));
    }

    proptest! {
        #[test]
        fn eval_is_permutation_invariant(
            pairs in proptest::collection::vec(("[a-d ]{0,12}", "[a-d]{1,3}( [a-d]{1,3}){0,4}", proptest::collection::vec("[a-d ]{1,10}", 0..3)), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let preds: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
            let golds: Vec<GoldExample> = pairs
                .iter()
                .map(|(_, r, k)| GoldExample { context: String::new(), gold_response: r.clone(), gold_knowledge: k.clone(), gold_docs: None })
                .collect();
            let base = eval_generations(&preds, &golds).unwrap();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let sp: Vec<String> = idx.iter().map(|&i| preds[i].clone()).collect();
            let sg: Vec<GoldExample> = idx.iter().map(|&i| golds[i].clone()).collect();
            prop_assert_eq!(eval_generations(&sp, &sg).unwrap(), base);
        }

        #[test]
        fn annotation_algebra(flags in proptest::collection::vec(any::<(bool, bool, bool, bool)>(), 0..60)) {
            let recs: Vec<_> = flags
                .iter()
                .map(|&(c, k, f, e)| ("m", TurnAnnotation { consistent: c, knowledgeable: k, factually_incorrect: f, engaging: e }))
                .collect();
            if let Some(s) = aggregate_turn_annotations(&recs).get("m") {
                let c = s.counts;
                prop_assert!(c.knowledgeable_and_engaging <= c.knowledgeable.min(c.engaging));
                prop_assert!(s.knowledgeable_and_engaging <= s.knowledgeable.min(s.engaging));
                if let Some(g) = s.engaging_given_knowledgeable {
                    prop_assert!((g * s.knowledgeable / 100.0 - s.knowledgeable_and_engaging).abs() < 1e-9);
                }
            }
        }
    }
}
