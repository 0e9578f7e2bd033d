use super::*;
use crate::corpus::CorpusIndex;
use crate::modelio::{unframe_knowledge, BackendError, Capabilities, ScriptedBackend, Violation};
use crate::textops::ngrams;
use crate::textops::normalize;

const Q: &str = "stardew valley mods";
const K: &str = "Phobos and Deimos are the two natural satellites that orbit close to Mars.";
const R: &str = "Mars has two tiny moons called Phobos and Deimos, and both are probably captured asteroids from long ago in history.";

fn scripted() -> ScriptedBackend {
    ScriptedBackend::new([("__generate-query__", Q), ("__knowledge__", R), ("", K)])
}

fn docs(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| Document::new(format!("d{i}"), format!("https://site{i}.org/p"), format!("T{i}"), format!("Body {i}.")))
        .collect()
}

struct Failing;

impl SearchProvider for Failing {
    fn name(&self) -> &str {
        "flaky"
    }
    fn search(&self, _: &str, _: usize) -> Result<Vec<Document>, SearchError> {
        Err(SearchError {
            provider: "flaky".into(),
            message: "connection refused".into(),
        })
    }
}

fn user_state(text: &str) -> ConversationState {
    let mut s = ConversationState::new("s");
    s.turns.push(Turn {
        speaker: Speaker::User,
        text: text.into(),
    });
    s
}

#[test]
fn query_passes_through_and_takes_suffix() {
    let backend = scripted();
    let state = user_state("any good mods for farming games?");
    let mut cfg = PipelineConfig::default();
    assert_eq!(generate_query(&state, &backend, &cfg).unwrap(), Q);
    let input = &backend.requests()[0].input;
    assert!(input.context.ends_with("\n__generate-query__"));

    cfg.date_suffix = Some("January 2022".into());
    assert_eq!(generate_query(&state, &backend, &cfg).unwrap(), "stardew valley mods January 2022");

    assert!(matches!(
        generate_query(&ConversationState::new("x"), &backend, &cfg),
        Err(PipelineError::Precondition(_))
    ));
}

#[test]
fn one_token_query_is_rejected() {
    let backend = ScriptedBackend::new([("", "mods")]);
    let err = generate_query(&user_state("hi there"), &backend, &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Search));
    assert!(matches!(
        err,
        PipelineError::Stage {
            source: StageFailure::Decode(DecodeError::Unsatisfiable {
                first: Violation::TooShort { length: 1, min: 2 },
                ..
            }),
            ..
        }
    ));
}

#[test]
fn retrieve_allowlists_then_truncates() {
    let mut hits = docs(8);
    hits[1].domain = "blocked.com".into();
    hits[4].domain = "spam.net".into();
    let allow = DomainAllowlist::new((0..8).map(|i| format!("site{i}.org")));
    let cfg = PipelineConfig {
        allowlist: Some(allow),
        ..Default::default()
    };
    let got: Vec<String> = retrieve("q", &StaticProvider::new(hits), &cfg).unwrap().into_iter().map(|d| d.id).collect();
    assert_eq!(got, ["d0", "d2", "d3", "d5", "d6"]);
    assert!(retrieve("q", &StaticProvider::default(), &cfg).unwrap().is_empty());
    assert!(matches!(retrieve(" ", &StaticProvider::default(), &cfg), Err(PipelineError::Precondition(_))));
}

#[test]
fn retrieval_outage_is_fatal_unless_relaxed() {
    let mut cfg = PipelineConfig::default();
    let err = retrieve("q", &Failing, &cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Retrieve));
    assert!(err.to_string().contains("flaky"));
    cfg.allow_empty_retrieval = true;
    assert!(retrieve("q", &Failing, &cfg).unwrap().is_empty());
}

#[test]
fn local_index_retrieval_matches_lexical_search() {
    let corpus = vec![
        Document::new("a", "https://a.org", "A", "Cats purr. Dogs bark loudly."),
        Document::new("b", "https://b.org", "B", "Cats and dogs."),
        Document::new("c", "https://c.org", "C", "Cats only."),
    ];
    let index = Arc::new(CorpusIndex::build(corpus).unwrap());
    let cfg = PipelineConfig {
        k_docs: 2,
        ..Default::default()
    };
    let got: Vec<String> = retrieve("cats dogs", &LocalIndexProvider::new(index.clone()), &cfg)
        .unwrap()
        .into_iter()
        .map(|d| d.id)
        .collect();
    let want: Vec<String> = index.lexical_search("cats dogs", 2).into_iter().map(|h| h.doc_id).collect();
    assert_eq!(got, want);
}

#[test]
fn knowledge_copies_from_documents_and_is_blocked_across_turns() {
    let tokens = ControlTokens::default();
    let backend = CopyOracleBackend::new(tokens.clone());
    let doc = Document::new(
        "m",
        "https://m.org",
        "Moons",
        "Phobos and Deimos are two small natural satellites orbiting the red planet closely. \
         Deimos is the smaller one and takes about thirty hours for every single orbit.",
    );
    let cfg = PipelineConfig::default();
    let mut state = user_state("tell me about phobos and deimos please");
    let k1 = generate_knowledge(&mut state, std::slice::from_ref(&doc), &backend, &cfg).unwrap();
    assert!(doc.content.contains(&k1));
    assert_eq!(state.accumulated_knowledge, std::slice::from_ref(&k1));

    // only the already-used sentence is on offer the second time
    let only_k1 = Document::new("m2", "https://m.org/2", "Moons", k1.clone());
    let err = generate_knowledge(&mut state, &[only_k1], &backend, &cfg).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage {
            stage: Stage::Knowledge,
            source: StageFailure::Decode(DecodeError::Unsatisfiable {
                first: Violation::Banned(_),
                ..
            })
        }
    ));
    assert_eq!(state.accumulated_knowledge.len(), 1);
}

#[test]
fn knowledge_without_documents_uses_context_only_slot() {
    let cfg = PipelineConfig::default();
    let backend = scripted().with_capabilities(Capabilities {
        fusion_in_decoder: true,
        ..Default::default()
    });
    let mut state = user_state("tell me about moons");
    assert_eq!(generate_knowledge(&mut state, &[], &backend, &cfg).unwrap(), K);
    let Packing::FusionSlots { slots } = &backend.requests()[0].input.packing else {
        panic!("expected fusion slots");
    };
    assert_eq!(slots.len(), 1);
    assert!(slots[0].body.is_empty());

    let oracle = CopyOracleBackend::default();
    let err = generate_knowledge(&mut state, &[], &oracle, &cfg).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage {
            stage: Stage::Knowledge,
            source: StageFailure::Decode(DecodeError::NoCandidates)
        }
    ));
}

use crate::modelio::Packing;

#[test]
fn response_input_carries_framed_knowledge() {
    let backend = scripted();
    let cfg = PipelineConfig::default();
    let state = user_state("tell me about the moons");
    assert_eq!(generate_response(&state, K, &backend, &cfg).unwrap(), R);
    let input = backend.requests()[0].input.render();
    let (ctx, k) = unframe_knowledge(&input, &cfg.tokens).unwrap();
    assert_eq!((ctx.as_str(), k.as_str()), ("tell me about the moons", K));
    assert!(matches!(
        generate_response(&state, " ", &backend, &cfg),
        Err(PipelineError::Precondition(_))
    ));
}

#[test]
fn response_constraints() {
    let cfg = PipelineConfig::default();
    let state = user_state("what do you know about the outer moons of jupiter");
    let short = ScriptedBackend::new([("", "one two three four five six seven eight nine ten eleven twelve")]);
    let err = generate_response(&state, K, &short, &cfg).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage {
            stage: Stage::Response,
            source: StageFailure::Decode(DecodeError::Unsatisfiable {
                first: Violation::TooShort { length: 12, min: 20 },
                ..
            })
        }
    ));
    let echo = ScriptedBackend::new([(
        "",
        "well I really do not know about the outer moons of jupiter but they sound fascinating and rather strange to me today",
    )]);
    let err = generate_response(&state, K, &echo, &cfg).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage {
            source: StageFailure::Decode(DecodeError::Unsatisfiable {
                first: Violation::Banned(_),
                ..
            }),
            ..
        }
    ));
}

#[test]
fn scripted_turn_threads_all_stages() {
    let backend = scripted();
    let provider = StaticProvider::new(docs(7));
    let cfg = PipelineConfig::default();
    let mut state = ConversationState::new("s");
    let trace = run_turn(&mut state, "tell me about mars", &backend, &provider, &cfg).unwrap();
    assert_eq!((trace.query.as_str(), trace.knowledge.as_str(), trace.response.as_str()), (Q, K, R));
    assert_eq!(trace.retrieved.len(), 5);
    assert_eq!(state.turns.len(), 2);
    assert_eq!(state.turns[1], Turn { speaker: Speaker::Model, text: R.into() });
    assert_eq!(state.accumulated_knowledge, [K]);

    let starts: Vec<u64> = [Stage::Search, Stage::Retrieve, Stage::Knowledge, Stage::Response]
        .iter()
        .map(|s| trace.stage_timings[s].start_us)
        .collect();
    assert!(starts.windows(2).all(|w| w[0] <= w[1]));

    let json = serde_json::to_string(&trace).unwrap();
    assert_eq!(serde_json::from_str::<TurnTrace>(&json).unwrap(), trace);
}

#[test]
fn failed_turn_rolls_back() {
    let backend = scripted();
    let cfg = PipelineConfig::default();
    let mut state = ConversationState::new("s").with_persona("I like space");
    run_turn(&mut state, "first question", &backend, &StaticProvider::new(docs(2)), &cfg).unwrap();
    let before = state.clone();
    let err = run_turn(&mut state, "second question", &backend, &Failing, &cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Retrieve));
    assert_eq!(state, before);

    // the knowledge stage succeeds before the response stage fails
    let bad_response = ScriptedBackend::new([("__generate-query__", Q), ("__knowledge__", "too short"), ("", "An entirely fresh sentence about rings of Saturn being made of ice chunks.")]);
    let err = run_turn(&mut state, "third question", &bad_response, &StaticProvider::new(docs(2)), &cfg).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Response));
    assert_eq!(state, before);
    assert!(matches!(run_turn(&mut state, "  ", &backend, &Failing, &cfg), Err(PipelineError::Precondition(_))));
}

#[test]
fn consecutive_turns_keep_knowledge_trigram_disjoint() {
    let tokens = ControlTokens::default();
    let corpus = vec![
        Document::new("a", "https://a.org", "Jupiter", "Jupiter is the largest planet in the solar system by a very wide margin indeed. It has a great red spot which is a giant storm larger than the whole earth. Jupiter has at least ninety five officially recognised moons orbiting around it today."),
        Document::new("b", "https://b.org", "Saturn", "Saturn is famous for its bright rings made mostly of ice and some rocky debris. Its largest moon titan has a thick hazy atmosphere rich in nitrogen gas overall."),
    ];
    let provider = LocalIndexProvider::new(Arc::new(CorpusIndex::build(corpus).unwrap()));
    let backend = CopyOracleBackend::new(tokens);
    let cfg = PipelineConfig::default();
    let mut state = ConversationState::new("s");
    for msg in ["tell me about jupiter", "what about its moons", "and saturn"] {
        run_turn(&mut state, msg, &backend, &provider, &cfg).unwrap();
    }
    assert_eq!(state.accumulated_knowledge.len(), 3);
    let sets: Vec<_> = state
        .accumulated_knowledge
        .iter()
        .map(|k| ngrams(&normalize(k), 3).unwrap())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]), "{i} vs {j}");
        }
    }
}

#[test]
fn search_can_be_skipped() {
    let backend = scripted();
    let cfg = PipelineConfig {
        search_every_turn: false,
        ..Default::default()
    };
    let mut state = ConversationState::new("s");
    let trace = run_turn(&mut state, "hello", &backend, &Failing, &cfg).unwrap();
    assert!(trace.query.is_empty() && trace.retrieved.is_empty());
    assert!(!trace.stage_timings.contains_key(&Stage::Search));
}

#[test]
fn completion_threads_stages() {
    let backend = ScriptedBackend::new([
        ("__generate-query__", "pfizer news"),
        ("__knowledge__", "and that is the latest news."),
        ("", K),
    ]);
    let cfg = PipelineConfig {
        date_suffix: Some("January 2022".into()),
        ..Default::default()
    };
    let prompt = "In recent developments, we have learned the following about Pfizer.";
    let c = complete_prompt(prompt, &backend, &StaticProvider::new(docs(2)), &cfg).unwrap();
    assert_eq!(c.query, "pfizer news January 2022");
    assert_eq!(c.knowledge, K);
    assert_eq!(c.text, "and that is the latest news.");
    assert_eq!(c.retrieved.len(), 2);
    let reqs = backend.requests();
    assert!(matches!(reqs[1].input.packing, Packing::Prepend { .. }));
    assert_eq!(reqs[2].spec, cfg.specs.lm_completion);

    let c = complete_prompt(prompt, &backend, &StaticProvider::default(), &cfg).unwrap();
    assert!(c.retrieved.is_empty());
    assert_eq!(c.knowledge, K);
    assert!(complete_prompt("", &backend, &StaticProvider::default(), &cfg).is_err());
}

#[test]
fn context_assembly_truncates_oldest_first_and_escapes() {
    let tokens = ControlTokens::default();
    let mut state = ConversationState::new("s").with_persona("I am a cat");
    for t in ["one two three", "four five", "six __knowledge__ seven"] {
        state.turns.push(Turn {
            speaker: Speaker::User,
            text: t.into(),
        });
    }
    assert_eq!(
        state.context(&tokens, None),
        "your persona: I am a cat\none two three\nfour five\nsix _ _knowledge__ seven"
    );
    assert_eq!(
        state.context(&tokens, Some(12)),
        "your persona: I am a cat\nfour five\nsix _ _knowledge__ seven"
    );
    let bare = ConversationState { persona: None, ..state };
    assert_eq!(bare.context(&tokens, Some(2)), "_knowledge__ seven");
}

#[test]
fn backend_errors_are_stage_labelled() {
    let backend = crate::modelio::FnBackend::new("down", |_: &crate::modelio::GenerationRequest| {
        Err(BackendError::Other("boom".into()))
    });
    let mut state = ConversationState::new("s");
    let err = run_turn(&mut state, "hi", &backend, &StaticProvider::default(), &PipelineConfig::default()).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Search));
    assert!(state.turns.is_empty());
}
