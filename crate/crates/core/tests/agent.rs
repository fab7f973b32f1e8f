mod common;

use std::sync::Arc;
use std::time::Duration;

use cadenza_core::agent::{
    memory_query, route_intent, Agent, AgentConfig, AgentError, Attachment, AttachmentKind, BackendError,
    CompletionBackend, GenerationParams, IntentKind, MemoryKind, Module, Session, SteppingClock, StubBackend,
};
use cadenza_core::formats::{export_midi, render_score};
use cadenza_core::retrieval::index_library;
use proptest::prelude::*;

fn long_melody() -> (String, Vec<u8>) {
    let (_, text, score) = common::corpus().into_iter().find(|(n, _, _)| n.starts_with("20_")).unwrap();
    (text, export_midi(&render_score(&score, 120.0), 480, 120.0))
}

fn stub_agent() -> Agent {
    Agent::new(Arc::new(StubBackend)).with_clock(Arc::new(SteppingClock::new(0, 10)))
}

fn performance_attachments() -> Vec<Attachment> {
    let (abc, midi) = long_melody();
    vec![
        Attachment::from_file("long_melody.abc", abc.into_bytes()).unwrap(),
        Attachment::from_file("take1.mid", midi).unwrap(),
    ]
}

#[test]
fn followup_reuses_the_stored_evaluation() {
    let agent = stub_agent();
    let mut session = Session::in_memory("s");
    let first = agent.run_turn(&mut session, "How accurate was my timing?", &performance_attachments()).unwrap();
    assert_eq!(first.intent.kind, IntentKind::PerformanceAnalysis);
    assert!(first.trace.iter().any(|s| s.operation == "align_symbolic"));

    let second = agent.run_turn(&mut session, "and in measure 8?", &[]).unwrap();
    assert_eq!(second.intent.kind, IntentKind::Followup);
    assert!(second.trace.iter().all(|s| s.module != Module::HmmAlign.name()), "{:?}", second.trace);
    assert_eq!(second.trace.len(), 1);
    assert_eq!(second.trace[0].operation, "memory_query");
    assert!(second.prompt.contains("listen to the measure 8 section"), "{}", second.prompt);
    assert!(second.prompt.contains("[EVALUATION_JSON]"));
    assert!(second.prompt.contains("\"measure_id\": 8"));
    let reused = session.resolve(&second.memory_delta[1]).unwrap();
    assert_eq!(reused["reused_entry"], serde_json::json!(first.memory_delta[1].seq));
}

#[test]
fn retrieval_turn_stores_a_retrieved_file() {
    let dir = tempfile::tempdir().unwrap();
    common::write_library(dir.path(), 10, 5);
    let agent = stub_agent().with_library(index_library(dir.path()).unwrap(), Some(dir.path().to_path_buf()));
    let mut session = Session::in_memory("r");
    let out = agent.run_turn(&mut session, "Give me a song of Kikujiro's Summer", &[]).unwrap();
    assert_eq!(out.intent.kind, IntentKind::RetrievalExplicit);
    let kinds: Vec<MemoryKind> = out.memory_delta.iter().map(|e| e.kind).collect();
    assert_eq!(kinds, [MemoryKind::UserMessage, MemoryKind::RetrievedFile, MemoryKind::ModelResponse]);
    let stored = session.resolve(&out.memory_delta[1]).unwrap();
    assert_eq!(stored["retrieved"]["title"], "Kikujiro's Summer");
    assert!(stored["retrieved"]["abc"].as_str().unwrap().contains("T:Kikujiro's Summer"));
    assert!(out.prompt.contains("[RETRIEVED]"));
}

#[test]
fn audio_without_score_retrieves_implicitly() {
    let dir = tempfile::tempdir().unwrap();
    let pieces = common::write_library(dir.path(), 10, 5);
    let agent = stub_agent().with_library(index_library(dir.path()).unwrap(), Some(dir.path().to_path_buf()));
    let notes = cadenza_core::formats::PerformanceNotes::new(
        pieces[4].line[..12]
            .iter()
            .enumerate()
            .map(|(i, &p)| cadenza_core::formats::PerfNote {
                pitch: p as u8,
                onset_sec: i as f64 * 0.3,
                offset_sec: i as f64 * 0.3 + 0.25,
                velocity: 80,
            })
            .collect(),
    );
    let wav = common::render_audio(&notes, 0.3).to_wav_bytes();
    let mut session = Session::in_memory("i");
    let out = agent
        .run_turn(&mut session, "What piece is this?", &[Attachment::from_file("clip.wav", wav).unwrap()])
        .unwrap();
    assert_eq!(out.intent.kind, IntentKind::RetrievalImplicit);
    let ops: Vec<&str> = out.trace.iter().map(|s| s.operation.as_str()).collect();
    assert_eq!(ops, ["baseline_transcribe", "match_implicit"]);
    assert!(out.trace[1].output.contains(&pieces[4].id), "{}", out.trace[1].output);
}

#[test]
fn memory_query_examples() {
    let agent = stub_agent();
    let mut session = Session::in_memory("q");
    assert!(memory_query(&session, None, 10).is_empty());
    agent.run_turn(&mut session, "How is my tempo?", &performance_attachments()).unwrap();
    agent.run_turn(&mut session, "What is a cadence?", &[]).unwrap();
    assert!(!memory_query(&session, Some(MemoryKind::ModuleOutput), 10).is_empty());
    let two = memory_query(&session, None, 2);
    assert_eq!(two.len(), 2);
    assert!(two[0].seq > two[1].seq);
    assert_eq!(session.len(), 6);
}

#[test]
fn failing_module_names_its_stage_and_leaves_memory_alone() {
    let agent = stub_agent();
    let mut session = Session::in_memory("f");
    let (abc, _) = long_melody();
    let attachments = [
        Attachment::from_file("piece.abc", abc.into_bytes()).unwrap(),
        Attachment::from_file("broken.wav", b"RIFF....WAVE".to_vec()).unwrap(),
    ];
    match agent.run_turn(&mut session, "How did I play?", &attachments) {
        Err(AgentError::ModuleFailure { stage, .. }) => assert_eq!(stage, Module::AudioDsp.name()),
        other => panic!("expected a module failure, got {other:?}"),
    }
    assert!(session.is_empty());
    assert!(matches!(Attachment::from_file("photo.png", vec![]), Err(AgentError::UnsupportedAttachment(_))));
}

struct Slow;

impl CompletionBackend for Slow {
    fn complete(&self, _prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        std::thread::sleep(Duration::from_millis(500));
        Ok("late".into())
    }
}

#[test]
fn slow_backend_times_out() {
    let config = AgentConfig {
        generation: GenerationParams { timeout: Duration::from_millis(50), ..GenerationParams::default() },
        ..AgentConfig::default()
    };
    let agent = Agent::new(Arc::new(Slow)).with_config(config);
    let mut session = Session::in_memory("t");
    assert!(matches!(agent.run_turn(&mut session, "What is a fugue?", &[]), Err(AgentError::BackendTimeout(_))));
    assert!(session.is_empty());
}

#[test]
fn stub_dialogue_is_reproducible_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let script = ["What is a tritone?", "How is my tempo?", "and in measure 3?"];
    let run = |root: &std::path::Path| {
        let agent = stub_agent();
        let mut session = Session::open(root, "abc123").unwrap();
        let mut out = Vec::new();
        for (i, msg) in script.iter().enumerate() {
            let att = if i == 1 { performance_attachments() } else { vec![] };
            let o = agent.run_turn(&mut session, msg, &att).unwrap();
            out.push((o.intent, o.response, o.trace, o.prompt));
        }
        (out, session.entries().to_vec())
    };
    let (a, entries) = run(dir.path());
    let other = tempfile::tempdir().unwrap();
    let (b, _) = run(other.path());
    assert_eq!(a, b);
    let reopened = Session::open(dir.path(), "abc123").unwrap();
    assert_eq!(reopened.entries(), entries.as_slice());
    assert!(dir.path().join("abc123/memory.jsonl").is_file());
}

fn attachment_kinds() -> impl Strategy<Value = Vec<AttachmentKind>> {
    prop::collection::vec(
        prop::sample::select(vec![AttachmentKind::Audio, AttachmentKind::Score, AttachmentKind::Performance]),
        0..3,
    )
}

fn message() -> impl Strategy<Value = String> {
    let words = vec![
        "give",
        "me",
        "find",
        "the",
        "tempo",
        "stability",
        "and",
        "in",
        "measure",
        "8",
        "what",
        "interval",
        "chord",
        "\"Summer\"",
        "how",
        "about",
        "bar",
        "scale",
        "song",
        "of",
    ];
    prop::collection::vec(prop::sample::select(words), 0..10).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn routing_is_deterministic(msg in message(), kinds in attachment_kinds()) {
        let a = route_intent(&msg, &kinds);
        prop_assert_eq!(&a, &route_intent(&msg, &kinds));
        prop_assert!((0.0..=1.0).contains(&a.confidence));
        if a.kind == IntentKind::PerformanceAnalysis {
            prop_assert!(a.requires(Module::HmmAlign) && a.requires(Module::PerfEval));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn memory_grows_monotonically(script in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 3]), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        common::write_library(dir.path(), 6, 3);
        let agent = stub_agent().with_library(index_library(dir.path()).unwrap(), Some(dir.path().to_path_buf()));
        let mut session = Session::in_memory("m");
        let mut last_turn = 0;
        for step in script {
            let (msg, att) = match step {
                0 => ("What is a leading tone?", vec![]),
                1 => ("Give me a song of Kikujiro's Summer", vec![]),
                2 => ("How steady is my tempo?", performance_attachments()),
                _ => ("and in measure 2?", vec![]),
            };
            let before = session.len();
            let out = agent.run_turn(&mut session, msg, &att).unwrap();
            prop_assert_eq!(session.len(), before + 3);
            prop_assert!(out.turn > last_turn);
            last_turn = out.turn;
            for s in &out.trace {
                prop_assert!(s.module == "memory" || out.intent.required_modules.iter().any(|m| m.name() == s.module));
            }
        }
        let e = session.entries();
        prop_assert!(e.windows(2).all(|w| w[0].seq < w[1].seq && w[0].turn <= w[1].turn));
    }
}
