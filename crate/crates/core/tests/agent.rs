use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use regex::Regex;
use seqnas_core::agent::*;
use seqnas_core::data::{Alphabet, MetricKind, Problem, TaskSpec};
use seqnas_core::eval::{PerfRecord, Protocol};
use seqnas_core::Error;

fn task(id: u32, desc: &str) -> TaskSpec {
    TaskSpec::new(id, desc, Alphabet::Dna, Problem::Binary, MetricKind::Accuracy).unwrap()
}

fn record(path: &str, t: u32, v: f64) -> PerfRecord {
    PerfRecord { path_id: path.into(), task_id: t, protocol: Protocol::OnlyFt, tokenizer_id: "k1".into(), metric_value: v, seed: 0 }
}

fn kb() -> KnowledgeBase {
    let tasks = vec![
        task(0, "promoter detection in human genomic windows"),
        task(1, "splice site donor acceptor classification"),
        task(2, "transcription factor binding in mouse cells"),
        task(3, "enhancer activity in fly"),
    ];
    let mut records = Vec::new();
    for t in 0..4u32 {
        for p in 0..6u32 {
            // A different best path per task.
            let v = 0.5 + 0.05 * f64::from((p + 6 - t) % 6);
            records.push(record(&format!("d3-p{p}"), t, v));
        }
    }
    KnowledgeBase::new(tasks, records).unwrap()
}

fn id() -> Regex {
    Regex::new(DEFAULT_ID_PATTERN).unwrap()
}

#[test]
fn retrieval_orders_by_cosine() {
    let kb = kb();
    let q = task(9, "promoter detection in human genomic windows");
    let hits = retrieve_similar_tasks(&kb, &q, 4).unwrap();
    assert_eq!(hits[0].0, 0);
    assert!((hits[0].1 - 1.0).abs() < 1e-12);
    assert!(matches!(retrieve_similar_tasks(&kb, &q, 5), Err(Error::TooFew { .. })));
    assert!(matches!(retrieve_similar_tasks(&KnowledgeBase::default(), &q, 1), Err(Error::EmptyContext)));
}

#[test]
fn retrieval_matches_hand_computed_cosines() {
    // Unit vectors at known angles from e0: cosines 0.1, 0.9, 0.5.
    let unit = |c: f64| {
        let mut v = vec![0.0; 128];
        v[0] = c;
        v[1] = (1.0 - c * c).sqrt();
        v
    };
    let mut kb = KnowledgeBase::default();
    kb.insert_task(task(7, "a"), unit(0.1));
    kb.insert_task(task(3, "b"), unit(0.9));
    kb.insert_task(task(5, "c"), unit(0.5));
    let mut q = vec![0.0; 128];
    q[0] = 1.0;
    let hits = retrieve_by_embedding(&kb, &q, 3).unwrap();
    assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![3, 5, 7]);
    for (h, want) in hits.iter().zip([0.9, 0.5, 0.1]) {
        assert!((h.1 - want).abs() < 1e-12);
    }
    // Orthogonal everywhere: id order.
    let mut ortho = vec![0.0; 128];
    ortho[50] = 1.0;
    let hits = retrieve_by_embedding(&kb, &ortho, 3).unwrap();
    assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![3, 5, 7]);
}

#[test]
fn rag_prompt_contents() {
    let kb = kb();
    let q = task(9, "promoter prediction for human sequences");
    let a = build_rag_prompt(&kb, &q, 2, 3, 3).unwrap();
    let b = build_rag_prompt(&kb, &q, 2, 3, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("Architecture Recommendations:"));
    assert!(a.contains("Task Index: 0"));
    assert!(a.contains("1. d3-p0: 0.7500"));
    assert!(matches!(build_rag_prompt(&kb, &q, 0, 3, 3), Err(Error::EmptyContext)));
}

#[test]
fn recommendation_parsing() {
    assert_eq!(parse_recommendations("1. Best performance\n- Architecture: d4-p7", 1, &id()).unwrap(), vec!["d4-p7"]);
    assert!(parse_recommendations("nothing useful here", 1, &id()).is_err());
    let text = "1. Best\n- Architecture: d4-p7\n2. Second\n- Architecture: d4-p7\n3. Third\n- Architecture: d3-p1\n4. x\n- Architecture: d5-p2";
    assert_eq!(parse_recommendations(text, 3, &id()).unwrap(), vec!["d4-p7", "d3-p1", "d5-p2"]);
    let rag = "Architecture Recommendations:\n1. BEST CHOICE: d3-p2 - strong\n2. SECOND BEST: d6-p10 - ok";
    assert_eq!(parse_recommendations(rag, 2, &id()).unwrap(), vec!["d3-p2", "d6-p10"]);
    // Names embedded in longer tokens are not accepted.
    assert!(parse_recommendations("- Architecture: xd3-p2x", 1, &id()).is_err());
}

#[test]
fn echo_pipeline_returns_top_architecture_of_nearest_task() {
    let kb = kb();
    for t in 0..4u32 {
        let q = TaskSpec { task_id: 99, ..kb.tasks[&t].clone() };
        let rec = run_agent_pipeline(&kb, &q, &LlmClient::echo(), &AgentConfig::default()).unwrap();
        let nearest = retrieve_similar_tasks(&kb, &q, 1).unwrap()[0].0;
        assert_eq!(rec.architectures[0], kb.top_archs(nearest, 1)[0].0);
        assert_eq!(rec.architectures.len(), 3);
        let roles: Vec<Role> = rec.trace.stages.iter().map(|s| s.role).collect();
        assert_eq!(roles, vec![Role::Analyst, Role::TaskRetriever, Role::ArchRetriever, Role::Predictor]);
        // Reproducible under the mock transport.
        assert_eq!(run_agent_pipeline(&kb, &q, &LlmClient::echo(), &AgentConfig::default()).unwrap(), rec);
        let rag = rag_recommend(&kb, &q, &LlmClient::echo(), &AgentConfig::default()).unwrap();
        assert_eq!(rag.architectures[0], rec.architectures[0]);
    }
}

fn scripted(predictor_reply: &'static str, calls: Arc<AtomicUsize>) -> LlmClient {
    LlmClient::mock(move |req| {
        Ok(match req.role {
            Role::Analyst => "Search Parameters:\n- Task Description: promoter".into(),
            Role::TaskRetriever => "Conclusion:\nTask Index: 0\nTask Index: 1".into(),
            _ => {
                calls.fetch_add(1, Ordering::SeqCst);
                predictor_reply.into()
            }
        })
    })
}

#[test]
fn scripted_mock_contract() {
    let kb = kb();
    let q = task(99, "promoter");
    let calls = Arc::new(AtomicUsize::new(0));
    let reply = "Top recommendations\n\n1. Best\n- Architecture: d3-p5\n2. Next\n- Architecture: d3-p1\n3. Third\n- Architecture: d3-p0";
    let rec = run_agent_pipeline(&kb, &q, &scripted(reply, calls.clone()), &AgentConfig::default()).unwrap();
    assert_eq!(rec.architectures, vec!["d3-p5", "d3-p1", "d3-p0"]);
    assert_eq!(rec.trace.stages.len(), 4);
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn fabricated_names_fail_after_retries() {
    let kb = kb();
    let q = task(99, "promoter");
    let calls = Arc::new(AtomicUsize::new(0));
    let reply = "1. Best\n- Architecture: d9-p999\n2. b\n- Architecture: d3-p1\n3. c\n- Architecture: d3-p0";
    let err = run_agent_pipeline(&kb, &q, &scripted(reply, calls.clone()), &AgentConfig::default()).unwrap_err();
    match err {
        Error::PipelineParse { reason, trace } => {
            assert!(reason.contains("d9-p999"), "{reason}");
            assert_eq!(trace.len(), 4);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn canned_responses_by_prompt_hash() {
    let kb = kb();
    let q = task(99, "promoter detection");
    let prompt = build_rag_prompt(&kb, &q, 3, 5, 3).unwrap();
    let req = ChatRequest { role: Role::Rag, prompt };
    let canned = BTreeMap::from([(req.hash(), "1. BEST CHOICE: d3-p2\n2. SECOND BEST: d3-p3\n3. THIRD BEST: d3-p4".to_string())]);
    let rec = rag_recommend(&kb, &q, &LlmClient::canned(canned.clone()), &AgentConfig::default()).unwrap();
    assert_eq!(rec.architectures, vec!["d3-p2", "d3-p3", "d3-p4"]);
    let other = task(98, "something else entirely");
    assert!(matches!(rag_recommend(&kb, &other, &LlmClient::canned(canned), &AgentConfig::default()), Err(Error::Transport(_))));
}

#[test]
fn knowledge_base_round_trip_and_validation() {
    let kb = kb();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("kb.json");
    kb.save(&file).unwrap();
    assert_eq!(KnowledgeBase::load(&file).unwrap(), kb);
    let held = kb.without(0);
    assert!(!held.tasks.contains_key(&0));
    assert!(held.records.iter().all(|r| r.task_id != 0));
    let bad = KnowledgeBase::new(vec![task(0, "x")], vec![record("d3-p0", 5, 0.1)]);
    assert!(bad.is_err());
}
