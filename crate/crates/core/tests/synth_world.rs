use std::sync::Arc;

use ara_core::adapters::{Adapters, GenerationContext};
use ara_core::eval::{evaluate, parse_binary_answer, Prediction};
use ara_core::exec::Execution;
use ara_core::fusion::decode_single;
use ara_core::fusion::prompt::build_plain_prompt;
use ara_core::pipeline::{run_query, Indices, PipelineConfig};
use ara_core::retriever::{KnowledgeIndex, QueryContext};
use ara_core::synth::{generate, question, Synth, SynthSpec};
use ara_core::trigger::{TriggerConfig, TriggerKind};

fn setup() -> (Synth, Adapters, Indices) {
    let s = generate(&SynthSpec::default()).unwrap();
    let adapters = Adapters::mock(s.world());
    let indices = Indices {
        coarse: KnowledgeIndex::build(s.coarse_kb.clone()).unwrap(),
        fine: Some(KnowledgeIndex::build(s.fine_kb.clone()).unwrap()),
    };
    (s, adapters, indices)
}

fn cfg(kind: TriggerKind, theta: f64) -> PipelineConfig {
    PipelineConfig { trigger: TriggerConfig { kind, theta, ..Default::default() }, ..Default::default() }
}

fn ctx(adapters: &Adapters, uri: &str, q: &str) -> QueryContext {
    QueryContext::embed(uri, q, adapters.embedder.as_ref()).unwrap()
}

#[test]
fn visible_entity_skips_retrieval() {
    let (s, adapters, indices) = setup();
    let img = s.world.images().find(|i| i.blind_spot_entities.is_empty()).unwrap();
    let c = ctx(&adapters, &img.image_uri, &question(&img.visible_entities[0]));
    let o = run_query(&c, &cfg(TriggerKind::QueryAware, 0.0), &indices, &adapters, Execution::Sequential).unwrap();
    assert!(!o.decision.triggered);
    assert!(!o.result.retrieval_used);
    assert_eq!(parse_binary_answer(&o.result.trace), Prediction::Yes);
    assert_eq!(o.calls.generation_calls(), 1);
}

#[test]
fn blind_spot_flips_with_retrieval() {
    let (s, adapters, indices) = setup();
    let img = s.world.images().find(|i| !i.blind_spot_entities.is_empty()).unwrap();
    let c = ctx(&adapters, &img.image_uri, &question(&img.blind_spot_entities[0]));
    let never = run_query(&c, &cfg(TriggerKind::Never, 0.0), &indices, &adapters, Execution::Sequential).unwrap();
    assert_eq!(parse_binary_answer(&never.result.trace), Prediction::No);
    let o = run_query(&c, &cfg(TriggerKind::QueryAware, 0.1), &indices, &adapters, Execution::Sequential).unwrap();
    assert!(o.decision.triggered && o.result.retrieval_used);
    assert_eq!(parse_binary_answer(&o.result.trace), Prediction::Yes);
    assert!(o.coarse_ids.iter().all(|id| id.starts_with(&format!("coarse-{}", &img.image_uri[12..]))));
}

#[test]
fn closed_gate_equals_plain_decoding() {
    let (s, adapters, indices) = setup();
    let shut = cfg(TriggerKind::QueryAware, f64::NEG_INFINITY);
    for r in s.dataset.iter().step_by(7) {
        let c = ctx(&adapters, &r.image_uri, &r.question);
        let o = run_query(&c, &shut, &indices, &adapters, Execution::Sequential).unwrap();
        let plain = GenerationContext::with_image(build_plain_prompt(&c));
        let direct = decode_single(&plain, adapters.lvlm.as_ref(), shut.fusion.max_tokens).unwrap();
        assert_eq!(o.result.trace, direct);
        assert!(!o.result.retrieval_used);
    }
}

#[test]
fn gate_soundness() {
    let (s, adapters, indices) = setup();
    for (kind, theta) in [
        (TriggerKind::ConfidenceAware, 0.75),
        (TriggerKind::QueryAware, 0.2),
        (TriggerKind::ImageAware, 0.65),
        (TriggerKind::Always, 0.0),
        (TriggerKind::Never, 0.0),
    ] {
        let c = cfg(kind, theta);
        for r in s.dataset.iter().step_by(5) {
            let o =
                run_query(&ctx(&adapters, &r.image_uri, &r.question), &c, &indices, &adapters, Execution::Sequential)
                    .unwrap();
            assert_eq!(o.result.retrieval_used, o.decision.triggered, "{kind:?}");
            match kind {
                TriggerKind::Always => assert!(o.decision.triggered),
                TriggerKind::Never => assert!(!o.decision.triggered),
                _ => assert_eq!(o.decision.triggered, o.decision.metric_value < theta),
            }
        }
    }
}

#[test]
fn ungrounded_queries_ignore_fine_index() {
    let (s, adapters, indices) = setup();
    let coarse_only = Indices { coarse: indices.coarse.clone(), fine: None };
    let always = cfg(TriggerKind::Always, 0.0);
    for r in s.dataset.iter().filter(|r| r.gold == ara_core::eval::Gold::No).take(20) {
        let c = ctx(&adapters, &r.image_uri, &r.question);
        let a = run_query(&c, &always, &indices, &adapters, Execution::Sequential).unwrap();
        let b = run_query(&c, &always, &coarse_only, &adapters, Execution::Sequential).unwrap();
        assert_eq!(a.result, b.result);
        assert!(a.result.degraded);
    }
}

#[test]
fn grounder_outage_degrades() {
    let s = generate(&SynthSpec { images: 10, ..SynthSpec::default() }).unwrap();
    let world = s.world();
    let grounder = Arc::new(ara_core::adapters::mock::MockGrounder::new(world.clone()));
    let base = Adapters::mock(world);
    let adapters = Adapters::new(base.lvlm.clone(), base.embedder.clone(), grounder.clone()).unwrap();
    let indices = Indices {
        coarse: KnowledgeIndex::build(s.coarse_kb.clone()).unwrap(),
        fine: Some(KnowledgeIndex::build(s.fine_kb.clone()).unwrap()),
    };
    let r = &s.dataset[0];
    let c = ctx(&adapters, &r.image_uri, &r.question);
    grounder.set_available(false);
    let o = run_query(&c, &cfg(TriggerKind::Always, 0.0), &indices, &adapters, Execution::Sequential).unwrap();
    assert!(o.result.degraded && o.fine.is_none());
}

#[test]
fn retrieval_closes_the_blind_spot_gap() {
    let (s, adapters, indices) = setup();
    let acc = |kind, theta| {
        evaluate(&s.dataset, &cfg(kind, theta), &indices, &adapters, Execution::Parallel).unwrap().report().unwrap()
    };
    let never = acc(TriggerKind::Never, 0.0);
    let always = acc(TriggerKind::Always, 0.0);
    let gated = acc(TriggerKind::QueryAware, 0.2);
    assert!((never.accuracy - 0.8).abs() < 1e-12);
    assert_eq!(always.accuracy, 1.0);
    assert_eq!(gated.accuracy, 1.0);
    assert!(gated.retrieval_fraction < 0.3);
}

#[test]
fn parallel_matches_sequential() {
    let (s, adapters, indices) = setup();
    let c = cfg(TriggerKind::QueryAware, 0.2);
    let a = evaluate(&s.dataset, &c, &indices, &adapters, Execution::Parallel).unwrap();
    let b = evaluate(&s.dataset, &c, &indices, &adapters, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}
