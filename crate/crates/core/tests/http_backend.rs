mod common;

use std::time::Duration;

use common::{token_logprob, MockServer};
use referi::backend::http::{OpenAiBackend, OpenAiConfig};
use referi::backend::{Backend, BackendError, GenerationRequest, LikelihoodRequest, RetryPolicy};
use referi::harness::config::RunConfig;
use referi::harness::dataset::DatasetRecord;
use referi::harness::eval::eval_run;
use referi::harness::open::open_backends;
use referi::types::{Example, FewShotSet};

fn backend(server: &MockServer) -> OpenAiBackend {
    let mut cfg = OpenAiConfig::new(&server.base_url, "mock-model");
    cfg.api_key = Some("sk-test".into());
    cfg.retry = RetryPolicy {
        base: Duration::from_millis(1),
        factor: 2.0,
        max_attempts: 3,
    };
    OpenAiBackend::new(cfg).unwrap()
}

#[test]
fn generation_returns_every_choice_with_logprobs() {
    let server = MockServer::start();
    let b = backend(&server);
    let mut req = GenerationRequest::new("Q: What is 5 + 6?\nA: ", 3, 1.0);
    req.want_logprobs = true;
    req.seed = Some(4);
    let cands = b.generate(&req).unwrap();
    assert_eq!(cands.len(), 3);
    for (k, c) in cands.iter().enumerate() {
        assert_eq!(c.index, k);
        let toks = c.gen_token_logprobs.as_ref().unwrap();
        assert_eq!(toks.iter().map(|t| t.token.as_str()).collect::<String>(), c.response);
        assert!((toks[0].logprob - token_logprob(&req.context, &toks[0].token)).abs() < 1e-12);
    }
    let logged = server.requests();
    assert_eq!(logged[0].body["n"], 3);
    assert_eq!(logged[0].body["seed"], 4);
    assert_eq!(logged[0].authorization.as_deref(), Some("Bearer sk-test"));
}

#[test]
fn echo_scoring_isolates_the_continuation() {
    let server = MockServer::start();
    let b = backend(&server);
    let ctx = "Q: slot 0\nA: ";
    let resp = b
        .score_continuation(&LikelihoodRequest::new(ctx, "two words").with_top_k(2))
        .unwrap();
    assert_eq!(resp.text(), "two words");
    assert_eq!(resp.token_scores.len(), 2);
    // "A: two" is tokenized as " two", straddling the boundary
    let expected = token_logprob("Q: slot 0\nA:", " two") + token_logprob("Q: slot 0\nA: two", " words");
    assert!((resp.total_logprob() - expected).abs() < 1e-12);
    let alts = resp.token_scores[1].top_alternatives.as_ref().unwrap();
    assert_eq!(alts.len(), 2);
    assert!(server.requests()[0].body["echo"].as_bool().unwrap());
}

#[test]
fn embeddings_come_back_as_vectors() {
    let server = MockServer::start();
    let v = backend(&server).embed("some text here").unwrap();
    assert_eq!(v.len(), 16);
    assert_eq!(v.iter().sum::<f64>(), 3.0);
    assert!(backend(&server).embed("").is_err());
}

#[test]
fn transient_failures_are_retried() {
    let server = MockServer::start();
    server.fail_next(2);
    let b = backend(&server);
    assert!(b.embed("retry me").is_ok());
    assert_eq!(server.count(), 1);

    server.fail_next(5);
    match b.embed("give up") {
        Err(BackendError::Status { status, attempts, .. }) => {
            assert_eq!(status, 503);
            assert_eq!(attempts, 3);
        }
        other => panic!("expected exhausted retries, got {other:?}"),
    }
}

#[test]
fn missing_routes_fail_without_retry() {
    let server = MockServer::start();
    let mut cfg = OpenAiConfig::new(format!("{}/nowhere", server.base_url), "m");
    cfg.retry.base = Duration::from_millis(1);
    let err = OpenAiBackend::new(cfg).unwrap().embed("x").unwrap_err();
    assert!(
        matches!(
            err,
            BackendError::Status {
                status: 404,
                attempts: 1,
                ..
            }
        ),
        "{err:?}"
    );
}

fn small_run(server: &MockServer, cache: &std::path::Path) -> (RunConfig, Vec<DatasetRecord>, FewShotSet) {
    let mut cfg = RunConfig::default();
    cfg.engine.seed = Some(3);
    cfg.backends.generator = Some(server.base_url.clone());
    cfg.backends.model = Some("mock-model".into());
    cfg.backends.cache = Some(cache.to_path_buf());
    cfg.eval.selectors = ["referi", "referi-full", "forward", "majority", "cotwp", "usc"]
        .map(String::from)
        .to_vec();
    let few_shot = FewShotSet::new(vec![
        Example::new("What is 2 + 3?", "2 plus 3 is 5. The answer is 5.").unwrap(),
        Example::new("What is 4 + 4?", "4 plus 4 is 8. The answer is 8.").unwrap(),
    ])
    .unwrap();
    let records = (0..4)
        .map(|i| DatasetRecord {
            id: format!("q{i}"),
            query: format!("What is {} + {}?", 3 + i, 8 - i),
            gold: Some("11".into()),
        })
        .collect();
    (cfg, records, few_shot)
}

#[test]
fn second_identical_run_is_served_from_cache() {
    let server = MockServer::start();
    let dir = tempfile::tempdir().unwrap();
    let (cfg, records, few_shot) = small_run(&server, dir.path());

    let (first, s1) = eval_run(&records, &few_shot, &cfg, &open_backends(&cfg.backends).unwrap()).unwrap();
    let calls = server.count();
    assert!(calls > 0);
    assert!(s1.cache.misses > 0 && s1.cache_hit_rate < 1.0);

    let (second, s2) = eval_run(&records, &few_shot, &cfg, &open_backends(&cfg.backends).unwrap()).unwrap();
    assert_eq!(server.count(), calls, "second run reached the server");
    assert_eq!(s2.cache_hit_rate, 1.0);
    assert_eq!(first.to_jsonl(), second.to_jsonl());
}

#[test]
fn selectors_share_one_candidate_pool_per_query() {
    let server = MockServer::start();
    let dir = tempfile::tempdir().unwrap();
    let (cfg, records, few_shot) = small_run(&server, dir.path());
    let (report, _) = eval_run(&records, &few_shot, &cfg, &open_backends(&cfg.backends).unwrap()).unwrap();
    assert_eq!(report.aggregate.failures, 0);
    let sampling = server
        .requests()
        .iter()
        .filter(|r| r.body.get("echo").is_none() && r.body["n"] == 5)
        .count();
    assert_eq!(sampling, records.len());
    for row in &report.rows {
        assert_eq!(row.candidate_hashes.len(), 5);
        for s in &row.selections {
            let i = s.selected_index.unwrap();
            assert!(i < row.candidates.len());
        }
    }
}
