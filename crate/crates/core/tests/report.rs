use referi::backend::synthetic::TaskKind;
use referi::harness::config::{RandomConvention, RunConfig};
use referi::harness::eval::{candidate_hash, eval_run, RunReport};
use referi::harness::open::open_backends;
use referi::harness::synth::{synth_task, SynthParams};

fn run(kind: TaskKind, size: usize, sigma: f64, delta: f64, selectors: &[&str]) -> RunReport {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth_task(&SynthParams::new(kind, size, sigma, delta, 7)).unwrap();
    suite.write(dir.path()).unwrap();
    let mut cfg = RunConfig::load(dir.path().join("referi.toml")).unwrap();
    cfg.eval.selectors = selectors.iter().map(|s| s.to_string()).collect();
    let opened = open_backends(&cfg.backends).unwrap();
    eval_run(&suite.dataset, &suite.few_shot, &cfg, &opened).unwrap().0
}

#[test]
fn report_round_trips_and_accounts_exactly() {
    let report = run(
        TaskKind::Arithmetic,
        60,
        2.0,
        1.5,
        &["referi", "forward", "random", "majority", "cotwp"],
    );
    let text = report.to_jsonl();
    let back = RunReport::parse(&text).unwrap();
    assert_eq!(back.to_jsonl(), text);
    assert!(text.lines().last().unwrap().starts_with("# "));

    for (name, agg) in &report.aggregate.selectors {
        let credits: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| !r.failed())
            .map(|r| r.selection(name).unwrap().credit.unwrap())
            .collect();
        let acc = credits.iter().sum::<f64>() / credits.len() as f64;
        assert_eq!(Some(acc), agg.accuracy, "{name}");
    }
    assert_eq!(report.aggregate.random_convention, RandomConvention::Averaged);

    for (i, row) in report.rows.iter().enumerate() {
        assert_eq!(row.id, format!("arithmetic-{i:04}"), "rows keep dataset order");
        let hashes: Vec<String> = row.candidates.iter().map(|c| candidate_hash(c)).collect();
        assert_eq!(hashes, row.candidate_hashes);
    }
}

#[test]
fn noiseless_signal_always_finds_a_correct_candidate() {
    let report = run(TaskKind::Mapping, 80, 0.0, 1.5, &["referi", "referi-full"]);
    for row in &report.rows {
        let any_correct = row.correct_candidates.as_ref().unwrap().iter().any(|&c| c);
        for s in &row.selections {
            assert_eq!(s.correct, Some(any_correct), "{} / {}", row.id, s.selector);
        }
    }
}

#[test]
fn no_signal_means_every_scorer_ties() {
    let report = run(TaskKind::Arithmetic, 80, 0.0, 0.0, &["referi", "forward", "random"]);
    for row in &report.rows {
        for name in ["referi", "forward"] {
            let s = row.selection(name).unwrap();
            assert!(s.tie_broken, "{}: {name} should be a full tie", row.id);
            assert_eq!(s.selected_index, Some(0));
        }
    }
    let referi = report.accuracy("referi").unwrap();
    let random = report.accuracy("random").unwrap();
    assert!((referi - random).abs() < 0.15, "referi {referi} vs random {random}");
}
