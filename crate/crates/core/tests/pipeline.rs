// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;

use stepfaith_core::config::RunConfig;
use stepfaith_core::error::Error;
use stepfaith_core::pipeline::{files, run_pipeline};
use stepfaith_core::report::{rebuild_summary, Summary};
use stepfaith_core::taskgen::{load_gsm8k, GenConfig};
use stepfaith_core::{jsonl, Annotation, Operation, TaskKind};

const GSM: &[&str] = &[
    r#"{"question":"Ann has 3 boxes of 4 pens. She buys 5 more pens. How many pens does she have?","answer":"3 boxes hold 3*4=<<3*4=12>>12 pens.\nAfter buying, 12+5=<<12+5=17>>17 pens.\n#### 17"}"#,
    r#"{"question":"A bus has 40 seats. 12 are empty. How many are full?","answer":"40-12=<<40-12=28>>28 seats are full.\n#### 28"}"#,
    r#"{"question":"Split 12 apples among 4 kids. How many each?","answer":"12/4=<<12/4=3>>3 apples each.\n#### 3"}"#,
    r#"{"question":"Broken?","answer":"2+2=5 apples.\n#### 5"}"#,
    "not json",
];

fn gsm_file(dir: &std::path::Path, lines: usize) -> std::path::PathBuf {
    let path = dir.join("gsm.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for i in 0..lines {
        writeln!(f, "{}", GSM[i % GSM.len()]).unwrap();
    }
    path
}

#[test]
fn gsm8k_loader_keeps_verified_chains() {
    let dir = tempfile::tempdir().unwrap();
    let path = gsm_file(dir.path(), GSM.len());
    let (chains, report) = load_gsm8k(
        &path,
        &GenConfig {
            n_samples: 100,
            ..GenConfig::new(TaskKind::Gsm8k)
        },
    )
    .unwrap();
    assert_eq!(chains.len(), 2);
    assert_eq!(report.dropped.len(), 3);
    assert!(report.dropped.iter().any(|(_, r)| r.contains("division")));
    assert!(report.dropped.iter().any(|(_, r)| r.contains("evaluates to")));
    let c = &chains[0];
    assert_eq!(c.answer.text, "17");
    assert_eq!(c.steps[0].text, "3 boxes hold 3*4=12 pens.");
    assert_eq!(
        c.steps.iter().map(|s| s.annotation).collect::<Vec<_>>(),
        vec![Annotation::Op(Operation::Mul), Annotation::Op(Operation::Add)]
    );
}

#[test]
fn gsm8k_runs_end_to_end_on_the_mock() {
    let dir = tempfile::tempdir().unwrap();
    let path = gsm_file(dir.path(), 60);
    let cfg = RunConfig::parse(&format!(
        "task = gsm8k\ngsm8k_path = {}\nbootstrap_b = 200",
        path.display()
    ))
    .unwrap();
    let out = run_pipeline(&cfg, &dir.path().join("run")).unwrap();
    assert_eq!(out.chains.len(), 24);
    assert!(out.analysis.meta.n_clean > 0);
    assert!(out.summary.n_variants > 0);
}

#[test]
fn run_directory_has_every_artifact_and_rebuilds_its_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("n = 40\nbootstrap_b = 300").unwrap();
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    for f in [
        files::CONFIG,
        files::DATASET,
        files::SPLIT,
        files::VARIANTS,
        files::REJECTS,
        files::REQUESTS,
        files::TRACES,
        files::CALIBRATION,
        files::ANALYSIS,
        files::RESULTS,
        files::CURVES,
        files::HORIZON,
        files::PROBE,
        files::SUMMARY,
        "plots/nldd_dyck.csv",
        "plots/rsa_dyck.csv",
        "plots/tas_dyck.csv",
        "plots/prob_delta_dyck.csv",
        "plots/curves_dyck.svg",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let written: Summary = jsonl::read_json(&dir.path().join(files::SUMMARY)).unwrap();
    assert_eq!(written, out.summary);
    assert_eq!(rebuild_summary(&cfg, dir.path()).unwrap(), out.summary);
    let again = RunConfig::from_file(&dir.path().join(files::CONFIG)).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn external_traces_reproduce_the_mock_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let mock_cfg = RunConfig::parse("n = 40\nbootstrap_b = 300\nppl_filter = false").unwrap();
    let mock = run_pipeline(&mock_cfg, &dir.path().join("mock")).unwrap();
    let traces = dir.path().join("mock").join(files::TRACES);
    let cfg = RunConfig::parse(&format!(
        "n = 40\nbootstrap_b = 300\nppl_filter = false\nbackend = traces\ntraces = {}\nmodel = test-lm",
        traces.display()
    ))
    .unwrap();
    let ext = run_pipeline(&cfg, &dir.path().join("ext")).unwrap();
    assert_eq!(ext.analysis.pairs, mock.analysis.pairs);
    assert_eq!(ext.summary.mean_nldd, mock.summary.mean_nldd);
    assert_eq!(ext.summary.model, "test-lm");
    assert!(!dir.path().join("ext").join(files::TRACES).exists());
}

#[test]
fn config_errors_name_the_line() {
    let err = |text: &str| match RunConfig::parse(text) {
        Err(Error::Config(m)) => m,
        other => panic!("expected config error, got {other:?}"),
    };
    assert!(err("n = 10\nn = 20").contains("line 2: duplicate key `n`"));
    assert!(err("# comment\nbogus = 1").starts_with("line 2"));
    assert!(err("n = ten").starts_with("line 1"));
    assert!(err("backend = traces").contains("traces"));
    assert!(err("task = gsm8k").contains("gsm8k_path"));
    let cfg = RunConfig::parse("  seed = 7 # trailing\nprobe = no\nchain_length = none").unwrap();
    assert_eq!((cfg.seed, cfg.probe, cfg.chain_length), (7, false, None));
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}
