//! End-to-end pipeline smoke tests on a small synthetic corpus.

use novscope::config::RunConfig;
use novscope::hypergraph::Channel;
use novscope::pipeline::{
    read_meta, run_regressions, stage_build, stage_fit, stage_ingest, stage_metrics,
    stage_regress, stage_score, stage_synth, PipelineCtx,
};
use novscope::regression::{ModelSpec, SeType, Term};
use std::path::Path;

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.data_dir = root.join("data");
    cfg.paths.out_dir = root.join("out");
    cfg.synth.n_papers = 500;
    cfg.synth.n_authors = 500;
    cfg.fit.dim = 3;
    cfg.fit.max_epochs = 40;
    cfg.fit.tolerance = 1e-6;
    let spec = ModelSpec {
        name: "surprise_gap".into(),
        outcome: "surprise_ref".into(),
        terms: vec![
            Term::Main { col: "female".into() },
            Term::Categorical { col: "year".into(), baseline: "2000".into() },
        ],
        filter: None,
        cluster_col: Some("author_id".into()),
        se_type: SeType::Clustered,
    };
    let spec_path = root.join("surprise_gap.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    cfg.regress.spec_files = vec![spec_path];
    cfg
}

fn run_all(root: &Path) -> PipelineCtx {
    let ctx = PipelineCtx::new(small_config(root), vec![Channel::Context], false);
    stage_synth(&ctx).unwrap();
    stage_ingest(&ctx).unwrap();
    stage_build(&ctx).unwrap();
    stage_fit(&ctx).unwrap();
    stage_score(&ctx).unwrap();
    stage_metrics(&ctx).unwrap();
    stage_regress(&ctx).unwrap();
    ctx
}

#[test]
fn smoke_full_pipeline_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = run_all(dir.path());
    let out = &ctx.config.paths.out_dir;
    for f in ["ingest.json", "scores.csv", "metrics.csv", "report_surprise_gap.csv", "manifest.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(out.join("report_surprise_gap.csv")).unwrap();
    assert!(report.starts_with("term,estimate,se,t,p\n"));
    assert!(report.contains("\nfemale,"));
    assert!(report.contains("__footer__,n_obs="));
    // every output is stamped with the producing config hash
    for f in ["scores.csv", "metrics.csv", "report_surprise_gap.csv"] {
        assert_eq!(read_meta(&out.join(f)).unwrap().config_hash, ctx.config_hash);
    }
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let c1 = run_all(d1.path());
    let c2 = run_all(d2.path());
    for f in ["scores.csv", "metrics.csv", "report_surprise_gap.csv"] {
        let a = std::fs::read(c1.config.paths.out_dir.join(f)).unwrap();
        let b = std::fs::read(c2.config.paths.out_dir.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn stages_check_their_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = PipelineCtx::new(small_config(dir.path()), vec![Channel::Context], false);
    stage_synth(&ctx).unwrap();
    let err = stage_build(&ctx).unwrap_err();
    assert!(err.to_string().contains("`ingest`"), "got: {err}");
    stage_ingest(&ctx).unwrap();
    let err = stage_fit(&ctx).unwrap_err();
    assert!(err.to_string().contains("`build`"), "got: {err}");
}

#[test]
fn config_change_invalidates_caches() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = run_all(dir.path());
    // a different fit config produces a different hash; downstream stages refuse
    let mut changed = small_config(dir.path());
    changed.fit.dim = 4;
    let ctx2 = PipelineCtx::new(changed, vec![Channel::Context], false);
    assert_ne!(ctx.config_hash, ctx2.config_hash);
    let err = run_regressions(&ctx2).unwrap_err();
    assert_eq!(err.exit_code(), 3, "expected a stale-cache error, got: {err}");
    // --force overrides the refusal
    let forced = PipelineCtx::new(small_config(dir.path()), vec![Channel::Context], true);
    assert_eq!(forced.config_hash, ctx.config_hash);
    run_regressions(&forced).unwrap();
}

#[test]
fn report_rows_carry_interaction_names() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = small_config(root);
    let spec = ModelSpec {
        name: "rewards".into(),
        outcome: "cites_2y".into(),
        terms: vec![
            Term::Main { col: "female".into() },
            Term::Main { col: "surprise_ref".into() },
            Term::Interaction { cols: vec!["female".into(), "surprise_ref".into()] },
        ],
        filter: None,
        cluster_col: Some("author_id".into()),
        se_type: SeType::Clustered,
    };
    let spec_path = root.join("rewards.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    cfg.regress.spec_files = vec![spec_path];
    let ctx = PipelineCtx::new(cfg, vec![Channel::Context], false);
    stage_synth(&ctx).unwrap();
    stage_ingest(&ctx).unwrap();
    stage_build(&ctx).unwrap();
    stage_fit(&ctx).unwrap();
    stage_score(&ctx).unwrap();
    stage_metrics(&ctx).unwrap();
    let results = run_regressions(&ctx).unwrap();
    assert_eq!(
        results[0].names,
        vec!["const", "female", "surprise_ref", "female×surprise_ref"]
    );
}
