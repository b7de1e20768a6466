use std::path::Path;

use hicem_core::config::{RunConfig, SplitVariant, WorldKind};
use hicem_core::container::Container;
use hicem_core::pipeline::{files, read_report, sha256_hex, Pipeline, ServedRun, StageEvent};
use hicem_core::Error;

fn small(dir: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml(
        r#"
        seed = 3
        [world]
        n = 1200
        [cem]
        max_epochs = 15
        [hicem]
        max_epochs = 15
        [split.sae]
        dict_size = 32
        epochs = 20
        batch_size = 64
        [eval]
        trials = 2
        "#,
    )
    .unwrap();
    c.artifacts = dir.to_path_buf();
    c
}

fn stages(events: &[StageEvent]) -> Vec<(&'static str, bool)> {
    events.iter().map(|e| (e.stage, e.reused)).collect()
}

#[test]
fn identical_configs_give_identical_reports_and_resume_is_staged() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut pa = Pipeline::new(&small(a.path())).unwrap();
    pa.report().unwrap();
    let mut pb = Pipeline::new(&small(b.path())).unwrap();
    pb.report().unwrap();
    let ra = std::fs::read(a.path().join(files::REPORT)).unwrap();
    let rb = std::fs::read(b.path().join(files::REPORT)).unwrap();
    assert_eq!(sha256_hex(&ra), sha256_hex(&rb));
    assert_eq!(pa.report_hash(), Some(sha256_hex(&ra).as_str()));
    assert!(stages(pa.events()).iter().all(|(_, reused)| !reused));

    // every artifact carries a version and a hash
    for name in [files::WORLD, files::CEM, files::SPLIT, files::MATCHED, files::HICEM] {
        let bytes = std::fs::read(a.path().join(name)).unwrap();
        assert!(bytes.starts_with(b"HICEM-CONTAINER 1 "), "{name}");
        let c = Container::from_bytes(&bytes).unwrap();
        assert!(c.inputs().is_some(), "{name}");
    }
    for name in [files::SPLIT_SUMMARY, files::MATCH_TABLE, files::EVAL, files::CURVES, files::REPORT] {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join(name)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1, "{name}");
        assert_eq!(v["content_sha256"].as_str().unwrap().len(), 64, "{name}");
    }
    let env = read_report(a.path()).unwrap();
    assert!(env.inputs.contains_key("cem") && env.inputs.contains_key("hicem") && env.inputs.contains_key("config"));

    // deleting only the report regenerates it from cached stages
    std::fs::remove_file(a.path().join(files::REPORT)).unwrap();
    let mut again = Pipeline::new(&small(a.path())).unwrap();
    again.report().unwrap();
    let ev = stages(again.events());
    assert_eq!(ev.last(), Some(&("report", false)));
    assert!(ev[..ev.len() - 1].iter().all(|(_, reused)| *reused), "{ev:?}");
    assert_eq!(std::fs::read(a.path().join(files::REPORT)).unwrap(), ra);

    // a changed HiCEM config retrains only the HiCEM and what follows it
    let mut cfg = small(a.path());
    cfg.hicem.lambda = 5.0;
    let mut changed = Pipeline::new(&cfg).unwrap();
    changed.report().unwrap();
    let ev = stages(changed.events());
    let fresh: Vec<&str> = ev.iter().filter(|e| !e.1).map(|e| e.0).collect();
    assert_eq!(fresh, ["train-hicem", "eval", "curve", "report"]);

    let served = ServedRun::open(a.path()).unwrap();
    assert_eq!(served.world.dataset.len(), 1200);
}

#[test]
fn clustering_variant_runs_on_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.world.kind = WorldKind::Shapes;
    cfg.world.n = 800;
    cfg.split.variant = SplitVariant::Clustering;
    cfg.split.config.clustering.restarts = 2;
    cfg.split.config.clustering.beta_max = 4;
    let mut p = Pipeline::new(&cfg).unwrap();
    let r = p.report().unwrap().clone();
    assert!(r.split.iter().all(|s| s.sae.is_none()));
    assert!(r.split.iter().any(|s| s.clusters.is_some()));
    assert!(r.discovered > 0);
}

#[test]
fn config_errors_surface_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.split.config.sae.k = 0;
    assert!(matches!(Pipeline::new(&cfg), Err(Error::Config(_))));
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    // a directory squatting on the checkpoint path makes the CEM write fail
    std::fs::create_dir_all(dir.path().join(files::CEM)).unwrap();
    let mut cfg = small(dir.path());
    cfg.world.n = 300;
    cfg.cem.max_epochs = 1;
    let mut p = Pipeline::new(&cfg).unwrap();
    match p.report() {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train-cem"),
        other => panic!("{other:?}"),
    }
    // the world artifact written before the failure is kept
    assert!(dir.path().join(files::WORLD).is_file());
}

#[test]
fn serving_needs_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ServedRun::open(dir.path()), Err(Error::Io { .. })));
}
