use std::path::Path;

use prosona_core::checkpoint::{self, parameter_checksum};
use prosona_core::dataset::generate_dataset;
use prosona_core::synthetic::{default_styles, GenerationConfig};
use prosona_core::train::{train_stage1, train_stage2, TrainConfig, TrainableSet};
use prosona_core::Error;
use serde_json::Value;

fn dataset(dir: &Path, cases: usize) {
    let cfg = GenerationConfig {
        height: 32,
        width: 32,
        cases,
        ..Default::default()
    };
    generate_dataset(3, &cfg, &default_styles(2), dir, false).unwrap();
}

fn probe(data: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        data_dir: data.to_path_buf(),
        ..Default::default()
    };
    cfg.model.base_width = 4;
    cfg.model.posterior_width = 4;
    cfg.model.depth = 2;
    cfg.stage1.epochs = 2;
    cfg.stage1.learning_rate = 1e-3;
    cfg.stage1.batch_size = 4;
    cfg.stage1.k = 3;
    cfg.stage2.epochs = 2;
    cfg.stage2.learning_rate = 1e-2;
    cfg.stage2.batch_size = 4;
    cfg.stage2.k = 4;
    cfg.eval_k = 4;
    cfg
}

fn log_lines(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn step_records(dir: &Path) -> Vec<Value> {
    log_lines(dir).into_iter().filter(|r| r.get("step").is_some()).collect()
}

#[test]
fn probe_stage1_lowers_validation_ged() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(&tmp.path().join("data"), 24);
    let mut cfg = probe(&tmp.path().join("data"));
    cfg.stage1.epochs = 10;
    let out = train_stage1(&cfg, &tmp.path().join("s1")).unwrap();
    assert_eq!(out.history.len(), 11);
    assert!(
        out.best_val_ged < out.history[0].val_ged,
        "best {} at epoch {} vs initial {}",
        out.best_val_ged,
        out.best_epoch,
        out.history[0].val_ged
    );
    let meta = checkpoint::read_meta(&out.best).unwrap();
    assert_eq!((meta.stage, meta.epoch, meta.tag.as_str()), (1, out.best_epoch, "best"));
    assert_eq!(checkpoint::read_meta(&out.last).unwrap().epoch, 10);
}

#[test]
fn training_is_deterministic_and_logs_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 12);
    let mut cfg = probe(&data);

    let a = train_stage1(&cfg, &tmp.path().join("a1")).unwrap();
    let b = train_stage1(&cfg, &tmp.path().join("b1")).unwrap();
    assert_eq!(a.final_checksum, b.final_checksum);
    let read = |p: &Path| std::fs::read(p.join("train_log.jsonl")).unwrap();
    assert_eq!(read(&tmp.path().join("a1")), read(&tmp.path().join("b1")));
    assert_eq!(
        std::fs::read(a.last.join("params.bin")).unwrap(),
        std::fs::read(b.last.join("params.bin")).unwrap()
    );
    for r in step_records(&tmp.path().join("a1")) {
        let parts = r["l_seg"].as_f64().unwrap() + r["l_kl"].as_f64().unwrap() + r["l_bound"].as_f64().unwrap();
        assert!((parts - r["total"].as_f64().unwrap()).abs() < 1e-6, "{r}");
    }

    cfg.stage1_checkpoint = Some(a.best.clone());
    let s2a = train_stage2(&cfg, &tmp.path().join("a2")).unwrap();
    let s2b = train_stage2(&cfg, &tmp.path().join("b2")).unwrap();
    assert_eq!(s2a.final_checksum, s2b.final_checksum);
    assert_eq!(read(&tmp.path().join("a2")), read(&tmp.path().join("b2")));
    for r in step_records(&tmp.path().join("a2")) {
        let parts = r["l_seg"].as_f64().unwrap()
            + r["alpha"].as_f64().unwrap() * r["l_text"].as_f64().unwrap()
            + r["beta"].as_f64().unwrap() * r["l_sim"].as_f64().unwrap();
        assert!((parts - r["total"].as_f64().unwrap()).abs() < 1e-6, "{r}");
    }

    // mlp_only: the backbone is carried over bit for bit
    let (s1, s1_meta) = checkpoint::load(&a.best, None).unwrap();
    let (s2, s2_meta) = checkpoint::load(&s2a.best, None).unwrap();
    assert_eq!(parameter_checksum(&s1.backbone), parameter_checksum(&s2.backbone));
    assert_eq!(s2_meta.parent.as_deref(), Some(s1_meta.checkpoint_id.as_str()));
    assert_eq!(s2_meta.stage, 2);

    // alpha = beta = 0: contrastive terms are absent from the log
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    train_stage2(&cfg, &tmp.path().join("c2")).unwrap();
    for r in step_records(&tmp.path().join("c2")) {
        assert!(r.get("l_text").is_none() && r.get("l_sim").is_none(), "{r}");
        assert_eq!(r["l_seg"], r["total"]);
    }

    // full fine-tuning moves the backbone
    cfg.trainable_set = TrainableSet::Stage2Full;
    cfg.stage2.epochs = 1;
    let full = train_stage2(&cfg, &tmp.path().join("d2")).unwrap();
    let (s2full, _) = checkpoint::load(&full.last, None).unwrap();
    assert_ne!(parameter_checksum(&s1.backbone), parameter_checksum(&s2full.backbone));
}

#[test]
fn stage2_requires_a_checkpoint_and_a_complete_prompt_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 8);
    let mut cfg = probe(&data);
    assert!(matches!(train_stage2(&cfg, &tmp.path().join("o")), Err(Error::Config(_))));

    cfg.stage1.epochs = 1;
    cfg.stage1_checkpoint = Some(train_stage1(&cfg, &tmp.path().join("s1")).unwrap().best);
    let manifest = data.join("manifest.json");
    let mut m: Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    m["styles"][1]["prompt_texts"] = Value::Array(vec![]);
    std::fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    match train_stage2(&cfg, &tmp.path().join("o")) {
        Err(Error::Config(msg)) => assert!(msg.contains("no prompt texts"), "{msg}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn diverging_training_aborts_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 8);
    let mut cfg = probe(&data);
    cfg.stage1.learning_rate = 1e300;
    match train_stage1(&cfg, &tmp.path().join("o")) {
        Err(Error::NonFiniteLoss { diagnostics, .. }) => assert!(diagnostics.contains("parameter norm")),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn config_round_trips_and_rejects_bad_values() {
    let mut cfg = TrainConfig::default();
    cfg.loss.alpha = 0.5;
    cfg.trainable_set = TrainableSet::Stage2Full;
    cfg.stage1_checkpoint = Some("runs/s1/best".into());
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);

    let defaults = TrainConfig::from_toml("").unwrap();
    assert_eq!((defaults.stage1.epochs, defaults.stage1.batch_size, defaults.stage1.k), (100, 8, 10));
    assert_eq!(defaults.stage1.learning_rate, 1e-4);
    assert_eq!(defaults.model.latent_dim, 6);

    assert!(TrainConfig::from_toml("epochs = 3").is_err());
    let mut bad = TrainConfig::default();
    bad.stage2.learning_rate = -1.0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = TrainConfig::default();
    bad.loss.tau = 0.0;
    assert!(bad.validate().is_err());
}

#[test]
fn ablation_grid_and_interpolation_export() {
    use prosona_core::ablation::{default_values, run_ablation};
    use prosona_core::dataset::{Dataset, Split};
    use prosona_core::interpolation::export_interpolation;

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 12);
    let mut cfg = probe(&data);
    cfg.stage1.epochs = 1;
    let s1 = train_stage1(&cfg, &tmp.path().join("s1")).unwrap();
    cfg.stage1_checkpoint = Some(s1.best);
    cfg.stage2.epochs = 1;

    let out = tmp.path().join("grid");
    let grid = run_ablation(&cfg, &default_values(), &default_values(), &out).unwrap();
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10, "{csv}");
    assert!(grid.cells.iter().all(|c| c.status == "trained" && c.val_ged.is_some()));
    assert!(out.join("heatmap.png").exists());

    let cell_files = |dir: &Path| -> Vec<Vec<u8>> {
        grid.cells
            .iter()
            .flat_map(|c| {
                let d = dir.join("cells").join(format!("alpha_{}_beta_{}", c.alpha, c.beta));
                [std::fs::read(d.join("cell.json")).unwrap(), std::fs::read(d.join("best/params.bin")).unwrap()]
            })
            .collect()
    };
    let before = cell_files(&out);
    let again = run_ablation(&cfg, &default_values(), &default_values(), &out).unwrap();
    assert!(again.cells.iter().all(|c| c.status == "cached"));
    assert_eq!(again.results, grid.results);
    assert_eq!(cell_files(&out), before);

    let (model, _) = checkpoint::load(&grid.cells[8].checkpoint.clone().unwrap(), None).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let case = &ds.load_split(Split::Test).unwrap()[0];
    let styles = &ds.manifest.styles;
    let curve = export_interpolation(
        &model,
        case,
        &styles[0].prompt_texts[0],
        &styles[1].prompt_texts[0],
        5,
        4,
        0,
        0.5,
        &tmp.path().join("interp"),
    )
    .unwrap();
    assert_eq!(curve.iter().map(|p| p.t).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let strip = image::open(tmp.path().join("interp/strip.png")).unwrap();
    assert_eq!(strip.width(), 5 * 32 + 4 * 2);
    let rows = std::fs::read_to_string(tmp.path().join("interp/curve.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
}
