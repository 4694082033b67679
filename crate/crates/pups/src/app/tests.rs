use super::*;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 5
eval_every = 1
[model]
channels = 8
classifiers = 12
stages = 2
heads = 2
encoder = { hidden = [8], neighbors = 4, fourier_bands = 1 }
[optim]
epochs = 2
batch_size = 2
[data]
train_scenes = 4
val_scenes = 2
"#,
        None,
    )
    .unwrap();
    cfg.cutmix.probability = 1.0;
    cfg
}

#[test]
fn user_keys_override_the_profile() {
    let cfg = RunConfig::from_toml("[optim.adamw]\nlr = 0.01\n[loss]\nalpha = 2.0\n", None).unwrap();
    let toy = RunConfig::toy();
    assert_eq!(cfg.optim.adamw.lr, 0.01);
    assert_eq!(cfg.optim.adamw.beta1, toy.optim.adamw.beta1);
    assert_eq!(cfg.optim.epochs, toy.optim.epochs);
    assert_eq!(cfg.loss.alpha, 2.0);
    assert_eq!(cfg.loss.negative_mask_weight, 1.0);
    assert_eq!(cfg.model, toy.model);

    let full = RunConfig::from_toml("profile = \"full\"\n", None).unwrap();
    assert_eq!(full, RunConfig::full());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["colour = 1\n", "[model]\nwidth = 3\n", "[optim.adamw]\nmomentum = 0.9\n", "[cutmix.policy]\ntries = 2\n"] {
        assert!(matches!(RunConfig::from_toml(text, None), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn resolved_config_round_trips() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml(), None).unwrap(), cfg);
    let base = Path::new("/data/run");
    let rel = RunConfig::from_toml("taxonomy = \"tax.toml\"\n", Some(base)).unwrap();
    assert_eq!(rel.taxonomy.as_deref(), Some(base.join("tax.toml").as_path()));
}

#[test]
fn validation_catches_bad_values() {
    let mut cfg = tiny();
    cfg.cutmix.probability = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.cutmix.policy.counts.insert("road".into(), 1);
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.model.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.model.classifiers = 11;
    assert!(matches!(cfg.validate(), Err(Error::Capacity { things: 10, slots: 9 })));
}

#[test]
fn training_writes_artifacts_and_is_deterministic() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(&cfg, a.path()).unwrap();
    let rb = train(&cfg, b.path()).unwrap();
    assert_eq!(ra.model.params, rb.model.params);
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.metrics.len(), 2);
    assert!(ra.metrics.iter().all(|m| m.val_pq.is_some() && m.loss.is_finite()));
    assert!(ra.metrics.iter().map(|m| m.mix.requested).sum::<usize>() > 0);
    for f in [CHECKPOINT_FILE, METRICS_FILE, "config.toml", "val_report.json", "val_report.txt"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log, fs::read_to_string(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(log.lines().count(), 2);

    let loaded = load_model(&cfg, &a.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.params, ra.model.params);
    let report = eval_checkpoint(&cfg, &a.path().join(CHECKPOINT_FILE), Split::Val, a.path()).unwrap();
    assert_eq!(report, ra.report);
}

#[test]
fn zero_epochs_saves_the_initial_parameters() {
    let mut cfg = tiny();
    cfg.optim.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, dir.path()).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    let init = PupsModel::new(cfg.model.clone(), ClassTaxonomy::toy(), cfg.seed).unwrap();
    assert_eq!(load_model(&cfg, &dir.path().join(CHECKPOINT_FILE)).unwrap().params, init.params);
}

#[test]
fn preview_writes_decodable_scenes() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let summary = augment_preview(&cfg, 3, dir.path()).unwrap();
    assert_eq!(summary.requested, 3 * cfg.cutmix.policy.requested());
    assert_eq!(summary.context_violations, 0);
    let tax = ClassTaxonomy::toy();
    for i in 0..3 {
        let cloud = kitti::read_points(&dir.path().join(format!("scene_{i:04}.bin"))).unwrap();
        let gt = kitti::read_labels(&dir.path().join(format!("scene_{i:04}.label")), &tax.semantic_map(), &tax).unwrap();
        assert_eq!(gt.num_points(), cloud.len());
    }
    let text = fs::read_to_string(dir.path().join("mix_summary.txt")).unwrap();
    assert_eq!(text, summary.to_text());
}

#[test]
fn label_files_score_perfectly_against_themselves() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    augment_preview(&cfg, 1, dir.path()).unwrap();
    let label = dir.path().join("scene_0000.label");
    let report = eval_labels(&cfg, &label, &label, dir.path()).unwrap();
    assert_eq!(report.all.pq, 1.0);
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn centers_are_exported_per_classifier() {
    let cfg = tiny();
    let model = PupsModel::new(cfg.model.clone(), ClassTaxonomy::toy(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let centers = export_centers(&cfg, &model, 2, "car", 1000.0, dir.path()).unwrap();
    let mut rows = 0;
    for i in 0..cfg.model.classifiers {
        let text = fs::read_to_string(dir.path().join(format!("centers_{i:03}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("classifier_id,x,y,scene_id"));
        for l in lines {
            assert!(l.starts_with(&format!("{i},")));
            rows += 1;
        }
    }
    assert_eq!(rows, centers.len());

    let narrow = export_centers(&cfg, &model, 2, "car", 0.0, dir.path()).unwrap();
    assert!(narrow.len() <= centers.len());
    assert!(matches!(
        export_centers(&cfg, &model, 1, "truck", 10.0, dir.path()),
        Err(Error::Config(_))
    ));
}
