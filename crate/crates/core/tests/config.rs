use fusionreid::config::{EvalPolicy, RunConfig, SourceKind, SEED_ENV};
use fusionreid::dmf::Variant;
use fusionreid::Error;

#[test]
fn empty_file_gives_defaults() {
    assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
}

#[test]
fn overrides_reach_nested_fields() {
    let cfg = RunConfig::from_toml(
        "seed = 3\n[optim]\npeak_lr = 0.01\n",
        &[
            "optim.peak_lr=0.002".into(),
            "model.dmf.layers=4".into(),
            "model.dmf.variant=mfu_only".into(),
            "data.synthetic.num_pids = 12".into(),
            "eval.policy=train_vs_held_out".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.optim.peak_lr, 0.002);
    assert_eq!(cfg.model.dmf.layers, 4);
    assert_eq!(cfg.model.dmf.variant, Variant::MfuOnly);
    assert_eq!(cfg.data.synthetic.num_pids, 12);
    assert_eq!(cfg.eval.policy, EvalPolicy::TrainVsHeldOut);
}

#[test]
fn unknown_fields_are_rejected() {
    for (text, over) in [("[model]\nwidth = 3\n", vec![]), ("", vec!["optim.lr=0.1".to_string()])] {
        match RunConfig::from_toml(text, &over) {
            Err(Error::Config(m)) => assert!(m.contains("unknown field"), "{m}"),
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }
}

#[test]
fn malformed_overrides_are_rejected() {
    for o in ["optim.peak_lr", "optim..peak_lr=1", "seed.x=1"] {
        assert!(matches!(RunConfig::from_toml("", &[o.to_string()]), Err(Error::Config(_))), "{o}");
    }
}

#[test]
fn wrong_types_are_configuration_errors() {
    assert!(matches!(
        RunConfig::from_toml("", &["model.dmf.layers=many".into()]),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_manifest_names_the_field() {
    let cfg = RunConfig::from_toml("[data]\nsource = \"manifest\"\n", &[]).unwrap();
    match cfg.validate() {
        Err(Error::Config(m)) => assert!(m.contains("data.manifest"), "{m}"),
        other => panic!("{other:?}"),
    }
    let cfg = RunConfig::from_toml("[data]\nsource = \"manifest\"\nmanifest = \"/nowhere/m.csv\"\n", &[]).unwrap();
    let err = cfg.validate().unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("data.manifest"));
}

#[test]
fn invalid_model_settings_fail_validation() {
    let cfg = RunConfig::from_toml("", &["model.dmf.heads=5".into()]).unwrap();
    assert!(cfg.validate().is_err());
    RunConfig::toy().validate().unwrap();
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.seed = 11;
    cfg.train.max_steps = Some(7);
    let path = cfg.write_resolved(&dir.path().join("run")).unwrap();
    let back = RunConfig::from_toml(&std::fs::read_to_string(path).unwrap(), &[]).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn seed_variable_and_relative_manifest_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 1\n[data]\nsource = \"manifest\"\nmanifest = \"data/m.csv\"\n").unwrap();

    std::env::remove_var(SEED_ENV);
    let cfg = RunConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg.seed, 1);
    assert_eq!(cfg.data.source, SourceKind::Manifest);
    assert_eq!(cfg.data.manifest.as_deref(), Some(dir.path().join("data/m.csv").as_path()));

    std::env::set_var(SEED_ENV, "42");
    let seeded = RunConfig::load(&path, &["seed=5".into()]);
    std::env::set_var(SEED_ENV, "forty-two");
    let bad = RunConfig::load(&path, &[]);
    std::env::remove_var(SEED_ENV);
    assert_eq!(seeded.unwrap().seed, 42);
    assert!(matches!(bad, Err(Error::Config(m)) if m.contains(SEED_ENV)));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let err = RunConfig::load(std::path::Path::new("/definitely/not/here.toml"), &[]).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.is_input_error());
}

#[test]
fn synthetic_data_follows_the_run_seed_at_model_size() {
    let a = RunConfig::toy().dataset().unwrap();
    let b = RunConfig { seed: 1, ..RunConfig::toy() }.dataset().unwrap();
    assert_eq!((a.height, a.width), (32, 16));
    assert_eq!(a.samples[0].image.shape(), [3, 32, 16]);
    assert_ne!(a.samples[0].image, b.samples[0].image);
    assert_eq!(a.samples[0].image, RunConfig::toy().dataset().unwrap().samples[0].image);
}
