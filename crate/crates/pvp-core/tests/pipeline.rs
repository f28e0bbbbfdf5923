//! End-to-end pipeline exercises on a deliberately tiny configuration.

use std::collections::BTreeMap;

use pvp_core::dataset::DatasetConfig;
use pvp_core::digest::digest_file;
use pvp_core::error::PvpError;
use pvp_core::model::TrainSchedule;
use pvp_core::pipeline::{
    apply_seed_override, load_config, ModelSettings, OutputLock, Pipeline, RunConfig, Seeds,
    StageOutcome, SteeringConfig,
};

fn tiny_config() -> RunConfig {
    RunConfig {
        schema_version: 1,
        dataset: DatasetConfig {
            n_objects: 8,
            canvas_px: 16,
            color_blob_px: 12,
            n_eval_objects: 2,
            heldout_cf_per_object: 2,
            train_cf_per_object: 3,
            train_this_repeats: 2,
            train_most_repeats: 2,
            train_text_most_repeats: 4,
            steer_repeats: 1,
            eval_wk_repeats: 2,
            eval_cf_repeats: 1,
            eval_relation_fraction: 0.34,
            size_this_repeats: 2,
            size_most_repeats: 2,
            size_text_most_repeats: 4,
            size_steer_repeats: 2,
            size_eval_wk_repeats: 1,
            size_eval_cf_repeats: 1,
            size_aux_pairs: 8,
            size_aux_repeats: 1,
            ..DatasetConfig::default()
        },
        model: ModelSettings {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            mlp_hidden: 64,
            patch_px: 8,
            max_seq: 16,
            tie_unembedding: true,
        },
        train: TrainSchedule {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainSchedule::default()
        },
        steering: SteeringConfig {
            alpha: 1.0,
            start_min: 0,
            start_max: 3,
            window_max: 2,
            probe_pairs: 6,
        },
        seeds: Seeds::default(),
    }
}

#[test]
fn full_pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(), dir.path(), true).unwrap();
    pipeline.run_all().unwrap();

    // Rerunning every stage reports up to date and leaves artifacts alone.
    let manifest_before = digest_file(dir.path().join("dataset/manifest.json")).unwrap();
    let ckpt_before = digest_file(dir.path().join("model/checkpoint.bin")).unwrap();
    assert_eq!(pipeline.gen().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.train().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.eval().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.trace().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.steer_fit().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.steer_search().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.steer_eval().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.attn().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.pca().unwrap(), StageOutcome::UpToDate);
    assert_eq!(pipeline.report().unwrap(), StageOutcome::UpToDate);
    assert_eq!(
        manifest_before,
        digest_file(dir.path().join("dataset/manifest.json")).unwrap()
    );
    assert_eq!(
        ckpt_before,
        digest_file(dir.path().join("model/checkpoint.bin")).unwrap()
    );

    // All report artifacts exist.
    for name in pvp_core::report::REPORT_ARTIFACTS {
        assert!(
            dir.path().join("report").join(name).exists(),
            "{name} missing"
        );
    }

    // The summary parses and carries all eight criteria.
    let summary: BTreeMap<String, serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("report/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary.len(), 8);

    // Verification re-derives the summary without error (pass/fail may
    // differ from the acceptance targets at this scale, but the recorded
    // booleans must match the recomputation).
    pipeline.verify().unwrap();
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(), dir.path(), true).unwrap();
    let err = pipeline.train().unwrap_err();
    assert!(matches!(err, PvpError::MissingArtifact(_)), "{err}");
    pipeline.gen().unwrap();
    let err = pipeline.steer_eval().unwrap_err();
    assert!(matches!(err, PvpError::MissingArtifact(_)), "{err}");
}

#[test]
fn stale_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.train.epochs = 0;
    let pipeline = Pipeline::new(config.clone(), dir.path(), true).unwrap();
    pipeline.gen().unwrap();
    pipeline.train().unwrap();

    // Regenerate the dataset under a different seed: the checkpoint is stale.
    let mut changed = config.clone();
    changed.seeds.dataset += 1;
    let pipeline2 = Pipeline::new(changed, dir.path(), true).unwrap();
    pipeline2.gen().unwrap();
    let err = pipeline2.eval().unwrap_err();
    assert!(matches!(err, PvpError::StaleArtifact(_)), "{err}");
}

#[test]
fn config_file_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let config = tiny_config();
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let loaded = load_config(&path).unwrap();
    assert_eq!(loaded, config);

    // Serialize -> parse -> serialize is a fixpoint.
    let again: RunConfig =
        serde_json::from_str(&serde_json::to_string(&loaded).unwrap()).unwrap();
    assert_eq!(again, loaded);

    std::fs::write(&path, r#"{"schema_version":1,"bogus_key":3}"#).unwrap();
    let err = load_config(&path).unwrap_err();
    assert!(err.to_string().contains("bogus_key"), "{err}");

    // Invariant violations name the field.
    let mut bad = config.clone();
    bad.model.d_model = 65;
    std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    let err = load_config(&path).unwrap_err();
    assert!(err.to_string().contains("d_model"), "{err}");

    // Minimal config: defaults are filled in.
    std::fs::write(&path, r#"{"schema_version":1}"#).unwrap();
    let minimal = load_config(&path).unwrap();
    assert_eq!(minimal, RunConfig::default());
}

#[test]
fn seed_overrides_parse_and_apply() {
    let mut config = tiny_config();
    apply_seed_override(&mut config, "train=99").unwrap();
    assert_eq!(config.seeds.train, 99);
    assert!(apply_seed_override(&mut config, "nonsense").is_err());
    assert!(apply_seed_override(&mut config, "epoch=3").is_err());
    assert!(apply_seed_override(&mut config, "train=x").is_err());
}

#[test]
fn output_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lock = OutputLock::acquire(dir.path()).unwrap();
    let err = OutputLock::acquire(dir.path()).unwrap_err();
    assert!(matches!(err, PvpError::Locked(_)));
    drop(lock);
    OutputLock::acquire(dir.path()).unwrap();
}
