use fss::encoder::{EncoderConfig, ProjectionEncoder};
use fss::episodes::{Dataset, DatasetManifest};
use fss::model::{Geometry, ModelConfig, UniFss};
use fss::patterns::{PatternGroup, PatternTag};
use fss::synth::synth_generate;
use fss::training::{
    checkpoint_path, evaluate, load_checkpoint, prepare_episode, write_report, ModelPredictor, OraclePredictor, TrainConfig, Trainer,
};
use fss::FssError;

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let ds = synth_generate(5, 4, 3, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = ds.write_to(dir.path()).unwrap();
    let read = DatasetManifest::read(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(read.records, manifest.records);
    let back = Dataset::load(&read, None).unwrap();
    assert_eq!(back.samples(), ds.samples());
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    assert_eq!(synth_generate(3, 6, 2, 32).unwrap().samples(), synth_generate(3, 6, 2, 32).unwrap().samples());
    assert_ne!(synth_generate(3, 6, 2, 32).unwrap().samples(), synth_generate(4, 6, 2, 32).unwrap().samples());
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let ds = synth_generate(6, 8, 3, 32).unwrap();
    for pattern in PatternTag::ALL {
        let r = evaluate(&OraclePredictor, &ds, 1, 4, pattern, 2, 20, 0).unwrap();
        assert_eq!(r.metrics.miou(), 1.0);
        assert_eq!(r.metrics.fbiou(), 1.0);
    }
}

#[test]
fn training_writes_checkpoints_that_reload_identically() {
    let ds = synth_generate(8, 8, 4, 64).unwrap();
    let encoder = ProjectionEncoder::<f32>::stub(EncoderConfig::default()).unwrap();
    let geometry = Geometry::probe(&encoder, (64, 64)).unwrap();
    let model = UniFss::<f32>::new(ModelConfig::default(), geometry).unwrap();
    let config = TrainConfig {
        batch_size: 2,
        image_size: 64,
        max_steps: 4,
        checkpoint_every: 2,
        val_episodes: 4,
        pattern_group: PatternGroup::ClassAwareGroup,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config.clone(), model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trainer.run(&encoder, &ds, 0, Some(dir.path())).unwrap();
    assert_eq!(trainer.losses.len(), 4);
    for name in ["last.ckpt", "best.ckpt", "loss.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert!(checkpoint_path(dir.path(), 2).exists());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let (loaded, loaded_config, step) = load_checkpoint::<f32>(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(step, 4);
    assert_eq!(loaded_config, config);
    let ep = fss::episodes::sample_episode(&ds, &ds.class_ids(), 1, 0, PatternTag::ClassMask, 0).unwrap();
    let prep = prepare_episode(&encoder, &ds, &ep).unwrap();
    assert_eq!(loaded.logits(&prep.query, &prep.shots[0]).unwrap(), trainer.model.logits(&prep.query, &prep.shots[0]).unwrap());

    let predictor = ModelPredictor { model: &loaded, encoder: &encoder };
    let r = evaluate(&predictor, &ds, 0, 4, PatternTag::Text, 1, 3, 1).unwrap();
    let out = dir.path().join("metrics.csv");
    write_report(&out, &[r]).unwrap();
    let table = std::fs::read_to_string(out).unwrap();
    assert!(table.starts_with("fold,pattern,K,class_id,iou\n"));
    assert!(table.contains("0,text,1,miou,"));
}

#[test]
fn checkpoint_rejects_foreign_archive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.fsa");
    ProjectionEncoder::<f32>::stub(EncoderConfig::default()).unwrap().save(&path).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(FssError::Checkpoint(_))));
}

#[test]
fn encoder_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.fsa");
    let e = ProjectionEncoder::<f64>::stub(EncoderConfig { seed: 9, ..EncoderConfig::default() }).unwrap();
    e.save(&path).unwrap();
    let back = ProjectionEncoder::<f64>::load(&path).unwrap();
    assert_eq!(back.weights(), e.weights());
}
