//! Trainer integration tests at micro scale: optimization behavior,
//! determinism, loss algebra, checkpoint resume, and the pretraining effect.

use std::fs;
use std::path::Path;

use echograph::error::Error;
use echograph::eval::{afd, extract_es_ed, ThresholdRule};
use echograph::model::{Model, ModelConfig};
use echograph::sampling::make_test_clips;
use echograph::synth::{generate_dataset, DatasetSpec, GeometryProfile};
use echograph::trainer::{
    load_checkpoint, load_dataset, pretrain_epoch, restore_params, train, Adam, LoadedDataset,
    Precision, TrainConfig,
};
use rand::SeedableRng;

fn micro_geometry() -> GeometryProfile {
    GeometryProfile {
        height: 8,
        width: 8,
        t_total: (10, 14),
        period: (6, 6),
        noise_std: 0.02,
        base_area_frac: 0.12,
        aspect: 1.1,
    }
}

fn micro_dataset(dir: &Path, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> LoadedDataset {
    let spec = DatasetSpec {
        n_train,
        n_val,
        n_test,
        below40_frac: 0.25,
        zoomed_frac: 0.0,
        geometry: micro_geometry(),
        seed,
    };
    let manifest = generate_dataset(&spec, dir, 1).unwrap();
    load_dataset(dir, &manifest).unwrap()
}

fn micro_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        epochs,
        seed,
        augment: false,
        augment_prob: 0.0,
        class_loss: true,
        lambda_class: 1.0,
        pretrain: false,
        pretrain_epochs: 0,
        pretrain_sigma: 1.2,
        precision: Precision::Verify64,
    }
}

#[test]
fn training_loss_decreases_on_overfittable_set() {
    let data_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let data = micro_dataset(data_dir.path(), 4, 0, 0, 21);
    let model = Model::new(ModelConfig::micro(), 21).unwrap();
    let cfg = micro_train_config(50, 21);
    let outcome = train(&model, &data, &cfg, out_dir.path(), 0x51, None).unwrap();

    // 10-epoch moving averages of the training MAE must trend down.
    let windows: Vec<f64> = (0..5)
        .map(|w| {
            outcome.log[w * 10..(w + 1) * 10]
                .iter()
                .map(|e| e.train_mae)
                .sum::<f64>()
                / 10.0
        })
        .collect();
    assert!(
        windows[4] < 0.75 * windows[0],
        "no overall decrease: {windows:?}"
    );
    for pair in windows.windows(2) {
        assert!(
            pair[1] < pair[0] * 1.10,
            "moving average rose sharply: {windows:?}"
        );
    }
}

#[test]
fn identical_seeds_give_bit_identical_runs() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = micro_dataset(data_dir.path(), 4, 2, 0, 33);
    let cfg = micro_train_config(3, 33);

    let run = |out: &Path| {
        let model = Model::new(ModelConfig::micro(), 33).unwrap();
        train(&model, &data, &cfg, out, 0xD5, None).unwrap();
    };
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    run(out_a.path());
    run(out_b.path());

    for file in ["train_log.csv", "best.ckpt", "last.ckpt"] {
        let a = fs::read(out_a.path().join(file)).unwrap();
        let b = fs::read(out_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn zero_lambda_matches_disabled_class_loss() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = micro_dataset(data_dir.path(), 4, 0, 0, 44);

    let mut cfg_zero = micro_train_config(3, 44);
    cfg_zero.class_loss = true;
    cfg_zero.lambda_class = 0.0;
    let mut cfg_off = micro_train_config(3, 44);
    cfg_off.class_loss = false;

    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let model_a = Model::new(ModelConfig::micro(), 44).unwrap();
    let log_a = train(&model_a, &data, &cfg_zero, out_a.path(), 0xA, None).unwrap();
    let model_b = Model::new(ModelConfig::micro(), 44).unwrap();
    let log_b = train(&model_b, &data, &cfg_off, out_b.path(), 0xB, None).unwrap();

    for (ea, eb) in log_a.log.iter().zip(log_b.log.iter()) {
        assert_eq!(ea.train_mae, eb.train_mae);
        assert_eq!(ea.val_mae.to_bits(), eb.val_mae.to_bits());
    }
    for (pa, pb) in model_a.params().iter().zip(model_b.params().iter()) {
        assert_eq!(pa.name(), pb.name());
        assert_eq!(
            pa.value().data(),
            pb.value().data(),
            "parameter {} diverged",
            pa.name()
        );
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = micro_dataset(data_dir.path(), 4, 2, 0, 55);
    let hash = 0xC0FFEE;

    // uninterrupted: 4 epochs
    let out_full = tempfile::tempdir().unwrap();
    let model_full = Model::new(ModelConfig::micro(), 55).unwrap();
    let full = train(
        &model_full,
        &data,
        &micro_train_config(4, 55),
        out_full.path(),
        hash,
        None,
    )
    .unwrap();

    // interrupted: 2 epochs, then resume to 4
    let out_half = tempfile::tempdir().unwrap();
    let model_half = Model::new(ModelConfig::micro(), 55).unwrap();
    train(
        &model_half,
        &data,
        &micro_train_config(2, 55),
        out_half.path(),
        hash,
        None,
    )
    .unwrap();
    let ckpt = load_checkpoint(&out_half.path().join("last.ckpt")).unwrap();
    let out_resumed = tempfile::tempdir().unwrap();
    let resumed = train(
        &model_half,
        &data,
        &micro_train_config(4, 55),
        out_resumed.path(),
        hash,
        Some(ckpt),
    )
    .unwrap();

    // the resumed log covers epochs 2..4 and must equal the tail of the full log
    assert_eq!(resumed.log.len(), 2);
    for (r, f) in resumed.log.iter().zip(full.log[2..].iter()) {
        assert_eq!(r.epoch, f.epoch);
        assert_eq!(r.train_mae.to_bits(), f.train_mae.to_bits());
        assert_eq!(r.val_mae.to_bits(), f.val_mae.to_bits());
    }
    for (pa, pb) in model_full.params().iter().zip(model_half.params().iter()) {
        for (x, y) in pa.value().data().iter().zip(pb.value().data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "parameter {}", pa.name());
        }
    }
}

#[test]
fn mismatched_config_hash_rejects_resume() {
    let data_dir = tempfile::tempdir().unwrap();
    let data = micro_dataset(data_dir.path(), 2, 0, 0, 66);
    let out = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::micro(), 66).unwrap();
    train(&model, &data, &micro_train_config(1, 66), out.path(), 1, None).unwrap();
    let ckpt = load_checkpoint(&out.path().join("last.ckpt")).unwrap();
    let err = train(
        &model,
        &data,
        &micro_train_config(2, 66),
        out.path(),
        2,
        Some(ckpt),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn non_finite_loss_aborts_with_checkpoint_pointer() {
    // In 32-bit training mode, inputs near the f64 ceiling overflow the f32
    // quantization of the first convolution, driving the forward pass
    // non-finite; the abort must name the last-good checkpoint.
    use echograph::synth::Video;
    use echograph::tensor::{set_numeric_mode, NumericMode, Tensor};
    use echograph::trainer::Sample;

    let poisoned = |id: u64| {
        let t = 12;
        let data = vec![1e200; t * 8 * 8];
        Sample {
            id,
            video: Video {
                frames: Tensor::new(vec![t, 8, 8], data).unwrap(),
                ef: 50.0,
                es_index: 1,
                ed_index: 4,
                view_tag: "poisoned".to_string(),
            },
        }
    };
    let data = LoadedDataset {
        train: vec![poisoned(0), poisoned(1)],
        val: vec![],
        test: vec![],
    };
    let out = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::micro(), 77).unwrap();
    let mut cfg = micro_train_config(1, 77);
    cfg.precision = Precision::Train32;
    cfg.precision.apply();
    let result = train(&model, &data, &cfg, out.path(), 0xBAD, None);
    set_numeric_mode(NumericMode::Verify64);
    match result.unwrap_err() {
        Error::Numeric(msg) => {
            assert!(
                msg.contains("last good checkpoint"),
                "message must point at the checkpoint: {msg}"
            );
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn pretraining_localizes_node_weights_on_held_out_clips() {
    // Clips must span about two cardiac cycles for the targets to have
    // contrast: with one cycle per clip everything is "between ES and ED".
    let data_dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        n_train: 16,
        n_val: 0,
        n_test: 8,
        below40_frac: 0.25,
        zoomed_frac: 0.0,
        geometry: GeometryProfile {
            t_total: (16, 20),
            ..micro_geometry()
        },
        seed: 88,
    };
    let manifest = generate_dataset(&spec, data_dir.path(), 1).unwrap();
    let data = load_dataset(data_dir.path(), &manifest).unwrap();
    let mut mc = ModelConfig::micro();
    mc.t_fixed = 12;
    let model = Model::new(mc, 88).unwrap();
    let mut cfg = micro_train_config(0, 88);
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 4;
    cfg.pretrain_sigma = 1.0;

    let mut optimizer = Adam::new(
        model
            .pretrain_params()
            .into_iter()
            .filter(|p| p.trainable())
            .collect(),
        cfg.learning_rate,
    );
    let mut rng = echograph::Rng::seed_from_u64(881);
    let mut first = None;
    let mut last = None;
    for _ in 0..120 {
        let loss = pretrain_epoch(&model, &mut optimizer, &data.train, &cfg, &mut rng)
            .unwrap()
            .expect("micro clips always contain their extrema");
        first.get_or_insert(loss);
        last = Some(loss);
    }
    assert!(
        last.unwrap() < 0.6 * first.unwrap(),
        "pretraining loss should drop substantially: {first:?} → {last:?}"
    );

    // Held-out localization: the extractor's boundary pair should sit near
    // the true (ES, ED) pair on most test clips.
    let rule = ThresholdRule::MidRange { tau: 0.15 };
    let mut true_pairs = Vec::new();
    let mut est_pairs = Vec::new();
    for s in &data.test {
        let clip = make_test_clips(&s.video, s.id, model.cfg.t_fixed)
            .into_iter()
            .next()
            .unwrap();
        let pred = model.predict_clip(&clip).unwrap();
        let ext = extract_es_ed(&pred.graph.node_weights, rule);
        if let (true, Some(pair)) = (ext.periodic, ext.pair) {
            if s.video.es_index < model.cfg.t_fixed && s.video.ed_index < model.cfg.t_fixed {
                true_pairs.push((s.video.es_index, s.video.ed_index));
                est_pairs.push(pair);
            }
        }
    }
    assert!(
        true_pairs.len() >= 3 * data.test.len() / 4,
        "too few periodic verdicts: {} of {}",
        true_pairs.len(),
        data.test.len()
    );
    let (afd_es, afd_ed) = afd(&true_pairs, &est_pairs).unwrap();
    assert!(
        afd_es <= 2.0 && afd_ed <= 2.0,
        "pretrained weights should localize ES/ED: aFD = ({afd_es:.2}, {afd_ed:.2})"
    );
}

#[test]
fn checkpoint_restore_rejects_shape_and_name_mismatches() {
    let model_a = Model::new(ModelConfig::micro(), 1).unwrap();
    let mut other = ModelConfig::micro();
    other.embedding_dim = 6;
    let model_b = Model::new(other, 1).unwrap();
    let snapshot = echograph::model::snapshot_params(&model_a.params());
    assert!(restore_params(&model_b, &snapshot).is_err());
}
