use echograph::eval::{evaluate, ThresholdRule};
use echograph::model::{Model, ModelConfig};
use echograph::synth::{generate_dataset, DatasetSpec, GeometryProfile};
use echograph::trainer::{load_checkpoint, load_dataset, restore_params, train, Precision, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dir = std::path::PathBuf::from("/tmp/egtest/c67_data");
    let out = std::path::PathBuf::from("/tmp/egtest/c67_ckpt");
    let spec = DatasetSpec {
        n_train: 512, n_val: 64, n_test: 128,
        below40_frac: 0.127, zoomed_frac: 0.1,
        geometry: GeometryProfile { t_total: (40, 64), period: (12, 14), ..GeometryProfile::desk() },
        seed: 606,
    };
    let manifest = generate_dataset(&spec, &dir, 1).unwrap();
    println!("dataset ready at {:.0}s", t0.elapsed().as_secs_f64());
    let data = load_dataset(&dir, &manifest).unwrap();
    let model = Model::new(ModelConfig::desk(), 606).unwrap();
    let cfg = TrainConfig {
        learning_rate: 2e-3, batch_size: 8, epochs: 25, seed: 606,
        augment: true, augment_prob: 0.2, class_loss: true, lambda_class: 1.0,
        pretrain: true, pretrain_epochs: 10, pretrain_sigma: 2.5,
        precision: Precision::Verify64,
    };
    let outcome = train(&model, &data, &cfg, &out, 0x606, None).unwrap();
    println!("trained at {:.0}s; best val {:.3} @ {}", t0.elapsed().as_secs_f64(), outcome.best_val_mae, outcome.best_epoch);
    let ckpt = load_checkpoint(&outcome.best_checkpoint).unwrap();
    restore_params(&model, &ckpt.params).unwrap();
    let pairs: Vec<_> = data.test.iter().map(|s| (s.id, s.video.clone())).collect();
    let report = evaluate(&model, &pairs, ThresholdRule::default()).unwrap();
    println!(
        "TEST: mae {:.3} r2 {:.3} f1 {:?} periodic {}/{} afd ({:?}, {:?})  [{:.0}s total]",
        report.mae, report.r2, report.f1_below_40, report.periodic_count, report.total_count,
        report.afd_es, report.afd_ed, t0.elapsed().as_secs_f64()
    );
}
