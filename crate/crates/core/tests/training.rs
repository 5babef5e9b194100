use std::path::PathBuf;
use std::sync::Arc;

use lungseg::dataset::{Manifest, SampleRecord, Split};
use lungseg::loader::{Loader, MemorySource};
use lungseg::synth::{circles, CirclesConfig};
use lungseg::tensor::AdamConfig;
use lungseg::trainer::{self, finetune_view, mean_loss, train_epoch, TrainConfig, TrainError, BEST_CHECKPOINT, FINAL_CHECKPOINT};
use lungseg::unet::{self, Model, UNetConfig};

fn fixture(start: u64, n: usize) -> Arc<MemorySource> {
    let cfg = CirclesConfig { size: 16, min_radius: 3.0, max_radius: 6.0, ..CirclesConfig::default() };
    Arc::new(circles(&cfg, start, n))
}

fn small() -> UNetConfig {
    UNetConfig::new(2, 2)
}

fn cfg(workers: usize) -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 4, workers, seed: 5, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() }
}

fn run(workers: usize) -> (Model<f32>, trainer::TrainHistory) {
    let (train_src, val_src) = (fixture(0, 10), fixture(100, 4));
    let c = cfg(workers);
    let mut train = Loader::new(train_src.view(), train_src, c.train_loader()).unwrap();
    let mut val = Loader::new(val_src.view(), val_src, c.eval_loader()).unwrap();
    let mut model = Model::<f32>::build(small(), c.seed).unwrap();
    let out = trainer::train(&mut model, &mut train, Some(&mut val), &c).unwrap();
    (model, out.history)
}

#[test]
fn training_is_bitwise_reproducible_across_worker_counts() {
    let (m1, h1) = run(1);
    let (m3, h3) = run(3);
    assert_eq!(h1.epochs.len(), 3);
    assert!(h1.same_losses(&h3), "{h1:?}\n{h3:?}");
    assert_eq!(m1, m3);
}

#[test]
fn one_small_step_lowers_the_loss() {
    let src = fixture(0, 8);
    let c = TrainConfig { batch_size: 8, adam: AdamConfig { lr: 1e-6, ..AdamConfig::default() }, augment: None, ..cfg(1) };
    let mut loader = Loader::new(src.view(), src, c.train_loader()).unwrap();
    let mut model = Model::<f32>::build(small(), 3).unwrap();
    let before = mean_loss(&model, &mut loader, 0, c.dice_smooth).unwrap();
    let reported = train_epoch(&mut model, &mut loader, &c.adam, c.dice_smooth, 0).unwrap();
    let after = mean_loss(&model, &mut loader, 0, c.dice_smooth).unwrap();
    assert!((reported - before).abs() < 1e-6, "{reported} vs {before}");
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn best_checkpoint_reloads_the_selected_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (train_src, val_src) = (fixture(0, 10), fixture(100, 4));
    let c = TrainConfig { epochs: 4, checkpoint_dir: Some(dir.path().to_path_buf()), ..cfg(2) };
    let mut train = Loader::new(train_src.view(), train_src, c.train_loader()).unwrap();
    let mut val = Loader::new(val_src.view(), val_src, c.eval_loader()).unwrap();
    let mut model = Model::<f32>::build(small(), c.seed).unwrap();
    let out = trainer::train(&mut model, &mut train, Some(&mut val), &c).unwrap();

    let best_epoch = out.history.best_epoch.unwrap();
    let best_val = out.history.best_val_loss.unwrap();
    let min = out.history.epochs.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best_val, min);
    assert_eq!(out.history.epochs[best_epoch as usize].val_loss, Some(best_val));

    let loaded: Model<f32> = unet::load(&dir.path().join(BEST_CHECKPOINT), Some(&small())).unwrap();
    assert_eq!(loaded, out.best);
    let reloaded_val = mean_loss(&loaded, &mut val, 0, c.dice_smooth).unwrap();
    assert!((reloaded_val - best_val).abs() < 1e-5, "{reloaded_val} vs {best_val}");

    let last: Model<f32> = unet::load(&dir.path().join(FINAL_CHECKPOINT), None).unwrap();
    assert_eq!(last, model);
}

fn manifest(nodules: usize, blanks: usize) -> Manifest {
    let samples = (0..nodules + blanks)
        .map(|i| SampleRecord {
            image_path: format!("P{:03}/s{i:03}.png", i % 7),
            mask_path: (i < nodules).then(|| format!("P{:03}/s{i:03}_mask.png", i % 7)),
            patient_id: format!("P{:03}", i % 7),
            has_nodule: i < nodules,
            split: Split::Training,
            pixel_spacing: None,
        })
        .collect();
    Manifest::from_samples("ft".into(), PathBuf::from("/d"), samples).unwrap()
}

#[test]
fn finetune_view_adds_two_percent_of_blank_slices() {
    let m = manifest(40, 100);
    let view = finetune_view(&m, &TrainConfig::default()).unwrap();
    assert_eq!(view.len(), 42);
    let blanks = view.iter().filter(|v| !m.samples[v.id].has_nodule).count();
    assert_eq!(blanks, 2);
    assert_eq!(finetune_view(&m, &TrainConfig { black_frac: 0.015, ..TrainConfig::default() }).unwrap().len(), 42);
    assert!(matches!(finetune_view(&manifest(5, 0), &TrainConfig::default()), Err(TrainError::NoBlackSamples)));
}

#[test]
fn finetune_continues_from_the_given_weights() {
    let src = fixture(0, 8);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { finetune_epochs: 2, checkpoint_dir: Some(dir.path().to_path_buf()), ..cfg(1) };
    let mut loader = Loader::new(src.view(), src, c.train_loader()).unwrap();
    let mut model = Model::<f32>::build(small(), 9).unwrap();
    let start = model.clone();
    let h = trainer::finetune(&mut model, &mut loader, None, &c).unwrap();
    assert_eq!(h.epochs.len(), 2);
    assert_ne!(model, start);
    let saved: Model<f32> = unet::load(&dir.path().join(FINAL_CHECKPOINT), None).unwrap();
    assert_eq!(saved, model);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { dice_smooth: 0.0, ..TrainConfig::default() },
        TrainConfig { black_frac: 1.5, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_)) | Err(TrainError::Loader(_))), "{bad:?}");
    }
}
