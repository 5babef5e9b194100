use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;

use lungseg::augment::{augment_pair, AugmentPolicy, Transform};
use lungseg::dataset::{split_by_patient, split_counts, training_view, Manifest, SampleRecord, Split, SplitRatios};
use lungseg::image::BinaryMask;
use lungseg::ingest::NormImage;
use lungseg::loader::{Loader, LoaderConfig, MemorySource};
use lungseg::metrics::{dice_score, iou_score, ConfusionCounts};
use lungseg::rng::keyed_rng;
use lungseg::trainer::dice_loss;
use lungseg::{Shape, Tensor};

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..max, 1..max).prop_flat_map(|(r, c)| {
        let n = r * c;
        (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n))
            .prop_map(move |(a, b)| (BinaryMask { rows: r, cols: c, data: a }, BinaryMask { rows: r, cols: c, data: b }))
    })
}

fn manifest(per_patient: &[(usize, usize)]) -> Manifest {
    let mut samples = Vec::new();
    for (p, &(nodules, blanks)) in per_patient.iter().enumerate() {
        for s in 0..nodules + blanks {
            samples.push(SampleRecord {
                image_path: format!("P{p:04}/s{s:03}.png"),
                mask_path: (s < nodules).then(|| format!("P{p:04}/s{s:03}_mask.png")),
                patient_id: format!("P{p:04}"),
                has_nodule: s < nodules,
                split: Split::Unassigned,
                pixel_spacing: None,
            });
        }
    }
    Manifest::from_samples("prop".into(), PathBuf::from("/data"), samples).unwrap()
}

fn tiny_source(n: usize) -> MemorySource {
    MemorySource::new(
        (0..n)
            .map(|i| {
                let values = (0..16).map(|j| ((i * 16 + j) % 251) as f32 / 251.0).collect();
                let mut m = BinaryMask::zeros(4, 4);
                m.data[i % 16] = 1;
                (NormImage { rows: 4, cols: 4, values }, m)
            })
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_and_iou_are_bounded_and_related((p, g) in mask_pair(12)) {
        let d = dice_score(&p, &g).unwrap();
        let j = iou_score(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d + 1e-12);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert_eq!(d, dice_score(&g, &p).unwrap());
        prop_assert_eq!(dice_score(&g, &g).unwrap(), 1.0);
        let c = ConfusionCounts::from_masks(&p, &g).unwrap();
        prop_assert_eq!(c.total(), p.data.len());
        prop_assert_eq!(c.tp + c.fn_, g.foreground());
        prop_assert_eq!(c.tp + c.fp, p.foreground());
    }

    #[test]
    fn dice_loss_is_bounded_and_order_free(
        n in 1usize..5,
        seed in any::<u64>(),
        smooth in 0.01f64..2.0,
    ) {
        let shape = Shape::new(n, 1, 3, 3);
        let mut rng = keyed_rng(&[seed]);
        let pred = Tensor::from_fn(shape, |_| rand::Rng::random::<f64>(&mut rng));
        let target = Tensor::from_fn(shape, |_| f64::from(rand::Rng::random_bool(&mut rng, 0.4)));
        let (loss, grad) = dice_loss(&pred, &target, smooth).unwrap();
        prop_assert!((0.0..1.0).contains(&loss), "loss {}", loss);
        prop_assert_eq!(grad.shape(), shape);
        let (perfect, _) = dice_loss(&target, &target, smooth).unwrap();
        prop_assert!(perfect.abs() < 1e-12);

        let rev: Vec<usize> = (0..n).rev().collect();
        let (loss_rev, grad_rev) = dice_loss(&pred.select_items(&rev), &target.select_items(&rev), smooth).unwrap();
        prop_assert!((loss - loss_rev).abs() < 1e-12);
        let restored = grad_rev.select_items(&rev);
        prop_assert_eq!(restored.data(), grad.data());
    }

    #[test]
    fn flips_and_turns_compose_to_identity(rows in 1usize..7, cols in 1usize..7, k in 0u8..4) {
        let data: Vec<u32> = (0..(rows * cols) as u32).collect();
        for t in [Transform { hflip: true, ..Transform::IDENTITY }, Transform { vflip: true, ..Transform::IDENTITY }] {
            let (once, r, c) = t.apply(&data, rows, cols);
            prop_assert_eq!(t.apply(&once, r, c).0, data.clone());
        }
        let turn = Transform { quarter_turns: 1, ..Transform::IDENTITY };
        let (mut buf, mut r, mut c) = (data.clone(), rows, cols);
        for _ in 0..4 {
            (buf, r, c) = turn.apply(&buf, r, c);
        }
        prop_assert_eq!(&buf, &data);
        // k turns then 4 - k turns
        let (a, r, c) = Transform { quarter_turns: k, ..Transform::IDENTITY }.apply(&data, rows, cols);
        let back = Transform { quarter_turns: (4 - k) % 4, ..Transform::IDENTITY }.apply(&a, r, c);
        prop_assert_eq!(back.0, data.clone());
        let mut sorted = a;
        sorted.sort_unstable();
        prop_assert_eq!(sorted, data);
    }

    #[test]
    fn augmentation_moves_image_and_mask_together(n in 1usize..9, seed in any::<u64>()) {
        let mask = BinaryMask { rows: n, cols: n, data: (0..n * n).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8).collect() };
        let img = NormImage { rows: n, cols: n, values: mask.data.iter().map(|&b| f32::from(b)).collect() };
        let (ai, am, _) = augment_pair(&img, &mask, &mut keyed_rng(&[seed]), &AugmentPolicy::default()).unwrap();
        prop_assert_eq!(am.foreground(), mask.foreground());
        prop_assert_eq!(ai.values, am.data.iter().map(|&b| f32::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn splits_are_patient_exclusive_and_sized(
        sizes in prop::collection::vec((0usize..4, 1usize..4), 3..40),
        seed in any::<u64>(),
    ) {
        let m = manifest(&sizes);
        let ratios = SplitRatios::default();
        let s = split_by_patient(&m, &ratios, seed).unwrap();
        s.check_patient_exclusive().unwrap();
        let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in &s.samples {
            prop_assert_ne!(r.split, Split::Unassigned);
            seen.entry(r.patient_id.as_str()).or_default().insert(r.split);
        }
        prop_assert!(seen.values().all(|v| v.len() <= 1));
        let (t, v, te) = split_counts(m.patients.len(), &ratios);
        let counts = s.patient_counts();
        prop_assert_eq!(counts.get(&Split::Training).copied().unwrap_or(0), t);
        prop_assert_eq!(counts.get(&Split::Validation).copied().unwrap_or(0), v);
        prop_assert_eq!(counts.get(&Split::Test).copied().unwrap_or(0), te);
        prop_assert_eq!(split_by_patient(&m, &ratios, seed).unwrap(), s);
    }

    #[test]
    fn training_view_adds_the_ceiling_of_the_black_fraction(
        sizes in prop::collection::vec((1usize..4, 0usize..6), 1..12),
        frac in 0.001f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut m = manifest(&sizes);
        for r in &mut m.samples {
            r.split = Split::Training;
        }
        let view = training_view(&m, Split::Training, frac, seed).unwrap();
        let nodules = m.samples.iter().filter(|r| r.has_nodule).count();
        let blacks = m.samples.len() - nodules;
        let expect = ((frac * blacks as f64) - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(view.len(), nodules + expect.min(blacks));
        let ids: Vec<usize> = view.iter().map(|v| v.id).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(training_view(&m, Split::Training, frac, seed).unwrap(), view);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loader_delivers_each_sample_once_in_plan_order(
        n in 1usize..40,
        batch in 1usize..7,
        workers in 1usize..5,
        ratio in 1usize..4,
        seed in any::<u64>(),
        epoch in 0u64..3,
    ) {
        let src = tiny_source(n);
        let view = src.view();
        let cfg = LoaderConfig { batch_size: batch, workers, queue_ratio: ratio, shuffle: true, shuffle_seed: seed, augment: Some(AugmentPolicy::default()) };
        let mut loader = Loader::new(view, Arc::new(src), cfg).unwrap();
        let plan = loader.batch_plan(epoch);
        let got: Vec<Vec<usize>> = loader.epoch::<f32>(epoch).map(|b| b.unwrap().sample_ids).collect();
        prop_assert_eq!(&got, &plan);
        let mut all: Vec<usize> = got.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(got.len(), n.div_ceil(batch));
        let stats = loader.epoch_stats().unwrap();
        prop_assert_eq!(stats.samples, n);
        prop_assert!(stats.max_occupancy <= stats.capacity);
    }
}
