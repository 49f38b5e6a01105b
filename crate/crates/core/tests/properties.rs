use proptest::prelude::*;

use segformer::checkpoint;
use segformer::config::MitConfig;
use segformer::data::{augment_with, AugmentDraw, SegSample};
use segformer::erf::radius_of;
use segformer::kernels::IGNORE_INDEX;
use segformer::netpbm::Image8;
use segformer::train::{argmax_classes, miou, poly_lr, window_starts, ConfusionMatrix};
use segformer::{SegFormer, Tape, Tensor};

fn sample(h: usize, w: usize, labels: Vec<u8>) -> SegSample {
    let image = Tensor::from_fn(&[3, h, w], |i| (i % 17) as f32 / 17.0);
    SegSample::new(image, labels).unwrap()
}

proptest! {
    #[test]
    fn poly_lr_decays_within_bounds(base in 1e-6f64..1.0, max in 1usize..5000, power in 0.1f64..3.0, a in 0usize..6000, b in 0usize..6000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (l_lo, l_hi) = (poly_lr(base, lo, max, power), poly_lr(base, hi, max, power));
        prop_assert!((0.0..=base).contains(&l_lo));
        prop_assert!(l_hi <= l_lo);
        prop_assert_eq!(poly_lr(base, 0, max, power), base);
    }

    #[test]
    fn windows_cover_the_axis(len in 1usize..300, window in 1usize..128, stride_frac in 0.05f64..1.0) {
        let stride = ((window as f64 * stride_frac) as usize).max(1);
        let starts = window_starts(len, window, stride);
        let win = window.min(len);
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(*starts.last().unwrap() + win, len);
        let mut hit = vec![false; len];
        for s in &starts {
            for h in &mut hit[*s..*s + win] {
                *h = true;
            }
        }
        prop_assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn radius_grows_with_mass(vals in prop::collection::vec(0.0f64..1.0, 49), m1 in 0.0f64..1.0, m2 in 0.0f64..1.0) {
        let map = Tensor::new(vec![7, 7], vals).unwrap();
        let (lo, hi) = (m1.min(m2), m1.max(m2));
        prop_assert!(radius_of(&map, lo) <= radius_of(&map, hi));
        prop_assert!(radius_of(&map, 1.0) <= (18.0f64).sqrt() + 1e-12);
    }

    #[test]
    fn confusion_counts_only_labelled_pixels(pairs in prop::collection::vec((0u8..4, prop_oneof![0u8..4, Just(IGNORE_INDEX)]), 1..200)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&pred, &truth).unwrap();
        let labelled = truth.iter().filter(|&&t| t != IGNORE_INDEX).count() as u64;
        prop_assert_eq!(cm.total(), labelled);
        let (ious, mean) = miou(&cm);
        prop_assert!(ious.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&mean));
        if labelled > 0 {
            prop_assert!((0.0..=1.0).contains(&cm.pixel_accuracy()));
        }
    }

    #[test]
    fn perfect_prediction_scores_one(truth in prop::collection::vec(0u8..5, 1..300)) {
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&truth, &truth).unwrap();
        prop_assert_eq!(cm.pixel_accuracy(), 1.0);
        prop_assert_eq!(miou(&cm).1, 1.0);
    }

    #[test]
    fn flip_keeps_label_histogram(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as u8 % 6).collect();
        let s = sample(h, w, labels);
        let flipped = augment_with(&s, (h, w), AugmentDraw { scale: 1.0, flip: true, offset: (0, 0) });
        prop_assert_eq!(flipped.histogram(), s.histogram());
        let twice = augment_with(&flipped, (h, w), AugmentDraw { scale: 1.0, flip: true, offset: (0, 0) });
        prop_assert_eq!(twice.labels, s.labels);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, vals in prop::collection::vec(-30.0f64..30.0, 54)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[rows, cols], |i| vals[i]), false);
        let y = tape.softmax(&x).unwrap();
        for r in y.value().data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_matches_scan(n in 1usize..6, plane in 1usize..20, vals in prop::collection::vec(-5.0f32..5.0, 120)) {
        let logits = Tensor::from_fn(&[n, 1, plane], |i| vals[i]);
        let pred = argmax_classes(&logits);
        for (p, &c) in pred.iter().enumerate() {
            let at = |k: usize| logits.data()[k * plane + p];
            prop_assert!((0..n).all(|k| at(k) <= at(c as usize)));
        }
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..16, h in 1usize..16, rgb in any::<bool>(), seed in any::<u8>()) {
        let ch = if rgb { 3 } else { 1 };
        let data: Vec<u8> = (0..w * h * ch).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = if rgb { Image8::rgb(w, h, data) } else { Image8::gray(w, h, data) };
        prop_assert_eq!(Image8::decode(&img.encode()).unwrap(), img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), classes in 2usize..9) {
        let model = SegFormer::build(MitConfig::b0_micro(classes), seed).unwrap();
        let bytes = checkpoint::to_bytes(&model);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.config, &model.config);
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
    }

    #[test]
    fn config_text_round_trips(depth in 1usize..5, heads in 1usize..4, width in 1usize..5, classes in 1usize..=255) {
        let mut cfg = MitConfig::b0_micro(classes);
        cfg.stages[2].depth = depth;
        cfg.stages[3].heads = heads;
        cfg.stages[3].channels = 32 * heads;
        cfg.decoder_width = 16 * width;
        prop_assert_eq!(MitConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}
