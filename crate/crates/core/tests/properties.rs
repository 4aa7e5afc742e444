use cbamnet::data::{augment, compute_class_weights, stratified_split, validation_count, AugmentConfig, ClassCounts, ClassLabel, DatasetRecord, Split};
use cbamnet::metrics::{aggregate_runs, auc_trapezoid, classification_report, confusion_matrix, roc_curve_ovr};
use cbamnet::train::{EarlyStopState, PlateauState};
use cbamnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn records(counts: [usize; 3]) -> Vec<DatasetRecord> {
    ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&label, n)| {
            (0..n).map(move |i| DatasetRecord {
                path: format!("{}/{i}.png", label.name()).into(),
                label,
                split: Split::Train,
                bbox: None,
            })
        })
        .collect()
}

/// Rows normalised from small integers, so ties are common.
fn scores_and_labels(k: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (k + 1..40usize).prop_flat_map(move |n| {
        (prop::collection::vec(1u8..6, n * k), prop::collection::vec(0..k, n)).prop_map(move |(raw, mut labels)| {
            for (c, l) in labels.iter_mut().take(k).enumerate() {
                *l = c;
            }
            let data = raw
                .chunks_exact(k)
                .flat_map(|row| {
                    let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    row.iter().map(move |&v| f64::from(v) / s).collect::<Vec<_>>()
                })
                .collect();
            (Tensor::new([n, k], data).unwrap(), labels)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_stratified_partition(counts in prop::array::uniform3(2usize..60), fraction in 0.5f64..0.95, seed: u64) {
        let all = records(counts);
        let (train, val) = stratified_split(&all, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), all.len());
        let val_counts = ClassCounts::of(&val).0;
        for c in 0..3 {
            prop_assert_eq!(val_counts[c], validation_count(counts[c], fraction));
        }
        let mut paths: Vec<_> = train.iter().chain(&val).map(|r| r.path.clone()).collect();
        paths.sort();
        paths.dedup();
        prop_assert_eq!(paths.len(), all.len());
        prop_assert!(train.iter().all(|r| r.split == Split::Train) && val.iter().all(|r| r.split == Split::Val));
        prop_assert_eq!(stratified_split(&all, fraction, seed).unwrap(), (train, val));
    }

    #[test]
    fn class_weights_balance_the_total(counts in prop::array::uniform3(1usize..5000)) {
        let c = ClassCounts(counts);
        let w = compute_class_weights(&c).unwrap();
        let weighted: f64 = counts.iter().zip(&w).map(|(&n, w)| n as f64 * w).sum();
        prop_assert!((weighted - c.total() as f64).abs() <= 1e-9 * c.total() as f64);
        for i in 0..3 {
            for j in 0..3 {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn augmentation_stays_in_range(side in 4usize..12, seed: u64, pixels in prop::collection::vec(0.0f64..=1.0, 144)) {
        let image = Tensor::new([side, side, 1], pixels[..side * side].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&image, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!(out.shape(), image.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let same = augment(&image, &AugmentConfig::identity(), &mut rng);
        prop_assert_eq!(same.data(), image.data());
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner((scores, labels) in scores_and_labels(3), class in 0usize..3) {
        let curve = roc_curve_ovr(&scores, &labels, class).unwrap();
        prop_assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        prop_assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let auc = auc_trapezoid(&curve);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn swapping_binary_labels_complements_auc((scores, labels) in scores_and_labels(2)) {
        let flipped: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
        let a = auc_trapezoid(&roc_curve_ovr(&scores, &labels, 0).unwrap());
        let b = auc_trapezoid(&roc_curve_ovr(&scores, &flipped, 0).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12, "{} + {}", a, b);
    }

    #[test]
    fn macro_scores_are_class_means(pairs in prop::collection::vec((0usize..3, 0usize..3), 3..80)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion_matrix(&truth, &pred, 3).unwrap();
        let r = classification_report(&cm).unwrap();
        let mean = |f: &dyn Fn(usize) -> f64| (0..3).map(f).sum::<f64>() / 3.0;
        prop_assert!((r.macro_precision - mean(&|c| r.per_class[c].precision)).abs() < 1e-15);
        prop_assert!((r.macro_recall - mean(&|c| r.per_class[c].recall)).abs() < 1e-15);
        prop_assert!((r.macro_f1 - mean(&|c| r.per_class[c].f1)).abs() < 1e-15);
        prop_assert_eq!(cm.total(), truth.len() as u64);
        prop_assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
    }

    #[test]
    fn aggregate_std_vanishes_only_for_equal_runs(values in prop::collection::vec(0.0f64..1.0, 2..6), equal: bool) {
        let values = if equal { vec![values[0]; values.len()] } else { values };
        let seeds: Vec<u64> = (0..values.len() as u64).collect();
        let agg = aggregate_runs(&values, &seeds).unwrap();
        let all_equal = values.iter().all(|&v| v == values[0]);
        prop_assert_eq!(agg.std == 0.0, all_equal);
        prop_assert!(agg.std >= 0.0);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= agg.mean && agg.mean <= hi + 1e-12);
    }

    #[test]
    fn early_stop_fires_after_patience_stale_epochs(values in prop::collection::vec(0.0f64..2.0, 1..30)) {
        let mut state = EarlyStopState::default();
        let (mut best, mut stale) = (f64::INFINITY, 0);
        for &v in &values {
            if v < best - 1e-4 {
                best = v;
                stale = 0;
            } else {
                stale += 1;
            }
            let stop = state.update(v);
            prop_assert_eq!(stop, stale >= 5);
            if stop {
                break;
            }
        }
    }

    #[test]
    fn plateau_only_ever_halves_down_to_the_floor(values in prop::collection::vec(0.0f64..2.0, 1..40), lr0 in 1e-7f64..1e-2) {
        let mut state = PlateauState::new(lr0);
        let mut prev = lr0;
        for &v in &values {
            let lr = state.update(v);
            prop_assert!(lr == prev || lr == (prev * 0.5).max(1e-7), "{} -> {}", prev, lr);
            prop_assert!(lr >= 1e-7);
            prev = lr;
        }
    }
}
