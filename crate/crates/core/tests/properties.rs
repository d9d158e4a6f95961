use proptest::prelude::*;

use lesion_core::augment::{apply_op, default_pipeline, AugmentOp};
use lesion_core::dataset::{stratified_split, Manifest, ManifestEntry, PackFile, PackSpec, Split, SplitFractions};
use lesion_core::explain::{gradcam_from_maps, overlay, HeatMap};
use lesion_core::image::ImageTensor;
use lesion_core::metrics::{auc, confusion, roc_curve, topk_accuracy};
use lesion_core::model::{softmax, SolverConfig, Tensor};
use lesion_core::rng::SeededRng;

fn binary_set() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50).prop_flat_map(|n| {
        (prop::collection::vec(0u8..8, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| f64::from(v) / 8.0).collect(), l)
        })
    })
}

fn image(max: usize) -> impl Strategy<Value = ImageTensor> {
    (1usize..=max, 1usize..=max, prop::sample::select(vec![1usize, 3])).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f32..=1.0, h * w * c).prop_map(move |d| ImageTensor::new(h, w, c, d).unwrap())
    })
}

fn manifest(counts: &[usize]) -> Manifest {
    let names: Vec<String> = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let mut m = Manifest::new(names.clone()).unwrap();
    for (c, &n) in counts.iter().enumerate() {
        for j in 0..n {
            m.push(ManifestEntry::original(format!("{c}/{j}.png"), c, names[c].clone())).unwrap();
        }
    }
    m
}

proptest! {
    #[test]
    fn auc_is_the_pairwise_win_rate((scores, labels) in binary_set()) {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        let a = auc(&roc_curve(&scores, &labels, "p").unwrap());
        prop_assert!((a - wins / pairs).abs() <= 1e-9);
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner((scores, labels) in binary_set()) {
        let r = roc_curve(&scores, &labels, "p").unwrap();
        prop_assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
        for w in 1..r.fpr.len() {
            prop_assert!(r.thresholds[w] < r.thresholds[w - 1]);
            prop_assert!(r.fpr[w] >= r.fpr[w - 1] && r.tpr[w] >= r.tpr[w - 1]);
        }
    }

    #[test]
    fn increasing_transforms_keep_roc_points((scores, labels) in binary_set(), shift in -3.0f64..3.0) {
        let a = roc_curve(&scores, &labels, "p").unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s + shift).exp()).collect();
        let b = roc_curve(&mapped, &labels, "p").unwrap();
        prop_assert_eq!(&a.fpr, &b.fpr);
        prop_assert_eq!(&a.tpr, &b.tpr);
        prop_assert_eq!(auc(&a), auc(&b));
    }

    #[test]
    fn confusion_trace_is_direct_accuracy(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion(&preds, &labels, 5).unwrap();
        let direct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64;
        prop_assert_eq!(cm.total(), preds.len() as u64);
        prop_assert!((cm.accuracy().unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn topk_grows_with_k_and_saturates(rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 6), 0usize..6), 1..30)) {
        let (probs, labels): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
        let accs: Vec<f64> = (1..=6).map(|k| topk_accuracy(&probs, &labels, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[5], 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, logits in prop::collection::vec(-10.0f64..10.0, 20)) {
        let n = rows.min(logits.len() / 4);
        let t = Tensor::new(vec![n, 4], logits[..n * 4].to_vec()).unwrap();
        let p = softmax(&t);
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn lr_is_a_non_increasing_staircase(step in 1usize..500, gamma in 0.05f64..1.0, iters in prop::collection::vec(0usize..5000, 2..20)) {
        let s = SolverConfig { stepsize: step, gamma, max_iter: 5000, ..SolverConfig::paper() };
        let mut sorted = iters;
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            prop_assert!(s.lr_at(w[1]) <= s.lr_at(w[0]));
            if w[0] / step == w[1] / step {
                prop_assert_eq!(s.lr_at(w[0]), s.lr_at(w[1]));
            }
        }
    }

    #[test]
    fn splits_partition_and_stratify(counts in prop::collection::vec(1usize..40, 1..12), train in 0.0f64..1.0, seed in any::<u64>()) {
        let m = manifest(&counts);
        let f = SplitFractions::train_val(train, 1.0 - train).unwrap();
        let s = stratified_split(&m, &f, seed).unwrap();
        prop_assert_eq!(s.len(), m.len());
        for (a, b) in m.entries().iter().zip(s.entries()) {
            prop_assert_eq!(&a.path, &b.path);
            prop_assert!(b.split == Split::Train || b.split == Split::Validation);
        }
        for (c, &n) in counts.iter().enumerate() {
            let tr = s.entries().iter().filter(|e| e.class_id == c && e.split == Split::Train).count();
            prop_assert!((tr as f64 - train * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn augment_ops_keep_shape_and_range(img in image(12), op in 0usize..6, seed in any::<u64>()) {
        let op: AugmentOp = AugmentOp { probability: 1.0, ..default_pipeline().ops[op].clone() };
        let out = apply_op(&op, &img, &mut SeededRng::new(seed, 0));
        prop_assert_eq!((out.height(), out.width(), out.channels()), (img.height(), img.width(), img.channels()));
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pack_round_trip_is_identity(h in 1u16..6, w in 1u16..6, records in prop::collection::vec((prop::collection::vec(any::<u8>(), 75), 0usize..12), 0..10)) {
        let spec = PackSpec { height: h as usize, width: w as usize, channels: 3 };
        let len = h as usize * w as usize * 3;
        let recs: Vec<(Vec<u8>, usize)> = records.into_iter().map(|(b, l)| (b[..len].to_vec(), l)).collect();
        let p = PackFile::from_records(spec, &recs).unwrap();
        let back = PackFile::from_bytes(p.to_bytes().unwrap()).unwrap();
        for (i, r) in recs.iter().enumerate() {
            prop_assert_eq!(&back.read_raw(i).unwrap(), r);
        }
    }

    #[test]
    fn gradcam_ignores_gradient_scale(c in 1usize..4, hw in 1usize..5, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = SeededRng::new(seed, 0);
        let n = c * hw * hw;
        let acts: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 2.0)).collect();
        let grads: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 1.0)).collect();
        let scaled: Vec<f64> = grads.iter().map(|g| g * scale).collect();
        let a = gradcam_from_maps(&acts, &grads, c, hw, hw);
        let b = gradcam_from_maps(&acts, &scaled, c, hw, hw);
        prop_assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn overlay_keeps_the_original_panel(img in image(8), alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = SeededRng::new(seed, 1);
        let map = HeatMap { height: img.height(), width: img.width(), values: (0..img.height() * img.width()).map(|_| r.unit()).collect() };
        let out = overlay(&img, &map, alpha).unwrap();
        let rgb = img.with_channels(3).unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                for ch in 0..3 {
                    prop_assert_eq!(out.get(y, x, ch), rgb.get(y, x, ch));
                }
            }
        }
    }
}
