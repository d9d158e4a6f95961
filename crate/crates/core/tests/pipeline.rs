use std::collections::BTreeMap;
use std::path::Path;

use lesion_core::augment::{apply_op, augment_corpus, default_pipeline, AugmentOp, Transform};
use lesion_core::dataset::{build_pack, stratified_split, BuiltPack, Manifest, Origin, PackFile, PackSpec, Split, SplitFractions};
use lesion_core::explain::{gradcam, overlay, rank_examples, RankMode};
use lesion_core::image::{save_image, ImageTensor};
use lesion_core::metrics::one_vs_rest_report;
use lesion_core::model::{momentum_step, predict_source, softmax_cross_entropy, train, Checkpoint, InputDims, Network, NetworkConfig, SolverConfig, Tensor, TrainOptions};
use lesion_core::parallel::Exec;
use lesion_core::rng::SeededRng;
use lesion_core::synthetic::{blobs_vs_stripes, SYNTHETIC_CLASSES};

fn write_class_tree(root: &Path, per_class: usize) {
    for (c, (img, _)) in blobs_vs_stripes(2 * per_class, 24, 3, 5).into_iter().enumerate() {
        let class = SYNTHETIC_CLASSES[c % 2];
        std::fs::create_dir_all(root.join(class)).unwrap();
        save_image(&img, &root.join(class).join(format!("{class}{:02}.png", c / 2))).unwrap();
    }
}

#[test]
fn corpus_to_report_and_explanations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("images");
    write_class_tree(&root, 10);
    let scanned = Manifest::scan_class_dirs(&root, "synthetic").unwrap();
    assert_eq!(scanned.class_names(), ["blobs", "stripes"]);

    let test_carved = stratified_split(&scanned, &SplitFractions::new(&[(Split::Test, 0.2), (Split::Unassigned, 0.8)]).unwrap(), 1).unwrap();
    let m = stratified_split(&test_carved, &SplitFractions::train_val(0.75, 0.25).unwrap(), 2).unwrap();
    let count = |m: &Manifest, s| m.in_split(s).count();
    assert_eq!((count(&m, Split::Train), count(&m, Split::Validation), count(&m, Split::Test)), (12, 4, 4));

    let aug = augment_corpus(&m, Split::Train, 3, &default_pipeline(), 9, &root.join("aug"), Exec::Parallel).unwrap();
    assert_eq!(aug.len(), 20 + 36);
    for e in aug.entries().iter().filter(|e| e.origin == Origin::Augmented) {
        let parent = aug.entries().iter().find(|p| Some(&p.path) == e.parent.as_ref()).unwrap();
        assert_eq!((parent.class_id, parent.split), (e.class_id, Split::Train));
        assert!(aug.resolve(&e.path).exists());
    }
    let manifest_path = root.join("manifest.jsonl");
    aug.save(&manifest_path).unwrap();
    let reloaded = Manifest::load(&manifest_path).unwrap();
    assert_eq!(reloaded.entries(), aug.entries());

    let spec = PackSpec {
        height: 16,
        width: 16,
        channels: 3,
    };
    let packs: BTreeMap<Split, PackFile> = [Split::Train, Split::Validation, Split::Test]
        .into_iter()
        .map(|s| {
            let built = build_pack(&reloaded, s, spec, 4, Exec::Parallel).unwrap();
            let path = dir.path().join(format!("{s}.pack"));
            built.save(&path).unwrap();
            assert_eq!(BuiltPack::load_entries(&path).unwrap(), built.entries);
            (s, PackFile::open(&path).unwrap())
        })
        .collect();
    assert_eq!(packs[&Split::Train].header().record_count, 48);

    let cfg = NetworkConfig::resnet_toy(
        InputDims {
            height: 16,
            width: 16,
            channels: 3,
        },
        2,
    );
    let solver = SolverConfig {
        base_lr: 0.01,
        weight_decay: 1e-4,
        momentum: 0.9,
        gamma: 0.1,
        batch_size: 8,
        max_iter: 30,
        test_iter: 1,
        test_interval: 10,
        stepsize: 20,
        iter_size: 1,
        lr_mult: BTreeMap::new(),
    };
    let names: Vec<String> = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    let out = train(
        Network::new(cfg, 3).unwrap(),
        &solver,
        &packs[&Split::Train],
        &packs[&Split::Validation],
        names.clone(),
        6,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(out.evaluations.iter().map(|e| e.iteration).collect::<Vec<_>>(), [10, 20, 30]);
    assert_eq!(out.snapshots.len(), 3);
    let ckpt_path = dir.path().join("final.skck");
    out.final_checkpoint.save(&ckpt_path).unwrap();
    let net = Checkpoint::load(&ckpt_path).unwrap().to_network().unwrap();

    let test = &packs[&Split::Test];
    let preds = predict_source(&net, test, 3, None, Exec::Parallel).unwrap();
    let report = one_vs_rest_report(&preds.probs, &preds.labels, &names).unwrap();
    let table = report.render_table(&[]);
    assert!(table.lines().any(|l| l.starts_with("blobs")));
    assert!(table.lines().any(|l| l.starts_with("stripes")));
    assert!(table.contains("Total accuracy"));
    assert_eq!(report.to_jsonl().lines().count(), 2);

    for mode in [RankMode::MostWrong, RankMode::MostCorrect] {
        let ranked = rank_examples(&preds.probs, &preds.labels, None, mode, 3).unwrap();
        let pool = preds.probs.iter().zip(&preds.labels).filter(|(p, &l)| (lesion_core::metrics::argmax(p) != l) == (mode == RankMode::MostWrong)).count();
        assert_eq!(ranked.len(), pool.min(3));
        for r in ranked {
            let (img, _) = test.read_record(r.index).unwrap();
            let cam = gradcam(&net, &img, r.predicted, None).unwrap();
            let panel = overlay(&img, &cam.map, 0.5).unwrap();
            assert_eq!((panel.height(), panel.width()), (16, 48));
        }
    }
}

#[test]
fn op_firing_rate_matches_probability() {
    let img = ImageTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
    let n = 20_000;
    for q in [0.1, 0.5, 0.7] {
        let op = AugmentOp::new(Transform::FlipHorizontal, q).unwrap();
        let base = SeededRng::new(77, 0);
        let fired = (0..n).filter(|&i| apply_op(&op, &img, &mut base.child(i as u64)) != img).count();
        let rate = fired as f64 / n as f64;
        assert!((rate - q).abs() <= 3.0 * (q * (1.0 - q) / n as f64).sqrt(), "q={q}: rate {rate}");
    }
}

#[test]
fn weight_decay_descends_on_a_dense_toy() {
    let (n, d, k) = (12, 5, 3);
    let mut rng = SeededRng::new(1, 2);
    let x: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let (x, labels) = (&x, &labels);
    let mut w: Vec<f64> = (0..k * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let mut v = vec![0.0; w.len()];
    let decay = 0.05;
    let objective_and_grad = |w: &[f64]| {
        let logits: Vec<f64> = (0..n).flat_map(|i| (0..k).map(move |c| (0..d).map(|j| w[c * d + j] * x[i * d + j]).sum::<f64>())).collect();
        let (loss, dl) = softmax_cross_entropy(&Tensor::new(vec![n, k], logits).unwrap(), labels).unwrap();
        let mut g = vec![0.0; k * d];
        for i in 0..n {
            for c in 0..k {
                for j in 0..d {
                    g[c * d + j] += dl.data()[i * k + c] * x[i * d + j];
                }
            }
        }
        (loss + 0.5 * decay * w.iter().map(|a| a * a).sum::<f64>(), g)
    };
    let (mut last, _) = objective_and_grad(&w);
    for _ in 0..200 {
        let (_, g) = objective_and_grad(&w);
        momentum_step(&mut w, &mut v, &g, 0.05, 0.0, decay);
        let (obj, _) = objective_and_grad(&w);
        assert!(obj <= last + 1e-15, "{obj} > {last}");
        last = obj;
    }
}
