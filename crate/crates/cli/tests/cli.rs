use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesion_core::dataset::{Manifest, PackFile, Split};
use lesion_core::image::save_image;
use lesion_core::metrics::argmax;
use lesion_core::model::{predict_source, Checkpoint, SolverConfig};
use lesion_core::parallel::Exec;
use lesion_core::synthetic::blobs_vs_stripes;
use sha2::{Digest, Sha256};

fn lesion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesion")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lesion(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `root/<class>/<class>NN.png`, alternating blobs and stripes.
fn image_tree(root: &Path, classes: &[&str], per_class: usize, size: usize) {
    let imgs = blobs_vs_stripes(classes.len() * per_class, size, 3, 21);
    for (i, (img, _)) in imgs.into_iter().enumerate() {
        let class = classes[i % classes.len()];
        std::fs::create_dir_all(root.join(class)).unwrap();
        save_image(&img, &root.join(class).join(format!("{class}{:02}.png", i / classes.len()))).unwrap();
    }
}

fn digest_tree(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn solver_file(dir: &Path, max_iter: usize) -> PathBuf {
    let s = SolverConfig {
        batch_size: 4,
        max_iter,
        test_iter: 2,
        test_interval: 10,
        stepsize: 15,
        ..SolverConfig::paper()
    };
    let path = dir.join("solver.cfg");
    std::fs::write(&path, s.to_text()).unwrap();
    path
}

#[test]
fn split_counts_determinism_and_bad_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("img");
    image_tree(&root, &["wart"], 10, 8);
    let m = dir.path().join("m.jsonl");
    ok(&["manifest", "--root", s(&root), "--out", s(&m)]);
    let before = sha(&m);

    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let stdout = ok(&["split", "--manifest", s(&m), "--out", s(&a), "--train", "0.8", "--val", "0.2", "--seed", "7"]);
    assert!(stdout.contains("train: 8") && stdout.contains("validation: 2"), "{stdout}");
    ok(&["split", "--manifest", s(&m), "--out", s(&b), "--train", "0.8", "--val", "0.2", "--seed", "7"]);
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(sha(&m), before);

    let bad = lesion(&["split", "--manifest", s(&m), "--out", s(&b), "--train", "0.8", "--val", "0.3"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sum to"));

    let clobber = lesion(&["split", "--manifest", s(&m), "--out", s(&m)]);
    assert_eq!(clobber.status.code(), Some(2));
    assert_eq!(sha(&m), before);
}

#[test]
fn augment_counts_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("img");
    image_tree(&root, &["nevus"], 10, 12);
    let m = dir.path().join("m.jsonl");
    let split = dir.path().join("split.jsonl");
    ok(&["manifest", "--root", s(&root), "--out", s(&m)]);
    ok(&["split", "--manifest", s(&m), "--out", s(&split), "--train", "1", "--val", "0"]);
    let inputs = digest_tree(&root);

    let run = |name: &str, factor: &str| {
        let out = dir.path().join(name).join("aug.jsonl");
        ok(&["augment", "--manifest", s(&split), "--out", s(&out), "--factor", factor, "--seed", "3"]);
        (Manifest::load(&out).unwrap(), digest_tree(&dir.path().join(name)))
    };
    let (a, da) = run("a", "29");
    assert_eq!(a.len(), 300);
    for e in a.entries().iter().filter(|e| e.parent.is_some()) {
        assert!(a.resolve(&e.path).exists());
        assert!(a.entries().iter().any(|p| Some(&p.path) == e.parent.as_ref()));
    }
    let (_, db) = run("b", "29");
    assert_eq!(da, db);
    let (z, _) = run("z", "0");
    assert_eq!(z.len(), 10);
    assert_eq!(digest_tree(&root), inputs);
}

#[test]
fn train_with_zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let solver = solver_file(dir.path(), 100);
    let ckpts = dir.path().join("ckpt");
    ok(&["train", "--solver", s(&solver), "--preset", "resnet-tiny", "--max-iter", "0", "--out-dir", s(&ckpts)]);
    let c = Checkpoint::load(&ckpts.join("final.skck")).unwrap();
    assert_eq!(c.iteration, 0);
    assert_eq!(c.class_names.len(), 12);
    let first = sha(&ckpts.join("final.skck"));
    ok(&["train", "--solver", s(&solver), "--preset", "resnet-tiny", "--max-iter", "0", "--out-dir", s(&ckpts)]);
    assert_eq!(sha(&ckpts.join("final.skck")), first);
}

#[test]
fn exit_codes_for_missing_inputs_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = lesion(&["split", "--manifest", s(&missing), "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lesion(&["train"]).status.code(), Some(2));
    assert_eq!(lesion(&["frobnicate"]).status.code(), Some(2));

    let bad_solver = dir.path().join("bad.cfg");
    std::fs::write(&bad_solver, "base_lr: 0.01\n").unwrap();
    let out = lesion(&["train", "--solver", s(&bad_solver), "--max-iter", "0", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let solver = solver_file(dir.path(), 0);
    let ckpt_dir = dir.path().join("c");
    ok(&["train", "--solver", s(&solver), "--preset", "resnet-toy", "--input-size", "8", "--num-classes", "2", "--out-dir", s(&ckpt_dir)]);
    let garbage = dir.path().join("test.pack");
    std::fs::write(&garbage, b"SKLP not really a pack").unwrap();
    let out = lesion(&["eval", "--checkpoint", s(&ckpt_dir.join("final.skck")), "--pack", s(&garbage), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn end_to_end_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("img");
    image_tree(&root, &["blobs", "stripes"], 12, 16);
    solver_file(dir.path(), 20);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 5\npreset = \"resnet-toy\"\nfactor = 1\nsolver = \"solver.cfg\"\n\
         [paths]\nmanifest = \"work/manifest.jsonl\"\npack_dir = \"work/packs\"\ncheckpoint_dir = \"work/ckpt\"\nreport_dir = \"work/reports\"\n\
         [split]\ntrain = 0.75\nval = 0.25\ntest = 0.25\n",
    )
    .unwrap();
    let c = s(&config);
    let work = dir.path().join("work");
    ok(&["--config", c, "manifest", "--root", s(&root)]);
    let split = work.join("split.jsonl");
    ok(&["--config", c, "split", "--out", s(&split)]);
    let m = Manifest::load(&split).unwrap();
    assert_eq!(m.in_split(Split::Test).count(), 6);
    assert_eq!(m.in_split(Split::Train).count(), 14);
    let aug = work.join("aug.jsonl");
    ok(&["--config", c, "augment", "--manifest", s(&split), "--out", s(&aug)]);
    assert_eq!(Manifest::load(&aug).unwrap().len(), 24 + 18);
    for sp in ["train", "validation", "test"] {
        ok(&["--config", c, "pack", "--manifest", s(&aug), "--split", sp, "--height", "16", "--width", "16"]);
    }
    let packs = work.join("packs");
    assert_eq!(PackFile::open(&packs.join("train.pack")).unwrap().header().record_count, 28);

    let stdout = ok(&["--config", c, "train", "--seed", "9"]);
    assert!(stdout.contains("iter 10:") && stdout.contains("iter 20:"), "{stdout}");
    let ckpts = work.join("ckpt");
    for f in ["final.skck", "best.skck", "iter_000010.skck", "iter_000020.skck", "train_log.jsonl"] {
        assert!(ckpts.join(f).exists(), "{f}");
    }
    let final_ckpt = ckpts.join("final.skck");
    assert_eq!(Checkpoint::load(&final_ckpt).unwrap().iteration, 20);

    let reference = dir.path().join("ref.json");
    std::fs::write(&reference, r#"{"title": "Prior", "values": {"blobs": 0.5}}"#).unwrap();
    let stdout = ok(&["--config", c, "eval", "--checkpoint", s(&final_ckpt), "--reference", s(&reference)]);
    let reports = work.join("reports");
    let table = std::fs::read_to_string(reports.join("report.txt")).unwrap();
    assert!(table.starts_with(stdout.as_str()));
    assert!(stdout.lines().next().unwrap().contains("Prior"));
    for class in ["blobs", "stripes"] {
        assert_eq!(stdout.lines().filter(|l| l.starts_with(class)).count(), 1, "{stdout}");
    }
    assert_eq!(std::fs::read_to_string(reports.join("report.jsonl")).unwrap().lines().count(), 2);
    let eval_digest = digest_tree(&reports);
    ok(&["--config", c, "eval", "--checkpoint", s(&final_ckpt), "--reference", s(&reference)]);
    assert_eq!(digest_tree(&reports), eval_digest);

    let net = Checkpoint::load(&final_ckpt).unwrap().to_network().unwrap();
    let test = PackFile::open(&packs.join("test.pack")).unwrap();
    let preds = predict_source(&net, &test, 4, None, Exec::Sequential).unwrap();
    let wrong = preds.probs.iter().zip(&preds.labels).filter(|(p, &l)| argmax(p) != l).count();
    for (mode, expected) in [("most-wrong", wrong.min(3)), ("most-correct", (preds.labels.len() - wrong).min(3))] {
        let out = dir.path().join(mode);
        ok(&["--config", c, "explain", "--checkpoint", s(&final_ckpt), "--mode", mode, "--n", "3", "--out-dir", s(&out)]);
        let count = |ext: &str| std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count();
        assert_eq!((count("png"), count("json")), (expected, expected), "{mode}");
        if expected > 0 {
            let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("rank01.json")).unwrap()).unwrap();
            for key in ["predicted_class", "confidence", "target_class", "true_class"] {
                assert!(side.get(key).is_some(), "{key}");
            }
        }
    }
    let bad_mode = lesion(&["--config", c, "explain", "--checkpoint", s(&final_ckpt), "--mode", "sideways"]);
    assert_eq!(bad_mode.status.code(), Some(2));
}
