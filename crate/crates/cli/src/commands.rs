use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lesion_core::augment::{augment_corpus, default_pipeline, AugmentPipeline};
use lesion_core::dataset::{build_pack, stratified_split, BuiltPack, Manifest, ManifestEntry, PackFile, PackSpec, RecordSource, Split, SplitFractions, LESION_CLASSES};
use lesion_core::explain::{gradcam, overlay, rank_examples, ExplanationRecord};
use lesion_core::image::save_image;
use lesion_core::metrics::{one_vs_rest_report_with, CutoffRule, ReferenceColumn};
use lesion_core::model::{
    predict_source, replace_head, train_observed, Checkpoint, InputDims, Network, NetworkConfig, SolverConfig, TrainEvent, TrainOptions,
};
use lesion_core::parallel::Exec;
use serde::Deserialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{AugmentArgs, Cli, CliError, Command, EvalArgs, ExplainArgs, ManifestArgs, PackArgs, Rule, SplitArgs, SplitName, Target, TrainArgs};

const DEFAULT_SEED: u64 = 0;
const DEFAULT_PRESET: &str = "resnet-tiny";
const DEFAULT_INPUT: usize = 64;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Manifest(a) => manifest(&cfg, a),
        Command::Split(a) => split(&cfg, a),
        Command::Augment(a) => augment(&cfg, a),
        Command::Pack(a) => pack(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Explain(a) => explain(&cfg, a),
    }
}

fn pick<T>(flag: Option<T>, config: Option<T>, what: &str) -> Result<T, CliError> {
    flag.or(config).ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config)")))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn distinct_output(input: &Path, out: &Path) -> Result<(), CliError> {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    if abs(input) == abs(out) {
        return Err(CliError::Usage(format!("output {} would overwrite the input", out.display())));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| PathBuf::from("."))
}

fn save_manifest(m: &Manifest, out: &Path) -> Result<(), CliError> {
    let dir = parent_dir(out);
    create_dir(&dir)?;
    m.rebased(&dir).save(out)?;
    Ok(())
}

fn load_manifest(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<(PathBuf, Manifest), CliError> {
    let path = existing(pick(flag, cfg.paths.manifest.clone(), "--manifest")?, "manifest")?;
    let m = Manifest::load(&path)?;
    Ok((path, m))
}

fn to_split(s: SplitName) -> Split {
    match s {
        SplitName::Train => Split::Train,
        SplitName::Validation => Split::Validation,
        SplitName::Test => Split::Test,
        SplitName::Unassigned => Split::Unassigned,
    }
}

fn manifest(cfg: &RunConfig, a: ManifestArgs) -> Result<(), CliError> {
    let root = existing(a.root, "image root")?;
    let out = pick(a.out, cfg.paths.manifest.clone(), "--out")?;
    let mut m = Manifest::scan_class_dirs(&root, &a.source_tag)?;
    m.stamp(format!("scan root={}", root.display()));
    save_manifest(&m, &out)?;
    println!("{} entries over {} classes -> {}", m.len(), m.num_classes(), out.display());
    Ok(())
}

fn split(cfg: &RunConfig, a: SplitArgs) -> Result<(), CliError> {
    let (input, mut m) = load_manifest(cfg, a.manifest)?;
    distinct_output(&input, &a.out)?;
    let train = a.train.or(cfg.split.train).unwrap_or(0.8);
    let val = a.val.or(cfg.split.val).unwrap_or(1.0 - train);
    let test = a.test.or(cfg.split.test).unwrap_or(0.0);
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let inner = SplitFractions::train_val(train, val)?;
    if a.reset {
        let entries: Vec<ManifestEntry> = m.entries().iter().cloned().map(|e| ManifestEntry { split: Split::Unassigned, ..e }).collect();
        let base = m.base_dir().map(Path::to_path_buf);
        m = Manifest::with_entries(m.class_names().to_vec(), entries)?;
        m.set_base_dir(base);
        m.stamp("reset splits");
    }
    if test > 0.0 {
        let carve = SplitFractions::new(&[(Split::Test, test), (Split::Unassigned, 1.0 - test)])?;
        m = stratified_split(&m, &carve, seed)?;
    }
    let m = stratified_split(&m, &inner, seed)?;
    save_manifest(&m, &a.out)?;
    for s in [Split::Train, Split::Validation, Split::Test] {
        println!("{s}: {}", m.in_split(s).count());
    }
    Ok(())
}

fn augment(cfg: &RunConfig, a: AugmentArgs) -> Result<(), CliError> {
    let (input, m) = load_manifest(cfg, a.manifest)?;
    distinct_output(&input, &a.out)?;
    let factor = pick(a.factor, cfg.factor, "--factor")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let pipeline = match a.pipeline.or(cfg.pipeline.clone()) {
        Some(p) => {
            let p = existing(p, "pipeline")?;
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            AugmentPipeline::from_json(&text)?
        }
        None => default_pipeline(),
    };
    let image_dir = a.image_dir.unwrap_or_else(|| parent_dir(&a.out).join("augmented"));
    let splits: &[Split] = if a.paper_order { &[Split::Unassigned] } else { &[Split::Train, Split::Validation] };
    let mut out = m;
    for &s in splits {
        out = augment_corpus(&out, s, factor, &pipeline, seed, &image_dir, Exec::Parallel)?;
    }
    save_manifest(&out, &a.out)?;
    println!("{} entries -> {}", out.len(), a.out.display());
    Ok(())
}

fn pack(cfg: &RunConfig, a: PackArgs) -> Result<(), CliError> {
    let (_, m) = load_manifest(cfg, a.manifest)?;
    let split = to_split(a.split);
    let out = match a.out {
        Some(o) => o,
        None => pick(None, cfg.paths.pack_dir.clone(), "--out")?.join(format!("{split}.pack")),
    };
    let spec = PackSpec {
        height: a.height,
        width: a.width,
        channels: a.channels,
    };
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let built = build_pack(&m, split, spec, seed, Exec::Parallel)?;
    create_dir(&parent_dir(&out))?;
    built.save(&out)?;
    println!("{} records -> {}", built.entries.len(), out.display());
    Ok(())
}

fn pack_path(flag: Option<PathBuf>, cfg: &RunConfig, name: &str) -> Option<PathBuf> {
    flag.or_else(|| cfg.paths.pack_dir.as_ref().map(|d| d.join(format!("{name}.pack"))))
}

/// Class names from a pack's entry sidecar, indexed by class id.
fn pack_class_names(pack: &Path, num_classes: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..num_classes).map(|i| format!("class{i}")).collect();
    if let Ok(entries) = BuiltPack::load_entries(pack) {
        for e in entries.iter().filter(|e| e.class_id < num_classes) {
            names[e.class_id] = e.class_name.clone();
        }
    }
    names
}

fn open_pack(path: PathBuf, what: &str) -> Result<(PathBuf, PackFile), CliError> {
    let path = existing(path, what)?;
    let pack = PackFile::open(&path)?;
    Ok((path, pack))
}

fn train(cfg: &RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let solver_path = existing(pick(a.solver, cfg.solver.clone(), "--solver")?, "solver file")?;
    let text = std::fs::read_to_string(&solver_path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", solver_path.display())))?;
    let mut solver = SolverConfig::parse(&text)?;
    if let Some(m) = a.max_iter {
        solver.max_iter = m;
    }
    solver.validate()?;
    let preset = a.preset.or(cfg.preset.clone()).unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let out_dir = pick(a.out_dir, cfg.paths.checkpoint_dir.clone(), "--out-dir")?;
    let train_path = pack_path(a.train_pack, cfg, "train");
    let val_path = pack_path(a.val_pack, cfg, "validation");

    let packs = match (&train_path, solver.max_iter) {
        (Some(t), _) if t.exists() || solver.max_iter > 0 => {
            let (tp, train_pack) = open_pack(t.clone(), "training pack")?;
            let vp = val_path.ok_or_else(|| CliError::Usage("missing --val-pack (flag or config)".into()))?;
            let (_, val_pack) = open_pack(vp, "validation pack")?;
            Some((tp, train_pack, val_pack))
        }
        (None, m) if m > 0 => return Err(CliError::Usage("missing --train-pack (flag or config)".into())),
        _ => None,
    };
    let (input, num_classes, names) = match &packs {
        Some((tp, train_pack, _)) => {
            let (h, w, c) = train_pack.dims();
            let k = a.num_classes.unwrap_or_else(|| train_pack.index().iter().map(|e| usize::from(e.class_id) + 1).max().unwrap_or(1));
            let input = InputDims {
                height: h,
                width: w,
                channels: c,
            };
            (input, k, pack_class_names(tp, k))
        }
        None => {
            let side = a.input_size.unwrap_or(DEFAULT_INPUT);
            let k = a.num_classes.unwrap_or(LESION_CLASSES.len());
            let names = if k == LESION_CLASSES.len() {
                LESION_CLASSES.iter().map(|s| s.to_string()).collect()
            } else {
                (0..k).map(|i| format!("class{i}")).collect()
            };
            let input = InputDims {
                height: side,
                width: side,
                channels: 3,
            };
            (input, k, names)
        }
    };
    let net_cfg = NetworkConfig::preset(&preset, input, num_classes)?;
    let net = match a.finetune {
        Some(p) => {
            let p = existing(p, "fine-tune checkpoint")?;
            let base = Checkpoint::load(&p)?;
            replace_head(&base, &net_cfg, names.clone(), seed)?.to_network()?
        }
        None => Network::new(net_cfg, seed)?,
    };
    create_dir(&out_dir)?;
    let Some((_, train_pack, val_pack)) = packs else {
        let ckpt = Checkpoint::from_network(&net, 0, names);
        let path = out_dir.join("final.skck");
        ckpt.save(&path)?;
        println!("initial checkpoint -> {}", path.display());
        return Ok(());
    };
    let opts = TrainOptions {
        freeze_batch_norm: a.freeze_batch_norm,
        exec: if a.sequential { Exec::Sequential } else { Exec::Parallel },
    };
    let mut log = String::new();
    let outcome = train_observed(net, &solver, &train_pack, &val_pack, names, seed, opts, &mut |ev| {
        let line = match ev {
            TrainEvent::Update(u) => json!({"event": "update", "iteration": u.iteration, "update": u.update, "loss": u.loss, "lr": u.lr}),
            TrainEvent::Eval(e) => {
                println!("iter {}: val loss {:.4} top1 {:.4} top5 {:.4}", e.iteration, e.loss, e.top1, e.top5);
                json!({"event": "eval", "iteration": e.iteration, "loss": e.loss, "top1": e.top1, "top5": e.top5, "examples": e.examples})
            }
        };
        log.push_str(&line.to_string());
        log.push('\n');
    })?;
    write(&out_dir.join("train_log.jsonl"), &log)?;
    for snap in &outcome.snapshots {
        snap.save(&out_dir.join(format!("iter_{:06}.skck", snap.iteration)))?;
    }
    outcome.final_checkpoint.save(&out_dir.join("final.skck"))?;
    if let Some((best, e)) = outcome.best() {
        best.save(&out_dir.join("best.skck"))?;
        println!("best: iteration {} top1 {:.4}", e.iteration, e.top1);
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReferenceFile {
    title: String,
    values: BTreeMap<String, f64>,
}

fn load_reference(path: PathBuf) -> Result<ReferenceColumn, CliError> {
    let path = existing(path, "reference")?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let r: ReferenceFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid reference {}: {e}", path.display())))?;
    Ok(ReferenceColumn {
        title: r.title,
        values: r.values,
    })
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&existing(a.checkpoint, "checkpoint")?)?;
    let (_, pack) = open_pack(pick(pack_path(a.pack, cfg, "test"), None, "--pack")?, "pack")?;
    let out_dir = pick(a.out_dir, cfg.paths.report_dir.clone(), "--out-dir")?;
    let refs = a.reference.into_iter().map(load_reference).collect::<Result<Vec<_>, _>>()?;
    let net = ckpt.to_network()?;
    let preds = predict_source(&net, &pack, a.batch_size, None, Exec::Parallel)?;
    let rule = match a.cutoff {
        Rule::Closest => CutoffRule::ClosestToIdeal,
        Rule::Youden => CutoffRule::Youden,
    };
    let report = one_vs_rest_report_with(&preds.probs, &preds.labels, &ckpt.class_names, rule)?;
    let table = report.render_table(&refs);
    create_dir(&out_dir)?;
    write(&out_dir.join("report.txt"), &format!("{table}\n{}", report.render_cutoffs()))?;
    write(&out_dir.join("report.jsonl"), &report.to_jsonl())?;
    write(&out_dir.join("roc.csv"), &report.roc_csv())?;
    print!("{table}");
    Ok(())
}

fn explain(cfg: &RunConfig, a: ExplainArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&existing(a.checkpoint, "checkpoint")?)?;
    let (pack_file, pack) = open_pack(pick(pack_path(a.pack, cfg, "test"), None, "--pack")?, "pack")?;
    let out_dir = pick(a.out_dir, cfg.paths.report_dir.as_ref().map(|d| d.join("explain")), "--out-dir")?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::Usage(format!("--alpha {} outside [0, 1]", a.alpha)));
    }
    let net = ckpt.to_network()?;
    let layer = a.layer.unwrap_or_else(|| net.default_cam_layer().to_string());
    let preds = predict_source(&net, &pack, a.batch_size, None, Exec::Parallel)?;
    let entries = BuiltPack::load_entries(&pack_file).ok().filter(|e| e.len() == preds.labels.len());
    let ranked = rank_examples(&preds.probs, &preds.labels, entries.as_deref(), a.mode, a.n)?;
    create_dir(&out_dir)?;
    let name = |c: usize| ckpt.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
    for (rank, r) in ranked.iter().enumerate() {
        let (img, _) = pack.read_record(r.index)?;
        let target = match a.target {
            Target::Predicted => r.predicted,
            Target::True => r.truth,
        };
        let cam = gradcam(&net, &img, target, Some(&layer))?;
        let panel = overlay(&img, &cam.map, a.alpha)?;
        let stem = format!("rank{:02}", rank + 1);
        save_image(&panel, &out_dir.join(format!("{stem}.png")))?;
        let record = ExplanationRecord {
            rank: rank + 1,
            source: r.path.clone(),
            layer: layer.clone(),
            true_class: name(r.truth),
            predicted_class: name(r.predicted),
            confidence: r.confidence,
            target_class: name(target),
        };
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        write(&out_dir.join(format!("{stem}.json")), &(text + "\n"))?;
    }
    println!("{} explanations -> {}", ranked.len(), out_dir.display());
    Ok(())
}
