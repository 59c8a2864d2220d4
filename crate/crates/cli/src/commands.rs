use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use propot_core::corpus::{ingest_annotations, parse_annotations, write_annotations, generate_synthetic, AnnotationRecord};
use propot_core::encoders::{EmbeddingTable, EncoderMode};
use propot_core::evaluation::{embed_split, load_images, rank, render_report, ReportRun, SplitEmbeddings};
use propot_core::training::{METRICS_FILE, NONFINITE_DUMP, TIMINGS_FILE};
use propot_core::{Aggregation, Checkpoint, Corpus, EmbeddingBatch, Error, EvalMetrics, Model, Modality, Split, SyntheticSpec, TrainConfig, Trainer, Vocabulary};
use serde_json::{json, Value};

use crate::args::{AblateArgs, CheckpointArgs, Command, EvalArgs, ExportArgs, IngestArgs, ReportArgs, RetrieveArgs, SplitArg, SynthArgs, TrainCmd};
use crate::output::{checksum_manifest, resolve_output, write_atomic, Outputs};
use crate::CliError;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CHECKSUMS_FILE: &str = "checksums.sha256";

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::AblateAggregation(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

fn print_json(value: &Value) {
    print_text(&format!("{}\n", serde_json::to_string_pretty(value).expect("json value serializes")));
}

/// A closed stdout (for example `| head`) is not an error.
fn print_text(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn to_json<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("plain data serializes")
}

/// Accepts a corpus directory or an annotation file.
pub fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    let file = if path.is_dir() { path.join(ANNOTATIONS_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(CliError::data(format!("no annotation file at {}", file.display())));
    }
    Ok(ingest_annotations(&file)?)
}

fn train_vocabulary(corpus: &Corpus) -> Vocabulary {
    Vocabulary::build(corpus.text_indices(Split::Train).iter().map(|&t| corpus.texts()[t].caption.as_str()))
}

fn split_summary(corpus: &Corpus) -> Value {
    let mut map = serde_json::Map::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        map.insert(split.to_string(), to_json(&corpus.counts(split)));
    }
    Value::Object(map)
}

fn pick_split(corpus: &Corpus, arg: SplitArg) -> Result<Split, CliError> {
    let usable = |s: Split| !corpus.image_indices(s).is_empty() && !corpus.text_indices(s).is_empty();
    let split = match arg {
        SplitArg::Auto => {
            return [Split::Test, Split::Val, Split::Train]
                .into_iter()
                .find(|&s| usable(s))
                .ok_or_else(|| CliError::data("corpus has no split with both images and captions"))
        }
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    if !usable(split) {
        return Err(CliError::data(format!("{split} split has no images or no captions")));
    }
    Ok(split)
}

fn ingest(args: IngestArgs) -> Result<(), CliError> {
    let corpus = ingest_annotations(&args.annotations)?;
    let all: Vec<usize> = (0..corpus.images().len()).collect();
    for chunk in all.chunks(256) {
        load_images(&corpus, chunk)?;
    }
    let text = fs::read_to_string(&args.annotations)?;
    let root = args.annotations.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let root = root.canonicalize()?;
    let records: Vec<AnnotationRecord> = parse_annotations(&text)?
        .into_iter()
        .map(|r| AnnotationRecord { file_path: root.join(&r.file_path).to_string_lossy().into_owned(), ..r })
        .collect();

    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.directory(&out)?;
    refuse_existing(&out.join(ANNOTATIONS_FILE))?;
    for f in [ANNOTATIONS_FILE, VOCAB_FILE, SUMMARY_FILE] {
        outputs.file(&out.join(f))?;
    }
    write_atomic(&out.join(ANNOTATIONS_FILE), serde_json::to_string_pretty(&records)?.as_bytes())?;
    train_vocabulary(&corpus).save(&out.join(VOCAB_FILE))?;
    let summary = json!({ "images": corpus.images().len(), "captions": corpus.texts().len(), "splits": split_summary(&corpus) });
    write_atomic(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    outputs.commit();
    print_json(&summary);
    Ok(())
}

fn refuse_existing(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        return Err(CliError::usage(format!("{} already exists; choose another --out", path.display())));
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_identities: args.ids,
        images_per_identity: args.imgs,
        captions_per_image: args.caps,
        test_identities: args.test_ids,
        noise: args.noise,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec)?;
    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.directory(&out)?;
    refuse_existing(&out.join(ANNOTATIONS_FILE))?;
    for img in corpus.images() {
        outputs.file(&out.join(&img.file_path))?;
    }
    for f in [ANNOTATIONS_FILE, VOCAB_FILE, SUMMARY_FILE] {
        outputs.file(&out.join(f))?;
    }
    write_annotations(&corpus, &out)?;
    train_vocabulary(&corpus).save(&out.join(VOCAB_FILE))?;
    let summary = json!({ "spec": to_json(&spec), "images": corpus.images().len(), "captions": corpus.texts().len(), "splits": split_summary(&corpus) });
    write_atomic(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    outputs.commit();
    print_json(&summary);
    Ok(())
}

/// Output of one finished training run.
struct RunResult {
    epochs: usize,
    last: Option<propot_core::LossBundle>,
    checkpoint: Checkpoint,
}

fn run_training(cfg: &TrainConfig, corpus: &Corpus, out: &Path, resume: bool, outputs: &mut Outputs) -> Result<RunResult, CliError> {
    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if resume {
        if !last.is_file() {
            return Err(CliError::data(format!("nothing to resume: {} is missing", last.display())));
        }
        Trainer::resume(&Checkpoint::load(&last)?, cfg, corpus, Some(out), None)?
    } else {
        if last.exists() || out.join(METRICS_FILE).exists() {
            return Err(CliError::usage(format!("{} already holds a run; pass --resume or choose another --out", out.display())));
        }
        for f in [CONFIG_FILE, METRICS_FILE, TIMINGS_FILE, "checkpoints", LAST_CHECKPOINT, VOCAB_FILE, CHECKSUMS_FILE] {
            outputs.file(&out.join(f))?;
        }
        write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        let trainer = Trainer::new(cfg.clone(), corpus, Some(out), None)?;
        trainer.vocab.save(&out.join(VOCAB_FILE))?;
        trainer
    };
    log::info!("training {} parameters for {} epochs", trainer.model.parameter_count(), cfg.epochs);
    if let Err(e) = trainer.fit() {
        if matches!(e, Error::NonFinite(_)) {
            outputs.keep(out.join(NONFINITE_DUMP));
        }
        return Err(e.into());
    }
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&last)?;
    let mut files = vec![out.join(CONFIG_FILE), out.join(METRICS_FILE)];
    let mut ckpts: Vec<PathBuf> = fs::read_dir(out.join("checkpoints"))?.flatten().map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "ckpt")).collect();
    ckpts.sort();
    files.extend(ckpts);
    files.push(last);
    write_atomic(&out.join(CHECKSUMS_FILE), checksum_manifest(out, &files)?.as_bytes())?;
    Ok(RunResult { epochs: trainer.epoch, last: trainer.last, checkpoint })
}

fn train(args: TrainCmd) -> Result<(), CliError> {
    let cfg = args.config.build()?;
    let corpus = load_corpus(&args.config.data)?;
    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.directory(&out)?;
    let result = run_training(&cfg, &corpus, &out, args.resume, &mut outputs)?;
    outputs.commit();
    print_json(&json!({
        "out": out.display().to_string(),
        "epochs": result.epochs,
        "config_hash": cfg.hash(),
        "losses": to_json(&result.last),
    }));
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model, Vocabulary), CliError> {
    if !path.is_file() {
        return Err(CliError::data(format!("no checkpoint at {}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let (model, vocab) = Model::from_checkpoint(&ckpt, None)?;
    Ok((ckpt, model, vocab))
}

fn metrics_json(metrics: &EvalMetrics, split: Split) -> Value {
    let mut v = to_json(metrics);
    v.as_object_mut().expect("metrics serialize to an object").insert("split".into(), json!(split.as_str()));
    v
}

fn ranked_split(model: &Model, vocab: &Vocabulary, corpus: &Corpus, split: Split) -> Result<(SplitEmbeddings, propot_core::RankedRetrieval), CliError> {
    let emb = embed_split(corpus, split, &model.encoders, vocab)?;
    let ranked = rank(&emb.queries, &emb.gallery)?;
    Ok((emb, ranked))
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let CheckpointArgs { checkpoint, data, split } = &args.source;
    let (_, model, vocab) = load_model(checkpoint)?;
    let corpus = load_corpus(data)?;
    let split = pick_split(&corpus, *split)?;
    let (emb, ranked) = ranked_split(&model, &vocab, &corpus, split)?;
    let metrics = metrics_json(&EvalMetrics::from_ranking(&ranked)?, split);
    let mut outputs = Outputs::default();
    if let Some(path) = &args.out {
        let path = resolve_output(path);
        outputs.file(&path)?;
        write_atomic(&path, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    }
    if let Some(path) = &args.rankings {
        let path = resolve_output(path);
        outputs.file(&path)?;
        let rankings: Vec<Vec<usize>> = ranked.rankings.iter().map(|r| r.iter().map(|&g| emb.image_ids[g]).collect()).collect();
        let body = json!({ "split": split.as_str(), "queries": emb.text_ids, "rankings": rankings, "scores": ranked.scores });
        write_atomic(&path, serde_json::to_string(&body)?.as_bytes())?;
    }
    outputs.commit();
    print_json(&metrics);
    Ok(())
}

fn retrieve(args: RetrieveArgs) -> Result<(), CliError> {
    let (ckpt, model, vocab) = load_model(&args.source.checkpoint)?;
    if ckpt.config.encoder_mode != EncoderMode::Toy {
        return Err(CliError::usage("free-text retrieval needs a checkpoint trained with toy encoders"));
    }
    let corpus = load_corpus(&args.source.data)?;
    let split = pick_split(&corpus, args.source.split)?;
    let emb = embed_split(&corpus, split, &model.encoders, &vocab)?;
    let gallery = emb.image_ids.len();
    if args.k == 0 || args.k > gallery {
        return Err(CliError::usage(format!("--k must be between 1 and the gallery size {gallery}")));
    }
    let tokens = vec![vocab.tokenize(&args.text)?];
    let query = EmbeddingBatch { features: model.encoders.encode_texts(&[0], &tokens)?.global, labels: vec![0], modality: Modality::Text };
    let ranked = rank(&query, &emb.gallery)?;
    let hits: Vec<Value> = ranked.rankings[0]
        .iter()
        .take(args.k)
        .enumerate()
        .map(|(pos, &g)| {
            let image = emb.image_ids[g];
            let identity = &corpus.identities()[corpus.images()[image].identity];
            json!({
                "rank": pos + 1,
                "image": image,
                "file_path": corpus.images()[image].file_path,
                "identity": identity.label,
                "score": ranked.scores[0][pos],
            })
        })
        .collect();
    print_json(&json!({ "query": args.text, "split": split.as_str(), "results": hits }));
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), CliError> {
    let (_, model, vocab) = load_model(&args.checkpoint)?;
    let corpus = load_corpus(&args.data)?;
    let splits = match args.split {
        Some(s) => vec![pick_split(&corpus, s)?],
        None => [Split::Train, Split::Val, Split::Test].into_iter().filter(|&s| !corpus.image_indices(s).is_empty() && !corpus.text_indices(s).is_empty()).collect(),
    };
    let mut entries = BTreeMap::new();
    for split in splits {
        let emb = embed_split(&corpus, split, &model.encoders, &vocab)?;
        for (&i, row) in emb.image_ids.iter().zip(emb.gallery.rows()?) {
            entries.insert(Corpus::image_key(i), row);
        }
        for (&t, row) in emb.text_ids.iter().zip(emb.queries.rows()?) {
            entries.insert(Corpus::text_key(t), row);
        }
    }
    let count = entries.len();
    let table = EmbeddingTable::new(model.encoders.dim(), entries)?;
    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.file(&out)?;
    let tmp = out.with_extension("partial");
    table.save(&tmp)?;
    fs::rename(&tmp, &out)?;
    outputs.commit();
    print_json(&json!({ "out": out.display().to_string(), "entries": count, "dim": table.dim() }));
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let base = args.config.build()?;
    if !base.uses_prototypes() {
        return Err(CliError::usage("aggregation ablation needs the prototype path; enable at least one prototype component"));
    }
    let corpus = load_corpus(&args.config.data)?;
    let split = pick_split(&corpus, args.split)?;
    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.directory(&out)?;
    let mut rows = Vec::new();
    let mut table = String::from("| Scheme | R@1 | R@5 | R@10 | mAP |\n|---|---|---|---|---|\n");
    for scheme in Aggregation::ALL {
        let cfg = TrainConfig { aggregation: scheme, ..base.clone() };
        let dir = out.join(scheme.display_name().to_ascii_lowercase());
        outputs.directory(&dir)?;
        log::info!("aggregation {}", scheme.display_name());
        let result = run_training(&cfg, &corpus, &dir, false, &mut outputs)?;
        let (model, vocab) = Model::from_checkpoint(&result.checkpoint, None)?;
        let (_, ranked) = ranked_split(&model, &vocab, &corpus, split)?;
        let m = EvalMetrics::from_ranking(&ranked)?;
        table.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} |\n",
            scheme.display_name(),
            fmt_metric(m.r1),
            fmt_metric(m.r5),
            fmt_metric(m.r10),
            100.0 * m.map
        ));
        let mut row = metrics_json(&m, split);
        row.as_object_mut().expect("object").insert("scheme".into(), json!(scheme.display_name()));
        rows.push(row);
    }
    outputs.file(&out.join("ablation.json"))?;
    outputs.file(&out.join("ablation.md"))?;
    write_atomic(&out.join("ablation.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    write_atomic(&out.join("ablation.md"), table.as_bytes())?;
    outputs.commit();
    print_text(&table);
    Ok(())
}

fn named_checkpoint(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = if stem == "last" {
        path.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned()).unwrap_or(stem)
    } else {
        stem
    };
    (name, path)
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    if args.queries == 0 || args.top == 0 {
        return Err(CliError::usage("--queries and --top must be positive"));
    }
    let corpus = load_corpus(&args.data)?;
    let split = pick_split(&corpus, args.split)?;
    let mut runs = Vec::new();
    let mut ids = None;
    for spec in &args.checkpoints {
        let (name, path) = named_checkpoint(spec);
        let (_, model, vocab) = load_model(&path)?;
        let (emb, ranked) = ranked_split(&model, &vocab, &corpus, split)?;
        ids.get_or_insert((emb.image_ids, emb.text_ids));
        runs.push((name, ranked));
    }
    let (image_ids, text_ids) = ids.expect("at least one checkpoint");
    let n = args.queries.min(text_ids.len());
    let queries: Vec<usize> = (0..n).map(|i| i * text_ids.len() / n).collect();
    let views: Vec<ReportRun<'_>> = runs.iter().map(|(name, ranked)| ReportRun { name, ranked }).collect();
    let html = render_report(&corpus, &image_ids, &text_ids, &queries, &views, args.top)?;
    let out = resolve_output(&args.out);
    let mut outputs = Outputs::default();
    outputs.file(&out)?;
    write_atomic(&out, html.as_bytes())?;
    outputs.commit();
    print_json(&json!({ "out": out.display().to_string(), "split": split.as_str(), "queries": n, "runs": runs.len() }));
    Ok(())
}
