use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use advwasm::attack::{attack_binary, transfer_evaluate, AttackReport, TransferSample};
use advwasm::cnn::{
    kfold_train, load_model, save_model, train as train_model, Architecture, CnnModel, TrainConfig,
    TrainReport, METRICS_CSV_HEADER,
};
use advwasm::dataset::{
    balance, ingest_dir, ingest_manifest, label_with_model, synth_corpus, to_labeled_images, write_manifest,
    write_skip_report, Ingested, ManifestEntry, Sample, SourceLabel,
};
use advwasm::gadgets::{insert_gadgets, surviving_payloads, GadgetKind};
use advwasm::imaging::classify_transform;
use advwasm::report::{aggregate, iterations_by_density, iterations_csv, Observation};
use advwasm::wasm::{count_instructions, parse_module};
use advwasm::{Error, Model, Scalar};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::{
    AttackArgs, BenchArgs, ClassifyArgs, CorpusArgs, EvaluateArgs, Failure, InstrumentArgs, Precision, RunConfig,
    SynthArgs, TrainArgs,
};

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    write(path, serde_json::to_vec_pretty(value)?)
}

/// `out.wasm` -> `out.wasm.<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_corpus(args: &CorpusArgs) -> Result<Ingested, Error> {
    match (&args.corpus, &args.manifest) {
        (Some(dir), _) => ingest_dir(dir),
        (None, Some(manifest)) => ingest_manifest(manifest),
        (None, None) => Err(Error::InvalidConfig("either --corpus or --manifest is required".into())),
    }
}

fn quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

fn shell(cmd: &str) -> Result<(), Failure> {
    let status = Process::new("sh")
        .arg("-c")
        .arg(cmd)
        .status()
        .map_err(|e| Failure::External(format!("{cmd}: {e}")))?;
    if status.success() {
        Ok(())
    } else {
        Err(Failure::External(format!("{cmd}: {status}")))
    }
}

pub fn instrument(a: InstrumentArgs, seed: u64) -> CmdResult {
    let kind = GadgetKind::from(a.gadget);
    let mut rc = RunConfig::new("instrument", seed);
    rc.inputs = vec![a.input.clone()];
    rc.output = Some(a.output.clone());
    rc.densities = vec![a.density];
    rc.gadgets = vec![kind];
    rc.optimizer_cmd = a.optimizer_cmd.clone();

    let original = read(&a.input)?;
    let module = parse_module(&original)?;
    let instructions = count_instructions(&module);
    let (inst, map) = insert_gadgets(&module, kind, a.density, seed)?;
    let bytes = inst.encode();
    write(&a.output, &bytes)?;

    let optimizer = match &a.optimizer_cmd {
        None => None,
        Some(template) => {
            let mut marked = bytes.clone();
            let markers = map.fill_markers(&mut marked, seed);
            let marked_path = sidecar(&a.output, "marked.wasm");
            let opt_path = sidecar(&a.output, "opt.wasm");
            write(&marked_path, &marked)?;
            let cmd = if template.contains("{in}") {
                template.replace("{in}", &quote(&marked_path)).replace("{out}", &quote(&opt_path))
            } else {
                format!("{template} {} -o {}", quote(&marked_path), quote(&opt_path))
            };
            shell(&cmd)?;
            let optimized = read(&opt_path)?;
            let surviving = surviving_payloads(&optimized, &markers);
            println!("optimizer kept {surviving} of {} {kind} payloads", markers.len());
            Some(json!({
                "command": cmd,
                "optimized_path": opt_path,
                "optimized_len": optimized.len(),
                "surviving_payloads": surviving,
                "total_payloads": markers.len(),
            }))
        }
    };

    write_json(
        &sidecar(&a.output, "payloadmap.json"),
        &json!({
            "run_config": rc,
            "payload_map": map,
            "instructions": instructions,
            "original_len": original.len(),
            "instrumented_len": bytes.len(),
            "optimizer": optimizer,
        }),
    )?;
    println!(
        "{} gadgets, {} -> {} bytes",
        map.gadget_count,
        original.len(),
        bytes.len()
    );
    Ok(())
}

pub fn train(a: TrainArgs, seed: u64) -> CmdResult {
    let mut rc = RunConfig::new("train", seed);
    rc.inputs = a.corpus.corpus.iter().chain(&a.corpus.manifest).cloned().collect();
    rc.output = Some(a.out_dir.clone());
    rc.epochs = Some(a.epochs);
    rc.k = Some(a.k);
    rc.extra.insert("learning_rate".into(), json!(a.learning_rate));
    rc.extra.insert("batch_size".into(), json!(a.batch_size));
    rc.extra.insert("precision".into(), json!(a.precision));
    rc.extra.insert("balance".into(), json!(a.balance));
    rc.extra.insert("label_with".into(), json!(a.label_with));

    let ingested = load_corpus(&a.corpus)?;
    create_dir(&a.out_dir)?;
    if !ingested.skipped.is_empty() {
        eprintln!("skipped {} unparseable files", ingested.skipped.len());
        write_skip_report(&ingested.skipped, &a.out_dir.join("skipped.csv"))?;
    }
    let mut samples = ingested.samples;
    if let Some(path) = &a.label_with {
        let labeller: Model = load_model(path)?;
        samples = label_with_model(&samples, &labeller)?;
    }
    if a.balance {
        samples = balance(&samples, seed)?;
    }
    match a.precision {
        Precision::F32 => train_with::<f32>(&a, &samples, seed, &rc),
        Precision::F64 => train_with::<f64>(&a, &samples, seed, &rc),
    }
}

fn train_with<S: Scalar>(a: &TrainArgs, samples: &[Sample], seed: u64, rc: &RunConfig) -> CmdResult {
    let data = to_labeled_images::<S>(samples)?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        seed,
        ..TrainConfig::default()
    };
    let arch = Architecture::reference();
    let mut reports: Vec<TrainReport> = Vec::new();
    let mut models = Vec::new();
    if a.k >= 2 {
        let folds = kfold_train(&data, a.k, &arch, &config, |fold, m, _| {
            eprintln!("fold {fold} epoch {} loss {:.4} val_auc {:?}", m.epoch, m.loss, m.val_auc);
        })?;
        for f in folds {
            let path = a.out_dir.join(format!("fold{}.model", f.fold));
            save_model(&f.model, &path)?;
            models.push(path);
            reports.push(f.report);
        }
    } else if a.k == 1 {
        let mut model = CnnModel::<S>::init(arch, seed)?;
        let report = train_model(&mut model, &data, &[], &config, |m, _| {
            eprintln!("epoch {} loss {:.4} auc {:?}", m.epoch, m.loss, m.auc);
        })?;
        let path = a.out_dir.join("model.model");
        save_model(&model, &path)?;
        models.push(path);
        reports.push(report);
    } else {
        return Err(Error::InvalidFolds(a.k).into());
    }

    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    for r in &reports {
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write(&a.out_dir.join("metrics.csv"), csv)?;
    write_json(
        &a.out_dir.join("train_report.json"),
        &json!({
            "run_config": rc,
            "samples": samples.len(),
            "models": models,
            "reports": reports,
        }),
    )?;
    println!("wrote {} model(s) to {}", models.len(), a.out_dir.display());
    Ok(())
}

pub fn classify(a: ClassifyArgs, seed: u64) -> CmdResult {
    let model: Model = load_model(&a.model)?;
    let rows: Vec<(String, Result<f64, String>)> = a
        .inputs
        .par_iter()
        .map(|path| {
            let score = (|| -> Result<f64, Error> {
                let bytes = read(path)?;
                parse_module(&bytes)?;
                Ok(model.forward(&classify_transform::<f64>(&bytes)?)?)
            })();
            (path.display().to_string(), score.map_err(|e| e.to_string()))
        })
        .collect();
    let mut csv = String::from("path,score,class,error\n");
    for (path, r) in &rows {
        match r {
            Ok(s) => writeln!(csv, "{path},{s},{},", u8::from(*s >= 0.5)),
            Err(e) => writeln!(csv, "{path},,,\"{}\"", e.replace('"', "\"\"")),
        }
        .expect("string write");
    }
    match &a.output {
        None => print!("{csv}"),
        Some(out) => {
            write(out, &csv)?;
            let mut rc = RunConfig::new("classify", seed);
            rc.inputs = a.inputs.clone();
            rc.output = Some(out.clone());
            rc.extra.insert("model".into(), json!(a.model));
            write_json(&sidecar(out, "json"), &json!({ "run_config": rc }))?;
        }
    }
    Ok(())
}

pub fn attack(a: AttackArgs, seed: u64) -> CmdResult {
    let kind = GadgetKind::from(a.gadget);
    let config = a.attack.config();
    let mut rc = RunConfig::new("attack", seed);
    rc.inputs = vec![a.input.clone()];
    rc.output = Some(a.output.clone());
    rc.densities = vec![a.density];
    rc.gadgets = vec![kind];
    rc.attack = Some(config.clone());
    rc.strict = a.strict;
    rc.extra.insert("model".into(), json!(a.model));

    let model: Model = load_model(&a.model)?;
    let bytes = read(&a.input)?;
    let mut outcome = attack_binary(&bytes, &model, kind, a.density, seed, &config)?;
    outcome.report.output_path = Some(a.output.display().to_string());
    write(&a.output, &outcome.adversarial)?;
    write_json(
        &sidecar(&a.output, "report.json"),
        &json!({
            "run_config": rc,
            "report": outcome.report,
            "payload_map": outcome.payload_map,
        }),
    )?;
    let r = &outcome.report;
    println!(
        "iterations {} score {:.3e} -> {:.3e} inference {:.3e} reached_tau {}",
        r.iterations_used, r.initial_substitute_score, r.final_substitute_score, r.inference_score, r.reached_tau
    );
    if a.strict && !r.reached_tau {
        return Err(Failure::TauNotReached);
    }
    Ok(())
}

/// Insertion seed of the `index`-th attacked sample.
fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn evaluate(a: EvaluateArgs, seed: u64) -> CmdResult {
    let config = a.attack.config();
    let kinds: Vec<GadgetKind> = a.gadget.iter().map(|&g| g.into()).collect();
    let mut rc = RunConfig::new("evaluate", seed);
    rc.inputs = a.corpus.corpus.iter().chain(&a.corpus.manifest).cloned().collect();
    rc.output = Some(a.out_dir.clone());
    rc.densities = a.density.clone();
    rc.gadgets = kinds.clone();
    rc.attack = Some(config.clone());
    rc.extra.insert("substitutes".into(), json!(a.substitutes));
    rc.extra.insert("target".into(), json!(a.target));
    rc.extra.insert("max_samples".into(), json!(a.max_samples));

    let target: Model = load_model(&a.target)?;
    let substitutes: Vec<Model> = a.substitutes.iter().map(|p| load_model(p)).collect::<Result<_, _>>()?;
    let ingested = load_corpus(&a.corpus)?;
    let malicious: Vec<&Sample> = ingested
        .samples
        .iter()
        .filter(|s| s.class() == Some(1))
        .take(a.max_samples.unwrap_or(usize::MAX))
        .collect();
    if malicious.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    create_dir(&a.out_dir)?;
    let pgm_dir = a.out_dir.join("images");
    create_dir(&pgm_dir)?;

    let mut observations = Vec::new();
    let mut reports: Vec<AttackReport> = Vec::new();
    let mut attack_lines = String::new();
    let mut by_fold = String::from("fold,kind,density,series,rate,n\n");
    for (fold, sub) in substitutes.iter().enumerate() {
        for &kind in &kinds {
            for &density in &a.density {
                let mut samples = Vec::with_capacity(malicious.len());
                let mut sub_evasions = 0;
                for (i, s) in malicious.iter().enumerate() {
                    let out = attack_binary(&s.bytes, sub, kind, density, sample_seed(seed, i), &config)?;
                    eprintln!(
                        "fold {fold} {kind} d={density} {}: iterations {} inference {:.3e}",
                        s.id, out.report.iterations_used, out.report.inference_score
                    );
                    if out.report.inference_score < 0.5 {
                        sub_evasions += 1;
                    }
                    if fold == 0 && i == 0 {
                        let stem = format!("{kind}_{density}");
                        classify_transform::<f64>(&out.instrumented)?
                            .write_pgm(&pgm_dir.join(format!("{stem}_instrumented.pgm")))?;
                        classify_transform::<f64>(&out.adversarial)?
                            .write_pgm(&pgm_dir.join(format!("{stem}_adversarial.pgm")))?;
                    }
                    let line = json!({ "fold": fold, "sample": s.id, "report": out.report });
                    attack_lines.push_str(&line.to_string());
                    attack_lines.push('\n');
                    reports.push(out.report);
                    samples.push(TransferSample {
                        kind,
                        density,
                        original: s.bytes.clone(),
                        instrumented: out.instrumented,
                        adversarial: vec![("adversarial".into(), out.adversarial)],
                    });
                }
                let mut obs: Vec<Observation> =
                    transfer_evaluate(&samples, &target)?.iter().map(Observation::from).collect();
                obs.push(Observation {
                    kind,
                    density,
                    series: "adversarial_substitute".into(),
                    value: sub_evasions as f64 / malicious.len() as f64,
                });
                for o in &obs {
                    writeln!(by_fold, "{fold},{},{},{},{},{}", o.kind, o.density, o.series, o.value, malicious.len())
                        .expect("string write");
                }
                observations.extend(obs);
            }
        }
    }

    let table = aggregate(&observations)?;
    table.write_csv(&a.out_dir.join("rates.csv"))?;
    write(&a.out_dir.join("rates_by_fold.csv"), by_fold)?;
    let iterations = iterations_by_density(&reports)?;
    write(&a.out_dir.join("iterations.csv"), iterations_csv(&iterations))?;
    write(&a.out_dir.join("attacks.jsonl"), attack_lines)?;
    write_json(
        &a.out_dir.join("evaluation.json"),
        &json!({
            "run_config": rc,
            "samples": malicious.len(),
            "rates": table,
            "iterations": iterations,
        }),
    )?;
    print!("{}", table.to_csv());
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_runtime(template: &str, wasm: &Path, repetitions: usize) -> Result<f64, Failure> {
    let cmd = if template.contains("{}") {
        template.replace("{}", &quote(wasm))
    } else {
        format!("{template} {}", quote(wasm))
    };
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        shell(&cmd)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

#[derive(Serialize)]
struct BenchRow {
    kind: GadgetKind,
    density: f64,
    gadgets: usize,
    original_bytes: usize,
    instrumented_bytes: usize,
    size_ratio: f64,
    baseline_seconds: Option<f64>,
    instrumented_seconds: Option<f64>,
    relative_time: Option<f64>,
}

pub fn bench(a: BenchArgs, seed: u64) -> CmdResult {
    let kinds: Vec<GadgetKind> = a.gadget.iter().map(|&g| g.into()).collect();
    let mut rc = RunConfig::new("bench", seed);
    rc.inputs = vec![a.input.clone()];
    rc.output = Some(a.output.clone());
    rc.densities = a.density.clone();
    rc.gadgets = kinds.clone();
    rc.runtime_cmd = a.runtime_cmd.clone();
    rc.extra.insert("repetitions".into(), json!(a.repetitions));
    if a.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be at least 1".into()).into());
    }

    let original = read(&a.input)?;
    let module = parse_module(&original)?;
    let scratch = tempfile::tempdir().map_err(|e| Error::Io { path: std::env::temp_dir(), source: e })?;
    let baseline = match &a.runtime_cmd {
        Some(cmd) => Some(time_runtime(cmd, &a.input, a.repetitions)?),
        None => {
            eprintln!("notice: no runtime configured (--runtime-cmd); timing skipped, size ratios only");
            None
        }
    };
    let mut rows = Vec::new();
    for &kind in &kinds {
        for &density in &a.density {
            let (inst, map) = insert_gadgets(&module, kind, density, seed)?;
            let bytes = inst.encode();
            let instrumented_seconds = match &a.runtime_cmd {
                Some(cmd) => {
                    let path = scratch.path().join(format!("{kind}_{density}.wasm"));
                    write(&path, &bytes)?;
                    Some(time_runtime(cmd, &path, a.repetitions)?)
                }
                None => None,
            };
            rows.push(BenchRow {
                kind,
                density,
                gadgets: map.gadget_count,
                original_bytes: original.len(),
                instrumented_bytes: bytes.len(),
                size_ratio: bytes.len() as f64 / original.len() as f64,
                baseline_seconds: baseline,
                instrumented_seconds,
                relative_time: baseline.zip(instrumented_seconds).map(|(b, t)| t / b),
            });
        }
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from(
        "kind,density,gadgets,original_bytes,instrumented_bytes,size_ratio,baseline_seconds,instrumented_seconds,relative_time\n",
    );
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.kind,
            r.density,
            r.gadgets,
            r.original_bytes,
            r.instrumented_bytes,
            r.size_ratio,
            opt(r.baseline_seconds),
            opt(r.instrumented_seconds),
            opt(r.relative_time)
        )
        .expect("string write");
    }
    write(&a.output, &csv)?;
    write_json(&sidecar(&a.output, "json"), &json!({ "run_config": rc, "rows": rows }))?;
    print!("{csv}");
    Ok(())
}

pub fn synth(a: SynthArgs, seed: u64) -> CmdResult {
    if a.n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()).into());
    }
    let mut rc = RunConfig::new("synth", seed);
    rc.output = Some(a.out_dir.clone());
    rc.extra.insert("n".into(), json!(a.n));
    rc.extra.insert("size_range".into(), json!([a.min_size, a.max_size]));
    let mut entries = Vec::new();
    for class in [SourceLabel::Benign, SourceLabel::Malicious] {
        let dir = a.out_dir.join(class.as_str());
        create_dir(&dir)?;
        for s in synth_corpus(seed, a.n, (a.min_size, a.max_size), class) {
            let rel = PathBuf::from(class.as_str()).join(format!("{}.wasm", s.id));
            write(&a.out_dir.join(&rel), &s.bytes)?;
            entries.push(ManifestEntry {
                path: rel,
                label: Some(class),
                source: s.provenance,
            });
        }
    }
    write_manifest(&entries, &a.out_dir.join("manifest.jsonl"))?;
    write_json(&a.out_dir.join("synth.json"), &json!({ "run_config": rc }))?;
    println!("wrote {} modules to {}", entries.len(), a.out_dir.display());
    Ok(())
}
