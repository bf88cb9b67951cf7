use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use s4ecg::eval::{
    af_burden, paired_bootstrap_diff, predicted_af_burden, predicted_classes, reference_classes, sliding_window_predict,
    threshold_at_fnr, BandData, BurdenReport, MetricsReport, ScoredEpochs, DEFAULT_FNR, METRIC_UNKNOWN_MAX,
};
use s4ecg::model::{checkpoint_value_width, count_params, load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use s4ecg::pipeline::{export_dataset, load_dataset, prepare_record, split_patients, EpochDataset, EpochRecord, Partition};
use s4ecg::synth::{generate_corpus, patient_from_header, SynthSpec};
use s4ecg::tensor::Real;
use s4ecg::train::{score_records, train, LogRecord};
use s4ecg::wfdb::{list_records, read_record, Channels, RhythmClass};
use serde_json::{json, Value};

use crate::config::{parse_assignment, parse_flat, resolve, Precision, RunConfig};
use crate::manifest::{config_hash, default_path, RunManifest, CODE_VERSION};
use crate::{
    Cli, CliError, Command, CompareArgs, EvaluateArgs, PartitionArg, PlotArgs, PredictArgs, PreprocessArgs, SplitArgs,
    SynthArgs, TrainArgs,
};

const CLASSES_KEY: &str = "classes";

trait OrRuntime<T> {
    fn rt(self) -> Result<T, CliError>;
}

impl<T, E: Display> OrRuntime<T> for Result<T, E> {
    fn rt(self) -> Result<T, CliError> {
        self.map_err(CliError::runtime)
    }
}

/// What a command reports back for its manifest.
#[derive(Default)]
struct Outcome {
    config: BTreeMap<String, Value>,
    seeds: BTreeMap<String, u64>,
    outputs: Vec<PathBuf>,
    /// Manifest location when `--manifest` is not given; printed to stderr when `None`.
    manifest_path: Option<PathBuf>,
}

impl Outcome {
    fn set(&mut self, key: &str, v: impl serde::Serialize) {
        self.config.insert(key.to_string(), serde_json::to_value(v).expect("serializable"));
    }
}

pub(crate) fn execute(cli: Cli, command_line: Vec<String>) -> Result<(), CliError> {
    let t0 = Instant::now();
    let (name, outcome) = match cli.command {
        Command::Synth(a) => ("synth", synth(a)?),
        Command::Preprocess(a) => ("preprocess", preprocess(a)?),
        Command::Split(a) => ("split", split(a)?),
        Command::Train(a) => ("train", train_cmd(a)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a)?),
        Command::Predict(a) => ("predict", predict(a)?),
        Command::Plot(a) => ("plot", plot(a)?),
        Command::Compare(a) => ("compare", compare(a)?),
    };
    let manifest = RunManifest {
        command_line,
        subcommand: name.to_string(),
        config_hash: config_hash(name, &outcome.config),
        config: outcome.config,
        seeds: outcome.seeds,
        code_version: CODE_VERSION.to_string(),
        wall_seconds: t0.elapsed().as_secs_f64(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    match cli.manifest.or(outcome.manifest_path) {
        Some(path) => {
            manifest.write(&path)?;
            eprintln!("manifest: {}", path.display());
        }
        None => eprintln!("{}", serde_json::to_string_pretty(&manifest).expect("serializable")),
    }
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn parse_classes(s: &str) -> Result<Vec<RhythmClass>, CliError> {
    let mut out = Vec::new();
    for label in s.split(',').map(str::trim) {
        let c = RhythmClass::from_label(label)
            .ok_or_else(|| CliError::Usage(format!("unknown class {label:?} (expected N, AF, AFLT or SVTA)")))?;
        if out.contains(&c) {
            return Err(CliError::Usage(format!("class {label} listed twice")));
        }
        out.push(c);
    }
    Ok(out)
}

fn class_names(classes: &[RhythmClass]) -> Vec<String> {
    classes.iter().map(|c| c.label().to_string()).collect()
}

fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let v: Vec<f64> = s
        .split([',', ':'])
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--ratios expects three numbers, got {s:?}")))?;
    v.try_into().map_err(|_| CliError::Usage(format!("--ratios expects three numbers, got {s:?}")))
}

fn synth(a: SynthArgs) -> Result<Outcome, CliError> {
    let mut spec = match &a.spec {
        None => SynthSpec::desk_study(a.seed),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let parsed = if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str::<SynthSpec>(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str::<SynthSpec>(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
    };
    spec.seed = a.seed;
    if let Some(n) = a.patients {
        spec.n_patients = n;
    }
    if let Some(m) = a.minutes {
        spec.record_minutes = m;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let names = generate_corpus(&spec, &a.out).rt()?;
    println!("wrote {} records to {}", names.len(), a.out.display());
    let mut o = Outcome { manifest_path: Some(default_path(&a.out, true)), outputs: vec![a.out.clone()], ..Outcome::default() };
    o.set("spec", &spec);
    o.seeds.insert("seed".into(), a.seed);
    Ok(o)
}

fn preprocess(a: PreprocessArgs) -> Result<Outcome, CliError> {
    let classes = parse_classes(&a.classes)?;
    let names = list_records(&a.input).rt()?;
    if names.is_empty() {
        return Err(CliError::Runtime(format!("no WFDB headers in {}", a.input.display())));
    }
    let mut ds = EpochDataset::new(classes.clone());
    for name in &names {
        let rec = read_record(&a.input, name, &a.ann, Channels::First).rt()?;
        let patient = patient_from_header(&rec.header).unwrap_or_else(|| name.clone());
        ds.records.push(prepare_record(&rec, &patient, &classes).rt()?);
    }
    export_dataset(&ds, &a.out).rt()?;
    let epochs: usize = ds.records.iter().map(|r| r.n_epochs()).sum();
    println!("{} records, {} patients, {epochs} epochs -> {}", ds.records.len(), ds.patient_ids().len(), a.out.display());
    let mut o = Outcome { manifest_path: Some(default_path(&a.out, true)), outputs: vec![a.out.clone()], ..Outcome::default() };
    o.set("input", path_str(&a.input));
    o.set("classes", class_names(&classes));
    o.set("annotation", &a.ann);
    Ok(o)
}

fn split(a: SplitArgs) -> Result<Outcome, CliError> {
    let ratios = parse_ratios(&a.ratios)?;
    let mut ds = load_dataset(&a.data).rt()?;
    let s = split_patients(&ds.patient_ids(), ratios, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("patients: train {}, valid {}, test {}", s.train.len(), s.valid.len(), s.test.len());
    ds.split = Some(s);
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    export_dataset(&ds, &out).rt()?;
    let mut o = Outcome { manifest_path: Some(default_path(&out, true)), outputs: vec![out], ..Outcome::default() };
    o.set("data", path_str(&a.data));
    o.set("ratios", ratios);
    o.seeds.insert("seed".into(), a.seed);
    Ok(o)
}

fn train_config(a: &TrainArgs, n_classes: Option<usize>) -> Result<RunConfig, CliError> {
    let mut entries = Vec::new();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        entries.extend(parse_flat(&text)?);
    }
    let flags: [(&str, Option<Value>); 6] = [
        ("input_epochs", a.epochs_in.map(Value::from)),
        ("scale", a.scale.map(Value::from)),
        ("lr", a.lr.map(Value::from)),
        ("max_epochs", a.passes.map(Value::from)),
        ("micro_batch", a.micro_batch.map(Value::from)),
        ("accumulation", a.accumulation.map(Value::from)),
    ];
    entries.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    for s in &a.set {
        entries.push(parse_assignment(s)?);
    }
    entries.push(("seed".into(), Value::from(a.seed)));
    if let Some(c) = n_classes {
        entries.push(("n_classes".into(), Value::from(c)));
    }
    resolve(&entries)
}

fn train_cmd(a: TrainArgs) -> Result<Outcome, CliError> {
    let ds = match &a.data {
        Some(p) => Some(load_dataset(p).rt()?),
        None if a.dry_run => None,
        None => return Err(CliError::Usage("train needs --data (or --dry-run)".into())),
    };
    let cfg = train_config(&a, ds.as_ref().map(|d| d.classes.len()))?;
    let mut o = Outcome::default();
    o.config = cfg.flat();
    if let Some(p) = &a.data {
        o.set("data", path_str(p));
    }
    o.seeds.insert("seed".into(), a.seed);
    if a.dry_run {
        println!("input_size {}", cfg.model.input_size());
        println!("parameters {}", count_params(&cfg.model).rt()?);
        println!("{}", serde_json::to_string_pretty(&cfg).expect("serializable"));
        o.manifest_path = a.out.as_ref().map(|d| default_path(d, true));
        return Ok(o);
    }
    let (Some(ds), Some(out)) = (ds, a.out.clone()) else {
        return Err(CliError::Usage("train needs --out".into()));
    };
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    o.outputs = match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &ds, &out, a.seed)?,
        Precision::F64 => train_typed::<f64>(&cfg, &ds, &out, a.seed)?,
    };
    o.manifest_path = Some(default_path(&out, true));
    Ok(o)
}

fn train_typed<T: Real>(cfg: &RunConfig, ds: &EpochDataset, out: &Path, seed: u64) -> Result<Vec<PathBuf>, CliError> {
    let mut model = Model::<T>::new(cfg.model.clone(), seed).rt()?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut write_error = None;
    let outcome = train(&mut model, ds, &cfg.train, &mut |r: &LogRecord| {
        if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).expect("serializable")) {
            write_error.get_or_insert(e);
        }
        if r.loss.is_none() {
            let v = r.val_macro_auroc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            eprintln!("pass {} (step {}): validation macro-AUROC {v}", r.epoch, r.step);
        }
    })
    .rt()?;
    if let Some(e) = write_error {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let classes = class_names(&ds.classes).join(",");
    let mut outputs = vec![log_path];
    for (name, ck) in [("best.ckpt", &outcome.best), ("last.ckpt", &outcome.last)] {
        let mut ck = ck.clone();
        ck.extra.insert(CLASSES_KEY.into(), classes.clone());
        ck.extra.insert("seed".into(), seed.to_string());
        let path = out.join(name);
        save_checkpoint(&ck, &path).rt()?;
        outputs.push(path);
    }
    match outcome.best.validation_macro_auroc {
        Some(v) => println!("best validation macro-AUROC {v:.4} after pass {}", outcome.best.train_epoch),
        None => println!("validation macro-AUROC undefined; kept pass {}", outcome.best.train_epoch),
    }
    Ok(outputs)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

struct Loaded {
    model: AnyModel,
    config: ModelConfig,
    classes: Option<Vec<RhythmClass>>,
}

fn loaded_from<T: Real>(ck: Checkpoint<T>, wrap: fn(Model<T>) -> AnyModel) -> Result<Loaded, CliError> {
    let classes = ck.extra.get(CLASSES_KEY).map(|s| parse_classes(s)).transpose().rt()?;
    Ok(Loaded { config: ck.config.clone(), model: wrap(ck.model().rt()?), classes })
}

fn load_model(path: &Path) -> Result<Loaded, CliError> {
    match checkpoint_value_width(path).rt()? {
        4 => loaded_from(load_checkpoint::<f32>(path).rt()?, AnyModel::F32),
        8 => loaded_from(load_checkpoint::<f64>(path).rt()?, AnyModel::F64),
        w => Err(CliError::Runtime(format!("{}: unsupported {w}-byte values", path.display()))),
    }
}

impl Loaded {
    fn score(&self, ds: &EpochDataset, records: &[usize], stride: usize) -> Result<ScoredEpochs, CliError> {
        let n = self.config.input_epochs;
        match &self.model {
            AnyModel::F32(m) => score_records(m, ds, records, n, stride).rt(),
            AnyModel::F64(m) => score_records(m, ds, records, n, stride).rt(),
        }
    }

    fn predict(&self, signal: &[f32], stride: usize) -> Result<Vec<f64>, CliError> {
        let n = self.config.input_epochs;
        match &self.model {
            AnyModel::F32(m) => sliding_window_predict(m, signal, n, stride).rt(),
            AnyModel::F64(m) => sliding_window_predict(m, signal, n, stride).rt(),
        }
    }

    fn check_classes(&self, ds: &EpochDataset, path: &Path) -> Result<(), CliError> {
        if self.config.n_classes != ds.classes.len() || self.classes.as_ref().is_some_and(|c| *c != ds.classes) {
            return Err(CliError::Runtime(format!(
                "{} was trained on different classes than the dataset ({})",
                path.display(),
                class_names(&ds.classes).join(",")
            )));
        }
        Ok(())
    }
}

fn partition_records(ds: &EpochDataset, part: PartitionArg) -> Result<Vec<usize>, CliError> {
    let p = match part {
        PartitionArg::All => return Ok((0..ds.records.len()).collect()),
        PartitionArg::Train => Partition::Train,
        PartitionArg::Valid => Partition::Valid,
        PartitionArg::Test => Partition::Test,
    };
    let recs = ds.records_in(p).map_err(|e| CliError::Runtime(format!("{e}; run `s4ecg split` first")))?;
    if recs.is_empty() {
        return Err(CliError::Runtime(format!("the {part:?} partition holds no records")));
    }
    Ok(recs)
}

fn check_stride(stride: usize) -> Result<(), CliError> {
    if stride == 0 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome, CliError> {
    check_stride(a.stride)?;
    let bootstrap = match (a.bootstrap, a.seed) {
        (0, _) => None,
        (n, Some(seed)) => Some((n, seed)),
        (_, None) => return Err(CliError::Usage("--bootstrap needs an explicit --seed".into())),
    };
    let loaded = load_model(&a.ckpt)?;
    let ds = load_dataset(&a.data).rt()?;
    loaded.check_classes(&ds, &a.ckpt)?;
    let records = partition_records(&ds, a.partition)?;
    let scored = loaded.score(&ds, &records, a.stride)?;
    let kept = scored.excluding_unknown(METRIC_UNKNOWN_MAX);
    let c = ds.classes.len();
    // Per-class operating points at the target FNR, fitted on the evaluated epochs.
    let thresholds: Vec<f64> = (0..c)
        .map(|j| threshold_at_fnr(&kept.class_scores(j), &kept.class_labels(j), DEFAULT_FNR).unwrap_or(0.5))
        .collect();
    let af = ds.classes.iter().position(|&k| k == RhythmClass::AtrialFibrillation);
    let names = class_names(&ds.classes);
    let mut burden = Vec::new();
    let mut outputs = vec![a.report.clone()];
    if let Some(dir) = &a.bands {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut offset = 0;
    for &r in &records {
        let rec = &ds.records[r];
        let e = rec.n_epochs();
        let probs = &scored.scores[offset * c..(offset + e) * c];
        offset += e;
        if e == 0 {
            continue;
        }
        if let Some(j) = af {
            let actual: Vec<f64> = (0..e).map(|i| rec.labels.epoch(i)[j]).collect();
            let predicted: Vec<f64> = probs.iter().skip(j).step_by(c).copied().collect();
            burden.push(BurdenReport {
                record: rec.record_name.clone(),
                actual: af_burden(&actual).rt()?,
                predicted: predicted_af_burden(&predicted, thresholds[j]).rt()?,
            });
        }
        if let Some(dir) = &a.bands {
            let mut band = BandData::new(names.clone());
            band.add_row("reference", reference_classes(&rec.labels.fractions, &rec.labels.unknown, c)).rt()?;
            band.add_row("model", predicted_classes(probs, &thresholds)).rt()?;
            let (svg, csv) = (dir.join(format!("{}.svg", rec.record_name)), dir.join(format!("{}.csv", rec.record_name)));
            band.write(&svg, Some(&csv)).rt()?;
            outputs.extend([csv, svg]);
        }
    }
    let report = MetricsReport::from_scored(&kept, &names, af, burden, bootstrap).rt()?;
    write_json(&a.report, &report)?;
    println!("macro-AUROC {:.4}", report.macro_auroc);
    match report.af_specificity_at_sensitivity {
        Some(v) => println!("AF specificity@0.9 sensitivity {v:.4}"),
        None => println!("AF specificity@0.9 sensitivity undefined"),
    }
    let mut o = Outcome { manifest_path: Some(default_path(&a.report, false)), outputs, ..Outcome::default() };
    o.set("checkpoint", path_str(&a.ckpt));
    o.set("data", path_str(&a.data));
    o.set("partition", format!("{:?}", a.partition).to_lowercase());
    o.set("stride", a.stride);
    o.set("bootstrap", a.bootstrap);
    if let Some(seed) = a.seed {
        o.seeds.insert("seed".into(), seed);
    }
    Ok(o)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn predict(a: PredictArgs) -> Result<Outcome, CliError> {
    check_stride(a.stride)?;
    let loaded = load_model(&a.ckpt)?;
    let (classes, records): (Vec<RhythmClass>, Vec<EpochRecord>) = match (&a.data, &a.input) {
        (Some(p), _) => {
            let ds = load_dataset(p).rt()?;
            loaded.check_classes(&ds, &a.ckpt)?;
            let idx = partition_records(&ds, a.partition)?;
            let classes = ds.classes.clone();
            let mut records = ds.records;
            let keep: Vec<EpochRecord> = idx.iter().map(|&i| std::mem::replace(&mut records[i], empty_record())).collect();
            (classes, keep)
        }
        (None, Some(dir)) => {
            let classes = loaded.classes.clone().ok_or_else(|| {
                CliError::Runtime(format!("{} does not record its class list; use --data", a.ckpt.display()))
            })?;
            let mut records = Vec::new();
            for name in list_records(dir).rt()? {
                let rec = read_record(dir, &name, &a.ann, Channels::First).rt()?;
                let patient = patient_from_header(&rec.header).unwrap_or_else(|| name.clone());
                records.push(prepare_record(&rec, &patient, &classes).rt()?);
            }
            (classes, records)
        }
        (None, None) => return Err(CliError::Usage("predict needs --data or --input".into())),
    };
    let mut csv = String::from("record,epoch");
    for c in &classes {
        csv.push_str(&format!(",p_{}", c.label()));
    }
    csv.push('\n');
    let c = classes.len();
    for rec in &records {
        let probs = loaded.predict(&rec.signal, a.stride)?;
        for (e, row) in probs.chunks(c).enumerate() {
            csv.push_str(&format!("{},{e}", rec.record_name));
            for p in row {
                csv.push_str(&format!(",{p:.6}"));
            }
            csv.push('\n');
        }
    }
    fs::write(&a.out, csv).map_err(|e| CliError::io(&a.out, e))?;
    println!("{} records scored -> {}", records.len(), a.out.display());
    let mut o = Outcome { manifest_path: Some(default_path(&a.out, false)), outputs: vec![a.out.clone()], ..Outcome::default() };
    o.set("checkpoint", path_str(&a.ckpt));
    o.set("data", a.data.as_deref().map(path_str));
    o.set("input", a.input.as_deref().map(path_str));
    o.set("partition", format!("{:?}", a.partition).to_lowercase());
    o.set("stride", a.stride);
    Ok(o)
}

fn empty_record() -> EpochRecord {
    EpochRecord {
        record_name: String::new(),
        patient_id: String::new(),
        signal: Vec::new(),
        labels: s4ecg::pipeline::FractionLabels::empty(0),
    }
}

fn plot(a: PlotArgs) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(&a.band).map_err(|e| CliError::io(&a.band, e))?;
    let band = BandData::from_csv(&text, None).map_err(|e| CliError::Usage(format!("{}: {e}", a.band.display())))?;
    band.write(&a.out, None).rt()?;
    for (name, n) in band.fragmentation_counts() {
        println!("{name}: {n} class changes");
    }
    let mut o = Outcome { manifest_path: Some(default_path(&a.out, false)), outputs: vec![a.out.clone()], ..Outcome::default() };
    o.set("band", path_str(&a.band));
    Ok(o)
}

fn compare(a: CompareArgs) -> Result<Outcome, CliError> {
    check_stride(a.stride)?;
    if a.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let ds = load_dataset(&a.data).rt()?;
    let records = partition_records(&ds, a.partition)?;
    let mut kept = Vec::new();
    let mut summary = Vec::new();
    for path in [&a.ckpt_a, &a.ckpt_b] {
        let m = load_model(path)?;
        m.check_classes(&ds, path)?;
        let s = m.score(&ds, &records, a.stride)?.excluding_unknown(METRIC_UNKNOWN_MAX);
        let auc = s.macro_auroc().rt()?;
        summary.push(json!({ "checkpoint": path_str(path), "input_epochs": m.config.input_epochs, "macro_auroc": auc }));
        kept.push(s);
    }
    let diff = paired_bootstrap_diff(&kept[0], &kept[1], |s| s.macro_auroc(), a.iters, a.seed).rt()?;
    let report = json!({ "a": summary[0], "b": summary[1], "difference": diff });
    write_json(&a.report, &report)?;
    println!(
        "macro-AUROC A {:.4}  B {:.4}  A-B {:+.4} [{:+.4}, {:+.4}]{}",
        summary[0]["macro_auroc"].as_f64().unwrap_or(f64::NAN),
        summary[1]["macro_auroc"].as_f64().unwrap_or(f64::NAN),
        diff.ci.point,
        diff.ci.lo,
        diff.ci.hi,
        if diff.significant { " (interval excludes 0)" } else { "" }
    );
    let mut o = Outcome { manifest_path: Some(default_path(&a.report, false)), outputs: vec![a.report.clone()], ..Outcome::default() };
    o.set("checkpoint_a", path_str(&a.ckpt_a));
    o.set("checkpoint_b", path_str(&a.ckpt_b));
    o.set("data", path_str(&a.data));
    o.set("partition", format!("{:?}", a.partition).to_lowercase());
    o.set("stride", a.stride);
    o.set("iters", a.iters);
    o.seeds.insert("seed".into(), a.seed);
    Ok(o)
}
