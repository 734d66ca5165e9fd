use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use karma_core::evalkit::{compare_generators, evaluate, sink_profile, write_pgm, MetricsReport};
use karma_core::model::{
    capture_attention, write_records_jsonl, AttentionSource, CaptureInput, CaptureSelector, CheckpointFile, KarmaModel,
};
use karma_core::synthdata::{
    read_catalog_jsonl, read_sessions_jsonl, split_chronological, write_catalog_jsonl, write_sessions_jsonl, Catalog,
    Dataset, Session, Split,
};
use karma_core::trainer::{Stage, TrainConfig, TrainState, Trainer, Variant, LOG_HEADER};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{CliError, ExperimentConfig};

pub struct Data {
    pub catalog: Catalog,
    pub sessions: Vec<Session>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    holdout_fraction: f64,
    train_sessions: usize,
    train_examples: usize,
    eval_targets: usize,
    catalog_sha256: String,
    sessions_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let ds = Dataset::generate(&cfg.data, cfg.holdout_fraction)?;
    let dir = data_dir(&cfg.output_root());
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    cfg.echo(&dir)?;
    let mut catalog = Vec::new();
    write_catalog_jsonl(&ds.catalog, &mut catalog)?;
    let mut sessions = Vec::new();
    write_sessions_jsonl(&ds.sessions, &mut sessions)?;
    fs::write(dir.join("catalog.jsonl"), &catalog)?;
    fs::write(dir.join("sessions.jsonl"), &sessions)?;
    let examples: usize = ds.split.train.iter().map(|s| s.steps.len().saturating_sub(1)).sum();
    let manifest = SplitManifest {
        holdout_fraction: cfg.holdout_fraction,
        train_sessions: ds.split.train.len(),
        train_examples: examples,
        eval_targets: ds.split.eval.len(),
        catalog_sha256: sha256_hex(&catalog),
        sessions_sha256: sha256_hex(&sessions),
    };
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let steps: usize = ds.sessions.iter().map(|s| s.steps.len()).sum();
    println!(
        "items={} users={} steps={} train_examples={} eval_targets={} dir={}",
        ds.catalog.len(),
        ds.sessions.len(),
        steps,
        examples,
        ds.split.eval.len(),
        dir.display()
    );
    Ok(())
}

pub fn load_data(root: &Path) -> Result<Data, CliError> {
    let dir = data_dir(root);
    let open = |name: &str| {
        File::open(dir.join(name)).map(BufReader::new).map_err(|e| {
            CliError::Usage(format!(
                "cannot open {}: {e} (run gen-data first)",
                dir.join(name).display()
            ))
        })
    };
    let catalog = read_catalog_jsonl(open("catalog.jsonl")?)?;
    let sessions = read_sessions_jsonl(open("sessions.jsonl")?, catalog.len())?;
    let manifest: SplitManifest = serde_json::from_reader(open("split.json")?)?;
    let split = split_chronological(&sessions, manifest.holdout_fraction)?;
    if split.eval.len() != manifest.eval_targets {
        return Err(CliError::Usage("split.json does not match sessions.jsonl".into()));
    }
    Ok(Data {
        catalog,
        sessions,
        split,
    })
}

pub fn run_tag(train: &TrainConfig) -> String {
    format!("{}-seed{}", train.variant.to_string().replace(':', "-"), train.seed)
}

fn stage_rank(s: &str) -> Option<u8> {
    match s {
        "warmup" => Some(0),
        "joint" => Some(1),
        _ => None,
    }
}

/// Keeps the log rows that precede `state`, so a resumed run appends
/// exactly the rows a straight run would have written.
fn truncate_log(path: &Path, state: TrainState) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    let Ok(text) = fs::read_to_string(path) else {
        return out;
    };
    let limit = match state.stage {
        Stage::Warmup => (0, state.step),
        Stage::Joint => (1, state.step),
        Stage::Done => (2, 0),
    };
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        let (Some(stage), Some(step)) = (
            cells.next().and_then(stage_rank),
            cells.next().and_then(|s| s.parse().ok()),
        ) else {
            continue;
        };
        if (stage, step) < limit {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

pub struct TrainOutcome {
    pub model: KarmaModel<f32>,
    pub final_checkpoint: PathBuf,
    pub sha256: String,
}

/// Trains one run into `dir`: `config.json`, `log.csv`, interval
/// checkpoints and `final.ckpt`.
pub fn train_run(
    cfg: &ExperimentConfig,
    data: &Data,
    dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    fs::create_dir_all(dir)?;
    let mut trainer = match resume {
        Some(p) => {
            let file = CheckpointFile::read(p)?;
            Trainer::resume(&file, &data.catalog, &data.split.train)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &data.catalog, &data.split.train)?,
    };
    let mut echoed = cfg.clone();
    echoed.model = trainer.model.config.clone();
    echoed.train = trainer.config.clone();
    echoed.echo(dir)?;

    let log_path = dir.join("log.csv");
    let kept = match resume {
        Some(_) => truncate_log(&log_path, trainer.state()),
        None => format!("{LOG_HEADER}\n"),
    };
    let mut log = BufWriter::new(File::create(&log_path)?);
    log.write_all(kept.as_bytes())?;
    let every = cfg.checkpoint_every;
    let result = loop {
        let rec = match trainer.step() {
            Ok(Some(r)) => r,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        writeln!(log, "{}", rec.csv_row())?;
        if every > 0 && (rec.step + 1) % every == 0 {
            log.flush()?;
            trainer
                .checkpoint()
                .write(&dir.join(format!("ckpt-{}-{}.bin", rec.stage, rec.step + 1)))?;
        }
    };
    log.flush()?;
    result?;
    let ckpt = trainer.checkpoint();
    let bytes = ckpt.to_bytes();
    let path = dir.join("final.ckpt");
    fs::write(&path, &bytes)?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        final_checkpoint: path,
        sha256: sha256_hex(&bytes),
    })
}

pub struct TrainArgs {
    pub variant: Option<Variant>,
    pub lambda_dec: Option<f64>,
    pub lambda_img: Option<f64>,
    pub seed: Option<u64>,
    pub warmup_steps: Option<usize>,
    pub joint_steps: Option<usize>,
    pub resume: Option<PathBuf>,
}

pub fn train(mut cfg: ExperimentConfig, args: &TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(v) = args.variant {
        t.variant = v;
    }
    if let Some(x) = args.lambda_dec {
        t.weights.lambda_dec = x;
    }
    if let Some(x) = args.lambda_img {
        t.weights.lambda_img = x;
    }
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(n) = args.warmup_steps {
        t.warmup_steps = n;
    }
    if let Some(n) = args.joint_steps {
        t.joint_steps = n;
    }
    cfg.validate()?;
    let root = cfg.output_root();
    let data = load_data(&root)?;
    let tag = match &args.resume {
        Some(p) => {
            let f = CheckpointFile::read(p)?;
            let train: TrainConfig = f
                .meta
                .get("train")
                .cloned()
                .map(serde_json::from_value)
                .transpose()?
                .ok_or_else(|| CliError::Usage("checkpoint lacks a training config".into()))?;
            run_tag(&train)
        }
        None => run_tag(&cfg.train),
    };
    let dir = root.join("runs").join(tag);
    let out = train_run(&cfg, &data, &dir, args.resume.as_deref())?;
    println!(
        "final checkpoint {} sha256 {}",
        out.final_checkpoint.display(),
        out.sha256
    );
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(KarmaModel<f32>, CheckpointFile), CliError> {
    let file = CheckpointFile::read(path)?;
    let mut model = KarmaModel::new(file.model_config()?)?;
    model.import_params(&file, "param/")?;
    Ok((model, file))
}

fn check_compatible(model: &KarmaModel<f32>, data: &Data) -> Result<(), CliError> {
    let c = &model.config;
    let cat = &data.catalog;
    if cat.vocab_size > c.vocab_size || cat.item_len != c.item_len {
        return Err(CliError::Usage(format!(
            "checkpoint (vocab {}, item_len {}) is incompatible with the dataset (vocab {}, item_len {})",
            c.vocab_size, c.item_len, cat.vocab_size, cat.item_len
        )));
    }
    if c.use_query {
        if let Some(e) = data.split.eval.iter().find(|e| e.query_id as usize >= c.num_queries) {
            return Err(CliError::Usage(format!(
                "query id {} exceeds the checkpoint's {}",
                e.query_id, c.num_queries
            )));
        }
    }
    Ok(())
}

fn clamp_ks(ks: &[usize], n: usize, what: &str) -> Vec<usize> {
    let mut out: Vec<usize> = ks
        .iter()
        .map(|&k| {
            if k > n {
                log::warn!("{what} K = {k} exceeds the catalog size {n}; clamped to {n}");
                eprintln!("warning: {what} K = {k} exceeds the catalog size {n}; clamped to {n}");
                n
            } else {
                k
            }
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn run_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("{}-{stem}", parent.to_string_lossy()),
        None => stem,
    }
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(reports)? + "\n")?;
    let mut csv = Vec::new();
    MetricsReport::write_csv(reports, &mut csv)?;
    fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

/// Evaluates `model` with the config's options, K clamped to the catalog.
pub fn eval_model(cfg: &ExperimentConfig, model: &KarmaModel<f32>, data: &Data) -> Result<MetricsReport, CliError> {
    let n = data.catalog.len();
    let mut opts = cfg.eval.clone();
    opts.hr_ks = clamp_ks(&opts.hr_ks, n, "HR");
    opts.js_ks = clamp_ks(&opts.js_ks, n, "JS");
    let report = evaluate(model, &data.catalog, &data.split.eval, &opts)?;
    if report.head_calls != 0 {
        return Err(CliError::Usage(format!(
            "train-only heads ran {} times during eval",
            report.head_calls
        )));
    }
    Ok(report)
}

fn tag_report(report: &mut MetricsReport, file: &CheckpointFile) {
    let train: Option<TrainConfig> = file
        .meta
        .get("train")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let state: Option<TrainState> = file
        .meta
        .get("state")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    if let Some(t) = train {
        report.variant = t.variant.to_string();
        report.seed = t.seed;
        report.step = match state {
            Some(TrainState {
                stage: Stage::Warmup,
                step,
            }) => step,
            Some(TrainState {
                stage: Stage::Joint,
                step,
            }) => t.warmup_steps + step,
            _ => t.warmup_steps * usize::from(!t.cold_start) + t.joint_steps,
        };
    }
}

pub fn eval(mut cfg: ExperimentConfig, checkpoint: &Path, ks: Option<Vec<usize>>) -> Result<(), CliError> {
    if let Some(ks) = ks {
        cfg.eval.hr_ks = ks;
    }
    cfg.validate()?;
    let root = cfg.output_root();
    let data = load_data(&root)?;
    let (model, file) = load_model(checkpoint)?;
    check_compatible(&model, &data)?;
    let mut report = eval_model(&cfg, &model, &data)?;
    tag_report(&mut report, &file);
    let dir = root.join("eval").join(run_name(checkpoint));
    cfg.echo(&dir)?;
    write_reports(&dir, std::slice::from_ref(&report))?;
    let fmt = |m: &BTreeMap<usize, f64>, name: &str| {
        m.iter()
            .map(|(k, v)| format!("{name}@{k}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!(
        "{} {} gauc={} targets={}",
        fmt(&report.hr, "hr"),
        fmt(&report.js, "js"),
        report.gauc.map_or("undefined".into(), |g| format!("{g:.4}")),
        report.targets
    );
    println!(
        "train-only head calls during eval: {} (contract holds)",
        report.head_calls
    );
    println!("report {}", dir.join("report.json").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table3,
}

pub const TABLE1_ROWS: [(&str, Variant); 5] = [
    ("action-only", Variant::ActionOnly),
    ("+task1", Variant::Task1),
    ("+task2", Variant::Task2),
    ("karma", Variant::Karma),
    ("+visual", Variant::KarmaMm),
];

pub const TABLE3_ROWS: [&str; 4] = ["AR+MSE", "AR+DDPM", "AR+EDM", "AR+Flow-Matching"];

/// One aggregated row: seed medians and their differences from the
/// baseline's medians (absolute, in metric units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub row: String,
    pub seeds: usize,
    pub missing: Vec<u64>,
    pub median: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: String,
    pub baseline: String,
    pub baseline_median: BTreeMap<String, f64>,
    pub rows: Vec<TableRow>,
    pub cells: Vec<MetricsReport>,
}

fn metric_map(r: &MetricsReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in &r.hr {
        m.insert(format!("hr@{k}"), *v);
    }
    for (k, v) in &r.js {
        m.insert(format!("js@{k}"), *v);
    }
    if let Some(g) = r.gauc {
        m.insert("gauc".into(), g);
    }
    if let Some(s) = r.sink_max_mass {
        m.insert("sink_max_mass".into(), s);
    }
    m
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn medians(reports: &[&MetricsReport]) -> BTreeMap<String, f64> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in metric_map(r) {
            cols.entry(k).or_default().push(v);
        }
    }
    cols.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}

fn row(name: &str, reports: &[&MetricsReport], missing: Vec<u64>, base: &BTreeMap<String, f64>) -> TableRow {
    let median = medians(reports);
    let delta = median
        .iter()
        .filter_map(|(k, v)| base.get(k).map(|b| (k.clone(), v - b)))
        .collect();
    TableRow {
        row: name.into(),
        seeds: reports.len(),
        missing,
        median,
        delta,
    }
}

pub fn ablation(cfg: &ExperimentConfig, preset: Preset) -> Result<AblationTable, CliError> {
    cfg.validate()?;
    if cfg.seeds.len() < 3 {
        return Err(CliError::Usage(format!(
            "presets need at least 3 seeds, got {}",
            cfg.seeds.len()
        )));
    }
    let root = cfg.output_root();
    let data = load_data(&root)?;
    let name = match preset {
        Preset::Table1 => "table1",
        Preset::Table3 => "table3",
    };
    let dir = root.join("ablation").join(name);
    cfg.echo(&dir)?;
    let mut cells: Vec<(String, u64, Result<MetricsReport, String>)> = Vec::new();
    let mut base_cells: Vec<(u64, Result<MetricsReport, String>)> = Vec::new();
    for &seed in &cfg.seeds {
        match preset {
            Preset::Table1 => {
                for (label, variant) in TABLE1_ROWS {
                    let mut c = cfg.clone();
                    c.train.variant = variant;
                    c.train.seed = seed;
                    let res = train_run(&c, &data, &dir.join(run_tag(&c.train)), None)
                        .and_then(|out| {
                            let mut r = eval_model(&c, &out.model, &data)?;
                            r.variant = variant.to_string();
                            r.seed = seed;
                            r.step = c.train.warmup_steps * usize::from(!c.train.cold_start) + c.train.joint_steps;
                            Ok(r)
                        })
                        .map_err(|e| e.to_string());
                    if let Err(e) = &res {
                        eprintln!("cell {label} seed {seed} failed: {e}");
                    }
                    cells.push((label.into(), seed, res));
                }
            }
            Preset::Table3 => {
                let mut c = cfg.clone();
                c.train.variant = Variant::Karma;
                c.train.seed = seed;
                let base = train_run(&c, &data, &dir.join(run_tag(&c.train)), None);
                let (base_report, gens) = match base {
                    Ok(out) => {
                        let r = eval_model(&c, &out.model, &data).map(|mut r| {
                            r.variant = "karma".into();
                            r.seed = seed;
                            r
                        });
                        let mut g = c.generators.clone();
                        g.head.seed = seed;
                        g.eval.hr_ks = clamp_ks(&c.eval.hr_ks, data.catalog.len(), "HR");
                        g.eval.js_ks = clamp_ks(&c.eval.js_ks, data.catalog.len(), "JS");
                        let gens =
                            compare_generators(&out.model, &data.catalog, &data.split.train, &data.split.eval, &g)
                                .map_err(|e| e.to_string());
                        (r.map_err(|e| e.to_string()), gens)
                    }
                    Err(e) => (Err(e.to_string()), Err(e.to_string())),
                };
                base_cells.push((seed, base_report));
                match gens {
                    Ok(list) => {
                        for (label, g) in TABLE3_ROWS.iter().zip(list) {
                            cells.push((label.to_string(), seed, Ok(g.report)));
                        }
                    }
                    Err(e) => {
                        eprintln!("seed {seed} failed: {e}");
                        for label in TABLE3_ROWS {
                            cells.push((label.into(), seed, Err(e.clone())));
                        }
                    }
                }
            }
        }
    }
    let labels: Vec<String> = match preset {
        Preset::Table1 => TABLE1_ROWS.iter().map(|r| r.0.to_string()).collect(),
        Preset::Table3 => TABLE3_ROWS.iter().map(|r| r.to_string()).collect(),
    };
    let ok_of = |label: &str| -> (Vec<&MetricsReport>, Vec<u64>) {
        let mut ok = Vec::new();
        let mut missing = Vec::new();
        for (l, s, r) in &cells {
            if l == label {
                match r {
                    Ok(r) => ok.push(r),
                    Err(_) => missing.push(*s),
                }
            }
        }
        (ok, missing)
    };
    let (baseline, base_median) = match preset {
        Preset::Table1 => ("action-only".to_string(), medians(&ok_of("action-only").0)),
        Preset::Table3 => {
            let ok: Vec<&MetricsReport> = base_cells.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
            let mut m = medians(&ok);
            // Generator reports carry no attention profile.
            m.remove("sink_max_mass");
            ("karma".to_string(), m)
        }
    };
    let rows: Vec<TableRow> = labels
        .iter()
        .map(|l| {
            let (ok, missing) = ok_of(l);
            row(l, &ok, missing, &base_median)
        })
        .collect();
    let mut all_cells: Vec<MetricsReport> = base_cells
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().cloned())
        .collect();
    all_cells.extend(cells.iter().filter_map(|(_, _, r)| r.as_ref().ok().cloned()));
    let table = AblationTable {
        preset: name.into(),
        baseline,
        baseline_median: base_median,
        rows,
        cells: all_cells,
    };
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    let mut csv = String::from("row,seeds,missing,metric,median,delta\n");
    for r in &table.rows {
        let missing = r.missing.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
        if r.median.is_empty() {
            csv.push_str(&format!("{},0,{missing},missing,,\n", r.row));
        }
        for (k, v) in &r.median {
            let d = r.delta.get(k).map_or("missing".to_string(), |d| d.to_string());
            csv.push_str(&format!("{},{},{missing},{k},{v},{d}\n", r.row, r.seeds));
        }
    }
    fs::write(dir.join(format!("{name}.csv")), &csv)?;
    let mut cells_csv = Vec::new();
    MetricsReport::write_csv(&table.cells, &mut cells_csv)?;
    fs::write(dir.join("cells.csv"), cells_csv)?;
    print_table(&table);
    let failed: Vec<String> = cells
        .iter()
        .filter(|c| c.2.is_err())
        .map(|(l, s, _)| format!("{l}/seed{s}"))
        .chain(
            base_cells
                .iter()
                .filter(|c| c.1.is_err())
                .map(|(s, _)| format!("baseline/seed{s}")),
        )
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Partial(format!("missing cells: {}", failed.join(", "))));
    }
    Ok(table)
}

fn print_table(t: &AblationTable) {
    let keys: Vec<&String> = t.baseline_median.keys().collect();
    let mut header = format!("{:<18}", "row");
    for k in &keys {
        header.push_str(&format!(" {:>16}", format!("d{k}")));
    }
    println!("{} (delta vs {} seed medians)", t.preset, t.baseline);
    println!("{header}");
    for r in &t.rows {
        let mut line = format!("{:<18}", r.row);
        for k in &keys {
            line.push_str(&format!(
                " {:>16}",
                r.delta.get(*k).map_or("missing".to_string(), |d| format!("{d:+.4}"))
            ));
        }
        println!("{line}");
    }
}

pub fn diagnose_attention(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    items: usize,
    decoder: bool,
) -> Result<(), CliError> {
    let root = cfg.output_root();
    let data = load_data(&root)?;
    let (model, _) = load_model(checkpoint)?;
    check_compatible(&model, &data)?;
    let sample: Vec<&[u32]> = data
        .catalog
        .items
        .iter()
        .take(items.max(1))
        .map(|i| i.text_tokens.as_slice())
        .collect();
    let mut records = capture_attention(&model, &CaptureInput::Items(&sample), &CaptureSelector::all())?;
    if decoder {
        if let Some(e) = data.split.eval.first() {
            let from = e.history.len().saturating_sub(model.config.max_seq);
            let hist: Vec<&[u32]> = e.history[from..]
                .iter()
                .map(|&i| data.catalog.item(i).text_tokens.as_slice())
                .collect();
            records.extend(capture_attention(
                &model,
                &CaptureInput::History {
                    items: &hist,
                    query: Some(e.query_id),
                },
                &CaptureSelector::all(),
            )?);
        }
    }
    let profile = sink_profile(&records)?;
    let dir = root.join("diagnose").join(run_name(checkpoint));
    let pgm = dir.join("pgm");
    fs::create_dir_all(&pgm)?;
    cfg.echo(&dir)?;
    fs::write(
        dir.join("sink_profile.json"),
        serde_json::to_string_pretty(&json!({ "checkpoint": checkpoint, "items": sample.len(), "profile": profile }))?
            + "\n",
    )?;
    write_records_jsonl(BufWriter::new(File::create(dir.join("attention.jsonl"))?), &records)?;
    for r in &records {
        let src = match r.source {
            AttentionSource::ItemEncoder => "enc",
            AttentionSource::UserDecoder => "dec",
        };
        let f = File::create(pgm.join(format!("{src}-l{}-h{}-s{}.pgm", r.layer, r.head, r.sample)))?;
        write_pgm(r, BufWriter::new(f))?;
    }
    for e in &profile.entries {
        println!(
            "{:?} layer {} head {}: max_mass={:.4} entropy={:.4} gini={:.4}",
            e.source, e.layer, e.head, e.mean_max_mass, e.mean_entropy, e.gini
        );
    }
    println!("profile {}", dir.join("sink_profile.json").display());
    Ok(())
}
