//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use classkit::ablation::run_ablation;
use classkit::checkpoint::Checkpoint;
use classkit::config::RunConfig;
use classkit::data::{generate, load_dataset, write_dataset, Manifest, SaliencySample, Split};
use classkit::metrics::evaluate_dataset;
use classkit::model::ClassMini;
use classkit::netpbm::{read_pgm, read_ppm, write_bytes, write_pgm};
use classkit::suite::run_suite;
use classkit::trainer::{predict, predict_images, TrainLog, Trainer};
use classkit::{Error, Tensor};

use crate::{Command, ConfigArgs};

pub const LATEST: &str = "checkpoint.bin";
pub const STEPS_CSV: &str = "steps.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const CONFIG_TXT: &str = "config.txt";
pub const RUN_LOG: &str = "run.log";

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = std::result::Result<u8, Failure>;

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

impl ConfigArgs {
    pub fn resolve(&self) -> classkit::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(dir: &Path) -> classkit::Result<Vec<SaliencySample>> {
    load_dataset(&Manifest::read(dir)?)
}

fn write_text(path: &Path, text: &str) -> classkit::Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Appends a timestamped line to the sidecar log; the only place wall-clock
/// time is recorded.
fn log_line(out: &Path, line: &str) -> classkit::Result<()> {
    let path = out.join(RUN_LOG);
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;
    writeln!(f, "{t:.3} {line}").map_err(|e| Error::Io { path, source: e })
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::GenData { seed, count, size, start, split, out } => gen_data(seed, count, size, start, &split, &out),
        Command::Train { data, val, out, resume, cfg } => train(&data, val.as_deref(), &out, resume, &cfg),
        Command::Eval { data, pred, checkpoint, out } => eval(&data, pred.as_deref(), checkpoint.as_deref(), &out),
        Command::Gradcheck { seed, instances, filter } => gradcheck(seed, instances, filter.as_deref()),
        Command::Infer { checkpoint, images, out } => infer(&checkpoint, &images, &out),
        Command::AttnDump { checkpoint, image, out } => attn_dump(&checkpoint, &image, &out),
        Command::Ablate { data, val, out, rows, cfg } => ablate(&data, &val, &out, &rows, &cfg),
    }
}

fn gen_data(seed: u64, count: usize, size: usize, start: u64, split: &str, out: &Path) -> Outcome {
    let split: Split = split.parse().map_err(|e: Error| usage(e.to_string()))?;
    if count == 0 {
        return Err(usage("--count must be at least 1".into()));
    }
    let samples = generate(seed, start, count, size)?;
    let manifest = write_dataset(out, split, Some(seed), &samples)?;
    println!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(0)
}

/// Lines of `text` after the header whose first field is below `limit`.
fn rows_before(text: &str, limit: usize) -> Vec<String> {
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|f| f.parse::<usize>().ok()).is_some_and(|v| v < limit))
        .map(str::to_string)
        .collect()
}

fn train(data: &Path, val: Option<&Path>, out: &Path, resume: bool, args: &ConfigArgs) -> Outcome {
    let cfg = args.resolve()?;
    let train_set = load(data)?;
    let val_set = match val {
        Some(v) => load(v)?,
        None => Vec::new(),
    };
    let cfg_path = out.join(CONFIG_TXT);
    let mut kept_steps = Vec::new();
    let mut kept_epochs = Vec::new();
    let model = ClassMini::build(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, &train_set, &val_set, cfg.train.clone())?;
    if resume {
        let saved = fs::read_to_string(&cfg_path).map_err(|e| Error::Io { path: cfg_path.clone(), source: e })?;
        if saved != cfg.to_text() {
            return Err(usage(format!(
                "configuration differs from the one recorded in {}",
                cfg_path.display()
            )));
        }
        let ckpt = Checkpoint::load(&out.join(LATEST))?;
        trainer = trainer.resume(&ckpt)?;
        let step = trainer.step;
        let epoch = step / trainer.steps_per_epoch();
        let read = |name: &str| fs::read_to_string(out.join(name)).unwrap_or_default();
        kept_steps = rows_before(&read(STEPS_CSV), step);
        kept_epochs = rows_before(&read(EPOCHS_CSV), epoch);
        log_line(out, &format!("resume at step {step}"))?;
    } else {
        write_text(&cfg_path, &cfg.to_text())?;
        log_line(out, &format!("start {} train samples, {} val samples", train_set.len(), val_set.len()))?;
    }
    let total_epochs = cfg.train.epochs;
    let levels = if cfg.train.multi_stage { classkit::model::HEADS } else { 1 };
    while let Some(rec) = trainer.run_epoch()? {
        let ckpt = trainer.checkpoint();
        ckpt.save(&out.join("checkpoints").join(format!("epoch_{:03}.bin", rec.epoch)))?;
        ckpt.save(&out.join(LATEST))?;
        let mut steps = TrainLog::step_csv_header(levels) + "\n";
        for l in kept_steps.iter().cloned().chain(trainer.log.steps.iter().map(TrainLog::step_csv_row)) {
            steps += &l;
            steps.push('\n');
        }
        write_text(&out.join(STEPS_CSV), &steps)?;
        let mut epochs = format!("{}\n", TrainLog::EPOCH_CSV_HEADER);
        for l in kept_epochs.iter().cloned().chain(trainer.log.epochs.iter().map(TrainLog::epoch_csv_row)) {
            epochs += &l;
            epochs.push('\n');
        }
        write_text(&out.join(EPOCHS_CSV), &epochs)?;
        let mut line = format!("epoch {}/{} loss {:.4}", rec.epoch + 1, total_epochs, rec.mean_final);
        if let Some(v) = &rec.validation {
            let s = &v.summary;
            line += &format!(" f_max {:.4} mae {:.4} s {:.4}", s.f_max, s.mae, s.s_measure);
        }
        println!("{line}");
        log_line(out, &line)?;
    }
    log_line(out, "done")?;
    Ok(0)
}

fn eval(data: &Path, pred: Option<&Path>, checkpoint: Option<&Path>, out: &Path) -> Outcome {
    let samples = load(data)?;
    let preds: Vec<Tensor> = match (pred, checkpoint) {
        (Some(dir), _) => samples
            .iter()
            .map(|s| {
                read_pgm(&dir.join(format!("{}.pgm", s.id))).map_err(|e| Error::Sample {
                    id: s.id.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<classkit::Result<_>>()?,
        (None, Some(c)) => {
            let mut model = Checkpoint::load(c)?.build_model()?;
            predict(&mut model, &samples, 1)?
        }
        (None, None) => return Err(usage("eval needs --pred or --checkpoint".into())),
    };
    let pairs: Vec<(&str, Tensor, Tensor)> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id.as_str(), p, s.mask.clone()))
        .collect();
    let report = evaluate_dataset(&pairs)?;
    report.write(out)?;
    let s = &report.summary;
    println!(
        "{} images: f_max {:.4} f_mean {:.4} f_adaptive {:.4} mae {:.4} s {:.4}",
        report.images.len(),
        s.f_max,
        s.f_mean,
        s.f_adaptive,
        s.mae,
        s.s_measure
    );
    Ok(0)
}

fn gradcheck(seed: u64, instances: usize, filter: Option<&str>) -> Outcome {
    if instances == 0 {
        return Err(usage("--instances must be at least 1".into()));
    }
    let report = run_suite(seed, instances, filter)?;
    print!("{}", report.table());
    let failed = report.rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} cases pass", report.rows.len() - failed, report.rows.len());
    eprintln!("gradient suite took {:.1}s", report.seconds);
    Ok(if failed == 0 { 0 } else { 1 })
}

/// PPM files directly inside `dir`, sorted by name.
fn ppm_files(dir: &Path) -> classkit::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no .ppm images in {}", dir.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn infer(checkpoint: &Path, images: &Path, out: &Path) -> Outcome {
    let mut model = Checkpoint::load(checkpoint)?.build_model()?;
    let files = ppm_files(images)?;
    for file in &files {
        let id = stem(file);
        let mut run = || -> classkit::Result<()> {
            let image = read_ppm(file)?;
            let p = predict_images(&mut model, &[&image], 1)?.remove(0);
            write_pgm(&out.join(format!("{id}.pgm")), &p)
        };
        run().map_err(|e| Error::Sample { id: id.clone(), source: Box::new(e) })?;
    }
    println!("wrote {} predictions to {}", files.len(), out.display());
    Ok(0)
}

/// Writes `map` divided by its maximum, returning the maximum.
fn write_scaled(path: &Path, map: &Tensor) -> classkit::Result<f64> {
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let scaled = if max > 0.0 { map.map(|v| v / max) } else { map.clone() };
    write_pgm(path, &scaled)?;
    Ok(max)
}

fn attn_dump(checkpoint: &Path, image: &Path, out: &Path) -> Outcome {
    let mut model = Checkpoint::load(checkpoint)?.build_model()?;
    let img = read_ppm(image)?;
    let levels = model.attention_maps(&img)?;
    let mut scales = String::from("map,rows,cols,max\n");
    let mut written = 0;
    for l in &levels {
        for (kind, map) in [("position", &l.position), ("received", &l.received), ("channel", &l.channel)] {
            if let Some(m) = map {
                let name = format!("level{}_{kind}", l.level);
                let max = write_scaled(&out.join(format!("{name}.pgm")), m)?;
                scales += &format!("{name},{},{},{max}\n", m.shape()[0], m.shape()[1]);
                written += 1;
            }
        }
    }
    if written == 0 {
        return Err(Error::Contract("the checkpoint's model has no attention branches enabled".into()).into());
    }
    write_text(&out.join("scales.csv"), &scales)?;
    println!("wrote {written} attention maps to {}", out.display());
    Ok(0)
}

fn ablate(data: &Path, val: &Path, out: &Path, rows: &[usize], args: &ConfigArgs) -> Outcome {
    let base = args.resolve()?;
    let train_set = load(data)?;
    let val_set = load(val)?;
    write_text(&out.join(CONFIG_TXT), &base.to_text())?;
    log_line(out, &format!("ablate rows {rows:?}"))?;
    println!("row  flags(p r o ms c p ffm)  f_beta  s_measure  mae");
    let report = run_ablation(&base, &train_set, &val_set, rows, |r| {
        let v = r.variant;
        let flags: Vec<&str> = [v.pixel, v.region, v.object, v.multi_stage, v.channel, v.position, v.ffm]
            .iter()
            .map(|&b| if b { "x" } else { "." })
            .collect();
        println!("{:>3}  {:<22}  {:.4}  {:.4}     {:.4}", r.row, flags.join(" "), r.f_max, r.s_measure, r.mae);
        let _ = log_line(out, &format!("row {} done", r.row));
    })?;
    write_text(&out.join("results.csv"), &report.to_csv())?;
    write_text(&out.join("claims.csv"), &report.claims_csv())?;
    let claims = report.claims();
    let held = claims.iter().filter(|c| c.3).count();
    println!("{held} of {} directional comparisons hold", claims.len());
    Ok(0)
}
