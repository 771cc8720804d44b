//! `simulmega`: data generation, two-stage training, evaluation sweeps,
//! ablation grid and a read/write trace printer.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use simulmega::ablation::{run_variant, Variant};
use simulmega::config::{load_checkpoint, save_checkpoint, sidecar_path, RunConfig};
use simulmega::metrics::{
    average_lagging, curve_csv, evaluate_lambda, evaluate_offline, laal, LatencyRecord,
};
use simulmega::model::Model;
use simulmega::policy::{run_stream, Action};
use simulmega::synthdata::{generate_range, Dataset, FramedDataset};
use simulmega::training::{train_stage1, train_stage2};
use simulmega::Error;

#[derive(Parser)]
#[command(name = "simulmega", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (`key = value`, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.noise_sigma=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Train without the router-score normalization loss.
    #[arg(long)]
    no_normalization: bool,
    #[arg(long)]
    drop_offline_loss: bool,
    #[arg(long)]
    drop_prefix_loss: bool,
    /// Refiner attention: `poa` or `self`.
    #[arg(long)]
    refiner_attention: Option<String>,
    /// Comma-separated thresholds.
    #[arg(long)]
    lambdas: Option<String>,
}

impl ConfigArgs {
    /// Flags and `--set` pairs as dotted keys, in application order.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        for s in &self.sets {
            match s.split_once('=') {
                Some((k, v)) => kv.push((k.trim().to_string(), v.trim().to_string())),
                None => kv.push((s.clone(), String::new())),
            }
        }
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        if let Some(s) = self.seed {
            push("train.seed", s.to_string());
        }
        if let Some(s) = self.noise_sigma {
            push("train.noise_sigma", s.to_string());
        }
        if self.no_normalization {
            push("train.normalization", "false".into());
        }
        if self.drop_offline_loss {
            push("train.drop_offline_loss", "true".into());
        }
        if self.drop_prefix_loss {
            push("train.drop_prefix_loss", "true".into());
        }
        if let Some(m) = &self.refiner_attention {
            push("model.refiner_attention", m.clone());
        }
        if let Some(l) = &self.lambdas {
            push("eval.lambdas", l.clone());
        }
        kv
    }

    /// `base` ← config file ← flags.
    fn resolve(&self, mut base: RunConfig) -> Result<RunConfig, Failure> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Usage)?;
            base.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))
                .map_err(Failure::Usage)?;
        }
        for (k, v) in self.overrides() {
            base.set(&k, &v).map_err(|e| Failure::Usage(e.into()))?;
        }
        Ok(base)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic JSONL dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Id of the first sample; disjoint id ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        first_id: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train stage 1 (offline) or stage 2 (simultaneous).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint; the config sidecar goes to `<out>.cfg`.
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoint. Required for stage 2.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Held-out set for the offline accuracy report.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// λ sweep plus the offline reference row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Writes `curve.csv`, `summary.json`, `hypotheses.jsonl` and `config.txt`.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stream one sample and print its read/write trace.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Position of the sample in the data file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Also write the raw trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every stage-2 ablation variant from one stage-1 checkpoint.
    SweepAblation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Subset of variants, comma-separated (default: all).
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Invalid(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    require_file(path, "data file")?;
    Dataset::load_jsonl(path).map_err(|e| match e {
        Error::Io(_) => Failure::Runtime(e.into()),
        _ => Failure::Usage(e.into()),
    })
}

/// Checkpoint plus the run config resolved on top of its sidecar. Only the
/// refiner attention mode may differ from the stored model config.
fn load_model(path: &Path, args: &ConfigArgs) -> Result<(Model, RunConfig), Failure> {
    require_file(path, "checkpoint")?;
    require_file(&sidecar_path(path), "checkpoint sidecar")?;
    let (model, stored) = load_checkpoint(path)?;
    let cfg = args.resolve(stored)?;
    let mut expected = model.config.clone();
    expected.refiner_attention = cfg.model.refiner_attention;
    if expected != cfg.model {
        return Err(Failure::Usage(anyhow!(
            "model.* settings cannot change for an existing checkpoint"
        )));
    }
    let model = if model.config == cfg.model {
        model
    } else {
        let mut m = Model::new(cfg.model.clone())?;
        m.params = model.params;
        m
    };
    Ok((model, cfg))
}

fn with_data_spec(mut cfg: RunConfig, data: &Dataset) -> Result<RunConfig, Failure> {
    cfg.task = data.spec.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)
}

fn gen_data(n: usize, out: &Path, first_id: u64, args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = args.resolve(RunConfig::default())?;
    cfg.task.validate()?;
    let data = generate_range(&cfg.task, first_id, n)?;
    data.save_jsonl(out)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(
    stage: u8,
    data_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    valid: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), Failure> {
    let data = load_data(data_path)?;
    let (mut model, cfg) = match resume {
        Some(path) => load_model(path, args)?,
        None if stage == 2 => {
            return Err(Failure::Usage(anyhow!(
                "stage 2 needs a stage-1 checkpoint (--resume)"
            )))
        }
        None => {
            let cfg = args.resolve(RunConfig::default())?;
            (Model::new(cfg.model.clone())?, cfg)
        }
    };
    let cfg = with_data_spec(cfg, &data)?;
    let framed = data.materialize()?;
    let log_path = {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    };
    let mut log = BufWriter::new(File::create(&log_path)?);
    let report = if stage == 1 {
        train_stage1(&mut model, &framed, &cfg.train, Some(&mut log))?
    } else {
        train_stage2(&mut model, &framed, &cfg.train, Some(&mut log))?
    };
    log.flush()?;
    save_checkpoint(&model, &cfg, out)?;
    println!(
        "stage {stage}: {} steps, final loss {:.4}, config {}",
        report.steps.len(),
        report.final_loss().unwrap_or(f64::NAN),
        cfg.hash()
    );
    if let Some(v) = valid {
        let vdata = load_data(v)?.materialize()?;
        let (point, _) = evaluate_offline(&model, &vdata, cfg.eval.max_len)?;
        println!("held-out offline accuracy {:.4}", point.quality);
    }
    println!("checkpoint {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data_path: &Path, out_dir: &Path, args: &ConfigArgs) -> Result<(), Failure> {
    let data = load_data(data_path)?;
    let (model, cfg) = load_model(ckpt, args)?;
    let cfg = with_data_spec(cfg, &data)?;
    let framed = data.materialize()?;
    let mut lambdas = cfg.eval.lambdas.clone();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    let mut outcomes = Vec::new();
    for &l in &lambdas {
        let (point, per_sample) = evaluate_lambda(&model, &framed, l, cfg.eval.max_len)?;
        points.push(point);
        outcomes.push((l, per_sample));
    }
    let (offline, offline_outcomes) = evaluate_offline(&model, &framed, cfg.eval.max_len)?;
    outcomes.push((0.0, offline_outcomes));
    fs::create_dir_all(out_dir)?;
    let mut hyps = BufWriter::new(File::create(out_dir.join("hypotheses.jsonl"))?);
    for (l, per_sample) in &outcomes {
        for o in per_sample {
            writeln!(hyps, "{}", json!({ "lambda": l, "outcome": o }))?;
        }
    }
    hyps.flush()?;
    let mut rows = points.clone();
    rows.push(offline.clone());
    write_text(&out_dir.join("curve.csv"), &curve_csv(&rows))?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "checkpoint": ckpt.display().to_string(),
        "data": data_path.display().to_string(),
        "curve": points,
        "offline": offline,
    });
    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).map_err(|e| Failure::Runtime(e.into()))?,
    )?;
    write_text(&out_dir.join("config.txt"), &cfg.dump())?;
    print!("{}", curve_csv(&rows));
    println!("config {}", cfg.hash());
    Ok(())
}

fn simulate(
    ckpt: &Path,
    data_path: &Path,
    index: usize,
    lambda: f64,
    trace_out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), Failure> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Failure::Usage(anyhow!("--lambda must lie in (0, 1)")));
    }
    let data = load_data(data_path)?;
    let (model, cfg) = load_model(ckpt, args)?;
    let cfg = with_data_spec(cfg, &data)?;
    let sample = data.samples.get(index).ok_or_else(|| {
        Failure::Usage(anyhow!(
            "--index {index} out of range ({} samples)",
            data.samples.len()
        ))
    })?;
    let table = data.spec.embedding_table()?;
    let frames = data.spec.frames(&table, sample)?;
    let r = run_stream(&model, &frames, lambda, cfg.eval.max_len)?;
    let k = data.spec.frames_per_token as f64;
    println!(
        "sample {} | λ = {lambda} | {} source frames | config {}",
        sample.id,
        r.source_frames,
        cfg.hash()
    );
    for ev in &r.trace {
        let mut line = format!(
            "t={:<4} {:<5}",
            ev.t,
            format!("{:?}", ev.action).to_uppercase()
        );
        if let Some(tok) = ev.token {
            line.push_str(&format!(" token={tok:<4}"));
        } else if ev.action == Action::Write {
            line.push_str(" token=EOS ");
        }
        if let Some(p) = ev.p {
            line.push_str(&format!(" p={p:.4}"));
        }
        println!("{}", line.trim_end());
    }
    if let Some(path) = trace_out {
        let mut w = BufWriter::new(File::create(path)?);
        for ev in &r.trace {
            let line = serde_json::to_string(ev).map_err(|e| Failure::Runtime(e.into()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    let rec = LatencyRecord {
        delays: r.delays.iter().map(|d| *d as f64 / k).collect(),
        source_len: sample.source.len() as f64,
        ref_len: sample.content().len(),
    };
    let (al, la) = if rec.delays.is_empty() {
        (rec.source_len, rec.source_len)
    } else {
        (average_lagging(&rec)?, laal(&rec)?)
    };
    println!("tokens {:?}", r.tokens);
    println!("AL={al:.4} LAAL={la:.4} (source tokens)");
    Ok(())
}

fn parse_variants(list: Option<&str>) -> Result<Vec<Variant>, Failure> {
    let Some(list) = list else {
        return Ok(Variant::ALL.to_vec());
    };
    list.split(',')
        .map(|name| {
            let name = name.trim();
            Variant::ALL
                .into_iter()
                .find(|v| v.name() == name)
                .ok_or_else(|| Failure::Usage(anyhow!("unknown variant `{name}`")))
        })
        .collect()
}

fn sweep_ablation(
    ckpt: &Path,
    data_path: &Path,
    valid_path: &Path,
    out_dir: &Path,
    variants: Option<&str>,
    args: &ConfigArgs,
) -> Result<(), Failure> {
    let variants = parse_variants(variants)?;
    let data = load_data(data_path)?;
    let valid = load_data(valid_path)?;
    let (stage1, cfg) = load_model(ckpt, args)?;
    let cfg = with_data_spec(cfg, &data)?;
    let train: FramedDataset = data.materialize()?;
    let valid = valid.materialize()?;
    fs::create_dir_all(out_dir)?;
    write_text(&out_dir.join("config.txt"), &cfg.dump())?;
    let mut reports = BufWriter::new(File::create(out_dir.join("ablation.jsonl"))?);
    for v in variants {
        let mut log = BufWriter::new(File::create(
            out_dir.join(format!("{}.log.jsonl", v.name())),
        )?);
        let (model, report) = run_variant(
            &stage1,
            v,
            &cfg.train,
            &train,
            &valid,
            cfg.eval.max_len,
            Some(&mut log),
        )?;
        log.flush()?;
        let mut vcfg = cfg.clone();
        let (tc, mode) = v.apply(&cfg.train, cfg.model.refiner_attention);
        vcfg.train = tc;
        vcfg.model.refiner_attention = mode;
        save_checkpoint(&model, &vcfg, &out_dir.join(format!("{}.ckpt", v.name())))?;
        let line = json!({ "config_hash": vcfg.hash(), "report": report });
        writeln!(reports, "{line}")?;
        println!(
            "{:<15} offline {:.4}  acc@0.5 {:.4}  AL@0.5 {:.3}  extreme {:.3}  norm_dev {:.4}",
            v.name(),
            report.offline_accuracy,
            report.accuracy_at_half,
            report.al_at_half,
            report.extreme_mass,
            report.norm_deviation
        );
    }
    reports.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::GenData {
            n,
            out,
            first_id,
            cfg,
        } => gen_data(*n, out, *first_id, cfg),
        Cmd::Train {
            stage,
            data,
            out,
            resume,
            valid,
            cfg,
        } => train(*stage, data, out, resume.as_deref(), valid.as_deref(), cfg),
        Cmd::Eval {
            checkpoint,
            data,
            out_dir,
            cfg,
        } => eval(checkpoint, data, out_dir, cfg),
        Cmd::Simulate {
            checkpoint,
            data,
            index,
            lambda,
            trace,
            cfg,
        } => simulate(checkpoint, data, *index, *lambda, trace.as_deref(), cfg),
        Cmd::SweepAblation {
            checkpoint,
            data,
            valid,
            out_dir,
            variants,
            cfg,
        } => sweep_ablation(checkpoint, data, valid, out_dir, variants.as_deref(), cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
