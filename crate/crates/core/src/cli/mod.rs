//! The `lll` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure.

pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::toy::{self, ToyKind};
use crate::bench::{self, fmt_rate, summarize, RunRecord, Variant};
use crate::error::{Error, Result};
use crate::llltrain::{self, EpochRecord, LllConfig, Observer, PseudoStatus, StageRecord, Trainer, TrainerState};
use crate::rvae::RvaeConfig;
use crate::tinylm::ModelConfig;
use checkpoint::Checkpoint;
use config::{digest, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lll", version, about = "Lifelong language learning on a toy task stream")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant on one task order.
    Train(TrainArgs),
    /// Score a checkpoint on test splits.
    Eval(EvalArgs),
    /// Decode pseudo samples for a task and report how many parse.
    Generate(GenerateArgs),
    /// Run the variant × γ × order × seed grid.
    Grid(ConfigArgs),
    /// Sweep adapter position, latent size or training mode.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults are used for anything it omits.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub base: ConfigArgs,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// naive, alt, alt_m1, alt_m1_rev or alt_m1_star.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated task names, such as `cls,span,slot`.
    #[arg(long)]
    pub order: Option<String>,
    /// Continue from a checkpoint written by an earlier run of the same
    /// config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated task names; defaults to the run's task order.
    #[arg(long)]
    pub tasks: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task name or numeric id.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to `generated-<task>.jsonl` next to the checkpoint.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: ConfigArgs,
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: Option<String>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Checkpoint { .. } | Error::UnknownWord(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn parse_list<T: FromStr>(field: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|e| Error::config(field, format!("`{x}`: {e}"))))
        .collect()
}

fn load_config(base: &ConfigArgs, o: Overrides) -> Result<(RunConfig, String)> {
    let mut cfg = RunConfig::load(base.config.as_deref())?;
    cfg.apply(&Overrides {
        output_dir: base.output.clone(),
        ..o
    })?;
    cfg.validate()?;
    let text = cfg.to_toml()?;
    Ok((cfg, text))
}

/// Creates the output directory and writes the effective config into it.
fn prepare_output(cfg: &RunConfig, text: &str) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), text)?;
    Ok(())
}

fn json_line<T: Serialize>(w: &mut impl Write, kind: &str, digest: &str, rec: &T) -> Result<()> {
    let mut v = serde_json::to_value(rec)?;
    if let Value::Object(m) = &mut v {
        m.insert("kind".into(), json!(kind));
        m.insert("config_digest".into(), json!(digest));
    }
    serde_json::to_writer(&mut *w, &v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, digest: &str, body: &T) -> Result<()> {
    let v = json!({ "config_digest": digest, "result": body });
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes the run log and checkpoints as training progresses.
struct RunWriter {
    dir: PathBuf,
    digest: String,
    config_text: String,
    model: ModelConfig,
    rvae: Option<RvaeConfig>,
    lll: LllConfig,
    task_names: Vec<String>,
    log: BufWriter<File>,
}

impl RunWriter {
    fn checkpoint(&self, state: &TrainerState) -> Checkpoint {
        let p = &state.progress;
        let stage_label = match self.task_names.get(p.stage) {
            Some(t) => format!("stage {} ({t}) epoch {}", p.stage, p.epoch),
            None => "finished".to_string(),
        };
        Checkpoint {
            config_digest: self.digest.clone(),
            stage_label,
            config_text: self.config_text.clone(),
            model: self.model.clone(),
            rvae: self.rvae.clone(),
            lll: self.lll.clone(),
            state: state.clone(),
        }
    }
}

impl Observer for RunWriter {
    fn on_epoch(&mut self, rec: &EpochRecord, state: &TrainerState) -> Result<()> {
        json_line(&mut self.log, "epoch", &self.digest, rec)?;
        self.checkpoint(state).save(&self.dir.join("latest.ckpt"))?;
        eprintln!(
            "stage {} {} epoch {} {} loss {:.4}",
            rec.stage,
            rec.task,
            rec.epoch,
            rec.phase.as_str(),
            rec.loss.total
        );
        Ok(())
    }

    fn on_stage(&mut self, rec: &StageRecord, state: &TrainerState) -> Result<()> {
        json_line(&mut self.log, "stage", &self.digest, rec)?;
        let ck = self.checkpoint(state);
        ck.save(&self.dir.join(format!("stage-{}-{}.ckpt", rec.stage, rec.task)))?;
        ck.save(&self.dir.join("latest.ckpt"))?;
        eprintln!("stage {} {} scores {:?} average {:.2}", rec.stage, rec.task, rec.scores, rec.average);
        Ok(())
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let o = Overrides {
        variant: a.variant.as_deref().map(Variant::from_str).transpose()?,
        order: a.order.as_deref().map(|s| parse_list("order", s)).transpose()?,
        gamma: a.gamma,
        mode: a.mode.clone(),
        turns: a.turns,
        epochs: a.epochs,
        seed: a.seed,
        output_dir: None,
    };
    let (cfg, text) = load_config(&a.base, o)?;
    let d = digest(&text);
    let fresh = cfg.experiment().trainer(&cfg.run_spec())?;
    let mut trainer = match &a.resume {
        None => fresh,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_digest != d {
                return Err(Error::config(
                    "resume",
                    format!("{} was written by a different config (digest {})", p.display(), ck.config_digest),
                ));
            }
            Trainer::from_state(fresh.model, fresh.rvae, fresh.cfg, fresh.vocab, fresh.tasks, ck.state)?
        }
    };
    prepare_output(&cfg, &text)?;
    let mut log = BufWriter::new(File::create(cfg.output_dir.join("run.jsonl"))?);
    // A resumed run replays the records it already has so the log matches
    // an uninterrupted run.
    let pr = &trainer.state.progress;
    for s in 0..=pr.stages.len() {
        for e in pr.epochs.iter().filter(|e| e.stage == s) {
            json_line(&mut log, "epoch", &d, e)?;
        }
        if let Some(r) = pr.stages.get(s) {
            json_line(&mut log, "stage", &d, r)?;
        }
    }
    let mut w = RunWriter {
        dir: cfg.output_dir.clone(),
        digest: d.clone(),
        config_text: text,
        model: trainer.model.clone(),
        rvae: trainer.rvae.clone(),
        lll: trainer.cfg.clone(),
        task_names: trainer.tasks.iter().map(|t| t.name.clone()).collect(),
        log,
    };
    let result = trainer.run(&mut w)?;
    let path = cfg.output_dir.join("result.json");
    write_json(&path, &d, &result)?;
    println!(
        "average {:.2} scores {} -> {}",
        result.average,
        serde_json::to_string(&result.final_scores)?,
        path.display()
    );
    Ok(())
}

fn parse_task(s: &str) -> Result<ToyKind> {
    match s.parse::<usize>() {
        Ok(id) => ToyKind::from_id(id).map_err(|_| Error::config("task", format!("unknown task id {id}"))),
        Err(_) => s.parse().map_err(|_| Error::config("task", format!("unknown task `{s}`"))),
    }
}

/// Test scores of a checkpoint, 0–100 per task.
pub fn eval_checkpoint(ck: &Checkpoint, tasks: &[ToyKind]) -> Result<Vec<(ToyKind, f64)>> {
    let cfg = RunConfig::parse(&ck.config_text)?;
    let vocab = toy::vocab();
    tasks
        .iter()
        .map(|&k| {
            let t = toy::task_data(k, &cfg.data);
            let s = llltrain::evaluate(
                &ck.state.params,
                &ck.model,
                ck.rvae.as_ref(),
                vocab,
                &t,
                ck.lll.eval_max_answer,
            )?;
            Ok((k, s))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tasks = match &a.tasks {
        Some(s) => s.split(',').map(|x| parse_task(x.trim())).collect::<Result<Vec<_>>>()?,
        None => RunConfig::parse(&ck.config_text)?.order,
    };
    let scores = eval_checkpoint(&ck, &tasks)?;
    let map: serde_json::Map<String, Value> = scores.iter().map(|(k, s)| (k.name().to_string(), json!(s))).collect();
    let out = json!({
        "config_digest": ck.config_digest,
        "checkpoint": ck.stage_label,
        "scores": map,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedSample {
    pub index: usize,
    pub status: PseudoStatus,
    pub text: String,
}

/// Decodes `count` pseudo samples; the rate is `None` when `count` is 0.
pub fn generate_from(ck: &Checkpoint, task: ToyKind, count: usize, seed: u64) -> Result<(Vec<GeneratedSample>, Option<f64>)> {
    let vocab = toy::vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outs = llltrain::sample_pseudo(
        &ck.state.params,
        &ck.model,
        ck.rvae.as_ref(),
        vocab,
        task.id(),
        count,
        ck.lll.gen_top_k,
        &mut rng,
    )?;
    let mut samples = Vec::with_capacity(count);
    for (index, out) in outs.iter().enumerate() {
        let (status, _) = llltrain::classify_pseudo(out, vocab);
        samples.push(GeneratedSample {
            index,
            status,
            text: vocab.decode(out)?,
        });
    }
    let corr = samples.iter().filter(|s| s.status == PseudoStatus::Corresponding).count();
    let rate = (count > 0).then(|| corr as f64 / count as f64);
    Ok((samples, rate))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let task = parse_task(&a.task)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (samples, rate) = generate_from(&ck, task, a.count, a.seed)?;
    let path = a.output.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("generated-{}.jsonl", task.name()))
    });
    let mut f = BufWriter::new(File::create(&path)?);
    for s in &samples {
        println!("{}\t{}", serde_json::to_value(s.status)?.as_str().unwrap_or(""), s.text);
        json_line(&mut f, "sample", &ck.config_digest, s)?;
    }
    let corr = samples.iter().filter(|s| s.status == PseudoStatus::Corresponding).count();
    let summary = json!({
        "task": task.name(),
        "requested": a.count,
        "corresponding": corr,
        "correspondence_rate": rate,
    });
    json_line(&mut f, "summary", &ck.config_digest, &summary)?;
    match rate {
        Some(r) => println!("correspondence {corr}/{} = {r:.4} ({:.2}%)", a.count, 100.0 * r),
        None => println!("correspondence n/a (no samples requested)"),
    }
    Ok(())
}

pub fn cmd_grid(a: &ConfigArgs) -> Result<()> {
    let (cfg, text) = load_config(a, Overrides::default())?;
    let d = digest(&text);
    prepare_output(&cfg, &text)?;
    let dir = cfg.output_dir.clone();
    let mut runs = BufWriter::new(File::create(dir.join("grid_runs.jsonl"))?);
    let mut done: Vec<RunRecord> = Vec::new();
    let g = &cfg.grid;
    let (_, table) = bench::run_grid(
        &cfg.experiment(),
        &g.orders,
        &g.gammas,
        &g.seeds,
        &g.variants,
        &mut |rec| {
            json_line(&mut runs, "run", &d, rec)?;
            done.push(rec.clone());
            fs::write(dir.join("grid.tsv"), tsv_with_digest(&d, &summarize(&done).to_tsv()))?;
            eprintln!(
                "{} γ={} order={:?} seed={} average {:.2} correspondence {}",
                rec.spec.variant,
                rec.spec.gamma,
                rec.result.order,
                rec.spec.seed,
                rec.result.average,
                fmt_rate(rec.correspondence_rate())
            );
            Ok(())
        },
    )?;
    let tsv = tsv_with_digest(&d, &table.to_tsv());
    fs::write(dir.join("grid.tsv"), &tsv)?;
    write_json(&dir.join("grid.json"), &d, &table)?;
    print!("{tsv}");
    Ok(())
}

fn tsv_with_digest(digest: &str, tsv: &str) -> String {
    format!("# config_digest: {digest}\n{tsv}")
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.base.config.as_deref())?;
    if let Some(axis) = &a.axis {
        cfg.sweep.axis = axis.parse()?;
    }
    if let Some(v) = &a.values {
        cfg.sweep.values = parse_list("values", v)?;
    }
    if let Some(o) = &a.base.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let text = cfg.to_toml()?;
    let d = digest(&text);
    prepare_output(&cfg, &text)?;
    let dir = cfg.output_dir.clone();
    let mut runs = BufWriter::new(File::create(dir.join("sweep_runs.jsonl"))?);
    let s = &cfg.sweep;
    let points = bench::sweep(&cfg.experiment(), s.axis, &s.values, s.repeats, s.base_seed, &mut |rec| {
        json_line(&mut runs, "run", &d, rec)?;
        eprintln!("seed {} average {:.2}", rec.spec.seed, rec.result.average);
        Ok(())
    })?;
    let tsv = tsv_with_digest(&d, &bench::sweep_tsv(s.axis, &points));
    fs::write(dir.join("sweep.tsv"), &tsv)?;
    write_json(&dir.join("sweep.json"), &d, &points)?;
    print!("{tsv}");
    Ok(())
}
