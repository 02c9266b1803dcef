//! Command-line pipeline: preprocess, synthesize, train, eval, predict and
//! verify.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod bundle;
mod settings;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_eval_instances, generate_synthetic, CheckIn, parse_checkins, parse_timestamp, split_train_eval, Dataset,
    EvalInstance, Format, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_interval, MetricTable};
use crate::geocode::SpatialIndex;
use crate::model::{ModelConfig, Predictor, Tpg};
use crate::train::{fit, loss_csv, EpochLog, TrainConfig};
use crate::verify::run_checks;

pub use bundle::Bundle;
pub use settings::{apply_setting, read_settings};

#[derive(Debug, Parser)]
#[command(name = "tpg", version, about = "Next-location recommendation with temporal prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse raw check-ins, apply frequency filters and write a canonical dump
    /// plus a JSON stats sidecar.
    Preprocess(PreprocessArgs),
    /// Write a synthetic periodic-mobility dataset as a canonical dump.
    Synthesize(SynthesizeArgs),
    /// Train a model and write a checkpoint directory with a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the 101-candidate ranking protocol.
    Eval(EvalArgs),
    /// Rank every POI for one user's history at one or more prompt times.
    Predict(PredictArgs),
    /// Run the built-in verification suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Raw check-in file, optionally gzip-compressed.
    #[arg(long)]
    input: PathBuf,
    /// Input layout: gowalla_tsv or foursquare_tsv.
    #[arg(long, default_value = "gowalla_tsv")]
    format: Format,
    /// Drop users with fewer check-ins, repeated to a fixpoint with the POI filter.
    #[arg(long, default_value_t = 10)]
    min_user_checkins: usize,
    /// Drop POIs with fewer visits.
    #[arg(long, default_value_t = 5)]
    min_poi_visits: usize,
    /// Output dump in gowalla_tsv layout with dense ids.
    #[arg(long)]
    out: PathBuf,
    /// Stats sidecar; defaults to the dump path with a `.stats.json` suffix.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[arg(long, default_value_t = 20)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    pois: usize,
    #[arg(long, default_value_t = 60)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of a uniformly random visit instead of the scheduled one.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Output dump in gowalla_tsv layout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Check-in file; canonical dumps use gowalla_tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "gowalla_tsv")]
    format: Format,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat key=value file setting any model or training field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, as key=value; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Remove a component: tp (temporal prompt), te (time embedding),
    /// sw (shifted windows) or ge (geography encoder). Repeatable.
    #[arg(long, value_name = "COMPONENT")]
    ablate: Vec<String>,
    /// Add a user embedding to each check-in.
    #[arg(long)]
    with_user_embedding: bool,
    /// Checkpoint directory, rewritten after every epoch.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Loss log; defaults to `loss.csv` inside the checkpoint directory.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Also keep the epoch with the best Recall@10 on the held-out targets
    /// under `<out-checkpoint>/best`.
    #[arg(long)]
    track_best: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mask this many most recent history check-ins; repeatable, 0 is plain
    /// next-visit evaluation.
    #[arg(long = "interval", value_name = "M")]
    intervals: Vec<usize>,
    /// Comma-separated ranking cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Seed for negative sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// User id as it appears in the data.
    #[arg(long)]
    user: String,
    /// The user's check-ins in gowalla_tsv layout; rows of other users are
    /// ignored and only the latest check-ins that fit the model are used.
    #[arg(long)]
    history_file: PathBuf,
    /// Prompt time (ISO 8601); repeatable.
    #[arg(long = "at", value_name = "TIMESTAMP", required = true)]
    at: Vec<String>,
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Corrupt every backward pass; the gradient check must then fail.
    #[arg(long)]
    corrupt_backward: bool,
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(&a, out),
        Command::Synthesize(a) => synthesize(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Predict(a) => predict(&a, out),
        Command::Verify(a) => verify(&a, out),
    }
}

fn preprocess(a: &PreprocessArgs, out: &mut dyn Write) -> Result<()> {
    let raw = parse_checkins(&a.input, a.format)?;
    let ds = raw.filter(a.min_user_checkins, a.min_poi_visits);
    if ds.num_checkins() == 0 {
        warn!("no check-ins survive parsing and filtering");
    }
    ds.write_dump(&a.out)?;
    let stats = a.stats.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".stats.json");
        PathBuf::from(s)
    });
    ds.write_stats(&stats)?;
    writeln!(
        out,
        "users {} locations {} check-ins {} malformed {}",
        ds.num_users(),
        ds.num_pois(),
        ds.num_checkins(),
        ds.malformed
    )?;
    Ok(())
}

fn synthesize(a: &SynthesizeArgs, out: &mut dyn Write) -> Result<()> {
    if a.pois < 10 {
        return Err(Error::invalid("synthetic registry needs at least 10 POIs"));
    }
    if !(0.0..=1.0).contains(&a.epsilon) {
        return Err(Error::invalid("epsilon must lie in [0, 1]"));
    }
    let spec = SyntheticSpec::new(a.users, a.pois, a.days, a.seed).with_epsilon(a.epsilon);
    let ds = generate_synthetic(&spec);
    ds.write_dump(&a.out)?;
    writeln!(out, "users {} locations {} check-ins {}", ds.num_users(), ds.num_pois(), ds.num_checkins())?;
    Ok(())
}

/// Model and training configuration from a settings file, overrides and
/// flags, in that order of precedence (later wins).
fn configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in read_settings(path)? {
            apply_setting(&mut model, &mut train, &k, &v)?;
        }
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects key=value, got {s:?}")))?;
        apply_setting(&mut model, &mut train, k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        train.epochs = epochs;
    }
    for c in &a.ablate {
        model.ablate(c)?;
    }
    if a.with_user_embedding {
        model.use_user_embedding = true;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn load_data(a: &DataArgs) -> Result<Dataset> {
    parse_checkins(&a.data, a.format)
}

fn eval_instances(ds: &Dataset, seed: u64) -> Result<Vec<EvalInstance>> {
    let split = split_train_eval(ds);
    let index = SpatialIndex::from_registry(&ds.pois)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_eval_instances(ds, &split.eval, &index, &mut rng)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (model_cfg, train_cfg) = configs(a)?;
    let ds = load_data(&a.data)?;
    if ds.num_pois() == 0 {
        return Err(Error::Format("no check-ins to train on".into()));
    }
    let bundle = Bundle::from_dataset(&model_cfg, &ds);
    let (model, mut store) = bundle.build_model(train_cfg.seed)?;
    let split = split_train_eval(&ds);
    let dir = &a.out_checkpoint;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| dir.join("loss.csv"));
    bundle.save(dir, &store)?;
    fs::write(dir.join("train.cfg"), train_cfg.to_key_values())?;

    let held_out = if a.track_best { eval_instances(&ds, train_cfg.seed)? } else { Vec::new() };
    let mut best = f64::NEG_INFINITY;
    let mut log: Vec<EpochLog> = Vec::new();
    let result = fit(&model, &mut store, &split.train, &train_cfg, |entry, store| {
        bundle.save(dir, store)?;
        log.push(*entry);
        fs::write(&loss_path, loss_csv(&log))?;
        writeln!(out, "epoch {}\tloss {:.6}", entry.epoch, entry.mean_loss)?;
        if !held_out.is_empty() {
            let predictor = Predictor::new(&model, store)?;
            let row = evaluate_interval(&predictor, &held_out, 0, &[10], 1)?;
            let recall = row.recall[0];
            if recall > best {
                best = recall;
                info!("new best Recall@10 {recall:.4} at epoch {}", entry.epoch);
                bundle.save(&dir.join("best"), store)?;
            }
        }
        Ok(())
    });
    match result {
        Ok(_) => Ok(()),
        Err(e @ Error::Numeric(_)) => {
            warn!("checkpoint in {} holds the last finite epoch", dir.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (bundle, model, store) = Bundle::load(&a.checkpoint)?;
    let ds = bundle.reindex(&load_data(&a.data)?)?;
    let instances = eval_instances(&ds, a.seed)?;
    let predictor = Predictor::new(&model, &store)?;
    let intervals = if a.intervals.is_empty() { vec![0] } else { a.intervals.clone() };
    let mut table = MetricTable::default();
    for &m in &intervals {
        table.rows.push(evaluate_interval(&predictor, &instances, m, &a.ks, a.threads)?);
    }
    write!(out, "{}", table.to_text())?;
    if let Some(path) = &a.out {
        fs::write(path, table.to_csv())?;
    }
    Ok(())
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let (bundle, model, store) = Bundle::load(&a.checkpoint)?;
    let user = bundle
        .user_ids
        .iter()
        .position(|u| *u == a.user)
        .ok_or_else(|| Error::Vocabulary {
            kind: "user",
            id: a.user.clone(),
        })?;
    let raw = parse_checkins(&a.history_file, Format::GowallaTsv)?;
    let own = raw
        .user_ids
        .iter()
        .position(|u| *u == a.user)
        .ok_or_else(|| Error::invalid(format!("history file has no check-ins for user {}", a.user)))?;
    let single = Dataset {
        user_ids: vec![a.user.clone()],
        sequences: vec![raw.sequences[own].iter().map(|c| CheckIn { user: 0, ..*c }).collect()],
        ..raw
    };
    let mapped = bundle.reindex(&single)?;
    let history = &mapped.sequences[user];
    let history = &history[history.len().saturating_sub(model.cfg.max_len)..];
    let prompts: Vec<i64> = a.at.iter().map(|s| parse_timestamp(s)).collect::<Result<_>>()?;
    let predictor = Predictor::new(&model, &store)?;
    let ranked = predictor.top_k(user, history, &prompts, a.topk)?;
    for (at, list) in a.at.iter().zip(ranked) {
        writeln!(out, "at {at}")?;
        for (i, (poi, score)) in list.iter().enumerate() {
            writeln!(out, "{}\t{}\t{score:.6}", i + 1, bundle.poi_ids[*poi])?;
        }
    }
    Ok(())
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let report = run_checks(a.corrupt_backward);
    for check in &report {
        writeln!(out, "{check}")?;
    }
    let failed = report.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} verification checks failed")));
    }
    Ok(())
}

/// Loads a checkpoint directory written by `train`.
pub fn load_checkpoint_dir(dir: &Path) -> Result<(Bundle, Tpg, crate::numcore::ParamStore)> {
    Bundle::load(dir)
}
