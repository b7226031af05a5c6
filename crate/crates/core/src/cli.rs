//! The `pmkit` command line: generate, validate, score, train, fit,
//! evaluate and export scatter tables. Data goes to files; standard output
//! carries short human summaries and standard error carries diagnostics.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autoencoder::{score_corpus_ae, train_ae, AeConfig, AeModel};
use crate::calibration::{
    evaluate, export_scatter, fit_calibration, measures_in, scatter_tsv, CalibrationSet,
    EvalReport,
};
use crate::datamodel::{read_corpus, validate_with, write_corpus, ValidateOptions};
use crate::error::Error;
use crate::measures::{
    read_scores, score_corpus, write_scores, McdDenominator, MeasureId, PmScore, ScoreOptions,
};
use crate::neural::train::TrainHistory;
use crate::rnn::{score_corpus_rnn, train_rnn, RnnConfig, RnnModel};
use crate::synthcorpus::{generate, SynthConfig};

#[derive(Debug, Parser, Serialize)]
#[command(name = "pmkit", version, about = "Reference-free CER prediction for end-to-end ASR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus
    Gen(GenArgs),
    /// Check every record of a corpus against the data-model invariants
    Validate(ValidateArgs),
    /// Compute utterance-level scores
    Score(ScoreArgs),
    /// Train the reconstruction autoencoder on pre-softmax activations
    TrainAe(TrainAeArgs),
    /// Train the recurrent CER predictor on pre-softmax activations
    TrainRnn(TrainRnnArgs),
    /// Fit linear calibration CER = a*score + b per measure
    Fit(FitArgs),
    /// Evaluate calibrated predictions as MSE per dataset
    Eval(EvalArgs),
    /// Export (score, cer, fitted cer) rows for plotting
    Scatter(ScatterArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total utterances, split 60/20/20 into train/dev/test (or all under --tag)
    #[arg(long)]
    pub utts: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Put every utterance under this dataset tag
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long, env = "PMKIT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 52)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub l_min: usize,
    #[arg(long, default_value_t = 30)]
    pub l_max: usize,
    #[arg(long, default_value_t = 40)]
    pub t_min: usize,
    #[arg(long, default_value_t = 120)]
    pub t_max: usize,
    #[arg(long, default_value_t = 0.0)]
    pub corruption_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub corruption_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub cer_noise: f64,
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Optional TSV of violations
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub no_softmax_check: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// entropy-dec | entropy-att | mcd-dec | mcd-att | ae | rnn (repeatable)
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub measure: Vec<String>,
    /// Checkpoint for the ae / rnn measures
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "sum")]
    pub mcd_denominator: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub windows: Vec<usize>,
    /// Worker threads (0 = all cores); output order never depends on it
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Only score records with these dataset tags
    #[arg(long, value_delimiter = ',')]
    pub dataset: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCommon {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only train on records with these dataset tags
    #[arg(long, value_delimiter = ',')]
    pub dataset: Vec<String>,
    #[arg(long, env = "PMKIT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Use the full-size layer widths instead of the small preset
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainAeArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Hidden widths, e.g. 64,16,64
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRnnArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub linear_width: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Score TSV
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measures to fit; defaults to every measure in the input
    #[arg(long, value_delimiter = ',')]
    pub measure: Vec<String>,
    /// Fit only on these dataset tags (e.g. dev)
    #[arg(long, value_delimiter = ',')]
    pub dataset: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub dataset: Vec<String>,
    #[arg(long)]
    pub clip_nonnegative: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ScatterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Required when the calibration file holds several measures
    #[arg(long)]
    pub measure: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub dataset: Vec<String>,
}

/// A failure with a machine-parseable category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.category == "usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "missing-input"
            }
            other => other.category(),
        };
        CliError::new(category, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    invocation: &'a Command,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    summary: serde_json::Value,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn file_digest(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// `<out>.manifest.json`
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn parse_measures(names: &[String]) -> CliResult<Vec<MeasureId>> {
    names
        .iter()
        .map(|n| n.parse::<MeasureId>().map_err(|e| CliError::new("usage", e.to_string())))
        .collect()
}

fn filter_scores(scores: Vec<PmScore>, datasets: &[String]) -> Vec<PmScore> {
    if datasets.is_empty() {
        scores
    } else {
        scores
            .into_iter()
            .filter(|s| datasets.contains(&s.dataset))
            .collect()
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_from<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            return Err(CliError::new("usage", first));
        }
    };
    run(&cli.command)
}

pub fn run(command: &Command) -> CliResult<()> {
    let started = now_ms();
    let (inputs, out, seed, summary) = match command {
        Command::Gen(a) => (vec![], a.out.clone(), Some(a.seed), cmd_gen(a)?),
        Command::Validate(a) => {
            let summary = cmd_validate(a)?;
            (vec![a.input.clone()], a.out.clone().unwrap_or_default(), None, summary)
        }
        Command::Score(a) => {
            let mut inputs = vec![a.input.clone()];
            inputs.extend(a.model.clone());
            (inputs, a.out.clone(), None, cmd_score(a)?)
        }
        Command::TrainAe(a) => (
            vec![a.common.input.clone()],
            a.common.out.clone(),
            Some(a.common.seed),
            cmd_train_ae(a)?,
        ),
        Command::TrainRnn(a) => (
            vec![a.common.input.clone()],
            a.common.out.clone(),
            Some(a.common.seed),
            cmd_train_rnn(a)?,
        ),
        Command::Fit(a) => (vec![a.input.clone()], a.out.clone(), None, cmd_fit(a)?),
        Command::Eval(a) => (
            vec![a.input.clone(), a.calib.clone()],
            a.out.clone(),
            None,
            cmd_eval(a)?,
        ),
        Command::Scatter(a) => (
            vec![a.input.clone(), a.calib.clone()],
            a.out.clone(),
            None,
            cmd_scatter(a)?,
        ),
    };
    if out.as_os_str().is_empty() {
        return Ok(());
    }
    let manifest = RunManifest {
        tool: "pmkit",
        version: env!("CARGO_PKG_VERSION"),
        invocation: command,
        seed,
        inputs: inputs
            .iter()
            .map(|p| file_digest(p))
            .collect::<CliResult<_>>()?,
        outputs: vec![out.display().to_string()],
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        summary,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&manifest_path(&out), &text)
}

fn cmd_gen(a: &GenArgs) -> CliResult<serde_json::Value> {
    let base = SynthConfig {
        k: a.k,
        l_range: (a.l_min, a.l_max),
        t_range: (a.t_min, a.t_max),
        corruption_range: (a.corruption_min, a.corruption_max),
        cer_noise_std: a.cer_noise,
        tau: a.tau,
        sigma: a.sigma,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let explicit = a.train.is_some() || a.dev.is_some() || a.test.is_some();
    let config = match (a.utts, explicit, &a.tag) {
        (Some(_), true, _) => {
            return Err(CliError::new(
                "usage",
                "--utts cannot be combined with --train/--dev/--test",
            ))
        }
        (Some(n), false, Some(tag)) => base.single(tag, n),
        (Some(n), false, None) => base.with_total(n),
        (None, true, _) => SynthConfig {
            splits: [("train", a.train), ("dev", a.dev), ("test", a.test)]
                .into_iter()
                .filter_map(|(t, n)| n.map(|n| (t.to_string(), n)))
                .collect(),
            ..base
        },
        (None, false, _) => {
            return Err(CliError::new(
                "usage",
                "give --utts or at least one of --train/--dev/--test",
            ))
        }
    };
    let corpus = generate(&config)?;
    write_corpus(&corpus, &a.out)?;
    println!("wrote {} utterances to {}", corpus.len(), a.out.display());
    Ok(serde_json::json!({ "utterances": corpus.len(), "config": config }))
}

fn cmd_validate(a: &ValidateArgs) -> CliResult<serde_json::Value> {
    let corpus = read_corpus(&a.input)?;
    let opts = ValidateOptions {
        tolerance: a.tolerance,
        check_softmax: !a.no_softmax_check,
        ..ValidateOptions::default()
    };
    let mut tsv = String::from("utterance_id\tkind\tdetail\n");
    let mut count = 0usize;
    let mut bad_records = 0usize;
    for r in corpus.records() {
        let v = validate_with(r, &opts);
        if !v.is_empty() {
            bad_records += 1;
        }
        for v in v {
            count += 1;
            eprintln!("violation\t{}\t{}\t{}", r.id, v.kind, v.detail);
            tsv.push_str(&format!("{}\t{}\t{}\n", r.id, v.kind, v.detail));
        }
    }
    if let Some(out) = &a.out {
        write_text(out, &tsv)?;
    }
    println!(
        "{} records, {} violations in {} records",
        corpus.len(),
        count,
        bad_records
    );
    if count > 0 {
        return Err(CliError::new(
            "validation-failed",
            format!("{count} violations in {bad_records} of {} records", corpus.len()),
        ));
    }
    Ok(serde_json::json!({ "records": corpus.len(), "violations": 0 }))
}

fn cmd_score(a: &ScoreArgs) -> CliResult<serde_json::Value> {
    let measures = parse_measures(&a.measure)?;
    let denominator: McdDenominator = a
        .mcd_denominator
        .parse()
        .map_err(|e: Error| CliError::new("usage", e.to_string()))?;
    let corpus = read_corpus(&a.input)?.filter_datasets(&a.dataset);
    let opts = ScoreOptions {
        windows: a.windows.clone(),
        denominator,
        jobs: a.jobs,
    };

    let model_path = || {
        a.model
            .as_ref()
            .ok_or_else(|| CliError::new("usage", "--model is required for ae / rnn measures"))
    };
    let mut scores = Vec::new();
    let mut skipped = 0usize;
    for m in measures {
        let outcome = match m {
            MeasureId::Ae => score_corpus_ae(&AeModel::load(model_path()?)?, &corpus, a.jobs),
            MeasureId::Rnn => score_corpus_rnn(&RnnModel::load(model_path()?)?, &corpus, a.jobs),
            _ => score_corpus(&corpus, m, &opts),
        };
        for f in &outcome.failures {
            eprintln!(
                "skipped\t{}\t{}\t{}\t{}",
                m,
                f.utterance_id,
                f.error.category(),
                f.error
            );
        }
        skipped += outcome.failures.len();
        scores.extend(outcome.scores);
    }
    if scores.is_empty() && !corpus.is_empty() {
        return Err(CliError::new(
            "no-scores",
            format!("all {skipped} scoring attempts failed"),
        ));
    }
    write_scores(&scores, &a.out)?;
    println!("wrote {} scores ({} skipped) to {}", scores.len(), skipped, a.out.display());
    Ok(serde_json::json!({ "scores": scores.len(), "skipped": skipped }))
}

fn history_summary(h: &TrainHistory) -> serde_json::Value {
    serde_json::json!({
        "initial_loss": h.initial_loss,
        "final_loss": h.final_loss,
        "epochs_run": h.epoch_losses.len(),
        "best_epoch": h.best_epoch,
        "stopped_early": h.stopped_early,
        "n_train": h.n_train,
        "n_validation": h.n_validation,
    })
}

fn cmd_train_ae(a: &TrainAeArgs) -> CliResult<serde_json::Value> {
    let c = &a.common;
    let mut config = if c.full_scale {
        AeConfig::full_scale()
    } else {
        AeConfig::desk()
    };
    config.seed = c.seed;
    if !a.hidden.is_empty() {
        config.hidden = a.hidden.clone();
    }
    if let Some(v) = c.epochs {
        config.epochs = v;
    }
    if let Some(v) = c.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = c.lr {
        config.lr = v;
    }
    if let Some(v) = c.validation_fraction {
        config.validation_fraction = v;
    }
    if let Some(v) = c.patience {
        config.patience = v;
    }
    let corpus = read_corpus(&c.input)?.filter_datasets(&c.dataset);
    let (model, history) = train_ae(&corpus, &config)?;
    model.save(&c.out)?;
    println!(
        "autoencoder: loss {:.6} -> {:.6} over {} epochs, saved to {}",
        history.initial_loss,
        history.final_loss,
        history.epoch_losses.len(),
        c.out.display()
    );
    Ok(history_summary(&history))
}

fn cmd_train_rnn(a: &TrainRnnArgs) -> CliResult<serde_json::Value> {
    let c = &a.common;
    let mut config = if c.full_scale {
        RnnConfig::full_scale()
    } else {
        RnnConfig::desk()
    };
    config.seed = c.seed;
    if let Some(v) = a.layers {
        config.layers = v;
    }
    if let Some(v) = a.hidden {
        config.hidden = v;
    }
    if let Some(v) = a.linear_width {
        config.linear_width = v;
    }
    if let Some(v) = a.clip_norm {
        config.clip_norm = v;
    }
    if let Some(v) = c.epochs {
        config.epochs = v;
    }
    if let Some(v) = c.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = c.lr {
        config.lr = v;
    }
    if let Some(v) = c.validation_fraction {
        config.validation_fraction = v;
    }
    if let Some(v) = c.patience {
        config.patience = v;
    }
    let corpus = read_corpus(&c.input)?.filter_datasets(&c.dataset);
    let (model, history) = train_rnn(&corpus, &config)?;
    model.save(&c.out)?;
    println!(
        "rnn predictor: loss {:.6} -> {:.6} over {} epochs, saved to {}",
        history.initial_loss,
        history.final_loss,
        history.epoch_losses.len(),
        c.out.display()
    );
    Ok(history_summary(&history))
}

fn cmd_fit(a: &FitArgs) -> CliResult<serde_json::Value> {
    let scores = filter_scores(read_scores(&a.input)?, &a.dataset);
    let measures = if a.measure.is_empty() {
        measures_in(&scores)
    } else {
        parse_measures(&a.measure)?
    };
    if measures.is_empty() {
        return Err(CliError::new("empty-input", "no scores to fit"));
    }
    let mut set = CalibrationSet::default();
    for m in measures {
        let model = fit_calibration(m, &scores)?;
        println!("{m}: CER = {:.6} * PM + {:.6} (n = {})", model.a, model.b, model.n_dev);
        set.models.push(model);
    }
    set.save(&a.out)?;
    Ok(serde_json::json!({ "models": set.models.len() }))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<serde_json::Value> {
    let scores = filter_scores(read_scores(&a.input)?, &a.dataset);
    let calib = CalibrationSet::load(&a.calib)?;
    let mut report = EvalReport::default();
    for m in measures_in(&scores) {
        let Some(model) = calib.get(m) else {
            eprintln!("warning: no calibration for measure '{m}', skipped");
            continue;
        };
        report.columns.push(evaluate(model, &scores, a.clip_nonnegative)?);
    }
    if report.columns.is_empty() {
        return Err(CliError::new(
            "empty-input",
            "no scored measure has a calibration model",
        ));
    }
    write_text(&a.out, &report.to_tsv())?;
    print!("{}", report.to_table());
    Ok(serde_json::json!({
        "pooled_mse": report
            .columns
            .iter()
            .map(|c| (c.measure.to_string(), c.pooled.mse))
            .collect::<std::collections::BTreeMap<_, _>>()
    }))
}

fn cmd_scatter(a: &ScatterArgs) -> CliResult<serde_json::Value> {
    let scores = filter_scores(read_scores(&a.input)?, &a.dataset);
    let calib = CalibrationSet::load(&a.calib)?;
    let model = match &a.measure {
        Some(name) => {
            let m = parse_measures(std::slice::from_ref(name))?[0];
            calib.get(m).ok_or_else(|| {
                CliError::new("missing-calibration", format!("no calibration for '{m}'"))
            })?
        }
        None if calib.models.len() == 1 => &calib.models[0],
        None => {
            return Err(CliError::new(
                "usage",
                "calibration file has several measures; pass --measure",
            ))
        }
    };
    let rows = export_scatter(model, &scores)?;
    write_text(&a.out, &scatter_tsv(&rows))?;
    println!("wrote {} scatter rows to {}", rows.len(), a.out.display());
    Ok(serde_json::json!({ "rows": rows.len() }))
}
