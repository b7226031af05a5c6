//! Closed-form performance-monitoring scores over sequences of
//! distributions: averaged entropy and mean character distance (mean
//! symmetric KL divergence between predictions a few steps apart).
//!
//! All logarithms are natural. Entries at or below [`LOG_FLOOR`] contribute
//! nothing to entropy and are floored before taking logs in divergences.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, Matrix, UtteranceRecord};
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

/// Character offsets compared by [`mcd`].
pub const DEFAULT_WINDOWS: [usize; 5] = [1, 2, 3, 4, 5];

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > LOG_FLOOR)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// Mean per-row entropy. With `normalize`, each row's entropy is divided by
/// `ln T` (its maximum), so the result lies in `[0, 1]`.
pub fn e_score<'a, I>(rows: I, normalize: bool) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for row in rows {
        let h = entropy(row);
        total += if normalize {
            if row.len() < 2 {
                return Err(Error::DegenerateLength(format!(
                    "normalized entropy needs T >= 2, got T = {}",
                    row.len()
                )));
            }
            (h / (row.len() as f64).ln()).clamp(0.0, 1.0)
        } else {
            h
        };
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateLength("e_score of an empty sequence".into()));
    }
    Ok(total / n as f64)
}

/// Symmetric Kullback-Leibler divergence `KL(p||q) + KL(q||p)`.
pub fn skl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "skl of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(skl_unchecked(p, q))
}

// sum_k (p_k - q_k)(ln p_k - ln q_k); each term is >= 0 and the expression is
// exactly symmetric under swapping p and q.
fn skl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// How [`mcd`] normalizes the summed pair distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum McdDenominator {
    /// Total number of compared pairs: a true mean.
    #[default]
    Sum,
    /// Product of per-window pair counts.
    Product,
}

impl FromStr for McdDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(McdDenominator::Sum),
            "product" => Ok(McdDenominator::Product),
            _ => Err(Error::InvalidConfig(format!(
                "unknown mcd denominator '{s}' (expected sum|product)"
            ))),
        }
    }
}

impl fmt::Display for McdDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McdDenominator::Sum => "sum",
            McdDenominator::Product => "product",
        })
    }
}

/// Mean character distance: symmetric KL between every pair of rows that are
/// `w` apart for each window `w`, with equal weight per pair. Windows that
/// do not fit inside the sequence are skipped.
pub fn mcd(rows: &[&[f64]], windows: &[usize], denominator: McdDenominator) -> Result<f64> {
    if windows.contains(&0) {
        return Err(Error::InvalidConfig("mcd window must be positive".into()));
    }
    let mut windows = windows.to_vec();
    windows.sort_unstable();
    windows.dedup();

    let len = rows.len();
    if let Some(k) = rows.first().map(|r| r.len()) {
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("mcd rows differ in length".into()));
        }
    }
    let active: Vec<usize> = windows.into_iter().filter(|&w| w < len).collect();
    if len < 2 || active.is_empty() {
        return Err(Error::DegenerateLength(format!(
            "mcd needs at least one pair, got L = {len}"
        )));
    }

    let mut total = 0.0;
    for &w in &active {
        for l in w..len {
            total += skl_unchecked(rows[l - w], rows[l]);
        }
    }
    let denom = match denominator {
        McdDenominator::Sum => active.iter().map(|&w| (len - w) as f64).sum::<f64>(),
        McdDenominator::Product => active.iter().map(|&w| (len - w) as f64).product::<f64>(),
    };
    Ok(total / denom)
}

fn matrix_rows(m: &Matrix) -> Vec<&[f64]> {
    m.rows().collect()
}

// ---------------------------------------------------------------------------
// corpus scoring

/// Identifies the source of a score column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureId {
    EntropyDec,
    EntropyAtt,
    McdDec,
    McdAtt,
    /// Autoencoder reconstruction error on pre-softmax activations.
    Ae,
    /// Recurrent predictor output on pre-softmax activations.
    Rnn,
}

impl MeasureId {
    pub const CLOSED_FORM: [MeasureId; 4] = [
        MeasureId::EntropyDec,
        MeasureId::EntropyAtt,
        MeasureId::McdDec,
        MeasureId::McdAtt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureId::EntropyDec => "entropy-dec",
            MeasureId::EntropyAtt => "entropy-att",
            MeasureId::McdDec => "mcd-dec",
            MeasureId::McdAtt => "mcd-att",
            MeasureId::Ae => "ae",
            MeasureId::Rnn => "rnn",
        }
    }

    pub fn is_closed_form(self) -> bool {
        Self::CLOSED_FORM.contains(&self)
    }
}

impl fmt::Display for MeasureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeasureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "entropy-dec" => MeasureId::EntropyDec,
            "entropy-att" => MeasureId::EntropyAtt,
            "mcd-dec" => MeasureId::McdDec,
            "mcd-att" => MeasureId::McdAtt,
            "ae" => MeasureId::Ae,
            "rnn" => MeasureId::Rnn,
            _ => {
                return Err(Error::InvalidConfig(format!("unknown measure '{s}'")));
            }
        })
    }
}

/// One utterance-level score.
#[derive(Clone, Debug, PartialEq)]
pub struct PmScore {
    pub utterance_id: String,
    pub dataset: String,
    pub measure: MeasureId,
    pub score: f64,
    pub cer: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScoreOptions {
    pub windows: Vec<usize>,
    pub denominator: McdDenominator,
    /// Worker threads; 0 uses the global rayon pool.
    pub jobs: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            windows: DEFAULT_WINDOWS.to_vec(),
            denominator: McdDenominator::Sum,
            jobs: 0,
        }
    }
}

/// A record that could not be scored, with the reason.
#[derive(Debug)]
pub struct ScoreFailure {
    pub utterance_id: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct ScoreOutcome {
    pub scores: Vec<PmScore>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores one record with a closed-form measure.
pub fn score_record(
    record: &UtteranceRecord,
    measure: MeasureId,
    opts: &ScoreOptions,
) -> Result<f64> {
    let too_short = |e: Error| match e {
        Error::DegenerateLength(message) => Error::TooShort {
            id: record.id.clone(),
            message,
        },
        other => other,
    };
    match measure {
        MeasureId::EntropyDec => e_score(record.decoder_post()?.rows(), false).map_err(too_short),
        MeasureId::EntropyAtt => e_score(record.attention()?.rows(), true).map_err(too_short),
        MeasureId::McdDec => mcd(
            &matrix_rows(record.decoder_post()?),
            &opts.windows,
            opts.denominator,
        )
        .map_err(too_short),
        MeasureId::McdAtt => mcd(
            &matrix_rows(record.attention()?),
            &opts.windows,
            opts.denominator,
        )
        .map_err(too_short),
        MeasureId::Ae | MeasureId::Rnn => Err(Error::InvalidConfig(format!(
            "measure '{measure}' needs a trained model"
        ))),
    }
}

/// Applies `score` to every record, in parallel when `jobs != 1`, keeping
/// input order. Failing records are collected rather than dropped.
pub fn score_with<F>(corpus: &Corpus, measure: MeasureId, jobs: usize, score: F) -> ScoreOutcome
where
    F: Fn(&UtteranceRecord) -> Result<f64> + Sync,
{
    let run = || -> Vec<(usize, Result<f64>)> {
        corpus
            .records()
            .par_iter()
            .enumerate()
            .map(|(i, r)| (i, score(r)))
            .collect()
    };
    let results = if jobs == 0 {
        run()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    };

    let mut outcome = ScoreOutcome::default();
    for (i, res) in results {
        let r = &corpus.records()[i];
        match res {
            Ok(score) => outcome.scores.push(PmScore {
                utterance_id: r.id.clone(),
                dataset: r.dataset.clone(),
                measure,
                score,
                cer: r.cer,
            }),
            Err(error) => outcome.failures.push(ScoreFailure {
                utterance_id: r.id.clone(),
                error,
            }),
        }
    }
    outcome
}

pub fn score_corpus(corpus: &Corpus, measure: MeasureId, opts: &ScoreOptions) -> ScoreOutcome {
    score_with(corpus, measure, opts.jobs, |r| score_record(r, measure, opts))
}

// ---------------------------------------------------------------------------
// score TSV

pub const SCORE_HEADER: &str = "utterance_id\tdataset\tmeasure\tscore\tcer";

pub fn write_scores_to<W: Write>(scores: &[PmScore], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{SCORE_HEADER}")?;
    for s in scores {
        let cer = s.cer.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.utterance_id, s.dataset, s.measure, s.score, cer
        )?;
    }
    Ok(())
}

pub fn write_scores(scores: &[PmScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scores_to(scores, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_scores_from<R: BufRead>(reader: R) -> Result<Vec<PmScore>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() || (line_no == 1 && line.starts_with("utterance_id\t")) {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 fields, got {}", fields.len())));
        }
        let number = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| malformed(format!("bad {what} '{s}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteValue {
                    line: line_no,
                    detail: what.to_string(),
                })
            }
        };
        out.push(PmScore {
            utterance_id: fields[0].to_string(),
            dataset: fields[1].to_string(),
            measure: fields[2].parse().map_err(|e: Error| malformed(e.to_string()))?,
            score: number(fields[3], "score")?,
            cer: match fields[4] {
                "" => None,
                s => Some(number(s, "cer")?),
            },
        });
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<PmScore>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores_from(BufReader::new(file))
}
