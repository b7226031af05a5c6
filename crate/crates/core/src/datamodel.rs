//! Distribution-sequence types, record validation and the line-delimited
//! corpus container.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id":"u1","dataset":"dev","cer":0.12,"attention":[[...],...],"decoder_post":[[...],...],"presoftmax":[[...],...]}
//! ```
//!
//! Absent feature kinds are written as `null`. Files whose name ends in
//! `.gz` are transparently gzip-compressed.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for row sums of stochastic vectors.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Tolerance for softmax(presoftmax) against decoder_post.
pub const SOFTMAX_TOLERANCE: f64 = 1e-4;

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * cols);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != cols {
                return Err(format!(
                    "row {i} has length {} but row 0 has length {cols}",
                    row.len()
                ));
            }
            data.extend(row);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "flat buffer does not match shape");
        Matrix { rows, cols, data }
    }

    /// Number of rows (L).
    pub fn n_rows(&self) -> usize {
        self.rows
    }

    /// Row length (T for attention, K for posteriors and activations).
    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.rows))?;
        for row in self.rows() {
            seq.serialize_element(row)?;
        }
        seq.end()
    }
}

/// A probability vector whose invariants were checked on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>, tolerance: f64) -> std::result::Result<Self, String> {
        if entries.is_empty() {
            return Err("empty probability vector".into());
        }
        check_stochastic(&entries, tolerance)?;
        Ok(ProbVector(entries))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_stochastic(row: &[f64], tolerance: f64) -> std::result::Result<(), String> {
    if let Some((k, v)) = row
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < -tolerance || **v > 1.0 + tolerance)
    {
        return Err(format!("entry {k} = {v} outside [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

macro_rules! matrix_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Serialize)]
        #[serde(transparent)]
        pub struct $name(pub Matrix);

        impl $name {
            pub fn from_rows(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
                Matrix::from_rows(rows).map($name)
            }
        }

        impl Deref for $name {
            type Target = Matrix;
            fn deref(&self) -> &Matrix {
                &self.0
            }
        }
    };
}

matrix_newtype!(
    /// L attention rows, each a distribution over T encoder frames.
    AttentionMatrix
);
matrix_newtype!(
    /// L decoder posterior rows, each a distribution over K labels.
    PosteriorMatrix
);
matrix_newtype!(
    /// L pre-softmax logit rows of length K.
    ActivationMatrix
);

/// One utterance's recognizer outputs plus its (optional) true CER.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub dataset: String,
    /// Character error rate as a fraction; may exceed 1.
    pub cer: Option<f64>,
    pub attention: Option<AttentionMatrix>,
    pub decoder_post: Option<PosteriorMatrix>,
    pub presoftmax: Option<ActivationMatrix>,
}

impl UtteranceRecord {
    /// Number of predictions, taken from the first present feature.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<usize> {
        self.attention
            .as_deref()
            .or(self.decoder_post.as_deref())
            .or(self.presoftmax.as_deref())
            .map(Matrix::n_rows)
    }

    pub fn attention(&self) -> Result<&AttentionMatrix> {
        self.attention.as_ref().ok_or_else(|| self.missing("attention"))
    }

    pub fn decoder_post(&self) -> Result<&PosteriorMatrix> {
        self.decoder_post
            .as_ref()
            .ok_or_else(|| self.missing("decoder_post"))
    }

    pub fn presoftmax(&self) -> Result<&ActivationMatrix> {
        self.presoftmax
            .as_ref()
            .ok_or_else(|| self.missing("presoftmax"))
    }

    pub fn require_cer(&self) -> Result<f64> {
        self.cer.ok_or_else(|| Error::CerRequired {
            id: self.id.clone(),
        })
    }

    fn missing(&self, feature: &'static str) -> Error {
        Error::MissingFeature {
            id: self.id.clone(),
            feature,
        }
    }
}

/// Ordered records with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus { records })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose dataset tag is in `tags`; all records if `tags` is empty.
    pub fn filter_datasets(&self, tags: &[String]) -> Corpus {
        if tags.is_empty() {
            return self.clone();
        }
        Corpus {
            records: self
                .records
                .iter()
                .filter(|r| tags.contains(&r.dataset))
                .cloned()
                .collect(),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// validation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    RowSum,
    RowRange,
    NonFinite,
    Empty,
    LMismatch,
    KMismatch,
    SoftmaxMismatch,
    NegativeCer,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::RowSum => "row-sum",
            ViolationKind::RowRange => "row-range",
            ViolationKind::NonFinite => "non-finite",
            ViolationKind::Empty => "empty",
            ViolationKind::LMismatch => "L-mismatch",
            ViolationKind::KMismatch => "K-mismatch",
            ViolationKind::SoftmaxMismatch => "softmax-mismatch",
            ViolationKind::NegativeCer => "negative-cer",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct ValidateOptions {
    pub tolerance: f64,
    pub check_softmax: bool,
    pub softmax_tolerance: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            tolerance: DEFAULT_TOLERANCE,
            check_softmax: true,
            softmax_tolerance: SOFTMAX_TOLERANCE,
        }
    }
}

/// Checks every record invariant at `tolerance`, with the softmax
/// consistency check enabled.
pub fn validate(record: &UtteranceRecord, tolerance: f64) -> Vec<Violation> {
    validate_with(
        record,
        &ValidateOptions {
            tolerance,
            ..ValidateOptions::default()
        },
    )
}

pub fn validate_with(record: &UtteranceRecord, opts: &ValidateOptions) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, detail: String| out.push(Violation { kind, detail });

    if let Some(cer) = record.cer {
        if !cer.is_finite() {
            push(ViolationKind::NonFinite, format!("cer = {cer}"));
        } else if cer < 0.0 {
            push(ViolationKind::NegativeCer, format!("cer = {cer}"));
        }
    }

    let stochastic = [
        ("attention", record.attention.as_deref()),
        ("decoder_post", record.decoder_post.as_deref()),
    ];
    for (name, m) in stochastic {
        let Some(m) = m else { continue };
        if m.n_rows() == 0 || m.n_cols() == 0 {
            push(ViolationKind::Empty, format!("{name} has no entries"));
            continue;
        }
        for (l, row) in m.rows().enumerate() {
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                push(ViolationKind::NonFinite, format!("{name} row {l} entry {k}"));
                continue;
            }
            if let Some(k) = row
                .iter()
                .position(|v| *v < -opts.tolerance || *v > 1.0 + opts.tolerance)
            {
                push(
                    ViolationKind::RowRange,
                    format!("{name} row {l} entry {k} = {}", row[k]),
                );
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > opts.tolerance {
                push(ViolationKind::RowSum, format!("{name} row {l} sums to {sum}"));
            }
        }
    }

    if let Some(m) = record.presoftmax.as_deref() {
        if m.n_rows() == 0 || m.n_cols() == 0 {
            push(ViolationKind::Empty, "presoftmax has no entries".into());
        } else if !m.is_finite() {
            push(ViolationKind::NonFinite, "presoftmax".into());
        }
    }

    let lengths: Vec<(&str, usize)> = [
        ("attention", record.attention.as_deref()),
        ("decoder_post", record.decoder_post.as_deref()),
        ("presoftmax", record.presoftmax.as_deref()),
    ]
    .into_iter()
    .filter_map(|(n, m)| m.map(|m| (n, m.n_rows())))
    .collect();
    if let Some(&(first, l0)) = lengths.first() {
        for &(name, l) in &lengths[1..] {
            if l != l0 {
                push(
                    ViolationKind::LMismatch,
                    format!("{first} has L={l0} but {name} has L={l}"),
                );
            }
        }
    }

    if let (Some(post), Some(act)) = (record.decoder_post.as_deref(), record.presoftmax.as_deref())
    {
        if post.n_cols() != act.n_cols() {
            push(
                ViolationKind::KMismatch,
                format!(
                    "decoder_post has K={} but presoftmax has K={}",
                    post.n_cols(),
                    act.n_cols()
                ),
            );
        } else if opts.check_softmax && post.n_rows() == act.n_rows() && act.is_finite() {
            for (l, (p, z)) in post.rows().zip(act.rows()).enumerate() {
                let s = softmax(z);
                let worst = p
                    .iter()
                    .zip(&s)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if worst > opts.softmax_tolerance {
                    push(
                        ViolationKind::SoftmaxMismatch,
                        format!("row {l} differs from softmax(presoftmax) by {worst}"),
                    );
                }
            }
        }
    }

    out
}

// ---------------------------------------------------------------------------
// container IO

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    dataset: &'a str,
    cer: Option<f64>,
    attention: Option<&'a AttentionMatrix>,
    decoder_post: Option<&'a PosteriorMatrix>,
    presoftmax: Option<&'a ActivationMatrix>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    #[serde(default)]
    dataset: String,
    #[serde(default)]
    cer: Option<f64>,
    #[serde(default)]
    attention: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    decoder_post: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    presoftmax: Option<Vec<Vec<f64>>>,
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    read_corpus_from(BufReader::new(reader)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus_from<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, line_no)?);
    }
    Corpus::new(records)
}

fn parse_line(line: &str, line_no: usize) -> Result<UtteranceRecord> {
    if let Some(token) = bare_non_finite_token(line) {
        return Err(Error::NonFiniteValue {
            line: line_no,
            detail: token.to_string(),
        });
    }
    let raw: RecordIn = serde_json::from_str(line).map_err(|e| {
        let message = e.to_string();
        if message.contains("number out of range") {
            Error::NonFiniteValue {
                line: line_no,
                detail: message,
            }
        } else {
            Error::MalformedLine {
                line: line_no,
                message,
            }
        }
    })?;

    let matrix = |field: &str, rows: Option<Vec<Vec<f64>>>| -> Result<Option<Matrix>> {
        rows.map(|r| {
            Matrix::from_rows(r)
                .map_err(|m| Error::DimensionMismatch(format!("line {line_no}: {field}: {m}")))
        })
        .transpose()
    };
    let record = UtteranceRecord {
        id: raw.id,
        dataset: raw.dataset,
        cer: raw.cer,
        attention: matrix("attention", raw.attention)?.map(AttentionMatrix),
        decoder_post: matrix("decoder_post", raw.decoder_post)?.map(PosteriorMatrix),
        presoftmax: matrix("presoftmax", raw.presoftmax)?.map(ActivationMatrix),
    };
    let l = [
        record.attention.as_deref(),
        record.decoder_post.as_deref(),
        record.presoftmax.as_deref(),
    ];
    let ls: Vec<usize> = l.iter().flatten().map(|m| m.n_rows()).collect();
    if ls.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::DimensionMismatch(format!(
            "line {line_no}: features disagree on L ({ls:?})"
        )));
    }
    if let (Some(p), Some(a)) = (record.decoder_post.as_deref(), record.presoftmax.as_deref()) {
        if p.n_cols() != a.n_cols() {
            return Err(Error::DimensionMismatch(format!(
                "line {line_no}: decoder_post K={} vs presoftmax K={}",
                p.n_cols(),
                a.n_cols()
            )));
        }
    }
    Ok(record)
}

/// Finds `NaN` / `Infinity` / `inf` literals outside of JSON strings.
fn bare_non_finite_token(line: &str) -> Option<&'static str> {
    const TOKENS: [&str; 5] = ["NaN", "nan", "Infinity", "infinity", "inf"];
    let bytes = line.as_bytes();
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
        } else if b == b'"' {
            in_string = true;
        } else if let Some(t) = TOKENS.iter().find(|t| line[i..].starts_with(**t)) {
            return Some(t);
        }
        i += 1;
    }
    None
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if is_gzip(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write_corpus_to(corpus, &mut enc).and_then(|_| {
            enc.try_finish().map_err(|e| Error::io(path, e))?;
            enc.get_mut().flush().map_err(|e| Error::io(path, e))
        })
    } else {
        let mut w = BufWriter::new(file);
        write_corpus_to(corpus, &mut w).and_then(|_| w.flush().map_err(|e| Error::io(path, e)))
    };
    result.map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    for (i, r) in corpus.records().iter().enumerate() {
        let finite = r.cer.is_none_or(f64::is_finite)
            && [
                r.attention.as_deref(),
                r.decoder_post.as_deref(),
                r.presoftmax.as_deref(),
            ]
            .into_iter()
            .flatten()
            .all(Matrix::is_finite);
        if !finite {
            return Err(Error::NonFiniteValue {
                line: i + 1,
                detail: format!("utterance {}", r.id),
            });
        }
        let out = RecordOut {
            id: &r.id,
            dataset: &r.dataset,
            cer: r.cer,
            attention: r.attention.as_ref(),
            decoder_post: r.decoder_post.as_ref(),
            presoftmax: r.presoftmax.as_ref(),
        };
        serde_json::to_writer(&mut *w, &out).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}
