//! Linear calibration `CER ≈ a·PM + b` fit by least squares on a dev split,
//! and MSE evaluation per dataset with a pooled row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measures::{MeasureId, PmScore};

/// Label of the pooled row in reports.
pub const POOLED: &str = "All Together";

/// Slope and intercept from ordinary least squares.
pub fn fit_linear(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx.is_nan() || sxx <= 0.0 {
        return Err(Error::DegenerateFit("scores have zero variance".into()));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::DegenerateFit("non-finite coefficients".into()));
    }
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub measure: MeasureId,
    pub a: f64,
    pub b: f64,
    pub n_dev: usize,
    /// SHA-256 over the fitted (score, cer) pairs.
    pub digest: String,
}

impl CalibrationModel {
    pub fn predict(&self, pm: f64) -> f64 {
        self.a * pm + self.b
    }
}

fn pairs_of(scores: &[&PmScore]) -> Result<Vec<(f64, f64)>> {
    scores
        .iter()
        .map(|s| {
            s.cer.map(|c| (s.score, c)).ok_or_else(|| Error::CerRequired {
                id: s.utterance_id.clone(),
            })
        })
        .collect()
}

fn digest(pairs: &[(f64, f64)]) -> String {
    let mut h = Sha256::new();
    for (x, y) in pairs {
        h.update(x.to_le_bytes());
        h.update(y.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fits one line for `measure` on every score of that measure in `scores`.
pub fn fit_calibration(measure: MeasureId, scores: &[PmScore]) -> Result<CalibrationModel> {
    let chosen: Vec<&PmScore> = scores.iter().filter(|s| s.measure == measure).collect();
    let pairs = pairs_of(&chosen)?;
    let (a, b) = fit_linear(&pairs)?;
    Ok(CalibrationModel {
        measure,
        a,
        b,
        n_dev: pairs.len(),
        digest: digest(&pairs),
    })
}

/// Measures present in `scores`, in first-appearance order.
pub fn measures_in(scores: &[PmScore]) -> Vec<MeasureId> {
    let mut out = Vec::new();
    for s in scores {
        if !out.contains(&s.measure) {
            out.push(s.measure);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub models: Vec<CalibrationModel>,
}

impl CalibrationSet {
    pub fn get(&self, measure: MeasureId) -> Option<&CalibrationModel> {
        self.models.iter().find(|m| m.measure == measure)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("calibration serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMse {
    pub dataset: String,
    pub n: usize,
    pub mse: f64,
}

impl GroupMse {
    /// Square root of the MSE: the average prediction error.
    pub fn rmse(&self) -> f64 {
        self.mse.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureEval {
    pub measure: MeasureId,
    pub groups: Vec<GroupMse>,
    pub pooled: GroupMse,
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// MSE of calibrated predictions per dataset (first-appearance order) and
/// pooled over all evaluated utterances.
pub fn evaluate(model: &CalibrationModel, scores: &[PmScore], clip_nonnegative: bool) -> Result<MeasureEval> {
    let chosen: Vec<&PmScore> = scores.iter().filter(|s| s.measure == model.measure).collect();
    if chosen.is_empty() {
        return Err(Error::Empty(format!("no '{}' scores to evaluate", model.measure)));
    }
    let pairs = pairs_of(&chosen)?;
    let predict = |pm: f64| {
        let y = model.predict(pm);
        if clip_nonnegative {
            y.max(0.0)
        } else {
            y
        }
    };

    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for (s, &(pm, cer)) in chosen.iter().zip(&pairs) {
        let e = (predict(pm) - cer).powi(2);
        total += e;
        let entry = sums.entry(s.dataset.as_str()).or_insert_with(|| {
            order.push(s.dataset.as_str());
            (0, 0.0)
        });
        entry.0 += 1;
        entry.1 += e;
    }
    let groups = order
        .into_iter()
        .map(|d| {
            let (n, sq) = sums[d];
            GroupMse {
                dataset: d.to_string(),
                n,
                mse: sq / n as f64,
            }
        })
        .collect();
    Ok(MeasureEval {
        measure: model.measure,
        groups,
        pooled: GroupMse {
            dataset: POOLED.into(),
            n: pairs.len(),
            mse: total / pairs.len() as f64,
        },
    })
}

/// Evaluation of several measures over the same datasets.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub columns: Vec<MeasureEval>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("measure\tdataset\tn\tmse\tmse_x1e-2\trmse\n");
        for col in &self.columns {
            for g in col.groups.iter().chain([&col.pooled]) {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    col.measure,
                    g.dataset,
                    g.n,
                    g.mse,
                    g.mse * 100.0,
                    g.rmse()
                );
            }
        }
        out
    }

    /// Aligned table of MSE ×10⁻², one column per measure.
    pub fn to_table(&self) -> String {
        let mut datasets: Vec<&str> = Vec::new();
        for col in &self.columns {
            for g in &col.groups {
                if !datasets.contains(&g.dataset.as_str()) {
                    datasets.push(&g.dataset);
                }
            }
        }
        datasets.push(POOLED);
        let name_w = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(7);
        let col_w = self
            .columns
            .iter()
            .map(|c| c.measure.as_str().len())
            .max()
            .unwrap_or(0)
            .max(8);

        let mut out = String::from("MSE (x1e-2) of calibrated predictions\n");
        let _ = write!(out, "{:<name_w$}", "dataset");
        for c in &self.columns {
            let _ = write!(out, "  {:>col_w$}", c.measure.as_str());
        }
        out.push('\n');
        for d in datasets {
            let _ = write!(out, "{d:<name_w$}");
            for c in &self.columns {
                let cell = if d == POOLED {
                    Some(&c.pooled)
                } else {
                    c.groups.iter().find(|g| g.dataset == d)
                };
                match cell {
                    Some(g) => {
                        let _ = write!(out, "  {:>col_w$.2}", g.mse * 100.0);
                    }
                    None => {
                        let _ = write!(out, "  {:>col_w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// scatter export

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub utterance_id: String,
    pub dataset: String,
    pub pm: f64,
    pub cer: f64,
    pub fitted: f64,
}

pub fn export_scatter(model: &CalibrationModel, scores: &[PmScore]) -> Result<Vec<ScatterRow>> {
    scores
        .iter()
        .filter(|s| s.measure == model.measure)
        .map(|s| {
            let cer = s.cer.ok_or_else(|| Error::CerRequired {
                id: s.utterance_id.clone(),
            })?;
            Ok(ScatterRow {
                utterance_id: s.utterance_id.clone(),
                dataset: s.dataset.clone(),
                pm: s.score,
                cer,
                fitted: model.predict(s.score),
            })
        })
        .collect()
}

pub fn scatter_tsv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("utterance_id\tdataset\tpm\tcer\tfitted_cer\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.utterance_id, r.dataset, r.pm, r.cer, r.fitted
        );
    }
    out
}

// ---------------------------------------------------------------------------
// correlation

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: &str, ds: &str, pm: f64, cer: Option<f64>) -> PmScore {
        PmScore {
            utterance_id: id.into(),
            dataset: ds.into(),
            measure: MeasureId::McdDec,
            score: pm,
            cer,
        }
    }

    #[test]
    fn exact_line_recovered() {
        let (a, b) = fit_linear(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && b.abs() < 1e-12);
        let (a, b) = fit_linear(&[(0.0, 1.0), (1.0, 1.0)]).unwrap();
        assert_eq!((a, b), (0.0, 1.0));
    }

    #[test]
    fn degenerate_fits_are_errors() {
        assert!(matches!(fit_linear(&[(1.0, 2.0)]), Err(Error::DegenerateFit(_))));
        assert!(matches!(
            fit_linear(&[(1.0, 2.0), (1.0, 3.0)]),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn evaluation_mse_values() {
        let model = CalibrationModel {
            measure: MeasureId::McdDec,
            a: 1.0,
            b: 0.0,
            n_dev: 2,
            digest: String::new(),
        };
        let perfect = vec![score("a", "x", 0.1, Some(0.1)), score("b", "x", 0.3, Some(0.3))];
        assert_eq!(evaluate(&model, &perfect, false).unwrap().pooled.mse, 0.0);

        let s = vec![score("a", "x", 0.1, Some(0.1)), score("b", "y", 0.2, Some(0.4))];
        let ev = evaluate(&model, &s, false).unwrap();
        assert!((ev.pooled.mse - 0.02).abs() < 1e-15);
        assert_eq!(ev.groups.len(), 2);
        assert_eq!(ev.groups[0].mse, 0.0);
        assert!((ev.groups[1].mse - 0.04).abs() < 1e-15);
    }

    #[test]
    fn clipping_is_opt_in() {
        let model = CalibrationModel {
            measure: MeasureId::McdDec,
            a: 1.0,
            b: -1.0,
            n_dev: 2,
            digest: String::new(),
        };
        let s = vec![score("a", "x", 0.5, Some(0.0))];
        assert!((evaluate(&model, &s, false).unwrap().pooled.mse - 0.25).abs() < 1e-15);
        assert_eq!(evaluate(&model, &s, true).unwrap().pooled.mse, 0.0);
    }

    #[test]
    fn evaluation_errors() {
        let model = CalibrationModel {
            measure: MeasureId::EntropyDec,
            a: 1.0,
            b: 0.0,
            n_dev: 2,
            digest: String::new(),
        };
        let s = vec![score("a", "x", 0.5, Some(0.0))];
        assert!(matches!(evaluate(&model, &s, false), Err(Error::Empty(_))));
        let m2 = CalibrationModel {
            measure: MeasureId::McdDec,
            ..model
        };
        let s = vec![score("a", "x", 0.5, None)];
        assert!(matches!(evaluate(&m2, &s, false), Err(Error::CerRequired { .. })));
        assert!(matches!(
            fit_calibration(MeasureId::McdDec, &s),
            Err(Error::CerRequired { .. })
        ));
    }

    #[test]
    fn scatter_rows() {
        let model = CalibrationModel {
            measure: MeasureId::McdDec,
            a: 0.5,
            b: 0.1,
            n_dev: 3,
            digest: String::new(),
        };
        let s = vec![
            score("a", "x", 0.2, Some(0.1)),
            score("b", "x", 0.4, Some(0.3)),
            score("c", "y", 0.6, Some(0.2)),
        ];
        let rows = export_scatter(&model, &s).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.fitted, 0.5 * r.pm + 0.1);
        }
        let empty = scatter_tsv(&export_scatter(&model, &[]).unwrap());
        assert_eq!(empty, "utterance_id\tdataset\tpm\tcer\tfitted_cer\n");
    }

    #[test]
    fn calibration_file_round_trip() {
        let scores: Vec<PmScore> = (0..5)
            .map(|i| score(&format!("u{i}"), "dev", i as f64 * 0.37, Some(0.1 * i as f64 + 0.03)))
            .collect();
        let set = CalibrationSet {
            models: vec![fit_calibration(MeasureId::McdDec, &scores).unwrap()],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        set.save(&p).unwrap();
        assert_eq!(CalibrationSet::load(&p).unwrap(), set);
        assert_eq!(set.models[0].digest.len(), 64);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_rendering() {
        let model = CalibrationModel {
            measure: MeasureId::McdDec,
            a: 1.0,
            b: 0.0,
            n_dev: 2,
            digest: String::new(),
        };
        let s = vec![score("a", "wsj", 0.1, Some(0.2)), score("b", "chime", 0.2, Some(0.2))];
        let report = EvalReport {
            columns: vec![evaluate(&model, &s, false).unwrap()],
        };
        let table = report.to_table();
        assert!(table.contains("wsj") && table.contains(POOLED));
        assert!(table.contains("1.00"), "{table}");
        assert_eq!(report.to_tsv().lines().count(), 4);
    }
}
