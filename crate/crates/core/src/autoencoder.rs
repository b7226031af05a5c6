//! Feed-forward autoencoder over pre-softmax activation vectors. An
//! utterance's score is the mean squared reconstruction error of its
//! standardized activations; mismatched inputs reconstruct poorly.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};
use crate::measures::{score_with, MeasureId, ScoreOutcome};
use crate::neural::train::{self, Objective, TrainConfig, TrainHistory};
use crate::neural::{Checkpoint, Dense, Graph, ParamSet};

const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Activation width K; 0 means "take it from the training corpus".
    pub input_dim: usize,
    /// Hidden layer widths between input and output. The smallest one is the
    /// bottleneck.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Minibatch size in utterances.
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub validation_fraction: f64,
    pub patience: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig::desk()
    }
}

impl AeConfig {
    /// Small preset: K -> 64 -> 16 -> 64 -> K.
    pub fn desk() -> Self {
        AeConfig {
            input_dim: 0,
            hidden: vec![64, 16, 64],
            epochs: 100,
            batch_size: 8,
            seed: 0,
            lr: 1e-3,
            validation_fraction: 0.1,
            patience: 10,
        }
    }

    /// Five weight layers: K -> 512 -> 512 -> 24 -> 512 -> K.
    pub fn full_scale() -> Self {
        AeConfig {
            hidden: vec![512, 512, 24, 512],
            ..AeConfig::desk()
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.hidden.iter().copied().min().unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "autoencoder hidden widths must be positive".into(),
            ));
        }
        if self.input_dim > 0 && self.bottleneck() >= self.input_dim {
            return Err(Error::InvalidConfig(format!(
                "bottleneck {} must be smaller than input dim {}",
                self.bottleneck(),
                self.input_dim
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    pub config: AeConfig,
    params: ParamSet,
    layers: Vec<Dense>,
    /// Per-dimension standardization statistics.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AeModel {
    /// Freshly initialized model with identity standardization.
    pub fn new(config: AeConfig) -> Result<Self> {
        config.check()?;
        if config.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::default();
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.input_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&mut params, &mut rng, &format!("layer{i}"), w[0], w[1]))
            .collect();
        Ok(AeModel {
            mean: vec![0.0; config.input_dim],
            std: vec![1.0; config.input_dim],
            config,
            params,
            layers,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn standardize(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
    }

    fn standardized_input(&self, record: &UtteranceRecord) -> Result<Array2<f64>> {
        let act = record.presoftmax()?;
        if act.n_cols() != self.config.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "utterance {}: K = {} but the autoencoder expects {}",
                record.id,
                act.n_cols(),
                self.config.input_dim
            )));
        }
        let mut x = Array2::from_shape_vec((act.n_rows(), act.n_cols()), act.as_slice().to_vec())
            .expect("activation matrix shape");
        self.standardize(&mut x);
        Ok(x)
    }

    fn forward(&self, g: &mut Graph, x: crate::neural::Var) -> crate::neural::Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Reconstruction of standardized inputs.
    pub fn reconstruct(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new(&self.params);
        let x = g.input(standardized.clone());
        let y = self.forward(&mut g, x);
        g.value(y).clone()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Array2<f64>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.push(("norm.mean".into(), Array2::from_shape_vec((1, self.mean.len()), self.mean.clone()).unwrap()));
        tensors.push(("norm.std".into(), Array2::from_shape_vec((1, self.std.len()), self.std.clone()).unwrap()));
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({ "config": self.config }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected an {CHECKPOINT_KIND} checkpoint, found '{}'",
                ck.kind
            )));
        }
        let config: AeConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = AeModel::new(config)?;
        model.params = ck.params_like(&model.params)?;
        model.mean = ck.tensor("norm.mean")?.iter().copied().collect();
        model.std = ck.tensor("norm.std")?.iter().copied().collect();
        if model.mean.len() != model.config.input_dim || model.std.len() != model.config.input_dim
        {
            return Err(Error::Checkpoint("normalization stats have the wrong width".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-dimension mean and standard deviation over all rows; zero deviations
/// are replaced by 1.
pub(crate) fn column_stats(rows: &[&Array2<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n: usize = rows.iter().map(|m| m.nrows()).sum();
    let mut mean = vec![0.0; k];
    for m in rows {
        for (acc, s) in mean.iter_mut().zip(m.sum_axis(Axis(0))) {
            *acc += s;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; k];
    for m in rows {
        for row in m.rows() {
            for (j, v) in row.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-8 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

struct Reconstruction<'a> {
    model: &'a AeModel,
    inputs: Vec<Array2<f64>>,
}

impl Reconstruction<'_> {
    fn batch(&self, items: &[usize]) -> Array2<f64> {
        let views: Vec<_> = items.iter().map(|&i| self.inputs[i].view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("same K")
    }
}

impl Objective for Reconstruction<'_> {
    fn loss_and_grad(&self, params: &ParamSet, items: &[usize]) -> (f64, Vec<Array2<f64>>) {
        let mut g = Graph::new(params);
        let x = g.input(self.batch(items));
        let y = self.model.forward(&mut g, x);
        let loss = g.mse(y, x);
        let grads = g.backward(loss);
        let mut acc = params.zeros_like();
        g.accumulate_param_grads(&grads, &mut acc);
        (g.value(loss)[[0, 0]], acc)
    }

    fn loss(&self, params: &ParamSet, items: &[usize]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        let mut g = Graph::new(params);
        let x = g.input(self.batch(items));
        let y = self.model.forward(&mut g, x);
        let loss = g.mse(y, x);
        g.value(loss)[[0, 0]]
    }
}

/// Trains on the pre-softmax activations of every record in `corpus`.
pub fn train_ae(corpus: &Corpus, config: &AeConfig) -> Result<(AeModel, TrainHistory)> {
    if corpus.is_empty() {
        return Err(Error::Empty("autoencoder training corpus".into()));
    }
    let mut raw = Vec::with_capacity(corpus.len());
    for r in corpus.records() {
        let act = r.presoftmax()?;
        if act.n_rows() == 0 {
            return Err(Error::TooShort {
                id: r.id.clone(),
                message: "no activation rows".into(),
            });
        }
        raw.push(
            Array2::from_shape_vec((act.n_rows(), act.n_cols()), act.as_slice().to_vec())
                .expect("activation matrix shape"),
        );
    }
    let k = raw[0].ncols();
    if let Some(r) = raw.iter().position(|m| m.ncols() != k) {
        return Err(Error::DimensionMismatch(format!(
            "utterance {} has K = {}, expected {k}",
            corpus.records()[r].id,
            raw[r].ncols()
        )));
    }
    let mut config = config.clone();
    if config.input_dim == 0 {
        config.input_dim = k;
    } else if config.input_dim != k {
        return Err(Error::DimensionMismatch(format!(
            "config input_dim {} but corpus K = {k}",
            config.input_dim
        )));
    }

    let mut model = AeModel::new(config.clone())?;
    let refs: Vec<&Array2<f64>> = raw.iter().collect();
    let (mean, std) = column_stats(&refs, k);
    model.mean = mean;
    model.std = std;
    for m in &mut raw {
        model.standardize(m);
    }

    let mut params = model.params.clone();
    let history = {
        let objective = Reconstruction {
            model: &model,
            inputs: raw,
        };
        train::fit(
            &mut params,
            corpus.len(),
            &objective,
            &TrainConfig {
                epochs: config.epochs,
                batch_size: config.batch_size,
                seed: config.seed,
                lr: config.lr,
                clip_norm: None,
                validation_fraction: config.validation_fraction,
                patience: config.patience,
            },
        )
    };
    model.params = params;
    Ok((model, history))
}

/// Mean over steps of the per-step mean squared reconstruction error, in
/// standardized space.
pub fn ae_score(model: &AeModel, record: &UtteranceRecord) -> Result<f64> {
    let x = model.standardized_input(record)?;
    if x.nrows() == 0 {
        return Err(Error::TooShort {
            id: record.id.clone(),
            message: "no activation rows".into(),
        });
    }
    let y = model.reconstruct(&x);
    let per_step: Vec<f64> = (&y - &x)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|d| d * d).sum::<f64>() / r.len() as f64)
        .collect();
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

pub fn score_corpus_ae(model: &AeModel, corpus: &Corpus, jobs: usize) -> ScoreOutcome {
    score_with(corpus, MeasureId::Ae, jobs, |r| ae_score(model, r))
}
