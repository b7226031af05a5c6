//! Sequence regressor mapping an utterance's pre-softmax activations
//! directly to its CER:
//!
//! ```text
//! standardize -> [BLSTM -> keep every other step] x layers -> mean-pool
//!             -> linear(width) -> linear(1) -> ReLU
//! ```

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::column_stats;
use crate::datamodel::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};
use crate::measures::{score_with, MeasureId, ScoreOutcome};
use crate::neural::train::{self, Objective, TrainConfig, TrainHistory};
use crate::neural::{mean_pool, subsample_half, Blstm, Checkpoint, Dense, Graph, ParamSet, Var};

const CHECKPOINT_KIND: &str = "rnn-predictor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    /// Activation width K; 0 means "take it from the training corpus".
    pub input_dim: usize,
    pub layers: usize,
    /// Units per direction in each BLSTM layer.
    pub hidden: usize,
    /// Width of the linear layer after pooling.
    pub linear_width: usize,
    pub epochs: usize,
    /// Minibatch size in utterances.
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub patience: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig::desk()
    }
}

impl RnnConfig {
    pub fn desk() -> Self {
        RnnConfig {
            input_dim: 0,
            layers: 2,
            hidden: 32,
            linear_width: 32,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            lr: 1e-3,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            patience: 10,
        }
    }

    pub fn full_scale() -> Self {
        RnnConfig {
            hidden: 320,
            linear_width: 300,
            ..RnnConfig::desk()
        }
    }

    fn check(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.linear_width == 0 {
            return Err(Error::InvalidConfig(
                "rnn layers, hidden units and linear width must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnModel {
    pub config: RnnConfig,
    params: ParamSet,
    blstms: Vec<Blstm>,
    linear: Dense,
    output: Dense,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RnnModel {
    pub fn new(config: RnnConfig) -> Result<Self> {
        config.check()?;
        if config.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::default();
        let mut blstms = Vec::with_capacity(config.layers);
        let mut width = config.input_dim;
        for i in 0..config.layers {
            let layer = Blstm::new(&mut params, &mut rng, &format!("blstm{i}"), width, config.hidden);
            width = layer.output_dim();
            blstms.push(layer);
        }
        let linear = Dense::new(&mut params, &mut rng, "linear", width, config.linear_width);
        let output = Dense::new(&mut params, &mut rng, "output", config.linear_width, 1);
        Ok(RnnModel {
            mean: vec![0.0; config.input_dim],
            std: vec![1.0; config.input_dim],
            config,
            params,
            blstms,
            linear,
            output,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_layer(&self) -> Dense {
        self.output
    }

    /// Standardized `L×K` input.
    fn prepare(&self, record: &UtteranceRecord) -> Result<Array2<f64>> {
        let act = record.presoftmax()?;
        if act.n_cols() != self.config.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "utterance {}: K = {} but the predictor expects {}",
                record.id,
                act.n_cols(),
                self.config.input_dim
            )));
        }
        if act.n_rows() == 0 {
            return Err(Error::TooShort {
                id: record.id.clone(),
                message: "no activation rows".into(),
            });
        }
        Ok(Array2::from_shape_fn((act.n_rows(), act.n_cols()), |(l, k)| {
            (act.row(l)[k] - self.mean[k]) / self.std[k]
        }))
    }

    /// Builds the prediction node for a standardized input.
    pub fn forward(&self, g: &mut Graph, x: &Array2<f64>) -> Var {
        let mut seq: Vec<Var> = x
            .rows()
            .into_iter()
            .map(|r| g.input(r.to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        for layer in &self.blstms {
            seq = subsample_half(&layer.forward(g, &seq));
        }
        let pooled = mean_pool(g, &seq);
        let hidden = self.linear.forward(g, pooled);
        let out = self.output.forward(g, hidden);
        g.relu(out)
    }

    pub fn predict(&self, record: &UtteranceRecord) -> Result<f64> {
        let x = self.prepare(record)?;
        let mut g = Graph::new(&self.params);
        let y = self.forward(&mut g, &x);
        Ok(g.value(y)[[0, 0]])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Array2<f64>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        tensors.push(("norm.mean".into(), row(&self.mean)));
        tensors.push(("norm.std".into(), row(&self.std)));
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
        let config: RnnConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = RnnModel::new(config)?;
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

/// Squared error of one utterance and its parameter gradient.
pub fn utterance_loss_and_grad(
    model: &RnnModel,
    params: &ParamSet,
    x: &Array2<f64>,
    target: f64,
) -> (f64, Vec<Array2<f64>>) {
    let mut g = Graph::new(params);
    let y = model.forward(&mut g, x);
    let t = g.input(Array2::from_elem((1, 1), target));
    let loss = g.mse(y, t);
    let grads = g.backward(loss);
    let mut acc = params.zeros_like();
    g.accumulate_param_grads(&grads, &mut acc);
    (g.value(loss)[[0, 0]], acc)
}

struct CerRegression<'a> {
    model: &'a RnnModel,
    inputs: Vec<Array2<f64>>,
    targets: Vec<f64>,
}

impl Objective for CerRegression<'_> {
    fn loss_and_grad(&self, params: &ParamSet, items: &[usize]) -> (f64, Vec<Array2<f64>>) {
        let parts: Vec<(f64, Vec<Array2<f64>>)> = items
            .par_iter()
            .map(|&i| utterance_loss_and_grad(self.model, params, &self.inputs[i], self.targets[i]))
            .collect();
        // fixed summation order keeps results independent of thread count
        let mut total = 0.0;
        let mut acc = params.zeros_like();
        for (loss, grads) in parts {
            total += loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                *a += &g;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        (total / n, acc)
    }

    fn loss(&self, params: &ParamSet, items: &[usize]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        let losses: Vec<f64> = items
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new(params);
                let y = self.model.forward(&mut g, &self.inputs[i]);
                (g.value(y)[[0, 0]] - self.targets[i]).powi(2)
            })
            .collect();
        losses.iter().sum::<f64>() / items.len() as f64
    }
}

/// Trains on pre-softmax activations against the known CER of every record.
pub fn train_rnn(corpus: &Corpus, config: &RnnConfig) -> Result<(RnnModel, TrainHistory)> {
    if corpus.is_empty() {
        return Err(Error::Empty("rnn training corpus".into()));
    }
    let mut targets = Vec::with_capacity(corpus.len());
    let mut raw = Vec::with_capacity(corpus.len());
    for r in corpus.records() {
        targets.push(r.require_cer()?);
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
    if let Some(i) = raw.iter().position(|m| m.ncols() != k) {
        return Err(Error::DimensionMismatch(format!(
            "utterance {} has K = {}, expected {k}",
            corpus.records()[i].id,
            raw[i].ncols()
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

    let mut model = RnnModel::new(config.clone())?;
    let refs: Vec<&Array2<f64>> = raw.iter().collect();
    let (mean, std) = column_stats(&refs, k);
    let inputs: Vec<Array2<f64>> = raw
        .into_iter()
        .map(|mut m| {
            for mut row in m.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) / std[j];
                }
            }
            m
        })
        .collect();
    model.mean = mean;
    model.std = std;
    // start the output at the average target so the ReLU begins in its
    // active region
    let avg = targets.iter().sum::<f64>() / targets.len() as f64;
    model.params.get_mut(model.output.bias).fill(avg);

    let mut params = model.params.clone();
    let history = {
        let objective = CerRegression {
            model: &model,
            inputs,
            targets,
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
                clip_norm: Some(config.clip_norm),
                validation_fraction: config.validation_fraction,
                patience: config.patience,
            },
        )
    };
    model.params = params;
    Ok((model, history))
}

pub fn rnn_forward(model: &RnnModel, record: &UtteranceRecord) -> Result<f64> {
    model.predict(record)
}

pub fn score_corpus_rnn(model: &RnnModel, corpus: &Corpus, jobs: usize) -> ScoreOutcome {
    score_with(corpus, MeasureId::Rnn, jobs, |r| model.predict(r))
}
