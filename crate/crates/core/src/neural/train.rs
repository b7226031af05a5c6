//! Minibatch training loop shared by the autoencoder and the recurrent
//! predictor: seeded shuffling, held-out early stopping, optional gradient
//! clipping and Adam updates.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Adam, AdamConfig};
use super::params::ParamSet;

/// A differentiable loss over indexed training items.
pub trait Objective: Sync {
    /// Mean loss over `items` and its gradient, laid out like `params`.
    fn loss_and_grad(&self, params: &ParamSet, items: &[usize]) -> (f64, Vec<Array2<f64>>);

    /// Mean loss over `items`.
    fn loss(&self, params: &ParamSet, items: &[usize]) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Share of items held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training-split loss before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Training-split loss of the returned parameters.
    pub final_loss: f64,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Splits `0..n` into (train, validation) with a seeded shuffle.
pub fn holdout_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = if fraction > 0.0 && n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(0, n - 1)
    } else {
        0
    };
    if n_val == 0 {
        return (idx, Vec::new());
    }
    idx.shuffle(rng);
    let val = idx.split_off(n - n_val);
    let (mut train, mut val) = (idx, val);
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn fit<O: Objective>(
    params: &mut ParamSet,
    n_items: usize,
    objective: &O,
    config: &TrainConfig,
) -> TrainHistory {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let (train, val) = holdout_split(n_items, config.validation_fraction, &mut rng);
    let mut adam = Adam::new(
        params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );

    let mut history = TrainHistory {
        initial_loss: objective.loss(params, &train),
        n_train: train.len(),
        n_validation: val.len(),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamSet)> = if val.is_empty() {
        None
    } else {
        Some((objective.loss(params, &val), params.clone()))
    };
    let mut stale = 0usize;
    let batch = config.batch_size.max(1);

    let mut order = train.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, mut grads) = objective.loss_and_grad(params, chunk);
            total += loss * chunk.len() as f64;
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam.step(params, &grads);
        }
        history.epoch_losses.push(total / order.len().max(1) as f64);

        if let Some((best_loss, best_params)) = best.as_mut() {
            let v = objective.loss(params, &val);
            history.validation_losses.push(v);
            if v < *best_loss {
                *best_loss = v;
                *best_params = params.clone();
                history.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }

    if let Some((_, best_params)) = best {
        *params = best_params;
    }
    history.final_loss = objective.loss(params, &train);
    history
}
