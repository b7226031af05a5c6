//! Small reverse-mode autodiff kit with the layers the autoencoder and the
//! recurrent predictor need: dense, LSTM / BLSTM, subsampling, mean pooling,
//! ReLU, MSE loss and Adam.

mod graph;
mod layers;
mod optim;
mod params;
pub mod train;

pub use graph::{sigmoid, Grads, Graph, Var};
pub use layers::{lstm_step, mean_pool, subsample_half, Blstm, Dense, LstmCell};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use params::{uniform_init, Checkpoint, ParamId, ParamSet};
