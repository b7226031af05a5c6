//! Synthetic utterances with a controllable corruption level.
//!
//! Each utterance draws a corruption level γ. Clean logits are one-hot on a
//! random label sequence with sharpness `(1 - γ)·tau`, plus Gaussian noise of
//! scale `γ·sigma`. Attention rows are a narrow bump on the diagonal mixed
//! toward uniform with weight γ. The CER is `max(0, γ² + noise)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    softmax, ActivationMatrix, AttentionMatrix, Corpus, Matrix, PosteriorMatrix, UtteranceRecord,
};
use crate::error::{Error, Result};

/// Width (in frames) of the clean attention bump.
const ATTENTION_WIDTH: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// (dataset tag, utterance count) in generation order.
    pub splits: Vec<(String, usize)>,
    pub k: usize,
    /// Inclusive range of prediction counts L.
    pub l_range: (usize, usize),
    /// Inclusive range of encoder frame counts T.
    pub t_range: (usize, usize),
    pub corruption_range: (f64, f64),
    pub cer_noise_std: f64,
    pub tau: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            splits: vec![
                ("train".into(), 60),
                ("dev".into(), 20),
                ("test".into(), 20),
            ],
            k: 52,
            l_range: (8, 30),
            t_range: (40, 120),
            corruption_range: (0.0, 1.0),
            cer_noise_std: 0.05,
            tau: 10.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Splits `n` utterances 60/20/20 into train/dev/test.
    pub fn with_total(mut self, n: usize) -> Self {
        let train = n * 3 / 5;
        let dev = n / 5;
        self.splits = vec![
            ("train".into(), train),
            ("dev".into(), dev),
            ("test".into(), n - train - dev),
        ];
        self
    }

    /// All `n` utterances under a single tag.
    pub fn single(mut self, tag: &str, n: usize) -> Self {
        self.splits = vec![(tag.to_string(), n)];
        self
    }

    pub fn n_utterances(&self) -> usize {
        self.splits.iter().map(|(_, n)| n).sum()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (lmin, lmax) = self.l_range;
        let (tmin, tmax) = self.t_range;
        let (gmin, gmax) = self.corruption_range;
        if self.k < 2 {
            return bad(format!("K must be >= 2, got {}", self.k));
        }
        if lmin < 1 || lmin > lmax {
            return bad(format!("empty L range {lmin}..={lmax}"));
        }
        if tmin < 2 || tmin > tmax {
            return bad(format!("T range {tmin}..={tmax} must be nonempty with T >= 2"));
        }
        if !(0.0..=1.0).contains(&gmin) || !(0.0..=1.0).contains(&gmax) || gmin > gmax {
            return bad(format!("corruption range [{gmin}, {gmax}] not inside [0, 1]"));
        }
        if !(self.cer_noise_std >= 0.0 && self.tau > 0.0 && self.sigma >= 0.0) {
            return bad("noise scales must be nonnegative and tau positive".into());
        }
        if self.splits.iter().any(|(t, _)| t.is_empty()) {
            return bad("dataset tags must be nonempty".into());
        }
        Ok(())
    }
}

/// Synthetic CER as a function of corruption before noise.
pub fn cer_curve(gamma: f64) -> f64 {
    gamma * gamma
}

pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    generate_with_levels(config).map(|(c, _)| c)
}

/// Like [`generate`], also returning each record's corruption level.
pub fn generate_with_levels(config: &SynthConfig) -> Result<(Corpus, Vec<f64>)> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(config.n_utterances());
    let mut levels = Vec::with_capacity(config.n_utterances());

    for (tag, count) in &config.splits {
        for i in 0..*count {
            let (gmin, gmax) = config.corruption_range;
            let gamma = if gmax > gmin {
                rng.random_range(gmin..=gmax)
            } else {
                gmin
            };
            let l = rng.random_range(config.l_range.0..=config.l_range.1);
            let t = rng.random_range(config.t_range.0..=config.t_range.1);
            let k = config.k;

            let sharp = (1.0 - gamma) * config.tau;
            let noise = gamma * config.sigma;
            let mut logits = Vec::with_capacity(l * k);
            for _ in 0..l {
                let label = rng.random_range(0..k);
                for j in 0..k {
                    let base = if j == label { sharp } else { 0.0 };
                    logits.push(base + noise * unit.sample(&mut rng));
                }
            }
            let presoftmax = Matrix::from_flat(l, k, logits);
            let post: Vec<f64> = presoftmax.rows().flat_map(softmax).collect();

            let mut att = Vec::with_capacity(l * t);
            for row in 0..l {
                let center = (row as f64 + 0.5) * t as f64 / l as f64 - 0.5;
                let bump: Vec<f64> = (0..t)
                    .map(|f| {
                        let d = (f as f64 - center) / ATTENTION_WIDTH;
                        (-0.5 * d * d).exp()
                    })
                    .collect();
                let z: f64 = bump.iter().sum();
                att.extend(
                    bump.into_iter()
                        .map(|b| (1.0 - gamma) * b / z + gamma / t as f64),
                );
            }

            let cer = (cer_curve(gamma) + config.cer_noise_std * unit.sample(&mut rng)).max(0.0);
            records.push(UtteranceRecord {
                id: format!("{tag}-{i:05}"),
                dataset: tag.clone(),
                cer: Some(cer),
                attention: Some(AttentionMatrix(Matrix::from_flat(l, t, att))),
                decoder_post: Some(PosteriorMatrix(Matrix::from_flat(l, k, post))),
                presoftmax: Some(ActivationMatrix(presoftmax)),
            });
            levels.push(gamma);
        }
    }
    Ok((Corpus::new(records)?, levels))
}
