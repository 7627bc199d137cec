use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::bptt::{finish_mean, grad_sum_indexed, Trainable, DEFAULT_CHUNK};
use super::Real;
use crate::features::SampleSource;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Full passes over all samples.
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Samples per parallel gradient unit.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            epochs: 8,
            seed: 0,
            adam: AdamConfig::default(),
            max_steps: None,
            grad_clip: None,
            chunk: DEFAULT_CHUNK,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer step counter at the end of the epoch.
    pub step: u64,
    /// Mean of the batch losses seen during the epoch, weighted by batch size.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Global L2 norm of all gradient tensors.
pub fn grad_norm<F: Real, M: Trainable<F>>(grads: &M) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Train with seeded per-epoch shuffling and Adam.
pub fn train<F, M, S>(init: M, data: &S, cfg: &TrainConfig) -> Result<TrainOutcome<M>>
where
    F: Real,
    M: Trainable<F>,
    S: SampleSource + ?Sized,
{
    train_with(init, data, cfg, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with<F, M, S, C>(init: M, data: &S, cfg: &TrainConfig, mut on_step: C) -> Result<TrainOutcome<M>>
where
    F: Real,
    M: Trainable<F>,
    S: SampleSource + ?Sized,
    C: FnMut(&StepInfo),
{
    if data.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut model = init;
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_acc = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| adam.step >= m) {
                if seen > 0 {
                    log.push(EpochLog {
                        epoch,
                        step: adam.step,
                        mean_loss: loss_acc / seen as f64,
                    });
                }
                break 'epochs;
            }
            let sum = grad_sum_indexed(&model, data, batch, cfg.chunk)?;
            let (loss, mut grads) = finish_mean(sum);
            if let Some(limit) = cfg.grad_clip {
                let norm = grad_norm(&grads);
                if norm > limit {
                    let s = F::lit(limit / norm);
                    for t in grads.tensors_mut() {
                        t.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            adam_step(&mut model, &grads, &mut adam, &cfg.adam);
            loss_acc += loss * batch.len() as f64;
            seen += batch.len();
            on_step(&StepInfo {
                epoch,
                step: adam.step,
                loss,
            });
        }
        let entry = EpochLog {
            epoch,
            step: adam.step,
            mean_loss: loss_acc / seen as f64,
        };
        log::info!("epoch {} step {} mean loss {:.6}", entry.epoch, entry.step, entry.mean_loss);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: adam.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TrainingSample;
    use crate::neural::bptt::batch_loss;
    use crate::neural::{NetConfig, Network};
    use ndarray::Array2;
    use rand::Rng;

    fn samples(n: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| TrainingSample {
                freq: i as u32,
                input: Array2::from_shape_fn((8, 5), |_| rng.random_range(0.0f32..2.0)),
                target: Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0f32..1.0)),
                loss_mask: (0..8).map(|t| t >= 1).collect(),
            })
            .collect()
    }

    fn tiny() -> Network<f64> {
        Network::init(&NetConfig::new(5, 6, 4, 2, 1).unwrap(), 2)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = samples(4, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(tiny(), &data, &cfg).unwrap();
        assert_eq!(out.model, tiny());
        assert!(out.log.is_empty());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn one_batch_of_identical_samples_reduces_loss() {
        let one = samples(1, 3).remove(0);
        let data = vec![one; 16];
        let idx: Vec<usize> = (0..16).collect();
        let before = batch_loss(&tiny(), &data, &idx, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(tiny(), &data, &cfg).unwrap();
        let after = batch_loss(&out.model, &data, &idx, 8).unwrap();
        assert_eq!(out.steps, 1);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let data = samples(40, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 17,
            chunk: 3,
            ..TrainConfig::default()
        };
        let a = train(tiny(), &data, &cfg).unwrap();
        let b = train(tiny(), &data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.steps, 15);
        assert!(a.log.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn max_steps_stops_early() {
        let data = samples(40, 5);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            max_steps: Some(7),
            ..TrainConfig::default()
        };
        let out = train(tiny(), &data, &cfg).unwrap();
        assert_eq!(out.steps, 7);
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.log[1].step, 7);
    }

    #[test]
    fn global_norm() {
        let mut g = tiny().zeros_like();
        g.dense.bias[0] = 3.0;
        g.lstm1.bias[5] = -4.0;
        assert_eq!(grad_norm(&g), 5.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data: Vec<TrainingSample> = Vec::new();
        assert!(train(tiny(), &data, &TrainConfig::default()).is_err());
    }
}
