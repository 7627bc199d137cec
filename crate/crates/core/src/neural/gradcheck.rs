//! Central finite-difference check of BPTT gradients in `f64`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bptt::{batch_loss, loss_and_gradients, Trainable};
use super::model::{NetConfig, Network};
use crate::features::TrainingSample;
use crate::Result;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`]. With a step of `1e-4` the
/// central-difference truncation error is around `1e-9`, so gradients
/// below this floor are compared on that absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare every coordinate of the analytic gradient with central differences.
pub fn gradient_check<M: Trainable<f64>>(model: &M, samples: &[TrainingSample], step: f64) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradients(model, samples)?;
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    let grads = analytic.tensors();
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + step;
            let up = batch_loss(&probe, samples, &indices, samples.len())?;
            probe.tensors_mut()[ti][j] = orig - step;
            let down = batch_loss(&probe, samples, &indices, samples.len())?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(g[j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Random samples for the check: inputs in `[0, 2)`, targets in `(-2, 2)`,
/// the first `tau` steps masked.
pub fn random_samples(count: usize, seq_len: usize, input_dim: usize, tau: usize, rng: &mut impl Rng) -> Vec<TrainingSample> {
    (0..count)
        .map(|i| TrainingSample {
            freq: i as u32,
            input: Array2::from_shape_fn((seq_len, input_dim), |_| rng.random_range(0.0f32..2.0)),
            target: Array2::from_shape_fn((seq_len, 2), |_| rng.random_range(-2.0f32..2.0)),
            loss_mask: (0..seq_len).map(|t| t >= tau).collect(),
        })
        .collect()
}

/// Tiny configuration: D = 5, H1 = 4, H2 = 3, T = 7, tau = 1, three samples.
pub fn tiny_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = NetConfig::new(5, 4, 3, 2, 1)?;
    let net = Network::<f64>::init(&cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let samples = random_samples(3, 7, 5, 1, &mut rng);
    gradient_check(&net, &samples, FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::BiNetwork;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 1e-8), 1e-3);
    }

    #[test]
    fn tiny_network_passes() {
        for seed in 0..5 {
            let r = tiny_gradient_check(seed).unwrap();
            assert_eq!(r.coordinates, 264);
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn bidirectional_network_passes() {
        let cfg = NetConfig::new(5, 4, 3, 2, 0).unwrap();
        let bi = BiNetwork::<f64>::init(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let samples = random_samples(2, 6, 5, 0, &mut rng);
        let r = gradient_check(&bi, &samples, FD_STEP).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_samples(2, 7, 5, 1, &mut rng);
        let (_, mut g) = loss_and_gradients(&net, &samples).unwrap();
        let (_, g2) = loss_and_gradients(&net, &samples).unwrap();
        g.dense.bias[0] *= 1.01;
        assert!(relative_error(g.dense.bias[0], g2.dense.bias[0]) > 1e-3);
    }
}
