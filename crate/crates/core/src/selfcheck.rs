//! Fast end-to-end invariant checks, a few seconds in total.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cirm::{compress, uncompress, CompressionConfig};
use crate::dsp::{istft, stft, StftConfig};
use crate::engine::{enhance_samples, identity_model, offline_replay, SessionOptions};
use crate::features::FeatureConfig;
use crate::model_store::{decode_model, encode_model};
use crate::neural::{count_parameters, tiny_gradient_check, ModelBundle, NetConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn small_model(seed: u64) -> Result<ModelBundle<f32>> {
    ModelBundle::init(
        NetConfig::new(7, 16, 12, 2, 2)?,
        FeatureConfig::new(3, 129, 32, 2)?,
        StftConfig::new(256, 128, 16_000)?,
        CompressionConfig::default(),
        seed,
    )
}

fn test_signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| 0.4 * (i as f64 * 0.031).sin() + rng.random_range(-0.2..0.2))
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        run("parameter-count", || {
            let n = count_parameters(&NetConfig::default());
            Ok((n == 1_295_874, format!("{n}")))
        }),
        run("stft-round-trip", || {
            let cfg = StftConfig::default();
            let x = test_signal(16_000, seed);
            let y = istft(&stft(&x, &cfg)?, &cfg)?;
            let (a, b) = (cfg.fft_size, x.len() - cfg.fft_size);
            let err = max_abs_diff(&x[a..b], &y[a..b]);
            Ok((err <= 1e-9, format!("max error {err:.2e}")))
        }),
        run("mask-compression", || {
            let cfg = CompressionConfig::default();
            let worst = (-200..=200)
                .map(|i| i as f64 * 0.01)
                .map(|m| (uncompress(compress(m, &cfg), &cfg) - m).abs())
                .fold(0.0, f64::max);
            Ok((worst <= 1e-9, format!("max error {worst:.2e}")))
        }),
        run("gradient-check", || {
            let r = tiny_gradient_check(seed)?;
            Ok((r.max_rel_error <= 1e-4, format!("max relative error {:.2e}", r.max_rel_error)))
        }),
        run("model-file-round-trip", || {
            let m = small_model(seed)?;
            let bytes = encode_model(&m)?;
            let back = decode_model(&bytes)?;
            Ok((back == m, format!("{} bytes", bytes.len())))
        }),
        run("identity-mask", || {
            let m = Arc::new(identity_model(&small_model(seed)?));
            let x = test_signal(8000, seed + 1);
            let y = enhance_samples(m, &x, &SessionOptions::default())?;
            let err = max_abs_diff(&x[256..7500], &y[256..7500]);
            Ok((err <= 1e-5, format!("max error {err:.2e}")))
        }),
        run("stream-matches-offline", || {
            let m = small_model(seed)?;
            let x = test_signal(8000, seed + 2);
            let a = enhance_samples(Arc::new(m.clone()), &x, &SessionOptions::default())?;
            let b = offline_replay(&m, &x, None)?;
            let err = max_abs_diff(&a, &b);
            Ok((err <= 1e-5, format!("max error {err:.2e}")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(0) {
            assert!(c.passed, "{c}");
        }
    }
}
