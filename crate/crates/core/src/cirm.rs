//! Complex ideal ratio mask: computation, bounded compression and application.

use num_complex::Complex64;

use crate::{Error, Result};

/// Denominator floor for [`raw_cirm`] on unit-scaled signals.
pub const DEFAULT_MASK_EPS: f64 = 1e-8;

/// Margin kept inside the open interval `(-Kc, Kc)`, as a fraction of `Kc`.
const CLIP_MARGIN: f64 = 1e-4;

/// Ceiling `Kc` and steepness `Cc` of the tanh-shaped compression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionConfig {
    pub ceiling: f64,
    pub steepness: f64,
}

impl CompressionConfig {
    pub fn new(ceiling: f64, steepness: f64) -> Result<Self> {
        if !(ceiling > 0.0 && ceiling.is_finite() && steepness > 0.0 && steepness.is_finite()) {
            return Err(Error::config(format!(
                "compression needs Kc > 0 and Cc > 0, got Kc={ceiling}, Cc={steepness}"
            )));
        }
        Ok(Self { ceiling, steepness })
    }

    /// Largest magnitude a compressed value is clipped to before inversion.
    pub fn clip_limit(&self) -> f64 {
        self.ceiling - CLIP_MARGIN * self.ceiling
    }

    pub fn clip(&self, c: f64) -> f64 {
        let lim = self.clip_limit();
        c.clamp(-lim, lim)
    }
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            ceiling: 10.0,
            steepness: 0.1,
        }
    }
}

/// One compressed (or uncompressed) mask entry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskValue {
    pub real: f64,
    pub imag: f64,
}

impl MaskValue {
    pub fn new(real: f64, imag: f64) -> Self {
        Self { real, imag }
    }
}

/// `speech / noisy` componentwise; `(0, 0)` when `|noisy| < eps`.
pub fn raw_cirm(speech: Complex64, noisy: Complex64, eps: f64) -> (f64, f64) {
    let d = noisy.re * noisy.re + noisy.im * noisy.im;
    if d < eps * eps {
        return (0.0, 0.0);
    }
    let mr = (noisy.re * speech.re + noisy.im * speech.im) / d;
    let mi = (noisy.re * speech.im - noisy.im * speech.re) / d;
    (mr, mi)
}

/// `Kc (1 - e^{-Cc m}) / (1 + e^{-Cc m})`, evaluated as `Kc tanh(Cc m / 2)`.
pub fn compress(m: f64, cfg: &CompressionConfig) -> f64 {
    cfg.ceiling * (0.5 * cfg.steepness * m).tanh()
}

/// Inverse of [`compress`] after clipping into `[-Kc + d, Kc - d]`, `d = 1e-4 Kc`.
pub fn uncompress(c: f64, cfg: &CompressionConfig) -> f64 {
    let c = cfg.clip(c);
    -((cfg.ceiling - c) / (cfg.ceiling + c)).ln() / cfg.steepness
}

/// Compressed and clipped training target for one TF bin.
pub fn target_mask(speech: Complex64, noisy: Complex64, cfg: &CompressionConfig) -> MaskValue {
    let (mr, mi) = raw_cirm(speech, noisy, DEFAULT_MASK_EPS);
    MaskValue {
        real: cfg.clip(compress(mr, cfg)),
        imag: cfg.clip(compress(mi, cfg)),
    }
}

/// Uncompress a predicted mask and multiply it onto the noisy coefficient.
pub fn apply_mask(noisy: Complex64, mask: MaskValue, cfg: &CompressionConfig) -> Complex64 {
    let m = Complex64::new(uncompress(mask.real, cfg), uncompress(mask.imag, cfg));
    m * noisy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn raw_cirm_examples() {
        assert_eq!(raw_cirm(c(1.0, 0.0), c(1.0, 0.0), 1e-8), (1.0, 0.0));
        assert_eq!(raw_cirm(c(0.0, 0.0), c(0.3, -0.2), 1e-8), (0.0, 0.0));
        // (1 + 0i) / (1 + 1i) = (1 - i) / 2
        let (r, i) = raw_cirm(c(1.0, 0.0), c(1.0, 1.0), 1e-8);
        let oracle = c(1.0, 0.0) / c(1.0, 1.0);
        assert!((r - oracle.re).abs() < 1e-15 && (i - oracle.im).abs() < 1e-15);
        assert!((r - 0.5).abs() < 1e-15 && (i + 0.5).abs() < 1e-15);
    }

    #[test]
    fn raw_cirm_floor() {
        assert_eq!(raw_cirm(c(1.0, 1.0), c(1e-9, 0.0), 1e-8), (0.0, 0.0));
    }

    #[test]
    fn compress_examples() {
        let cfg = CompressionConfig::default();
        assert_eq!(compress(0.0, &cfg), 0.0);
        // 10 (1 - e^-0.1) / (1 + e^-0.1) = 0.49958...
        let direct = 10.0 * (1.0 - (-0.1f64).exp()) / (1.0 + (-0.1f64).exp());
        assert!((compress(1.0, &cfg) - direct).abs() < 1e-14);
        assert!((compress(1.0, &cfg) - 0.4996).abs() < 1e-4);
        let big = compress(200.0, &cfg);
        assert!(big < 10.0 && big > 9.99);
    }

    #[test]
    fn uncompress_examples() {
        let cfg = CompressionConfig::default();
        assert_eq!(uncompress(0.0, &cfg), 0.0);
        assert!((uncompress(compress(3.7, &cfg), &cfg) - 3.7).abs() < 1e-9);
        assert!((uncompress(0.4996, &cfg) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn uncompress_clips_out_of_range() {
        let cfg = CompressionConfig::default();
        let top = uncompress(1e6, &cfg);
        assert!(top.is_finite());
        assert_eq!(top, uncompress(cfg.clip_limit(), &cfg));
        assert_eq!(uncompress(-1e6, &cfg), -top);
    }

    #[test]
    fn compress_grid_properties() {
        let cfg = CompressionConfig::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let m = -100.0 + 200.0 * i as f64 / 9_999.0;
            let v = compress(m, &cfg);
            assert!(v > prev, "not strictly increasing at {m}");
            assert!(v.abs() < cfg.ceiling);
            assert_eq!(compress(-m, &cfg), -v);
            prev = v;
        }
    }

    #[test]
    fn inverse_identity_on_working_range() {
        let cfg = CompressionConfig::default();
        for i in 0..=1980 {
            let m = -9.9 + i as f64 * 0.01;
            assert!((uncompress(compress(m, &cfg), &cfg) - m).abs() < 1e-8);
        }
    }

    #[test]
    fn apply_mask_examples() {
        let cfg = CompressionConfig::default();
        let id = MaskValue::new(compress(1.0, &cfg), compress(0.0, &cfg));
        let x = c(0.3, -0.7);
        assert!((apply_mask(x, id, &cfg) - x).norm() < 1e-6);
        assert_eq!(apply_mask(x, MaskValue::default(), &cfg), c(0.0, 0.0));
        let m = MaskValue::new(compress(0.5, &cfg), compress(-0.5, &cfg));
        assert!((apply_mask(c(1.0, 1.0), m, &cfg) - c(1.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(CompressionConfig::new(0.0, 0.1).is_err());
        assert!(CompressionConfig::new(10.0, -1.0).is_err());
        assert!(CompressionConfig::new(10.0, 0.1).is_ok());
    }
}
