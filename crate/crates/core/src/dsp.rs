//! STFT analysis and weighted overlap-add synthesis.
//!
//! Conventions shared by training and inference:
//!
//! - periodic Hann window, hop dividing the FFT size with at least 50% overlap
//! - frame `t` (0-based) covers samples `[t * hop, t * hop + fft_size)`, no
//!   centre padding, trailing partial frames dropped
//! - synthesis applies the window a second time and divides every output
//!   sample by the local sum of squared window values
//!
//! The batch [`stft`]/[`istft`] functions are built on the same
//! [`StreamingAnalyzer`]/[`OverlapAddSynthesizer`] pair that the engine uses,
//! so offline and streaming paths agree bit for bit.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::{Error, Result};

/// Squared-window sums below this are treated as zero during synthesis.
const WSUM_FLOOR: f64 = 1e-10;

pub const DEFAULT_FFT_SIZE: usize = 512;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Periodic Hann window `w[n] = 0.5 - 0.5 cos(2 pi n / fft_size)`.
pub fn analysis_window(fft_size: usize) -> Result<Vec<f64>> {
    if fft_size < 4 || fft_size % 2 != 0 {
        return Err(Error::config(format!(
            "fft_size must be even and >= 4, got {fft_size}"
        )));
    }
    let n = fft_size as f64;
    Ok((0..fft_size)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
        .collect())
}

#[derive(Clone, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: Vec<f64>,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let window = analysis_window(fft_size)?;
        if hop == 0 || fft_size % hop != 0 {
            return Err(Error::config(format!(
                "hop {hop} must divide fft_size {fft_size}"
            )));
        }
        if hop > fft_size / 2 {
            return Err(Error::config(format!(
                "hop {hop} leaves less than 50% overlap for fft_size {fft_size}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        Ok(Self {
            fft_size,
            hop,
            sample_rate,
            window,
        })
    }

    /// Number of nonnegative-frequency bins, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of full frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Length of the signal synthesized from `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_size
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::new(DEFAULT_FFT_SIZE, DEFAULT_HOP, DEFAULT_SAMPLE_RATE)
            .expect("default STFT configuration is valid")
    }
}

impl fmt::Debug for StftConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftConfig")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

/// Complex STFT coefficients, stored frame-major: `data[[t, k]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array2<Complex64>,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            data: Array2::zeros((frames, bins)),
        }
    }

    pub fn from_frames(data: Array2<Complex64>) -> Result<Self> {
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::shape("spectrogram contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, k: usize, t: usize) -> Complex64 {
        self.data[[t, k]]
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, Complex64> {
        self.data.row(t)
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    /// Magnitudes, frame-major like the coefficients.
    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    pub fn scale(&mut self, a: f64) {
        self.data.mapv_inplace(|c| c * a);
    }
}

/// Forward/inverse real FFT plans with scratch buffers for one frame size.
struct FramePlans {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    time: Vec<f64>,
    spectrum: Vec<Complex64>,
}

impl FramePlans {
    fn new(fft_size: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(fft_size);
        let inverse = planner.plan_fft_inverse(fft_size);
        let time = forward.make_input_vec();
        let spectrum = forward.make_output_vec();
        Self {
            forward,
            inverse,
            time,
            spectrum,
        }
    }
}

/// Turns a stream of `hop`-sample blocks into windowed spectra.
///
/// The first frame is produced once `fft_size` samples have arrived; every
/// later block of `hop` samples produces one more frame.
pub struct StreamingAnalyzer {
    cfg: StftConfig,
    buffer: Vec<f64>,
    filled: usize,
    plans: FramePlans,
}

impl StreamingAnalyzer {
    pub fn new(cfg: &StftConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            buffer: vec![0.0; cfg.fft_size],
            filled: 0,
            plans: FramePlans::new(cfg.fft_size),
        }
    }

    /// Push exactly `hop` samples; writes a frame into `out` when one is complete.
    pub fn push(&mut self, block: &[f64], out: &mut [Complex64]) -> Result<bool> {
        let hop = self.cfg.hop;
        let n = self.cfg.fft_size;
        if block.len() != hop {
            return Err(Error::shape(format!(
                "expected {hop} samples per block, got {}",
                block.len()
            )));
        }
        if out.len() != self.cfg.bins() {
            return Err(Error::shape(format!(
                "frame buffer has {} bins, expected {}",
                out.len(),
                self.cfg.bins()
            )));
        }
        if self.filled < n {
            self.buffer[self.filled..self.filled + hop].copy_from_slice(block);
            self.filled += hop;
        } else {
            self.buffer.copy_within(hop.., 0);
            self.buffer[n - hop..].copy_from_slice(block);
        }
        if self.filled < n {
            return Ok(false);
        }
        self.transform(out);
        Ok(true)
    }

    fn transform(&mut self, out: &mut [Complex64]) {
        for ((dst, &x), &w) in self
            .plans
            .time
            .iter_mut()
            .zip(&self.buffer)
            .zip(&self.cfg.window)
        {
            *dst = x * w;
        }
        self.plans
            .forward
            .process(&mut self.plans.time, &mut self.plans.spectrum)
            .expect("buffer sizes come from the plan");
        out.copy_from_slice(&self.plans.spectrum);
    }

    pub fn reset(&mut self) {
        self.buffer.iter_mut().for_each(|x| *x = 0.0);
        self.filled = 0;
    }
}

/// Weighted overlap-add synthesis, one frame in and one hop out.
///
/// After frame `t` is pushed, output samples `[t * hop, (t + 1) * hop)` have
/// received every contribution they will ever get and are emitted.
pub struct OverlapAddSynthesizer {
    cfg: StftConfig,
    acc: Vec<f64>,
    wsum: Vec<f64>,
    plans: FramePlans,
}

impl OverlapAddSynthesizer {
    pub fn new(cfg: &StftConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            acc: vec![0.0; cfg.fft_size],
            wsum: vec![0.0; cfg.fft_size],
            plans: FramePlans::new(cfg.fft_size),
        }
    }

    pub fn push(&mut self, frame: &[Complex64], out: &mut [f64]) -> Result<()> {
        let bins = self.cfg.bins();
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        if frame.len() != bins {
            return Err(Error::shape(format!(
                "frame has {} bins, expected {bins}",
                frame.len()
            )));
        }
        if out.len() != hop {
            return Err(Error::shape(format!(
                "output block has {} samples, expected {hop}",
                out.len()
            )));
        }
        self.plans.spectrum.copy_from_slice(frame);
        // A real signal has purely real DC and Nyquist coefficients.
        self.plans.spectrum[0].im = 0.0;
        self.plans.spectrum[bins - 1].im = 0.0;
        self.plans
            .inverse
            .process(&mut self.plans.spectrum, &mut self.plans.time)
            .expect("buffer sizes come from the plan");
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let w = self.cfg.window[i];
            self.acc[i] += self.plans.time[i] * scale * w;
            self.wsum[i] += w * w;
        }
        self.emit(out);
        Ok(())
    }

    fn emit(&mut self, out: &mut [f64]) {
        let hop = self.cfg.hop;
        let n = self.cfg.fft_size;
        for i in 0..hop {
            out[i] = normalize(self.acc[i], self.wsum[i]);
        }
        self.acc.copy_within(hop.., 0);
        self.wsum.copy_within(hop.., 0);
        self.acc[n - hop..].iter_mut().for_each(|x| *x = 0.0);
        self.wsum[n - hop..].iter_mut().for_each(|x| *x = 0.0);
    }

    /// Emit the `fft_size - hop` samples still pending after the last frame.
    pub fn flush(&mut self) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        let out = (0..n - hop)
            .map(|i| normalize(self.acc[i], self.wsum[i]))
            .collect();
        self.acc.iter_mut().for_each(|x| *x = 0.0);
        self.wsum.iter_mut().for_each(|x| *x = 0.0);
        out
    }
}

fn normalize(acc: f64, wsum: f64) -> f64 {
    if wsum > WSUM_FLOOR {
        acc / wsum
    } else {
        0.0
    }
}

/// Short-time Fourier transform of a whole signal.
pub fn stft(samples: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if samples.len() < cfg.fft_size {
        return Err(Error::TooShort {
            got: samples.len(),
            min: cfg.fft_size,
        });
    }
    let frames = cfg.frame_count(samples.len());
    let bins = cfg.bins();
    let mut data = Array2::<Complex64>::zeros((frames, bins));
    let mut analyzer = StreamingAnalyzer::new(cfg);
    let mut frame = vec![Complex64::new(0.0, 0.0); bins];
    let mut t = 0;
    for block in samples[..cfg.synthesis_len(frames)].chunks_exact(cfg.hop) {
        if analyzer.push(block, &mut frame)? {
            data.row_mut(t)
                .as_slice_mut()
                .expect("rows of a standard-layout array are contiguous")
                .copy_from_slice(&frame);
            t += 1;
        }
    }
    debug_assert_eq!(t, frames);
    ComplexSpectrogram::from_frames(data)
}

/// Inverse STFT; output length is `(T - 1) * hop + fft_size`.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Vec<f64>> {
    if spec.bins() != cfg.bins() {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, configuration expects {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    let mut synth = OverlapAddSynthesizer::new(cfg);
    let mut out = vec![0.0; cfg.synthesis_len(spec.frames())];
    let mut frame = vec![Complex64::new(0.0, 0.0); cfg.bins()];
    for t in 0..spec.frames() {
        for (dst, src) in frame.iter_mut().zip(spec.frame(t)) {
            *dst = *src;
        }
        let start = t * cfg.hop;
        synth.push(&frame, &mut out[start..start + cfg.hop])?;
    }
    if spec.frames() > 0 {
        let tail = synth.flush();
        let start = spec.frames() * cfg.hop;
        out[start..].copy_from_slice(&tail);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn window_small_case() {
        let w = analysis_window(4).unwrap();
        let expected = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn window_endpoints_and_range() {
        for n in [4, 16, 512, 1024] {
            let w = analysis_window(n).unwrap();
            assert_eq!(w[0], 0.0);
            assert!((w[n / 2] - 1.0).abs() < 1e-15);
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn window_rejects_bad_sizes() {
        assert!(analysis_window(2).is_err());
        assert!(analysis_window(7).is_err());
        assert!(StftConfig::new(512, 300, 16_000).is_err());
        assert!(StftConfig::new(512, 512, 16_000).is_err());
    }

    #[test]
    fn default_config_has_257_bins() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 257);
        assert_eq!(cfg.hop, 256);
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0; 1024], &cfg).unwrap();
        assert_eq!((spec.bins(), spec.frames()), (257, 3));
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn too_short_input_reports_minimum() {
        let cfg = StftConfig::default();
        match stft(&[0.0; 100], &cfg) {
            Err(Error::TooShort { got: 100, min: 512 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_partial_frame_dropped() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.1; 512 + 255], &cfg).unwrap();
        assert_eq!(spec.frames(), 1);
        let spec = stft(&vec![0.1; 512 + 256], &cfg).unwrap();
        assert_eq!(spec.frames(), 2);
    }

    #[test]
    fn cosine_at_bin_centre_is_confined_to_three_bins() {
        // Hann = 0.5 - 0.25 e^{+} - 0.25 e^{-}: a bin-centred cosine lands on
        // bins 7, 8, 9 only (closed-form DFT of the windowed sinusoid).
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..512)
            .map(|n| (2.0 * PI * 8.0 * n as f64 / 512.0).cos())
            .collect();
        let spec = stft(&x, &cfg).unwrap();
        let mags: Vec<f64> = spec.frame(0).iter().map(|c| c.norm()).collect();
        let peak = mags[8];
        assert!((peak - 128.0).abs() < 1e-9);
        assert!((mags[7] - 64.0).abs() < 1e-9 && (mags[9] - 64.0).abs() < 1e-9);
        for (k, m) in mags.iter().enumerate() {
            if !(7..=9).contains(&k) {
                assert!(*m <= 1e-10 * peak, "bin {k} leaks {m}");
            }
        }
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let x = random_signal(2048, 1);
        let scaled: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let a = stft(&x, &cfg).unwrap();
        let b = stft(&scaled, &cfg).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p * 2.5 - q).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let x = random_signal(4 * 512 + 300, 2);
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), cfg.synthesis_len(spec.frames()));
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for n in 512..y.len() - 512 {
            assert!((x[n] - y[n]).abs() <= 1e-6 * peak, "sample {n}");
        }
    }

    #[test]
    fn istft_zero_and_linearity() {
        let cfg = StftConfig::default();
        let z = ComplexSpectrogram::zeros(5, 257);
        assert!(istft(&z, &cfg).unwrap().iter().all(|&v| v == 0.0));

        let x = random_signal(3000, 3);
        let y = random_signal(3000, 4);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let mut sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        *sx.data_mut() += sy.data();
        let a = istft(&sx, &cfg).unwrap();
        let b = istft(&stft(&sum, &cfg).unwrap(), &cfg).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn istft_rejects_mismatched_bins() {
        let cfg = StftConfig::default();
        assert!(istft(&ComplexSpectrogram::zeros(3, 129), &cfg).is_err());
    }

    #[test]
    fn windowed_parseval() {
        let cfg = StftConfig::default();
        let x = random_signal(1024, 5);
        let spec = stft(&x, &cfg).unwrap();
        let n = cfg.fft_size;
        let k = cfg.bins();
        for t in 0..spec.frames() {
            let time_energy: f64 = (0..n)
                .map(|i| (x[t * cfg.hop + i] * cfg.window[i]).powi(2))
                .sum();
            let f = spec.frame(t);
            let mut freq = f[0].norm_sqr() + f[k - 1].norm_sqr();
            freq += 2.0 * (1..k - 1).map(|i| f[i].norm_sqr()).sum::<f64>();
            freq /= n as f64;
            assert!((time_energy - freq).abs() <= 1e-8 * time_energy);
        }
    }

    #[test]
    fn streaming_synthesis_matches_batch() {
        let cfg = StftConfig::default();
        let x = random_signal(5000, 6);
        let spec = stft(&x, &cfg).unwrap();
        let batch = istft(&spec, &cfg).unwrap();
        let mut synth = OverlapAddSynthesizer::new(&cfg);
        let mut out = Vec::new();
        let mut block = vec![0.0; cfg.hop];
        for t in 0..spec.frames() {
            let frame: Vec<Complex64> = spec.frame(t).to_vec();
            synth.push(&frame, &mut block).unwrap();
            out.extend_from_slice(&block);
        }
        out.extend(synth.flush());
        assert_eq!(out, batch);
    }
}
