//! Subband input vectors, input normalization and training-sample assembly.
//!
//! For bin `k` the network sees `[|x(k)|, |x(k-1)|, .., |x(k-N)|, |x(k+1)|, .., |x(k+N)|]`.
//! Indices outside `0..K` are reflected about bins `0` and `K-1`, which for
//! a real signal is the same as indexing the full conjugate-symmetric DFT
//! circularly.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};

use crate::cirm::{self, CompressionConfig};
use crate::dsp::ComplexSpectrogram;
use crate::{Error, Result};

/// Normalizers below this are replaced by it.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Neighbours on each side, `N`.
    pub neighbors: usize,
    /// STFT bins, `K`.
    pub bins: usize,
    /// Training sequence length in frames, `T`.
    pub seq_len: usize,
    /// Output delay in frames.
    pub tau: usize,
    /// Frames between the starts of consecutive training windows.
    pub overlap_frames: usize,
    /// Frames smoothed by the online running mean, `L`.
    pub norm_frames: usize,
}

impl FeatureConfig {
    pub fn new(neighbors: usize, bins: usize, seq_len: usize, tau: usize) -> Result<Self> {
        let cfg = Self {
            neighbors,
            bins,
            seq_len,
            tau,
            overlap_frames: (seq_len / 2).max(1),
            norm_frames: 192,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.neighbors >= self.bins {
            return Err(Error::config(format!(
                "need 0 <= N < K, got N={} K={}",
                self.neighbors, self.bins
            )));
        }
        if self.seq_len == 0 || self.tau >= self.seq_len {
            return Err(Error::config(format!(
                "need 0 <= tau < T, got tau={} T={}",
                self.tau, self.seq_len
            )));
        }
        if self.overlap_frames == 0 || self.norm_frames == 0 {
            return Err(Error::config("window hop and norm_frames must be positive"));
        }
        Ok(())
    }

    /// Subband vector length `2N + 1`.
    pub fn input_dim(&self) -> usize {
        2 * self.neighbors + 1
    }

    /// Running-mean smoothing factor `(L - 1) / (L + 1)`.
    pub fn alpha(&self) -> f64 {
        smoothing_alpha(self.norm_frames)
    }

    /// Number of full training windows in a clip of `frames` frames.
    pub fn window_count(&self, frames: usize) -> usize {
        if frames < self.seq_len {
            0
        } else {
            (frames - self.seq_len) / self.overlap_frames + 1
        }
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::new(15, 257, 192, 2).expect("default feature configuration is valid")
    }
}

pub fn smoothing_alpha(norm_frames: usize) -> f64 {
    let l = norm_frames as f64;
    (l - 1.0) / (l + 1.0)
}

/// Reflect an integer bin index into `0..bins`.
fn reflect(index: isize, bins: usize) -> usize {
    if bins == 1 {
        return 0;
    }
    let period = 2 * (bins as isize - 1);
    let i = index.rem_euclid(period);
    if i >= bins as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

/// Source bin of every entry of every subband vector, row-major `K x (2N+1)`.
pub fn subband_indices(bins: usize, neighbors: usize) -> Vec<usize> {
    let dim = 2 * neighbors + 1;
    let mut out = Vec::with_capacity(bins * dim);
    for k in 0..bins as isize {
        out.push(k as usize);
        for j in 1..=neighbors as isize {
            out.push(reflect(k - j, bins));
        }
        for j in 1..=neighbors as isize {
            out.push(reflect(k + j, bins));
        }
    }
    out
}

pub fn subband_vector(mag_frame: &[f64], k: usize, neighbors: usize) -> Result<Vec<f64>> {
    let bins = mag_frame.len();
    if k >= bins {
        return Err(Error::BinOutOfRange { index: k, bins });
    }
    let k = k as isize;
    let mut out = Vec::with_capacity(2 * neighbors + 1);
    out.push(mag_frame[k as usize]);
    for j in 1..=neighbors as isize {
        out.push(mag_frame[reflect(k - j, bins)]);
    }
    for j in 1..=neighbors as isize {
        out.push(mag_frame[reflect(k + j, bins)]);
    }
    Ok(out)
}

/// Divide a `T x (2N+1)` sequence by the mean of its centre-bin magnitudes.
pub fn normalize_sequence(input: ArrayView2<'_, f64>, center_mags: &[f64]) -> Result<Array2<f64>> {
    if center_mags.is_empty() || center_mags.len() != input.nrows() {
        return Err(Error::shape(format!(
            "{} centre magnitudes for {} frames",
            center_mags.len(),
            input.nrows()
        )));
    }
    let g = center_mags.iter().sum::<f64>() / center_mags.len() as f64;
    Ok(input.mapv(|v| v / g.max(NORM_FLOOR)))
}

/// One step of `mu = alpha mu_prev + (1 - alpha) mag`.
pub fn running_mean_update(mu_prev: f64, mag: f64, alpha: f64) -> f64 {
    alpha * mu_prev + (1.0 - alpha) * mag
}

/// Per-frequency running mean magnitude used to normalize online input.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub mu: Vec<f64>,
    pub alpha: f64,
    started: bool,
}

impl NormState {
    pub fn new(bins: usize, alpha: f64) -> Self {
        Self {
            mu: vec![0.0; bins],
            alpha,
            started: false,
        }
    }

    /// Fold in one magnitude frame. The first frame initializes `mu` to itself.
    pub fn update(&mut self, mags: &[f64]) {
        debug_assert_eq!(mags.len(), self.mu.len());
        if !self.started {
            self.mu.copy_from_slice(mags);
            self.started = true;
            return;
        }
        for (m, &x) in self.mu.iter_mut().zip(mags) {
            *m = running_mean_update(*m, x, self.alpha);
        }
    }

    pub fn reset(&mut self) {
        self.mu.iter_mut().for_each(|m| *m = 0.0);
        self.started = false;
    }
}

/// One `(frequency, window)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub freq: u32,
    /// `T x (2N+1)` normalized magnitudes.
    pub input: Array2<f32>,
    /// `T x 2` compressed mask targets; row `t` holds the mask of frame `t - tau`.
    pub target: Array2<f32>,
    /// `false` for the first `tau` steps.
    pub loss_mask: Vec<bool>,
}

impl TrainingSample {
    pub fn seq_len(&self) -> usize {
        self.input.nrows()
    }
}

/// Anything that can hand out training samples by index.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> TrainingSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [TrainingSample] {
    fn len(&self) -> usize {
        <[TrainingSample]>::len(self)
    }

    fn sample(&self, index: usize) -> TrainingSample {
        self[index].clone()
    }
}

impl SampleSource for Vec<TrainingSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sample(&self, index: usize) -> TrainingSample {
        self[index].clone()
    }
}

/// Noisy magnitudes and compressed targets of one clip, frame-major.
#[derive(Clone, Debug)]
pub struct ClipFeatures {
    mags: Array2<f32>,
    targets: Array2<[f32; 2]>,
}

impl ClipFeatures {
    pub fn new(
        clean: &ComplexSpectrogram,
        noisy: &ComplexSpectrogram,
        compression: &CompressionConfig,
    ) -> Result<Self> {
        if clean.bins() != noisy.bins() || clean.frames() != noisy.frames() {
            return Err(Error::shape(format!(
                "clean spectrogram is {}x{}, noisy is {}x{}",
                clean.frames(),
                clean.bins(),
                noisy.frames(),
                noisy.bins()
            )));
        }
        let mags = noisy.data().mapv(|c| c.norm() as f32);
        let mut targets = Array2::from_elem(noisy.data().raw_dim(), [0.0f32; 2]);
        ndarray::Zip::from(&mut targets)
            .and(clean.data())
            .and(noisy.data())
            .for_each(|t, &s, &x| {
                let m = cirm::target_mask(s, x, compression);
                *t = [m.real as f32, m.imag as f32];
            });
        Ok(Self { mags, targets })
    }

    pub fn frames(&self) -> usize {
        self.mags.nrows()
    }

    pub fn bins(&self) -> usize {
        self.mags.ncols()
    }

    /// Build the sample for bin `k` and the window starting at frame `start`.
    pub fn sample(&self, start: usize, k: usize, cfg: &FeatureConfig, index: &[usize]) -> TrainingSample {
        let t_len = cfg.seq_len;
        let dim = cfg.input_dim();
        let src = &index[k * dim..(k + 1) * dim];
        let mean = (0..t_len)
            .map(|t| self.mags[[start + t, k]] as f64)
            .sum::<f64>()
            / t_len as f64;
        let scale = 1.0 / mean.max(NORM_FLOOR);
        let mut input = Array2::<f32>::zeros((t_len, dim));
        for (t, mut row) in input.rows_mut().into_iter().enumerate() {
            let frame = self.mags.row(start + t);
            for (dst, &j) in row.iter_mut().zip(src) {
                *dst = (frame[j] as f64 * scale) as f32;
            }
        }
        let mut target = Array2::<f32>::zeros((t_len, 2));
        let mut loss_mask = vec![false; t_len];
        for t in cfg.tau..t_len {
            let [re, im] = self.targets[[start + t - cfg.tau, k]];
            target[[t, 0]] = re;
            target[[t, 1]] = im;
            loss_mask[t] = true;
        }
        TrainingSample {
            freq: k as u32,
            input,
            target,
            loss_mask,
        }
    }
}

/// Every `(frequency, window)` sample of a clip, window-major.
pub fn make_training_samples(
    clean: &ComplexSpectrogram,
    noisy: &ComplexSpectrogram,
    cfg: &FeatureConfig,
    compression: &CompressionConfig,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    if noisy.bins() != cfg.bins {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, feature configuration expects {}",
            noisy.bins(),
            cfg.bins
        )));
    }
    let clip = ClipFeatures::new(clean, noisy, compression)?;
    if clip.frames() < cfg.seq_len {
        return Err(Error::TooShort {
            got: clip.frames(),
            min: cfg.seq_len,
        });
    }
    let index = subband_indices(cfg.bins, cfg.neighbors);
    let windows = cfg.window_count(clip.frames());
    let mut out = Vec::with_capacity(windows * cfg.bins);
    for w in 0..windows {
        for k in 0..cfg.bins {
            out.push(clip.sample(w * cfg.overlap_frames, k, cfg, &index));
        }
    }
    Ok(out)
}

/// Lazily materialized samples over a set of clips.
pub struct ClipDataset {
    cfg: FeatureConfig,
    clips: Vec<ClipFeatures>,
    index: Vec<usize>,
    /// `(clip, window start)` for each window; samples enumerate bins within a window.
    windows: Vec<(usize, usize)>,
}

impl ClipDataset {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            index: subband_indices(cfg.bins, cfg.neighbors),
            cfg,
            clips: Vec::new(),
            windows: Vec::new(),
        })
    }

    /// Add one clip; returns the number of windows it contributed.
    pub fn push_clip(
        &mut self,
        clean: &ComplexSpectrogram,
        noisy: &ComplexSpectrogram,
        compression: &CompressionConfig,
    ) -> Result<usize> {
        if noisy.bins() != self.cfg.bins {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, feature configuration expects {}",
                noisy.bins(),
                self.cfg.bins
            )));
        }
        let clip = ClipFeatures::new(clean, noisy, compression)?;
        let windows = self.cfg.window_count(clip.frames());
        let id = self.clips.len();
        self.windows
            .extend((0..windows).map(|w| (id, w * self.cfg.overlap_frames)));
        self.clips.push(clip);
        Ok(windows)
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// The same clips windowed under another configuration with equal `K`.
    pub fn with_config(&self, cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.bins != self.cfg.bins {
            return Err(Error::config(format!(
                "cannot rewindow {} bins as {}",
                self.cfg.bins, cfg.bins
            )));
        }
        let mut windows = Vec::new();
        for (id, clip) in self.clips.iter().enumerate() {
            let n = cfg.window_count(clip.frames());
            windows.extend((0..n).map(|w| (id, w * cfg.overlap_frames)));
        }
        Ok(Self {
            index: subband_indices(cfg.bins, cfg.neighbors),
            cfg,
            clips: self.clips.clone(),
            windows,
        })
    }
}

impl SampleSource for ClipDataset {
    fn len(&self) -> usize {
        self.windows.len() * self.cfg.bins
    }

    fn sample(&self, index: usize) -> TrainingSample {
        let (clip, start) = self.windows[index / self.cfg.bins];
        let k = index % self.cfg.bins;
        self.clips[clip].sample(start, k, &self.cfg, &self.index)
    }
}

pub const SHARD_MAGIC: &[u8; 5] = b"SBDS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardHeader {
    pub bins: u32,
    pub neighbors: u32,
    pub seq_len: u32,
    pub tau: u32,
}

impl ShardHeader {
    pub fn from_config(cfg: &FeatureConfig) -> Self {
        Self {
            bins: cfg.bins as u32,
            neighbors: cfg.neighbors as u32,
            seq_len: cfg.seq_len as u32,
            tau: cfg.tau as u32,
        }
    }
}

/// Write a shard: magic, `K N T tau` as LE u32, then per sample the
/// frequency index, `T x (2N+1)` f32 inputs, `T x 2` f32 targets and `T`
/// loss-mask bytes.
pub fn write_shard<W: Write>(mut w: W, header: &ShardHeader, samples: &[TrainingSample]) -> Result<()> {
    let t_len = header.seq_len as usize;
    let dim = 2 * header.neighbors as usize + 1;
    w.write_all(SHARD_MAGIC)?;
    for v in [header.bins, header.neighbors, header.seq_len, header.tau] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (i, s) in samples.iter().enumerate() {
        if s.input.dim() != (t_len, dim) || s.target.dim() != (t_len, 2) || s.loss_mask.len() != t_len {
            return Err(Error::shape(format!("sample {i} does not match the shard header")));
        }
        w.write_all(&s.freq.to_le_bytes())?;
        for v in s.input.iter().chain(s.target.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        let mask: Vec<u8> = s.loss_mask.iter().map(|&b| b as u8).collect();
        w.write_all(&mask)?;
    }
    Ok(())
}

pub fn read_shard<R: Read>(mut r: R) -> Result<(ShardHeader, Vec<TrainingSample>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 21 || &bytes[..5] != SHARD_MAGIC {
        return Err(Error::Format("not a training shard (bad magic)".into()));
    }
    let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    let header = ShardHeader {
        bins: u32_at(5),
        neighbors: u32_at(9),
        seq_len: u32_at(13),
        tau: u32_at(17),
    };
    let t_len = header.seq_len as usize;
    let dim = 2 * header.neighbors as usize + 1;
    let record = 4 + 4 * t_len * dim + 4 * t_len * 2 + t_len;
    let body = &bytes[21..];
    if record == 0 || body.len() % record != 0 {
        return Err(Error::Format(format!(
            "shard body of {} bytes is not a whole number of {record}-byte records",
            body.len()
        )));
    }
    let f32_at = |chunk: &[u8], i: usize| f32::from_le_bytes(chunk[i..i + 4].try_into().unwrap());
    let samples = body
        .chunks_exact(record)
        .map(|chunk| {
            let freq = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            let mut pos = 4;
            let input = Array2::from_shape_fn((t_len, dim), |(t, j)| {
                f32_at(chunk, pos + 4 * (t * dim + j))
            });
            pos += 4 * t_len * dim;
            let target = Array2::from_shape_fn((t_len, 2), |(t, j)| f32_at(chunk, pos + 4 * (t * 2 + j)));
            pos += 8 * t_len;
            let loss_mask = chunk[pos..pos + t_len].iter().map(|&b| b != 0).collect();
            TrainingSample {
                freq,
                input,
                target,
                loss_mask,
            }
        })
        .collect();
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(k: usize) -> Vec<f64> {
        (0..k).map(|j| j as f64).collect()
    }

    #[test]
    fn interior_gather_order() {
        assert_eq!(subband_vector(&ramp(257), 5, 2).unwrap(), vec![5.0, 4.0, 3.0, 6.0, 7.0]);
    }

    /// Magnitudes of the full-length DFT of a real signal, indexed circularly.
    fn circular_oracle(signal: &[f64], k: usize, n: usize) -> Vec<f64> {
        let len = signal.len();
        // Direct O(n^2) DFT over all `len` frequencies.
        let mags: Vec<f64> = (0..len)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in signal.iter().enumerate() {
                    let ph = -2.0 * std::f64::consts::PI * (f * n) as f64 / len as f64;
                    re += x * ph.cos();
                    im += x * ph.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let at = |i: isize| mags[i.rem_euclid(len as isize) as usize];
        let k = k as isize;
        let mut out = vec![at(k)];
        out.extend((1..=n as isize).map(|j| at(k - j)));
        out.extend((1..=n as isize).map(|j| at(k + j)));
        out
    }

    #[test]
    fn boundary_bins_match_full_dft_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let signal: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = StftConfig::new(64, 32, 16_000).unwrap();
        let rect: Vec<f64> = signal.iter().zip(&cfg.window).map(|(x, w)| x * w).collect();
        // stft windows internally; feed the oracle the same windowed frame.
        let half: Vec<f64> = stft(&signal, &cfg).unwrap().frame(0).iter().map(|c| c.norm()).collect();
        for k in [0, 1, 2, 30, 31, 32] {
            for n in [1, 3, 5] {
                let got = subband_vector(&half, k, n).unwrap();
                let want = circular_oracle(&rect, k, n);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9, "k={k} n={n}");
                }
            }
        }
    }

    #[test]
    fn boundary_examples_on_ramp() {
        assert_eq!(subband_vector(&ramp(257), 0, 2).unwrap(), vec![0.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(subband_vector(&ramp(257), 256, 1).unwrap(), vec![256.0, 255.0, 255.0]);
    }

    #[test]
    fn out_of_range_bin() {
        assert!(matches!(
            subband_vector(&ramp(10), 10, 1),
            Err(Error::BinOutOfRange { index: 10, bins: 10 })
        ));
    }

    #[test]
    fn index_table_matches_gather() {
        let frame: Vec<f64> = (0..17).map(|i| (i * i) as f64).collect();
        let table = subband_indices(17, 4);
        for k in 0..17 {
            let v = subband_vector(&frame, k, 4).unwrap();
            let t: Vec<f64> = table[k * 9..(k + 1) * 9].iter().map(|&j| frame[j]).collect();
            assert_eq!(v, t);
        }
    }

    proptest! {
        #[test]
        fn gather_is_subset_with_lower_mirror(
            frame in prop::collection::vec(0.0f64..10.0, 8..40),
            n in 0usize..6,
        ) {
            prop_assume!(n < frame.len());
            let k_max = frame.len();
            for k in [0, k_max / 2, k_max - 1] {
                let v = subband_vector(&frame, k, n).unwrap();
                prop_assert_eq!(v.len(), 2 * n + 1);
                for x in &v {
                    prop_assert!(frame.contains(x));
                }
            }
            let v0 = subband_vector(&frame, 0, n).unwrap();
            for j in 0..n {
                prop_assert_eq!(v0[1 + j], frame[j + 1]);
            }
        }

        #[test]
        fn normalization_is_scale_covariant(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 3), 1..20),
            a in 0.01f64..100.0,
        ) {
            let t = rows.len();
            let input = Array2::from_shape_fn((t, 3), |(i, j)| rows[i][j]);
            let center: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let base = normalize_sequence(input.view(), &center).unwrap();
            let scaled_center: Vec<f64> = center.iter().map(|c| c * a).collect();
            let scaled = normalize_sequence((&input * a).view(), &scaled_center).unwrap();
            for (p, q) in base.iter().zip(scaled.iter()) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }

        #[test]
        fn running_mean_contracts(c in 0.01f64..10.0, init in 0.01f64..10.0, l in 2usize..400) {
            let alpha = smoothing_alpha(l);
            let mut mu = init;
            for t in 1..200 {
                mu = running_mean_update(mu, c, alpha);
                let bound = alpha.powi(t) * (init - c).abs();
                prop_assert!((mu - c).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let input = Array2::from_elem((4, 3), 6.0);
        let out = normalize_sequence(input.view(), &[3.0; 4]).unwrap();
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-15));

        let zeros = Array2::<f64>::zeros((5, 3));
        let out = normalize_sequence(zeros.view(), &[0.0; 5]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let input = Array2::from_elem((2, 3), 2.0);
        let out = normalize_sequence(input.view(), &[1.0, 3.0]).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn running_mean_examples() {
        let mut s = NormState::new(1, 0.5);
        s.update(&[2.0]);
        assert_eq!(s.mu[0], 2.0);
        s.update(&[0.0]);
        assert_eq!(s.mu[0], 1.0);

        let mut s = NormState::new(3, smoothing_alpha(192));
        for _ in 0..50 {
            s.update(&[0.7, 0.7, 0.7]);
            assert!(s.mu.iter().all(|&m| (m - 0.7).abs() < 1e-15));
        }
        assert!((smoothing_alpha(192) - 191.0 / 193.0).abs() < 1e-15);
        assert!((smoothing_alpha(192) - 0.98964).abs() < 1e-5);
    }

    fn random_spec(frames: usize, bins: usize, seed: u64) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((frames, bins), |_| {
            num_complex::Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexSpectrogram::from_frames(data).unwrap()
    }

    #[test]
    fn window_counts() {
        let cfg = FeatureConfig::new(15, 257, 192, 2).unwrap();
        let comp = CompressionConfig::default();
        let clean = random_spec(192, 257, 1);
        let noisy = random_spec(192, 257, 2);
        assert_eq!(make_training_samples(&clean, &noisy, &cfg, &comp).unwrap().len(), 257);
        // The second window [96, 288) needs all 288 frames.
        assert_eq!(cfg.window_count(287), 1);
        assert_eq!(cfg.window_count(288), 2);
        let clean = random_spec(287, 257, 3);
        let noisy = random_spec(287, 257, 4);
        assert_eq!(make_training_samples(&clean, &noisy, &cfg, &comp).unwrap().len(), 257);
    }

    #[test]
    fn delay_mask_and_target_alignment() {
        let cfg = FeatureConfig::new(2, 9, 12, 2).unwrap();
        let comp = CompressionConfig::default();
        let clean = random_spec(30, 9, 5);
        let noisy = random_spec(30, 9, 6);
        let samples = make_training_samples(&clean, &noisy, &cfg, &comp).unwrap();
        assert_eq!(samples.len(), cfg.window_count(30) * 9);
        for (i, s) in samples.iter().enumerate() {
            let start = (i / 9) * cfg.overlap_frames;
            let k = s.freq as usize;
            assert_eq!(&s.loss_mask[..2], &[false, false]);
            assert!(s.loss_mask[2..].iter().all(|&b| b));
            for t in 2..cfg.seq_len {
                let f = start + t - 2;
                let (mr, mi) = cirm::raw_cirm(clean.get(k, f), noisy.get(k, f), 1e-8);
                let want = [cirm::compress(mr, &comp) as f32, cirm::compress(mi, &comp) as f32];
                assert_eq!([s.target[[t, 0]], s.target[[t, 1]]], want);
            }
            // Centre column mean of the normalized input is 1.
            let mean: f64 = s.input.column(0).iter().map(|&v| v as f64).sum::<f64>() / 12.0;
            assert!((mean - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mismatched_specs_rejected() {
        let cfg = FeatureConfig::new(2, 9, 12, 2).unwrap();
        let comp = CompressionConfig::default();
        let r = make_training_samples(&random_spec(30, 9, 1), &random_spec(29, 9, 2), &cfg, &comp);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_matches_eager_samples() {
        let cfg = FeatureConfig::new(2, 9, 12, 1).unwrap();
        let comp = CompressionConfig::default();
        let clean = random_spec(40, 9, 7);
        let noisy = random_spec(40, 9, 8);
        let eager = make_training_samples(&clean, &noisy, &cfg, &comp).unwrap();
        let mut ds = ClipDataset::new(cfg).unwrap();
        ds.push_clip(&clean, &noisy, &comp).unwrap();
        assert_eq!(SampleSource::len(&ds), eager.len());
        for (i, s) in eager.iter().enumerate() {
            assert_eq!(&ds.sample(i), s);
        }
    }

    #[test]
    fn rewindowed_dataset_matches_fresh_one() {
        let comp = CompressionConfig::default();
        let clean = random_spec(40, 9, 1);
        let noisy = random_spec(40, 9, 2);
        let mut ds = ClipDataset::new(FeatureConfig::new(2, 9, 12, 2).unwrap()).unwrap();
        ds.push_clip(&clean, &noisy, &comp).unwrap();
        let other = FeatureConfig::new(2, 9, 8, 0).unwrap();
        let re = ds.with_config(other.clone()).unwrap();
        let eager = make_training_samples(&clean, &noisy, &other, &comp).unwrap();
        assert_eq!(SampleSource::len(&re), eager.len());
        for (i, s) in eager.iter().enumerate() {
            assert_eq!(&re.sample(i), s);
        }
        assert!(ds.with_config(FeatureConfig::new(2, 17, 12, 2).unwrap()).is_err());
    }

    #[test]
    fn shard_round_trip_and_bad_magic() {
        let cfg = FeatureConfig::new(1, 5, 6, 2).unwrap();
        let comp = CompressionConfig::default();
        let samples = make_training_samples(&random_spec(9, 5, 1), &random_spec(9, 5, 2), &cfg, &comp).unwrap();
        let header = ShardHeader::from_config(&cfg);
        let mut bytes = Vec::new();
        write_shard(&mut bytes, &header, &samples).unwrap();
        assert_eq!(&bytes[..5], b"SBDS1");
        assert_eq!(bytes.len(), 21 + samples.len() * (4 + 4 * 6 * 3 + 4 * 6 * 2 + 6));
        let (h, back) = read_shard(bytes.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, samples);

        bytes[0] = b'X';
        assert!(matches!(read_shard(bytes.as_slice()), Err(Error::Format(_))));
    }
}
