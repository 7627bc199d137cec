//! Synthetic corpora: SNR-controlled mixing, synthetic room impulse
//! responses, manifests, and built-in speech-like and noise generators.

use std::f64::consts::{LN_10, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;

use crate::{Complex64, Error, Result};

/// SNRs drawn for training mixtures, in dB.
pub const SNR_SET_DB: [f64; 5] = [-5.0, 0.0, 5.0, 10.0, 15.0];

/// Reverberation times drawn for synthetic rooms, in seconds.
pub const T60_SET_S: [f64; 6] = [0.16, 0.3, 0.36, 0.6, 0.61, 0.7];

/// Direct-to-reverberant energy ratio of synthetic impulse responses, dB.
pub const RIR_DRR_DB: f64 = 5.0;

/// Share of manifest clips that get reverberation.
pub const DEFAULT_REVERB_FRACTION: f64 = 0.75;

/// Mixture components; `mixture = speech + noise` sample by sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub mixture: Vec<f64>,
    /// Noise after looping/cropping and gain.
    pub noise: Vec<f64>,
    pub speech: Vec<f64>,
}

impl Mixed {
    /// Scale all three signals by one factor so the mixture peak is at most
    /// `peak`. Ratios between the parts are unchanged.
    pub fn limit_peak(&mut self, peak: f64) {
        let m = self.mixture.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if m > peak {
            let g = peak / m;
            for v in [&mut self.mixture, &mut self.noise, &mut self.speech] {
                v.iter_mut().for_each(|x| *x *= g);
            }
        }
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Loop or crop `noise` to `len` samples starting at a seeded offset.
pub fn fit_noise(noise: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f64> {
    if noise.is_empty() || len == 0 {
        return vec![0.0; len];
    }
    if noise.len() >= len {
        let start = rng.random_range(0..=noise.len() - len);
        noise[start..start + len].to_vec()
    } else {
        let start = rng.random_range(0..noise.len());
        (0..len).map(|i| noise[(start + i) % noise.len()]).collect()
    }
}

/// Mix at `snr_db` using full-clip mean power. `+inf` returns the speech
/// untouched with a zero noise track.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64, seed: u64) -> Result<Mixed> {
    if speech.is_empty() {
        return Err(Error::Empty("speech has no samples".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(Mixed {
            mixture: speech.to_vec(),
            noise: vec![0.0; speech.len()],
            speech: speech.to_vec(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let ps = mean_power(speech);
    if ps <= 0.0 {
        return Err(Error::Audio("speech has zero power".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fitted = fit_noise(noise, speech.len(), &mut rng);
    let pn = mean_power(&fitted);
    if pn <= 0.0 {
        return Err(Error::Audio("noise has zero power over the mixing interval".into()));
    }
    let g = noise_gain(ps, pn, snr_db);
    let scaled: Vec<f64> = fitted.iter().map(|v| v * g).collect();
    let mixture = speech.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok(Mixed {
        mixture,
        noise: scaled,
        speech: speech.to_vec(),
    })
}

/// `sqrt(Ps / (Pn 10^(snr/10)))`.
pub fn noise_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// SNR in dB between two component tracks.
pub fn achieved_snr_db(speech: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_power(speech) / mean_power(noise)).log10()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRir {
    pub t60: f64,
    pub taps: Vec<f64>,
}

impl SyntheticRir {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Amplitude envelope `10^(-3 t / t60)`; energy falls by 60 dB at `t60`.
pub fn rir_envelope(t: f64, t60: f64) -> f64 {
    (-3.0 * LN_10 * t / t60).exp()
}

/// Number of taps, `ceil(1.2 t60 fs)`.
pub fn rir_length(t60: f64, sample_rate: u32) -> usize {
    // Guard against 1.2 * 0.3 * 16000 evaluating to 5760.000000000001.
    (1.2 * t60 * sample_rate as f64 - 1e-9).ceil() as usize
}

/// Unit direct path followed by uniform noise under the T60 envelope, with
/// the tail scaled to [`RIR_DRR_DB`].
pub fn synth_rir(t60: f64, sample_rate: u32, seed: u64) -> Result<SyntheticRir> {
    if !(t60 > 0.0 && t60.is_finite()) {
        return Err(Error::config(format!("t60 must be positive, got {t60}")));
    }
    let len = rir_length(t60, sample_rate).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut taps = vec![0.0; len];
    taps[0] = 1.0;
    for (n, tap) in taps.iter_mut().enumerate().skip(1) {
        *tap = rng.random_range(-1.0..1.0) * rir_envelope(n as f64 / fs, t60);
    }
    let tail: f64 = taps[1..].iter().map(|v| v * v).sum();
    if tail > 0.0 {
        let g = (10f64.powf(-RIR_DRR_DB / 10.0) / tail).sqrt();
        taps[1..].iter_mut().for_each(|v| *v *= g);
    }
    Ok(SyntheticRir { t60, taps })
}

/// Linear convolution truncated to `signal.len()`.
pub fn convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 || kernel.is_empty() {
        return vec![0.0; n];
    }
    let m = kernel.len().min(n);
    if (m as u64) * (n as u64) <= 1 << 22 {
        let mut out = vec![0.0; n];
        for (j, &h) in kernel[..m].iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (o, &x) in out[j..].iter_mut().zip(signal) {
                *o += h * x;
            }
        }
        return out;
    }
    let size = (n + m - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![0.0; size];
    a[..n].copy_from_slice(signal);
    let mut b = vec![0.0; size];
    b[..m].copy_from_slice(&kernel[..m]);
    let mut fa = fwd.make_output_vec();
    let mut fb = fwd.make_output_vec();
    fwd.process(&mut a, &mut fa).expect("sizes from plan");
    fwd.process(&mut b, &mut fb).expect("sizes from plan");
    let scale = 1.0 / size as f64;
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y * scale).collect();
    let last = prod.len() - 1;
    prod[0].im = 0.0;
    prod[last].im = 0.0;
    let mut out = inv.make_output_vec();
    inv.process(&mut prod, &mut out).expect("sizes from plan");
    out.truncate(n);
    out
}

pub fn reverberate(speech: &[f64], rir: &SyntheticRir) -> Vec<f64> {
    convolve(speech, &rir.taps)
}

/// Draw a T60 from [`T60_SET_S`] for a room seed.
pub fn t60_for_seed(rir_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rir_seed);
    *T60_SET_S.choose(&mut rng).expect("nonempty")
}

/// One manifest record.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub speech: String,
    pub noise: String,
    pub snr_db: f64,
    pub rir_seed: Option<u64>,
    pub seed: u64,
}

pub const MANIFEST_HEADER: &str = "# sbse manifest v1; snr reference: full-clip mean power; columns: speech noise snr_db rir_seed clip_seed";

pub fn write_manifest(specs: &[MixSpec]) -> String {
    let mut s = String::new();
    s.push_str(MANIFEST_HEADER);
    s.push('\n');
    for m in specs {
        let rir = m.rir_seed.map_or_else(|| "-".to_string(), |r| r.to_string());
        let snr = if m.snr_db == f64::INFINITY {
            "inf".to_string()
        } else {
            m.snr_db.to_string()
        };
        writeln!(s, "{}\t{}\t{}\t{}\t{}", m.speech, m.noise, snr, rir, m.seed).expect("write to string");
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<MixSpec>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(&format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let snr_db = match fields[2] {
            "inf" | "+inf" => f64::INFINITY,
            v => v.parse().map_err(|_| bad("bad snr_db"))?,
        };
        let rir_seed = match fields[3] {
            "-" => None,
            v => Some(v.parse().map_err(|_| bad("bad rir seed"))?),
        };
        out.push(MixSpec {
            speech: fields[0].to_string(),
            noise: fields[1].to_string(),
            snr_db,
            rir_seed,
            seed: fields[4].parse().map_err(|_| bad("bad clip seed"))?,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<MixSpec>> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// A source file and its duration in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceClip {
    pub path: String,
    pub seconds: f64,
}

/// Sorted `.wav` files of a directory with their durations.
pub fn scan_wav_dir(dir: impl AsRef<Path>) -> Result<Vec<SourceClip>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let reader = hound::WavReader::open(&p)?;
            let spec = reader.spec();
            let seconds = reader.duration() as f64 / spec.sample_rate as f64;
            Ok(SourceClip {
                path: p.to_string_lossy().into_owned(),
                seconds,
            })
        })
        .collect()
}

/// Pair speech and noise clips until `hours` of speech is covered.
///
/// Exactly `round(reverb_fraction * n)` of the `n` records get a room seed;
/// which ones is decided by a seeded shuffle.
pub fn plan_manifest(
    speech: &[SourceClip],
    noise: &[SourceClip],
    hours: f64,
    reverb_fraction: f64,
    seed: u64,
) -> Result<Vec<MixSpec>> {
    if speech.is_empty() || noise.is_empty() {
        return Err(Error::Empty("speech and noise corpora must both be nonempty".into()));
    }
    if !(0.0..=1.0).contains(&reverb_fraction) {
        return Err(Error::config(format!("reverb fraction {reverb_fraction} outside [0, 1]")));
    }
    if speech.iter().all(|c| c.seconds <= 0.0) {
        return Err(Error::Empty("all speech clips are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = hours * 3600.0;
    let mut covered = 0.0;
    let mut specs = Vec::new();
    while specs.is_empty() || covered < target {
        let s = &speech[rng.random_range(0..speech.len())];
        let n = &noise[rng.random_range(0..noise.len())];
        specs.push(MixSpec {
            speech: s.path.clone(),
            noise: n.path.clone(),
            snr_db: *SNR_SET_DB.choose(&mut rng).expect("nonempty"),
            rir_seed: None,
            seed: rng.random(),
        });
        covered += s.seconds;
    }
    let reverberant = (reverb_fraction * specs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.shuffle(&mut rng);
    for &i in &order[..reverberant] {
        specs[i].rir_seed = Some(rng.random());
    }
    Ok(specs)
}

pub fn build_manifest(
    speech_dir: impl AsRef<Path>,
    noise_dir: impl AsRef<Path>,
    hours: f64,
    reverb_fraction: f64,
    seed: u64,
) -> Result<Vec<MixSpec>> {
    let speech = scan_wav_dir(speech_dir)?;
    let noise = scan_wav_dir(noise_dir)?;
    plan_manifest(&speech, &noise, hours, reverb_fraction, seed)
}

/// Render one record. The training target is the (possibly reverberant) speech.
pub fn render_mix(spec: &MixSpec, speech: &[f64], noise: &[f64], sample_rate: u32) -> Result<Mixed> {
    let target = match spec.rir_seed {
        Some(r) => reverberate(speech, &synth_rir(t60_for_seed(r), sample_rate, r)?),
        None => speech.to_vec(),
    };
    mix_at_snr(&target, noise, spec.snr_db, spec.seed)
}

/// Render a manifest record from its WAV files.
pub fn render_mix_files(spec: &MixSpec, sample_rate: u32) -> Result<Mixed> {
    let speech = crate::wav::read_wav_at(&spec.speech, sample_rate)?;
    let noise = crate::wav::read_wav_at(&spec.noise, sample_rate)?;
    render_mix(spec, &speech, &noise, sample_rate)
}

/// Nonstationary speech surrogate: voiced harmonic segments with drifting
/// pitch and formant emphasis, unvoiced noise bursts, and silent gaps.
///
/// Peak is normalized to 0.5.
pub fn synth_speechlike(duration_s: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let len = (duration_s * fs).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let silence_share: f64 = rng.random_range(0.28..0.4);
    let fade = (0.015 * fs) as usize;
    let mut pos = (rng.random_range(0.05..0.2) * fs) as usize;
    while pos < len {
        let seg = ((rng.random_range(0.15..0.45)) * fs) as usize;
        let end = (pos + seg).min(len);
        let unvoiced = rng.random_bool(0.2);
        let level: f64 = rng.random_range(0.4..1.0);
        if unvoiced {
            fricative(&mut out[pos..end], &mut rng);
        } else {
            voiced(&mut out[pos..end], fs, &mut rng);
        }
        let n = end - pos;
        for (i, v) in out[pos..end].iter_mut().enumerate() {
            let ramp = if i < fade {
                0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
            } else if n - i <= fade {
                0.5 - 0.5 * (PI * (n - i) as f64 / fade as f64).cos()
            } else {
                1.0
            };
            *v *= level * ramp;
        }
        let gap = seg as f64 * silence_share / (1.0 - silence_share) * rng.random_range(0.6..1.4);
        pos = end + gap as usize;
    }
    let peak = out.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    out
}

fn voiced(buf: &mut [f64], fs: f64, rng: &mut impl Rng) {
    let f0_start: f64 = rng.random_range(90.0..240.0);
    let f0_end = f0_start * rng.random_range(0.75..1.3);
    let vib_rate: f64 = rng.random_range(3.0..7.0);
    let vib_depth: f64 = rng.random_range(0.0..0.03);
    let formants = [
        (rng.random_range(300.0..900.0), rng.random_range(60.0..140.0)),
        (rng.random_range(900.0..2400.0), rng.random_range(90.0..200.0)),
        (rng.random_range(2400.0..3600.0), rng.random_range(120.0..260.0)),
    ];
    let f1_end = formants[0].0 * rng.random_range(0.8..1.25);
    let n = buf.len().max(1) as f64;
    let max_h = ((0.45 * fs) / f0_start.min(f0_end)).floor().min(60.0) as usize;
    let mut phases: Vec<f64> = (0..max_h).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    for (i, v) in buf.iter_mut().enumerate() {
        let u = i as f64 / n;
        let f0 = (f0_start + (f0_end - f0_start) * u) * (1.0 + vib_depth * (2.0 * PI * vib_rate * i as f64 / fs).sin());
        let f1 = formants[0].0 + (f1_end - formants[0].0) * u;
        let mut acc = 0.0;
        for (h, ph) in phases.iter_mut().enumerate() {
            let f = f0 * (h + 1) as f64;
            *ph += 2.0 * PI * f / fs;
            if f >= 0.45 * fs {
                continue;
            }
            let mut gain = 0.05;
            for (j, &(fc, bw)) in formants.iter().enumerate() {
                let fc = if j == 0 { f1 } else { fc };
                let d = (f - fc) / bw;
                gain += (-0.5 * d * d).exp() / (j + 1) as f64;
            }
            acc += gain * ph.sin() / (h + 1) as f64;
        }
        *v = acc;
    }
}

fn fricative(buf: &mut [f64], rng: &mut impl Rng) {
    let mut prev = 0.0;
    let tilt: f64 = rng.random_range(0.5..0.95);
    for v in buf.iter_mut() {
        let w: f64 = StandardNormal.sample(rng);
        *v = 0.3 * (w - tilt * prev);
        prev = w;
    }
}

/// Stationary noise families for the built-in corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    /// Resonant band-pass noise around a seeded centre frequency.
    Band,
    /// Mains hum harmonics over a white floor.
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Brown,
        NoiseKind::Band,
        NoiseKind::Hum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
            NoiseKind::Band => "band",
            NoiseKind::Hum => "hum",
        }
    }
}

/// Stationary noise with RMS 0.1.
pub fn synth_noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let mut white = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut out: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut y = 0.0;
            (0..len)
                .map(|_| {
                    y = 0.995 * y + 0.1 * white();
                    y
                })
                .collect()
        }
        NoiseKind::Band => {
            let seed_f = white().abs().min(3.0) / 3.0;
            let fc = 300.0 + 2500.0 * seed_f;
            let r: f64 = 0.98;
            let theta = 2.0 * PI * fc / fs;
            let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
            let (mut y1, mut y2) = (0.0, 0.0);
            (0..len)
                .map(|_| {
                    let y = white() + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    y
                })
                .collect()
        }
        NoiseKind::Hum => {
            let base = if white() > 0.0 { 50.0 } else { 60.0 };
            let phases: Vec<f64> = (0..8).map(|_| white() * PI).collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    let mut v = 0.3 * white();
                    for (h, ph) in phases.iter().enumerate() {
                        v += (2.0 * PI * base * (h + 1) as f64 * t + ph).sin() / (h + 1) as f64;
                    }
                    v
                })
                .collect()
        }
    };
    let rms = mean_power(&out).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.1 / rms);
    }
    out
}

/// Fraction of 256-sample frames whose energy is more than 40 dB below the
/// loudest frame.
pub fn silence_fraction(x: &[f64]) -> f64 {
    let energies: Vec<f64> = x.chunks(256).map(|f| f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if energies.is_empty() || peak == 0.0 {
        return 1.0;
    }
    let thr = peak * 1e-4;
    energies.iter().filter(|&&e| e < thr).count() as f64 / energies.len() as f64
}
