//! Frame-by-frame enhancement.
//!
//! Each call to [`StreamSession::process_frame`] takes one hop of new
//! samples. Once a full analysis frame is available it is normalized by the
//! running mean, all `K` subband vectors advance their LSTM state in one
//! batched step, and the prediction masks the frame received `tau` frames
//! earlier. Overlap-add then releases one hop of output.
//!
//! A session starts with `N / hop - 1` silent hops already in the analysis
//! buffer (`N = fft_size`), so frame `t` completes on call `t` and every
//! emitted sample is covered by a full set of overlapping windows. The
//! output of those leading frames is discarded. The first
//! `tau + N / hop - 1` calls return nothing, and the output hop returned by
//! a call ends `tau * hop + N - hop` samples before the input hop of the
//! same call.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cirm::{apply_mask, compress, MaskValue};
use crate::dsp::{stft, ComplexSpectrogram, OverlapAddSynthesizer, StreamingAnalyzer};
use crate::features::{subband_indices, NormState, NORM_FLOOR};
use crate::neural::{FusedNetwork, FusedState, ModelBundle, Network, Trainable};
use crate::wav::{read_wav_at, write_wav, WavFormat};
use crate::{Complex64, Error, Result};

/// Bins per forward pass in [`offline_replay`].
const REPLAY_GROUP: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Worker threads for the per-frame bin batch; 0 or 1 runs inline.
    pub threads: usize,
    /// Use this delay instead of the model's own.
    pub tau: Option<usize>,
}

/// Bins `start..start + len` with their own recurrent state.
struct BinGroup {
    start: usize,
    state: FusedState,
    input: Array2<f32>,
    output: Array2<f32>,
}

/// Enhancement state of one audio stream.
pub struct StreamSession {
    model: Arc<ModelBundle<f32>>,
    fused: FusedNetwork,
    tau: usize,
    analyzer: StreamingAnalyzer,
    synth: OverlapAddSynthesizer,
    norm: NormState,
    groups: Vec<BinGroup>,
    pool: Option<rayon::ThreadPool>,
    index: Vec<usize>,
    delay: VecDeque<Vec<Complex64>>,
    spectrum: Vec<Complex64>,
    mags: Vec<f64>,
    masked: Vec<Complex64>,
    frames: usize,
    preroll: usize,
}

impl StreamSession {
    pub fn new(model: Arc<ModelBundle<f32>>, opts: &SessionOptions) -> Result<Self> {
        model.validate()?;
        let bins = model.stft.bins();
        let dim = model.features.input_dim();
        let threads = opts.threads.clamp(1, bins);
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::config(format!("cannot start {threads} worker threads: {e}")))?,
            )
        } else {
            None
        };
        let fused = FusedNetwork::new(&model.params);
        let per = bins.div_ceil(threads);
        let groups = (0..bins)
            .step_by(per)
            .map(|start| {
                let len = per.min(bins - start);
                BinGroup {
                    start,
                    state: fused.state(len),
                    input: Array2::zeros((len, dim)),
                    output: Array2::zeros((len, model.net.output_dim)),
                }
            })
            .collect();
        let mut session = Self {
            fused,
            tau: opts.tau.unwrap_or(model.net.tau),
            analyzer: StreamingAnalyzer::new(&model.stft),
            synth: OverlapAddSynthesizer::new(&model.stft),
            norm: NormState::new(bins, model.features.alpha()),
            groups,
            pool,
            index: subband_indices(bins, model.features.neighbors),
            delay: VecDeque::with_capacity(opts.tau.unwrap_or(model.net.tau) + 1),
            spectrum: vec![Complex64::new(0.0, 0.0); bins],
            mags: vec![0.0; bins],
            masked: vec![Complex64::new(0.0, 0.0); bins],
            frames: 0,
            preroll: 0,
            model,
        };
        session.prime();
        Ok(session)
    }

    /// Fill the analysis buffer with silence ahead of the first hop.
    fn prime(&mut self) {
        let silence = vec![0.0; self.hop()];
        for _ in 0..prime_hops(&self.model) {
            let done = self.analyzer.push(&silence, &mut self.spectrum).expect("block is one hop");
            debug_assert!(!done);
        }
        self.preroll = prime_hops(&self.model);
    }

    pub fn model(&self) -> &ModelBundle<f32> {
        &self.model
    }

    pub fn hop(&self) -> usize {
        self.model.stft.hop
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Samples between an input hop and the output hop returned with it.
    pub fn latency_samples(&self) -> usize {
        output_shift(&self.model, self.tau)
    }

    /// Calls that return nothing at the start of a stream.
    pub fn fill_calls(&self) -> usize {
        self.tau + prime_hops(&self.model)
    }

    /// Analysis frames seen so far.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Frames currently waiting for their delayed mask.
    pub fn buffered_frames(&self) -> usize {
        self.delay.len()
    }

    /// Recurrent values plus buffered spectrum coefficients; constant in
    /// stream length.
    pub fn state_size(&self) -> usize {
        self.groups.iter().map(|g| g.state.value_count()).sum::<usize>()
            + self.delay.iter().map(|f| f.len()).sum::<usize>()
    }

    pub fn reset(&mut self) {
        self.analyzer.reset();
        self.synth = OverlapAddSynthesizer::new(&self.model.stft);
        self.norm.reset();
        for g in &mut self.groups {
            g.state.reset();
        }
        self.delay.clear();
        self.frames = 0;
        self.prime();
    }

    /// Feed one hop; returns one hop of enhanced audio once the pipeline is full.
    pub fn process_frame(&mut self, block: &[f64]) -> Result<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.hop()];
        Ok(self.process_frame_into(block, &mut out)?.then_some(out))
    }

    /// As [`Self::process_frame`] but writes into `out`; returns whether it did.
    pub fn process_frame_into(&mut self, block: &[f64], out: &mut [f64]) -> Result<bool> {
        if out.len() != self.hop() {
            return Err(Error::shape(format!(
                "output block has {} samples, expected {}",
                out.len(),
                self.hop()
            )));
        }
        if !self.analyzer.push(block, &mut self.spectrum)? {
            return Ok(false);
        }
        self.frames += 1;
        for (m, c) in self.mags.iter_mut().zip(&self.spectrum) {
            *m = c.norm();
        }
        self.norm.update(&self.mags);
        self.delay.push_back(self.spectrum.clone());
        let ready = self.delay.len() > self.tau;
        self.step_network();
        if !ready {
            return Ok(false);
        }
        let past = self.delay.pop_front().expect("delay buffer holds tau + 1 frames");
        let comp = self.model.compression;
        for g in &self.groups {
            for (r, y) in g.output.rows().into_iter().enumerate() {
                let k = g.start + r;
                let mask = MaskValue::new(y[0] as f64, y[1] as f64);
                self.masked[k] = apply_mask(past[k], mask, &comp);
            }
        }
        self.synth.push(&self.masked, out)?;
        if self.preroll > 0 {
            self.preroll -= 1;
            return Ok(false);
        }
        Ok(true)
    }

    fn step_network(&mut self) {
        let dim = self.model.features.input_dim();
        let mags = &self.mags;
        let mu = &self.norm.mu;
        let index = &self.index;
        let net = &self.fused;
        let run = |g: &mut BinGroup| {
            for (r, mut row) in g.input.rows_mut().into_iter().enumerate() {
                let k = g.start + r;
                let scale = 1.0 / mu[k].max(NORM_FLOOR);
                for (dst, &j) in row.iter_mut().zip(&index[k * dim..(k + 1) * dim]) {
                    *dst = (mags[j] * scale) as f32;
                }
            }
            let y = net.step(&mut g.state, g.input.view());
            g.output.assign(&y);
        };
        match &self.pool {
            Some(pool) => pool.install(|| self.groups.par_iter_mut().for_each(run)),
            None => self.groups.iter_mut().for_each(run),
        }
    }
}

/// Silent hops placed ahead of a stream.
fn prime_hops<F: crate::neural::Real>(model: &ModelBundle<F>) -> usize {
    model.stft.fft_size / model.stft.hop - 1
}

/// Samples by which a session's output trails its input.
pub fn output_shift<F: crate::neural::Real>(model: &ModelBundle<F>, tau: usize) -> usize {
    tau * model.stft.hop + model.stft.fft_size - model.stft.hop
}

/// Total algorithmic latency including the buffering of one hop.
pub fn algorithmic_latency<F: crate::neural::Real>(model: &ModelBundle<F>, tau: usize) -> usize {
    tau * model.stft.hop + model.stft.fft_size
}

/// Enhance a whole signal; the result is aligned with and as long as the input.
pub fn enhance_samples(model: Arc<ModelBundle<f32>>, samples: &[f64], opts: &SessionOptions) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("input has no samples".into()));
    }
    let mut session = StreamSession::new(model, opts)?;
    let hop = session.hop();
    let padded = padded_input(samples, hop, session.fill_calls());
    let mut out = Vec::with_capacity(padded.len());
    let mut block = vec![0.0; hop];
    for chunk in padded.chunks_exact(hop) {
        if session.process_frame_into(chunk, &mut block)? {
            out.extend_from_slice(&block);
        }
    }
    out.truncate(samples.len());
    debug_assert_eq!(out.len(), samples.len());
    Ok(out)
}

/// Input zero-padded to whole hops, plus `flush` hops that drain the pipeline.
fn padded_input(samples: &[f64], hop: usize, flush: usize) -> Vec<f64> {
    let hops = samples.len().div_ceil(hop) + flush;
    let mut padded = samples.to_vec();
    padded.resize(hops * hop, 0.0);
    padded
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceLog {
    pub samples: usize,
    pub frames: usize,
    pub tau: usize,
    /// Leading samples of pipeline delay removed so output aligns with input.
    pub latency_removed: usize,
    pub elapsed: Duration,
}

pub fn enhance_file(
    input: impl AsRef<Path>,
    model: Arc<ModelBundle<f32>>,
    output: impl AsRef<Path>,
    opts: &SessionOptions,
    format: WavFormat,
) -> Result<EnhanceLog> {
    let rate = model.stft.sample_rate;
    let samples = read_wav_at(input, rate)?;
    let tau = opts.tau.unwrap_or(model.net.tau);
    let shift = output_shift(&model, tau);
    let hop = model.stft.hop;
    let flush = tau + prime_hops(&model);
    let start = Instant::now();
    let enhanced = enhance_samples(model, &samples, opts)?;
    let elapsed = start.elapsed();
    write_wav(output, &enhanced, rate, format)?;
    Ok(EnhanceLog {
        samples: samples.len(),
        frames: samples.len().div_ceil(hop) + flush,
        tau,
        latency_removed: shift,
        elapsed,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamStats {
    pub samples_in: usize,
    pub samples_out: usize,
    pub frames: usize,
    pub total_frame_time: Duration,
    pub max_frame_time: Duration,
    /// The reader of our output went away before we finished.
    pub closed_early: bool,
}

impl StreamStats {
    pub fn mean_frame_ms(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.total_frame_time.as_secs_f64() * 1e3 / self.frames as f64
        }
    }
}

/// Raw 16-bit little-endian mono in, same format out.
///
/// One hop is written per hop read (zeros while the pipeline fills). At end
/// of input the last partial hop is zero-padded and `tau + 1` zero hops
/// flush the remaining audio, so the output is the input delayed by
/// [`StreamSession::latency_samples`], rounded up to whole hops.
pub fn enhance_stream<R: Read, W: Write, C: FnMut(usize, Duration)>(
    model: Arc<ModelBundle<f32>>,
    mut input: R,
    mut output: W,
    opts: &SessionOptions,
    mut on_frame: C,
) -> Result<StreamStats> {
    let mut session = StreamSession::new(model, opts)?;
    let hop = session.hop();
    let mut stats = StreamStats::default();
    let mut bytes = vec![0u8; 2 * hop];
    let mut block = vec![0.0; hop];
    let mut out = vec![0.0; hop];
    let mut out_bytes = vec![0u8; 2 * hop];
    let mut flush_left: Option<usize> = None;
    loop {
        match flush_left {
            None => {
                let got = read_full(&mut input, &mut bytes)?;
                if got == 0 {
                    if stats.samples_in == 0 {
                        break;
                    }
                    flush_left = Some(session.fill_calls());
                    continue;
                }
                let n = got / 2;
                for (i, b) in block.iter_mut().enumerate() {
                    *b = if i < n {
                        i16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f64 / 32768.0
                    } else {
                        0.0
                    };
                }
                stats.samples_in += n;
                if got < bytes.len() {
                    flush_left = Some(session.fill_calls());
                }
            }
            Some(0) => break,
            Some(ref mut left) => {
                *left -= 1;
                block.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let t0 = Instant::now();
        let produced = session.process_frame_into(&block, &mut out)?;
        let dt = t0.elapsed();
        stats.frames += 1;
        stats.total_frame_time += dt;
        stats.max_frame_time = stats.max_frame_time.max(dt);
        on_frame(stats.frames - 1, dt);
        if !produced {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, &v) in out.iter().enumerate() {
            out_bytes[2 * i..2 * i + 2].copy_from_slice(&crate::wav::to_i16(v).to_le_bytes());
        }
        match output.write_all(&out_bytes).and_then(|()| output.flush()) {
            Ok(()) => stats.samples_out += hop,
            Err(e) if e.kind() == ErrorKind::BrokenPipe => {
                stats.closed_early = true;
                return Ok(stats);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(stats)
}

/// Read until `buf` is full or EOF; an odd trailing byte is dropped.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled & !1)
}

/// Whole-clip reference pipeline: one STFT, the running mean replayed frame
/// by frame, a full-sequence forward pass per bin, masking, and iSTFT.
///
/// The forward pass is the training one, run over groups of bins.
pub fn offline_replay(model: &ModelBundle<f32>, samples: &[f64], tau: Option<usize>) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("input has no samples".into()));
    }
    let tau = tau.unwrap_or(model.net.tau);
    let cfg = &model.stft;
    let hop = cfg.hop;
    let lead = prime_hops(model) * hop;
    let mut padded = vec![0.0; lead];
    padded.extend(padded_input(samples, hop, tau + prime_hops(model)));
    let spec = stft(&padded, cfg)?;
    let frames = spec.frames();
    let bins = spec.bins();
    let mags = spec.magnitudes();
    let mut norm = NormState::new(bins, model.features.alpha());
    let mut mu = Array2::<f64>::zeros((frames, bins));
    for t in 0..frames {
        norm.update(mags.row(t).as_slice().expect("standard layout"));
        mu.row_mut(t).assign(&ndarray::ArrayView1::from(&norm.mu));
    }
    let dim = model.features.input_dim();
    let index = subband_indices(bins, model.features.neighbors);
    let groups: Vec<Vec<usize>> = (0..bins).collect::<Vec<_>>().chunks(REPLAY_GROUP).map(<[usize]>::to_vec).collect();
    let grouped: Vec<Array3<f32>> = groups
        .par_iter()
        .map(|ks| {
            let xs = Array3::from_shape_fn((frames, ks.len(), dim), |(t, b, j)| {
                let k = ks[b];
                (mags[[t, index[k * dim + j]]] * (1.0 / mu[[t, k]].max(NORM_FLOOR))) as f32
            });
            model.params.predict(xs.view())
        })
        .collect();
    let preds: Vec<Array2<f32>> = grouped
        .iter()
        .flat_map(|y| (0..y.dim().1).map(move |b| y.index_axis(Axis(1), b).to_owned()))
        .collect();
    let kept = frames - tau;
    let mut masked = ComplexSpectrogram::zeros(kept, bins);
    for (k, y) in preds.iter().enumerate() {
        for t in tau..frames {
            let m = MaskValue::new(y[[t, 0]] as f64, y[[t, 1]] as f64);
            masked.data_mut()[[t - tau, k]] = apply_mask(spec.get(k, t - tau), m, &model.compression);
        }
    }
    let out = crate::dsp::istft(&masked, cfg)?;
    Ok(out[lead..lead + samples.len()].to_vec())
}

/// A model whose every prediction is the compressed unit mask.
pub fn identity_model(template: &ModelBundle<f32>) -> ModelBundle<f32> {
    let mut m = template.clone();
    m.params = Network::zeros(&m.net);
    let c = m.compression;
    m.params.dense.bias[0] = compress(1.0, &c) as f32;
    for b in m.params.dense.bias.slice_mut(s![1..]).iter_mut() {
        *b = compress(0.0, &c) as f32;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBenchmark {
    pub frames: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub hop_ms: f64,
}

impl FrameBenchmark {
    pub fn real_time_factor(&self) -> f64 {
        self.mean_ms / self.hop_ms
    }
}

/// Time `frames` calls of `process_frame` on seeded noise after `warmup` calls.
pub fn benchmark_frames(
    model: Arc<ModelBundle<f32>>,
    frames: usize,
    warmup: usize,
    opts: &SessionOptions,
    seed: u64,
) -> Result<FrameBenchmark> {
    let hop = model.stft.hop;
    let hop_ms = 1e3 * hop as f64 / model.stft.sample_rate as f64;
    let mut session = StreamSession::new(model, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = vec![0.0; hop];
    let mut out = vec![0.0; hop];
    let mut total = Duration::ZERO;
    let mut max = Duration::ZERO;
    for i in 0..warmup + frames {
        block.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        let t0 = Instant::now();
        session.process_frame_into(&block, &mut out)?;
        let dt = t0.elapsed();
        if i >= warmup {
            total += dt;
            max = max.max(dt);
        }
    }
    Ok(FrameBenchmark {
        frames,
        mean_ms: total.as_secs_f64() * 1e3 / frames.max(1) as f64,
        max_ms: max.as_secs_f64() * 1e3,
        hop_ms,
    })
}
