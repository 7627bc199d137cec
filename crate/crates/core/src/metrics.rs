//! SI-SDR, SNR and segmental SNR, per clip and over a corpus.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::{render_mix_files, MixSpec};
use crate::wav::read_wav_at;
use crate::{Error, Result};

/// Reported value for a perfect match.
pub const DB_CAP: f64 = 100.0;

pub const SEG_FRAME: usize = 256;
pub const SEG_FLOOR_DB: f64 = -10.0;
pub const SEG_CEIL_DB: f64 = 35.0;
/// Frames quieter than this relative to the loudest reference frame are skipped.
pub const SEG_ACTIVITY_DB: f64 = -40.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

/// `10 log10(num / den)` capped at [`DB_CAP`].
fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).min(DB_CAP)
}

/// Scale-invariant SDR; `None` when the reference is silent.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<Option<f64>> {
    check_lengths(reference, estimate)?;
    let rr = dot(reference, reference);
    if rr <= 0.0 {
        return Ok(None);
    }
    let a = dot(estimate, reference) / rr;
    let target = a * a * rr;
    let resid: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            let d = e - a * r;
            d * d
        })
        .sum();
    Ok(Some(ratio_db(target, resid)))
}

/// Plain SNR `||r||^2 / ||e - r||^2`; `None` when the reference is silent.
pub fn snr(reference: &[f64], estimate: &[f64]) -> Result<Option<f64>> {
    check_lengths(reference, estimate)?;
    let rr = dot(reference, reference);
    if rr <= 0.0 {
        return Ok(None);
    }
    let resid: f64 = reference.iter().zip(estimate).map(|(r, e)| (e - r) * (e - r)).sum();
    Ok(Some(ratio_db(rr, resid)))
}

/// Mean of per-frame SNRs clamped to `[floor, ceil]` over active frames.
pub fn seg_snr(reference: &[f64], estimate: &[f64], frame: usize, floor_db: f64, ceil_db: f64) -> Result<Option<f64>> {
    check_lengths(reference, estimate)?;
    if frame == 0 {
        return Err(Error::config("segment length must be positive"));
    }
    let powers: Vec<f64> = reference.chunks(frame).map(|f| dot(f, f)).collect();
    let peak = powers.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(None);
    }
    let threshold = peak * 10f64.powf(SEG_ACTIVITY_DB / 10.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((r, e), &p) in reference.chunks(frame).zip(estimate.chunks(frame)).zip(&powers) {
        if p <= threshold {
            continue;
        }
        let resid: f64 = r.iter().zip(e).map(|(a, b)| (b - a) * (b - a)).sum();
        let v = if resid <= 0.0 { ceil_db } else { 10.0 * (p / resid).log10() };
        sum += v.clamp(floor_db, ceil_db);
        count += 1;
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

pub fn seg_snr_default(reference: &[f64], estimate: &[f64]) -> Result<Option<f64>> {
    seg_snr(reference, estimate, SEG_FRAME, SEG_FLOOR_DB, SEG_CEIL_DB)
}

/// Advance `estimate` by `shift` samples and fit it to `len`, zero-padding.
pub fn align(estimate: &[f64], shift: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if shift < estimate.len() {
        let src = &estimate[shift..];
        let n = src.len().min(len);
        out[..n].copy_from_slice(&src[..n]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub si_sdr_db: Option<f64>,
    pub snr_db: Option<f64>,
    pub seg_snr_db: Option<f64>,
}

pub fn clip_metrics(id: impl Into<String>, reference: &[f64], estimate: &[f64]) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        id: id.into(),
        si_sdr_db: si_sdr(reference, estimate)?,
        snr_db: snr(reference, estimate)?,
        seg_snr_db: seg_snr_default(reference, estimate)?,
    })
}

/// Mean of the defined values and how many there were.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanCount {
    pub mean: Option<f64>,
    pub count: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> MeanCount {
    let (mut sum, mut count) = (0.0, 0);
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    MeanCount {
        mean: (count > 0).then(|| sum / count as f64),
        count,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub si_sdr: MeanCount,
    pub snr: MeanCount,
    pub seg_snr: MeanCount,
    /// Clips that could not be scored, with the reason.
    pub missing: Vec<(String, String)>,
}

impl MetricReport {
    pub fn from_clips(clips: Vec<ClipMetrics>, missing: Vec<(String, String)>) -> Self {
        Self {
            si_sdr: mean_of(clips.iter().map(|c| c.si_sdr_db)),
            snr: mean_of(clips.iter().map(|c| c.snr_db)),
            seg_snr: mean_of(clips.iter().map(|c| c.seg_snr_db)),
            clips,
            missing,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// `clip_id,si_sdr,snr,seg_snr`, undefined values as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,si_sdr,snr,seg_snr\n");
        for c in &self.clips {
            writeln!(s, "{},{},{},{}", c.id, fmt_opt(c.si_sdr_db), fmt_opt(c.snr_db), fmt_opt(c.seg_snr_db))
                .expect("write to string");
        }
        s
    }

    /// One `key=value` line per clip, then summary and missing lines.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for c in &self.clips {
            writeln!(
                s,
                "clip={} si_sdr={} snr={} seg_snr={}",
                c.id,
                fmt_opt(c.si_sdr_db),
                fmt_opt(c.snr_db),
                fmt_opt(c.seg_snr_db)
            )
            .expect("write to string");
        }
        for (id, why) in &self.missing {
            writeln!(s, "missing={id} reason={why}").expect("write to string");
        }
        writeln!(
            s,
            "summary clips={} si_sdr_mean={} snr_mean={} seg_snr_mean={} missing={}",
            self.clips.len(),
            fmt_opt(self.si_sdr.mean),
            fmt_opt(self.snr.mean),
            fmt_opt(self.seg_snr.mean),
            self.missing.len()
        )
        .expect("write to string");
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

/// Identifier of manifest record `i`, also the file stem of its outputs.
pub fn clip_id(i: usize) -> String {
    format!("clip{i:05}")
}

/// Score `<enhanced_dir>/<clip id>.wav` against each record's rendered target.
///
/// `shift` advances every estimate before scoring; use 0 for file-mode
/// output, which is already aligned.
pub fn evaluate_corpus(
    manifest: &[MixSpec],
    enhanced_dir: impl AsRef<Path>,
    sample_rate: u32,
    shift: usize,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest has no records".into()));
    }
    let dir = enhanced_dir.as_ref();
    let results: Vec<std::result::Result<ClipMetrics, (String, String)>> = manifest
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = clip_id(i);
            let path = dir.join(format!("{id}.wav"));
            let scored = (|| -> Result<ClipMetrics> {
                let est = read_wav_at(&path, sample_rate)?;
                let reference = render_mix_files(spec, sample_rate)?.speech;
                let est = align(&est, shift, reference.len());
                clip_metrics(id.clone(), &reference, &est)
            })();
            scored.map_err(|e| (id, e.to_string()))
        })
        .collect();
    let mut clips = Vec::new();
    let mut missing = Vec::new();
    for r in results {
        match r {
            Ok(c) => clips.push(c),
            Err(m) => missing.push(m),
        }
    }
    Ok(MetricReport::from_clips(clips, missing))
}
