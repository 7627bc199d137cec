//! Mono WAV I/O: 16-bit PCM and 32-bit float, samples as `f64` in [-1, 1].

use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let reader = WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    decode(reader)
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<Audio> {
    decode(WavReader::new(reader)?)
}

fn decode<R: Read>(reader: WavReader<R>) -> Result<Audio> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "expected mono input, got {} channels",
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<Vec<_>, _>>()?,
        (format, bits) => {
            return Err(Error::Audio(format!(
                "unsupported sample format {format:?} with {bits} bits"
            )))
        }
    };
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Read a file and require a specific sample rate.
pub fn read_wav_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let audio = read_wav(path)?;
    if audio.sample_rate != sample_rate {
        return Err(Error::Audio(format!(
            "{}: sample rate {} Hz, expected {sample_rate} Hz (resampling is not supported)",
            path.display(),
            audio.sample_rate
        )));
    }
    Ok(audio.samples)
}

pub fn write_wav(
    path: impl AsRef<Path>,
    samples: &[f64],
    sample_rate: u32,
    format: WavFormat,
) -> Result<()> {
    let writer = WavWriter::create(path, spec_for(sample_rate, format))?;
    encode(writer, samples, format)
}

pub fn write_wav_to<W: Write + Seek>(
    out: W,
    samples: &[f64],
    sample_rate: u32,
    format: WavFormat,
) -> Result<()> {
    let writer = WavWriter::new(out, spec_for(sample_rate, format))?;
    encode(writer, samples, format)
}

fn spec_for(sample_rate: u32, format: WavFormat) -> WavSpec {
    let (bits_per_sample, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample,
        sample_format,
    }
}

fn encode<W: Write + Seek>(
    mut writer: WavWriter<W>,
    samples: &[f64],
    format: WavFormat,
) -> Result<()> {
    match format {
        WavFormat::Pcm16 => {
            for &s in samples {
                writer.write_sample(to_i16(s))?;
            }
        }
        WavFormat::Float32 => {
            for &s in samples {
                writer.write_sample(s as f32)?;
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Scale, round and saturate one sample to 16-bit PCM.
pub fn to_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
