//! Binary model files.
//!
//! Layout, all integers little-endian `u32` and all floats IEEE-754 `f32`:
//!
//! ```text
//! "SBLSTM1" | version
//! input_dim hidden1 hidden2 output_dim tau
//! N K T tau overlap_frames norm_frames
//! fft_size hop sample_rate
//! Kc Cc
//! tensor_count
//! per tensor: name_len name rank dims... payload (row-major)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::cirm::CompressionConfig;
use crate::dsp::StftConfig;
use crate::features::FeatureConfig;
use crate::neural::{DenseParams, LstmLayerParams, ModelBundle, NetConfig, Network, Real, TENSOR_NAMES};
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"SBLSTM1";
pub const VERSION: u32 = 1;

struct Out {
    buf: Vec<u8>,
}

impl Out {
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a bundle; parameters are rounded to `f32` once here.
pub fn encode_model<F: Real>(model: &ModelBundle<F>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut o = Out {
        buf: Vec::with_capacity(64 + 4 * model.param_count() + 32 * TENSOR_NAMES.len()),
    };
    o.buf.extend_from_slice(MAGIC);
    o.u32(VERSION as usize);
    let n = &model.net;
    for v in [n.input_dim, n.hidden1, n.hidden2, n.output_dim, n.tau] {
        o.u32(v);
    }
    let f = &model.features;
    for v in [f.neighbors, f.bins, f.seq_len, f.tau, f.overlap_frames, f.norm_frames] {
        o.u32(v);
    }
    o.u32(model.stft.fft_size);
    o.u32(model.stft.hop);
    o.u32(model.stft.sample_rate as usize);
    o.f32(model.compression.ceiling as f32);
    o.f32(model.compression.steepness as f32);
    o.u32(TENSOR_NAMES.len());
    for ((name, shape), data) in TENSOR_NAMES
        .iter()
        .zip(model.params.shapes())
        .zip(model.params.tensors())
    {
        o.u32(name.len());
        o.buf.extend_from_slice(name.as_bytes());
        o.u32(shape.len());
        for d in &shape {
            o.u32(*d);
        }
        for v in data {
            o.f32(v.as_f64() as f32);
        }
    }
    Ok(o.buf)
}

/// Write a model and return the number of bytes written.
pub fn save_model<F: Real, W: Write>(model: &ModelBundle<F>, mut dest: W) -> Result<usize> {
    let bytes = encode_model(model)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len())
}

pub fn save_model_file<F: Real>(model: &ModelBundle<F>, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_model(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

struct In<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Integrity {
                tensor: what.to_string(),
                reason: format!("file truncated at byte {} (need {n} more bytes)", self.data.len()),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Widen an `f32` config scalar to the `f64` with the same shortest decimal form.
fn widen(x: f32) -> f64 {
    x.to_string().parse().expect("float display round-trips")
}

fn config_error(e: Error) -> Error {
    Error::Integrity {
        tensor: "<config>".into(),
        reason: e.to_string(),
    }
}

/// Parse and fully validate a model file image.
pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let mut r = In {
        data: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("<header>")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported model version {version}, expected {VERSION}")));
    }
    let mut h = [0usize; 14];
    for v in &mut h {
        *v = r.u32("<config>")?;
    }
    let kc = r.f32("<config>")?;
    let cc = r.f32("<config>")?;
    let net = NetConfig::new(h[0], h[1], h[2], h[3], h[4]).map_err(config_error)?;
    let features = FeatureConfig {
        neighbors: h[5],
        bins: h[6],
        seq_len: h[7],
        tau: h[8],
        overlap_frames: h[9],
        norm_frames: h[10],
    };
    features.validate().map_err(config_error)?;
    let stft = StftConfig::new(h[11], h[12], h[13] as u32).map_err(config_error)?;
    let compression = CompressionConfig::new(widen(kc), widen(cc)).map_err(config_error)?;

    let mut expected = Network::<f32>::zeros(&net).shapes().into_iter();
    let count = r.u32("<tensor table>")?;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Integrity {
            tensor: "<tensor table>".into(),
            reason: format!("expected {} tensors, found {count}", TENSOR_NAMES.len()),
        });
    }
    let mut payloads: Vec<Vec<f32>> = Vec::with_capacity(count);
    for want_name in TENSOR_NAMES {
        let want_shape = expected.next().expect("one shape per name");
        let len = r.u32(want_name)?;
        let name_bytes = r.take(len, want_name)?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        if name != want_name {
            return Err(Error::Integrity {
                tensor: name,
                reason: format!("expected tensor `{want_name}` at this position"),
            });
        }
        let rank = r.u32(&name)?;
        if rank != want_shape.len() {
            return Err(Error::Integrity {
                tensor: name,
                reason: format!("rank {rank}, expected {}", want_shape.len()),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&name)?);
        }
        if dims != want_shape {
            return Err(Error::Integrity {
                tensor: name,
                reason: format!("shape {dims:?} does not match configuration {want_shape:?}"),
            });
        }
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n, &name)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integrity {
                tensor: name,
                reason: format!("non-finite value at flat index {i}"),
            });
        }
        payloads.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity {
            tensor: "<trailer>".into(),
            reason: format!("{} unexpected bytes after the tensor table", bytes.len() - r.pos),
        });
    }

    let mut p = payloads.into_iter();
    let mut layer = |d: usize, h: usize| LstmLayerParams {
        w_input: Array2::from_shape_vec((4 * h, d), p.next().expect("checked")).expect("checked"),
        w_recurrent: Array2::from_shape_vec((4 * h, h), p.next().expect("checked")).expect("checked"),
        bias: Array1::from_vec(p.next().expect("checked")),
    };
    let lstm1 = layer(net.input_dim, net.hidden1);
    let lstm2 = layer(net.hidden1, net.hidden2);
    let dense = DenseParams {
        weight: Array2::from_shape_vec((net.output_dim, net.hidden2), p.next().expect("checked")).expect("checked"),
        bias: Array1::from_vec(p.next().expect("checked")),
    };
    let params = Network { lstm1, lstm2, dense };
    ModelBundle::new(net, features, stft, compression, params).map_err(config_error)
}

pub fn load_model<R: std::io::Read>(mut source: R) -> Result<ModelBundle<f32>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    decode_model(&fs::read(path)?)
}
