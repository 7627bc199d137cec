//! Glue between corpora, features, training and evaluation.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{render_mix, synth_noise, synth_speechlike, MixSpec, Mixed, NoiseKind};
use crate::dsp::stft;
use crate::engine::{enhance_samples, SessionOptions};
use crate::features::{ClipDataset, SampleSource};
use crate::metrics::si_sdr;
use crate::neural::{train_with, ModelBundle, StepInfo, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// A fully synthetic corpus: speech surrogates mixed with stationary noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub clips: usize,
    pub clip_seconds: f64,
    /// Each clip draws its SNR from this set.
    pub snr_db: Vec<f64>,
    pub noise: Vec<NoiseKind>,
    /// Share of clips convolved with a synthetic room response.
    pub reverb_fraction: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SyntheticCorpus {
    pub fn new(clips: usize, clip_seconds: f64, snr_db: &[f64], seed: u64) -> Self {
        Self {
            clips,
            clip_seconds,
            snr_db: snr_db.to_vec(),
            noise: NoiseKind::ALL.to_vec(),
            reverb_fraction: 0.0,
            sample_rate: 16_000,
            seed,
        }
    }

    /// Records with placeholder source names; the sources come from seeds.
    pub fn specs(&self) -> Result<Vec<(MixSpec, NoiseKind)>> {
        if self.snr_db.is_empty() || self.noise.is_empty() {
            return Err(Error::Empty("corpus needs at least one SNR and one noise kind".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.clips)
            .map(|i| {
                let kind = *self.noise.choose(&mut rng).expect("nonempty");
                let snr = *self.snr_db.choose(&mut rng).expect("nonempty");
                let reverb = rng.random_bool(self.reverb_fraction.clamp(0.0, 1.0));
                let spec = MixSpec {
                    speech: format!("synth:speech:{i}"),
                    noise: format!("synth:{}:{i}", kind.name()),
                    snr_db: snr,
                    rir_seed: reverb.then(|| rng.random()),
                    seed: rng.random(),
                };
                (spec, kind)
            })
            .collect())
    }

    pub fn render(&self) -> Result<Vec<Mixed>> {
        let specs = self.specs()?;
        let len = (self.clip_seconds * self.sample_rate as f64).round() as usize;
        specs
            .par_iter()
            .map(|(spec, kind)| {
                let speech = synth_speechlike(self.clip_seconds, self.sample_rate, spec.seed);
                let noise = synth_noise(*kind, len, self.sample_rate, spec.seed ^ 0x5bd1_e995);
                render_mix(spec, &speech, &noise, self.sample_rate)
            })
            .collect()
    }
}

/// Training windows of every clip under the model's feature settings.
pub fn dataset_from_mixes<F: crate::neural::Real>(model: &ModelBundle<F>, mixes: &[Mixed]) -> Result<ClipDataset> {
    let mut data = ClipDataset::new(model.features)?;
    let spectra: Vec<_> = mixes
        .par_iter()
        .map(|m| Ok((stft(&m.speech, &model.stft)?, stft(&m.mixture, &model.stft)?)))
        .collect::<Result<_>>()?;
    for (clean, noisy) in &spectra {
        data.push_clip(clean, noisy, &model.compression)?;
    }
    if data.is_empty() {
        return Err(Error::TooShort {
            got: spectra.first().map_or(0, |(c, _)| c.frames()),
            min: model.features.seq_len,
        });
    }
    Ok(data)
}

/// Train the bundle's network in place on `data`.
pub fn train_bundle<S: SampleSource, C: FnMut(&StepInfo)>(
    model: ModelBundle<f32>,
    data: &S,
    cfg: &TrainConfig,
    on_step: C,
) -> Result<(ModelBundle<f32>, TrainOutcome<crate::neural::Network<f32>>)> {
    let ModelBundle {
        net,
        features,
        stft,
        compression,
        params,
    } = model;
    let outcome = train_with(params, data, cfg, on_step)?;
    let bundle = ModelBundle {
        net,
        features,
        stft,
        compression,
        params: outcome.model.clone(),
    };
    Ok((bundle, outcome))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub noisy_si_sdr: f64,
    pub enhanced_si_sdr: f64,
    pub clips: usize,
}

impl Improvement {
    pub fn gain_db(&self) -> f64 {
        self.enhanced_si_sdr - self.noisy_si_sdr
    }
}

/// Mean SI-SDR of the mixtures and of their enhanced versions against the
/// speech target, skipping `edge` samples at both ends.
pub fn score_mixes(model: &Arc<ModelBundle<f32>>, mixes: &[Mixed], edge: usize, opts: &SessionOptions) -> Result<Improvement> {
    let scores: Vec<(f64, f64)> = mixes
        .iter()
        .map(|m| {
            let out = enhance_samples(model.clone(), &m.mixture, opts)?;
            let n = m.speech.len();
            if n <= 2 * edge {
                return Err(Error::TooShort { got: n, min: 2 * edge + 1 });
            }
            let r = &m.speech[edge..n - edge];
            let undefined = || Error::Empty("silent reference clip".into());
            let before = si_sdr(r, &m.mixture[edge..n - edge])?.ok_or_else(undefined)?;
            let after = si_sdr(r, &out[edge..n - edge])?.ok_or_else(undefined)?;
            Ok((before, after))
        })
        .collect::<Result<_>>()?;
    if scores.is_empty() {
        return Err(Error::Empty("no clips to score".into()));
    }
    let n = scores.len() as f64;
    Ok(Improvement {
        noisy_si_sdr: scores.iter().map(|s| s.0).sum::<f64>() / n,
        enhanced_si_sdr: scores.iter().map(|s| s.1).sum::<f64>() / n,
        clips: scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cirm::CompressionConfig;
    use crate::dsp::StftConfig;
    use crate::features::FeatureConfig;
    use crate::neural::NetConfig;

    #[test]
    fn corpus_is_reproducible() {
        let c = SyntheticCorpus::new(3, 0.5, &[0.0], 4);
        let a = c.render().unwrap();
        let b = c.render().unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mixture, y.mixture);
        }
        let s = c.specs().unwrap();
        assert!(s.iter().all(|(m, _)| m.rir_seed.is_none() && m.snr_db == 0.0));
    }

    #[test]
    fn dataset_counts_windows() {
        let model = ModelBundle::<f32>::init(
            NetConfig::new(7, 8, 6, 2, 1).unwrap(),
            FeatureConfig::new(3, 65, 16, 1).unwrap(),
            StftConfig::new(128, 64, 16_000).unwrap(),
            CompressionConfig::default(),
            0,
        )
        .unwrap();
        let mixes = SyntheticCorpus::new(2, 0.5, &[5.0], 1).render().unwrap();
        let data = dataset_from_mixes(&model, &mixes).unwrap();
        let frames = model.stft.frame_count(8000);
        assert_eq!(data.len(), 2 * model.features.window_count(frames) * 65);
    }
}
