//! Masked MSE loss and exact gradients by backpropagation through time.
//!
//! The batch loss is the mean over samples of each sample's masked MSE.
//! A sample whose steps are all masked contributes nothing and does not
//! count towards the mean.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use super::lstm::{backward_trace, forward_trace};
use super::model::Network;
use super::Real;
use crate::features::{SampleSource, TrainingSample};
use crate::{Error, Result};

/// Samples per gradient work unit. Units are reduced in index order, so the
/// result does not depend on the number of threads.
pub const DEFAULT_CHUNK: usize = 32;

/// A parameter set that can be trained on batches of equal-length sequences.
pub trait Trainable<F: Real>: Clone + Send + Sync {
    fn zeros_like(&self) -> Self;

    fn tensors(&self) -> Vec<&[F]>;

    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    /// Predictions `(T, B, out)` for inputs `(T, B, D)`.
    fn predict(&self, xs: ArrayView3<'_, F>) -> Array3<F>;

    /// Forward pass, then backpropagate the output gradient produced by
    /// `seed` from the predictions; parameter gradients are added to `grads`.
    fn backprop<S>(&self, xs: ArrayView3<'_, F>, grads: &mut Self, seed: S) -> Result<()>
    where
        S: FnOnce(ArrayView3<'_, F>) -> Result<Array3<F>>;
}

/// Mean squared error over unmasked steps and all output components.
///
/// Returns 0 when every step is masked.
pub fn mse_loss<F: Real, G: Real>(pred: ArrayView2<'_, F>, target: ArrayView2<'_, G>, mask: &[bool]) -> Result<f64> {
    if pred.dim() != target.dim() || mask.len() != pred.nrows() {
        return Err(Error::shape(format!(
            "prediction {:?}, target {:?}, mask {}",
            pred.dim(),
            target.dim(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &m) in pred.rows().into_iter().zip(target.rows()).zip(mask) {
        if !m {
            continue;
        }
        for (a, b) in p.iter().zip(t.iter()) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
        }
        count += p.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Summed (not yet averaged) loss and gradients of a group of samples.
#[derive(Clone, Debug)]
pub struct GradSum<M> {
    pub loss_sum: f64,
    /// Samples with at least one unmasked step.
    pub counted: usize,
    pub grads: M,
}

impl<M> GradSum<M> {
    fn absorb<F: Real>(&mut self, other: GradSum<M>)
    where
        M: Trainable<F>,
    {
        self.loss_sum += other.loss_sum;
        self.counted += other.counted;
        for (a, b) in self.grads.tensors_mut().into_iter().zip(other.grads.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

fn stack_inputs<F: Real>(samples: &[TrainingSample]) -> Result<Array3<F>> {
    let first = samples.first().ok_or_else(|| Error::Empty("batch has no samples".into()))?;
    let (t_len, d) = first.input.dim();
    let mut xs = Array3::<F>::zeros((t_len, samples.len(), d));
    for (b, s) in samples.iter().enumerate() {
        if s.input.dim() != (t_len, d) || s.target.nrows() != t_len || s.loss_mask.len() != t_len {
            return Err(Error::shape(format!(
                "sample {b} has input {:?}, target {:?}, mask {}; batch uses {t_len}x{d}",
                s.input.dim(),
                s.target.dim(),
                s.loss_mask.len()
            )));
        }
        for t in 0..t_len {
            for j in 0..d {
                xs[[t, b, j]] = F::lit(s.input[[t, j]] as f64);
            }
        }
    }
    Ok(xs)
}

/// Loss sum and output gradient for predictions `(T, B, out)`.
///
/// Sample `b` gets weight `1 / (out * n_b)` where `n_b` is its number of
/// unmasked steps, so `dy` is the gradient of the summed per-sample losses.
fn loss_and_seed<F: Real>(
    pred: ArrayView3<'_, F>,
    samples: &[TrainingSample],
    first_index: usize,
) -> Result<(f64, usize, Array3<F>)> {
    let (t_len, batch, out) = pred.dim();
    let mut dy = Array3::<F>::zeros((t_len, batch, out));
    let mut loss_sum = 0.0;
    let mut counted = 0;
    for (b, s) in samples.iter().enumerate() {
        if s.target.ncols() != out {
            return Err(Error::shape(format!(
                "sample {} has {} target columns, model predicts {out}",
                first_index + b,
                s.target.ncols()
            )));
        }
        let n = s.loss_mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let w = 1.0 / (n * out) as f64;
        let mut sq = 0.0;
        for t in 0..t_len {
            if !s.loss_mask[t] {
                continue;
            }
            for j in 0..out {
                let d = pred[[t, b, j]].as_f64() - s.target[[t, j]] as f64;
                sq += d * d;
                dy[[t, b, j]] = F::lit(2.0 * w * d);
            }
        }
        let loss = sq * w;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                index: first_index + b,
                freq: s.freq,
            });
        }
        loss_sum += loss;
        counted += 1;
    }
    Ok((loss_sum, counted, dy))
}

/// Summed loss and gradients of one group of samples in a single batched pass.
pub fn grad_sum<F: Real, M: Trainable<F>>(
    model: &M,
    samples: &[TrainingSample],
    first_index: usize,
) -> Result<GradSum<M>> {
    let xs = stack_inputs::<F>(samples)?;
    let mut grads = model.zeros_like();
    let mut loss_sum = 0.0;
    let mut counted = 0;
    model.backprop(xs.view(), &mut grads, |pred| {
        let (l, c, dy) = loss_and_seed(pred, samples, first_index)?;
        loss_sum = l;
        counted = c;
        Ok(dy)
    })?;
    Ok(GradSum {
        loss_sum,
        counted,
        grads,
    })
}

/// Summed loss and gradients of the samples at `indices`, computed in
/// fixed-size units in parallel and reduced in order.
pub fn grad_sum_indexed<F, M, S>(model: &M, source: &S, indices: &[usize], chunk: usize) -> Result<GradSum<M>>
where
    F: Real,
    M: Trainable<F>,
    S: SampleSource + ?Sized,
{
    if indices.is_empty() {
        return Err(Error::Empty("batch has no samples".into()));
    }
    let chunk = chunk.max(1);
    let parts: Vec<Result<GradSum<M>>> = indices
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, idx)| {
            let samples: Vec<TrainingSample> = idx.iter().map(|&i| source.sample(i)).collect();
            grad_sum(model, &samples, c * chunk)
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("nonempty")?;
    for part in iter {
        total.absorb(part?);
    }
    Ok(total)
}

/// Mean masked MSE of a batch and its exact gradient.
pub fn loss_and_gradients<F: Real, M: Trainable<F>>(model: &M, samples: &[TrainingSample]) -> Result<(f64, M)> {
    let indices: Vec<usize> = (0..samples.len()).collect();
    let sum = grad_sum_indexed(model, samples, &indices, DEFAULT_CHUNK)?;
    Ok(finish_mean(sum))
}

/// Turn a [`GradSum`] into the batch mean.
pub fn finish_mean<F: Real, M: Trainable<F>>(sum: GradSum<M>) -> (f64, M) {
    let GradSum {
        loss_sum,
        counted,
        mut grads,
    } = sum;
    if counted == 0 {
        return (0.0, grads);
    }
    let inv = F::lit(1.0 / counted as f64);
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= inv);
    }
    (loss_sum / counted as f64, grads)
}

/// Mean masked MSE of the samples at `indices` without gradients.
pub fn batch_loss<F, M, S>(model: &M, source: &S, indices: &[usize], chunk: usize) -> Result<f64>
where
    F: Real,
    M: Trainable<F>,
    S: SampleSource + ?Sized,
{
    if indices.is_empty() {
        return Err(Error::Empty("batch has no samples".into()));
    }
    let chunk = chunk.max(1);
    let parts: Vec<Result<(f64, usize)>> = indices
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, idx)| {
            let samples: Vec<TrainingSample> = idx.iter().map(|&i| source.sample(i)).collect();
            let xs = stack_inputs::<F>(&samples)?;
            let pred = model.predict(xs.view());
            let (l, n, _) = loss_and_seed(pred.view(), &samples, c * chunk)?;
            Ok((l, n))
        })
        .collect();
    let mut loss = 0.0;
    let mut counted = 0;
    for p in parts {
        let (l, n) = p?;
        loss += l;
        counted += n;
    }
    Ok(if counted == 0 { 0.0 } else { loss / counted as f64 })
}

pub(crate) fn flat3<F: Real>(a: ArrayView3<'_, F>) -> ArrayView2<'_, F> {
    let (t, b, d) = a.dim();
    a.into_shape_with_order((t * b, d)).expect("standard layout")
}

/// Dense head forward on `(T, B, H)` features.
pub(crate) fn dense_forward<F: Real>(weight: &Array2<F>, bias: &ndarray::Array1<F>, h: ArrayView3<'_, F>) -> Array3<F> {
    let (t, b, _) = h.dim();
    let h = h.as_standard_layout();
    let mut y = Array2::<F>::zeros((t * b, weight.nrows()));
    general_mat_mul(F::one(), &flat3(h.view()), &weight.t(), F::zero(), &mut y);
    for mut row in y.rows_mut() {
        row += bias;
    }
    y.into_shape_with_order((t, b, weight.nrows())).expect("fresh array")
}

/// Dense head backward: adds parameter gradients and returns `dh` `(T, B, H)`.
pub(crate) fn dense_backward<F: Real>(
    weight: &Array2<F>,
    h: ArrayView3<'_, F>,
    dy: ArrayView3<'_, F>,
    d_weight: &mut Array2<F>,
    d_bias: &mut ndarray::Array1<F>,
) -> Array3<F> {
    let (t, b, hd) = h.dim();
    let h = h.as_standard_layout();
    let dy = dy.as_standard_layout();
    let dy_flat = flat3(dy.view());
    general_mat_mul(F::one(), &dy_flat.t(), &flat3(h.view()), F::one(), d_weight);
    *d_bias += &dy_flat.sum_axis(Axis(0));
    let mut dh = Array2::<F>::zeros((t * b, hd));
    general_mat_mul(F::one(), &dy_flat, weight, F::zero(), &mut dh);
    dh.into_shape_with_order((t, b, hd)).expect("fresh array")
}

impl<F: Real> Trainable<F> for Network<F> {
    fn zeros_like(&self) -> Self {
        Network {
            lstm1: super::LstmLayerParams::zeros(self.lstm1.input_dim(), self.lstm1.hidden()),
            lstm2: super::LstmLayerParams::zeros(self.lstm2.input_dim(), self.lstm2.hidden()),
            dense: super::DenseParams::zeros(self.dense.weight.ncols(), self.dense.weight.nrows()),
        }
    }

    fn tensors(&self) -> Vec<&[F]> {
        Network::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        Network::tensors_mut(self)
    }

    fn predict(&self, xs: ArrayView3<'_, F>) -> Array3<F> {
        let tr1 = forward_trace(&self.lstm1, xs);
        let tr2 = forward_trace(&self.lstm2, tr1.outputs());
        dense_forward(&self.dense.weight, &self.dense.bias, tr2.outputs())
    }

    fn backprop<S>(&self, xs: ArrayView3<'_, F>, grads: &mut Self, seed: S) -> Result<()>
    where
        S: FnOnce(ArrayView3<'_, F>) -> Result<Array3<F>>,
    {
        let tr1 = forward_trace(&self.lstm1, xs);
        let tr2 = forward_trace(&self.lstm2, tr1.outputs());
        let y = dense_forward(&self.dense.weight, &self.dense.bias, tr2.outputs());
        let dy = seed(y.view())?;
        let dh2 = dense_backward(
            &self.dense.weight,
            tr2.outputs(),
            dy.view(),
            &mut grads.dense.weight,
            &mut grads.dense.bias,
        );
        let dh1 = backward_trace(&self.lstm2, tr1.outputs(), &tr2, dh2.view(), &mut grads.lstm2, true)
            .expect("input gradient requested");
        backward_trace(&self.lstm1, xs, &tr1, dh1.view(), &mut grads.lstm1, false);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetConfig;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(n: usize, t: usize, d: usize, tau: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| TrainingSample {
                freq: i as u32,
                input: Array2::from_shape_fn((t, d), |_| rng.random_range(0.0f32..2.0)),
                target: Array2::from_shape_fn((t, 2), |_| rng.random_range(-3.0f32..3.0)),
                loss_mask: (0..t).map(|s| s >= tau).collect(),
            })
            .collect()
    }

    #[test]
    fn mse_examples() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_loss(p.view(), p.view(), &[true, true]).unwrap(), 0.0);
        let q = p.mapv(|v| v + 1.0);
        assert_eq!(mse_loss(q.view(), p.view(), &[true, true]).unwrap(), 1.0);
        let diff = array![[1.0, 1.0], [0.0, 0.0]];
        let zero = Array2::<f64>::zeros((2, 2));
        assert_eq!(mse_loss(diff.view(), zero.view(), &[false, true]).unwrap(), 0.0);
        assert_eq!(mse_loss(diff.view(), zero.view(), &[false, false]).unwrap(), 0.0);
        assert!(mse_loss(diff.view(), zero.view(), &[true]).is_err());
    }

    #[test]
    fn zero_everything_gives_zero_bias_gradient() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::zeros(&cfg);
        let samples: Vec<TrainingSample> = (0..3)
            .map(|i| TrainingSample {
                freq: i,
                input: Array2::zeros((7, 5)),
                target: Array2::zeros((7, 2)),
                loss_mask: (0..7).map(|t| t >= 1).collect(),
            })
            .collect();
        let (loss, g) = loss_and_gradients(&net, &samples).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.dense.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_weighted_mean_of_parts() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 11);
        let all = random_samples(7, 7, 5, 1, 4);
        let (a, b) = all.split_at(3);
        let (_, g_all) = loss_and_gradients(&net, &all).unwrap();
        let (_, g_a) = loss_and_gradients(&net, a).unwrap();
        let (_, g_b) = loss_and_gradients(&net, b).unwrap();
        for ((x, y), z) in g_all.tensors().iter().zip(g_a.tensors()).zip(g_b.tensors()) {
            for ((u, v), w) in x.iter().zip(y.iter()).zip(z.iter()) {
                let mix = (3.0 * v + 4.0 * w) / 7.0;
                assert!((u - mix).abs() <= 1e-10, "{u} vs {mix}");
            }
        }
    }

    #[test]
    fn masked_targets_do_not_affect_gradients() {
        let cfg = NetConfig::new(5, 4, 3, 2, 2).unwrap();
        let net = Network::<f64>::init(&cfg, 12);
        let samples = random_samples(4, 7, 5, 2, 5);
        let mut perturbed = samples.clone();
        for s in &mut perturbed {
            for t in 0..2 {
                s.target[[t, 0]] += 100.0;
                s.target[[t, 1]] -= 37.5;
            }
        }
        let (l1, g1) = loss_and_gradients(&net, &samples).unwrap();
        let (l2, g2) = loss_and_gradients(&net, &perturbed).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradients_do_not_depend_on_chunking() {
        let cfg = NetConfig::new(5, 6, 4, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 3);
        let samples = random_samples(9, 7, 5, 1, 6);
        let idx: Vec<usize> = (0..9).collect();
        let a = finish_mean(grad_sum_indexed(&net, samples.as_slice(), &idx, 2).unwrap());
        let b = finish_mean(grad_sum_indexed(&net, samples.as_slice(), &idx, 2).unwrap());
        let c = finish_mean(grad_sum_indexed(&net, samples.as_slice(), &idx, 9).unwrap());
        assert_eq!(a.1, b.1);
        assert!((a.0 - c.0).abs() < 1e-12);
        for (x, y) in a.1.tensors().iter().zip(c.1.tensors()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_forward_sequence() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 8);
        let samples = random_samples(3, 7, 5, 1, 9);
        let (loss, _) = loss_and_gradients(&net, &samples).unwrap();
        let mut want = 0.0;
        for s in &samples {
            let x = s.input.mapv(|v| v as f64);
            let y = net.forward_sequence(x.view()).unwrap();
            want += mse_loss(y.view(), s.target.view(), &s.loss_mask).unwrap();
        }
        assert!((loss - want / 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_names_sample() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 8);
        let mut samples = random_samples(40, 7, 5, 1, 9);
        samples[35].target[[3, 1]] = f32::NAN;
        samples[35].freq = 77;
        match loss_and_gradients(&net, &samples) {
            Err(Error::NonFiniteLoss { index, freq }) => assert_eq!((index, freq), (35, 77)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_ragged_batches_are_rejected() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::init(&cfg, 8);
        assert!(loss_and_gradients(&net, &[]).is_err());
        let mut samples = random_samples(2, 7, 5, 1, 9);
        samples[1] = random_samples(1, 6, 5, 1, 1).remove(0);
        assert!(loss_and_gradients(&net, &samples).is_err());
    }
}
