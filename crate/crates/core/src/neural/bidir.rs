//! Bidirectional two-layer LSTM used as an offline quality reference.
//!
//! Each layer runs one LSTM forward in time and one backward; their hidden
//! sequences are concatenated `[forward | backward]` before the next layer.
//! There is no output delay, and there is no streaming form.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bptt::{dense_backward, dense_forward, Trainable};
use super::lstm::{backward_trace, forward_trace, LayerTrace};
use super::model::{DenseParams, NetConfig, Network};
use super::{LstmLayerParams, LstmState, Real};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BiNetwork<F> {
    pub fwd1: LstmLayerParams<F>,
    pub bwd1: LstmLayerParams<F>,
    pub fwd2: LstmLayerParams<F>,
    pub bwd2: LstmLayerParams<F>,
    /// `out x 2 H2`
    pub dense: DenseParams<F>,
}

fn reversed<F: Real>(a: ArrayView3<'_, F>) -> Array3<F> {
    a.slice(s![..;-1, .., ..]).as_standard_layout().into_owned()
}

struct BiTrace<F> {
    fwd: LayerTrace<F>,
    bwd: LayerTrace<F>,
    /// `(T, B, 2H)` concatenated outputs in natural time order.
    out: Array3<F>,
}

fn bi_layer<F: Real>(fwd: &LstmLayerParams<F>, bwd: &LstmLayerParams<F>, xs: ArrayView3<'_, F>, xs_rev: ArrayView3<'_, F>) -> BiTrace<F> {
    let f = forward_trace(fwd, xs);
    let b = forward_trace(bwd, xs_rev);
    let b_out = reversed(b.outputs());
    let out = concatenate(Axis(2), &[f.outputs(), b_out.view()])
        .expect("matching T and B")
        .as_standard_layout()
        .into_owned();
    BiTrace { fwd: f, bwd: b, out }
}

/// Backward through one bidirectional layer; returns the input gradient if asked.
fn bi_layer_backward<F: Real>(
    fwd: &LstmLayerParams<F>,
    bwd: &LstmLayerParams<F>,
    xs: ArrayView3<'_, F>,
    xs_rev: ArrayView3<'_, F>,
    trace: &BiTrace<F>,
    dout: ArrayView3<'_, F>,
    g_fwd: &mut LstmLayerParams<F>,
    g_bwd: &mut LstmLayerParams<F>,
    want_dx: bool,
) -> Option<Array3<F>> {
    let h = fwd.hidden();
    let d_f = dout.slice(s![.., .., ..h]).as_standard_layout().into_owned();
    let d_b = reversed(dout.slice(s![.., .., h..]));
    let dx_f = backward_trace(fwd, xs, &trace.fwd, d_f.view(), g_fwd, want_dx);
    let dx_b = backward_trace(bwd, xs_rev, &trace.bwd, d_b.view(), g_bwd, want_dx);
    match (dx_f, dx_b) {
        (Some(f), Some(b)) => Some(f + reversed(b.view())),
        _ => None,
    }
}

impl<F: Real> BiNetwork<F> {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            fwd1: LstmLayerParams::zeros(cfg.input_dim, cfg.hidden1),
            bwd1: LstmLayerParams::zeros(cfg.input_dim, cfg.hidden1),
            fwd2: LstmLayerParams::zeros(2 * cfg.hidden1, cfg.hidden2),
            bwd2: LstmLayerParams::zeros(2 * cfg.hidden1, cfg.hidden2),
            dense: DenseParams::zeros(2 * cfg.hidden2, cfg.output_dim),
        }
    }

    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            fwd1: LstmLayerParams::init(cfg.input_dim, cfg.hidden1, &mut rng),
            bwd1: LstmLayerParams::init(cfg.input_dim, cfg.hidden1, &mut rng),
            fwd2: LstmLayerParams::init(2 * cfg.hidden1, cfg.hidden2, &mut rng),
            bwd2: LstmLayerParams::init(2 * cfg.hidden1, cfg.hidden2, &mut rng),
            dense: DenseParams::init(2 * cfg.hidden2, cfg.output_dim, &mut rng),
        }
    }

    /// Embed a forward-only network: backward weights are zero and the
    /// weights that read backward-direction features are zero.
    pub fn from_unidirectional(net: &Network<F>) -> Self {
        let (d, h1, h2, out) = (
            net.lstm1.input_dim(),
            net.lstm1.hidden(),
            net.lstm2.hidden(),
            net.output_dim(),
        );
        let mut bi = Self::zeros(&NetConfig {
            input_dim: d,
            hidden1: h1,
            hidden2: h2,
            output_dim: out,
            tau: 0,
        });
        bi.fwd1 = net.lstm1.clone();
        bi.fwd2.w_input.slice_mut(s![.., ..h1]).assign(&net.lstm2.w_input);
        bi.fwd2.w_recurrent.assign(&net.lstm2.w_recurrent);
        bi.fwd2.bias.assign(&net.lstm2.bias);
        bi.dense.weight.slice_mut(s![.., ..h2]).assign(&net.dense.weight);
        bi.dense.bias.assign(&net.dense.bias);
        bi
    }

    pub fn input_dim(&self) -> usize {
        self.fwd1.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Per-direction hidden sequences of the first layer, `(forward, backward)`,
    /// both in natural time order.
    pub fn first_layer_outputs(&self, input: ArrayView2<'_, F>) -> Result<(Array2<F>, Array2<F>)> {
        let xs = self.check_input(input)?;
        let xs_rev = reversed(xs.view());
        let tr = bi_layer(&self.fwd1, &self.bwd1, xs.view(), xs_rev.view());
        let h = self.fwd1.hidden();
        let f = tr.out.slice(s![.., 0, ..h]).to_owned();
        let b = tr.out.slice(s![.., 0, h..]).to_owned();
        Ok((f, b))
    }

    /// Predictions `T x out` for a complete sequence.
    pub fn forward_bidirectional(&self, input: ArrayView2<'_, F>) -> Result<Array2<F>> {
        let xs = self.check_input(input)?;
        let y = self.predict(xs.view());
        Ok(y.index_axis(Axis(1), 0).to_owned())
    }

    /// Always fails: the backward direction needs the whole sequence.
    pub fn stateful_step(&self, _state: &mut LstmState<F>, _input: &[F]) -> Result<Array1<F>> {
        Err(Error::Unsupported(
            "bidirectional model cannot run frame by frame; use it offline".into(),
        ))
    }

    fn check_input(&self, input: ArrayView2<'_, F>) -> Result<Array3<F>> {
        if input.ncols() != self.input_dim() || input.nrows() == 0 {
            return Err(Error::shape(format!(
                "sequence is {:?}, network expects T >= 1 rows of {}",
                input.dim(),
                self.input_dim()
            )));
        }
        Ok(input.insert_axis(Axis(1)).as_standard_layout().into_owned())
    }
}

impl<F: Real> Trainable<F> for BiNetwork<F> {
    fn zeros_like(&self) -> Self {
        let z = |p: &LstmLayerParams<F>| LstmLayerParams::zeros(p.input_dim(), p.hidden());
        Self {
            fwd1: z(&self.fwd1),
            bwd1: z(&self.bwd1),
            fwd2: z(&self.fwd2),
            bwd2: z(&self.bwd2),
            dense: DenseParams::zeros(self.dense.weight.ncols(), self.dense.weight.nrows()),
        }
    }

    fn tensors(&self) -> Vec<&[F]> {
        let mut v = Vec::with_capacity(14);
        for p in [&self.fwd1, &self.bwd1, &self.fwd2, &self.bwd2] {
            v.push(p.w_input.as_slice().expect("standard layout"));
            v.push(p.w_recurrent.as_slice().expect("standard layout"));
            v.push(p.bias.as_slice().expect("standard layout"));
        }
        v.push(self.dense.weight.as_slice().expect("standard layout"));
        v.push(self.dense.bias.as_slice().expect("standard layout"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = Vec::with_capacity(14);
        for p in [&mut self.fwd1, &mut self.bwd1, &mut self.fwd2, &mut self.bwd2] {
            v.push(p.w_input.as_slice_mut().expect("standard layout"));
            v.push(p.w_recurrent.as_slice_mut().expect("standard layout"));
            v.push(p.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.dense.weight.as_slice_mut().expect("standard layout"));
        v.push(self.dense.bias.as_slice_mut().expect("standard layout"));
        v
    }

    fn predict(&self, xs: ArrayView3<'_, F>) -> Array3<F> {
        let xs_rev = reversed(xs);
        let l1 = bi_layer(&self.fwd1, &self.bwd1, xs, xs_rev.view());
        let l1_rev = reversed(l1.out.view());
        let l2 = bi_layer(&self.fwd2, &self.bwd2, l1.out.view(), l1_rev.view());
        dense_forward(&self.dense.weight, &self.dense.bias, l2.out.view())
    }

    fn backprop<S>(&self, xs: ArrayView3<'_, F>, grads: &mut Self, seed: S) -> Result<()>
    where
        S: FnOnce(ArrayView3<'_, F>) -> Result<Array3<F>>,
    {
        let xs_rev = reversed(xs);
        let l1 = bi_layer(&self.fwd1, &self.bwd1, xs, xs_rev.view());
        let l1_rev = reversed(l1.out.view());
        let l2 = bi_layer(&self.fwd2, &self.bwd2, l1.out.view(), l1_rev.view());
        let y = dense_forward(&self.dense.weight, &self.dense.bias, l2.out.view());
        let dy = seed(y.view())?;
        let d2 = dense_backward(
            &self.dense.weight,
            l2.out.view(),
            dy.view(),
            &mut grads.dense.weight,
            &mut grads.dense.bias,
        );
        let d1 = bi_layer_backward(
            &self.fwd2,
            &self.bwd2,
            l1.out.view(),
            l1_rev.view(),
            &l2,
            d2.view(),
            &mut grads.fwd2,
            &mut grads.bwd2,
            true,
        )
        .expect("input gradient requested");
        bi_layer_backward(
            &self.fwd1,
            &self.bwd1,
            xs,
            xs_rev.view(),
            &l1,
            d1.view(),
            &mut grads.fwd1,
            &mut grads.bwd1,
            false,
        );
        Ok(())
    }
}
