//! `f32` inference layout of [`Network`]: each layer's input and recurrent
//! weights are stacked, transposed and packed into one `(D + H) x 4H`
//! matrix so a step costs one matrix product per layer.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::kernel::PackedMatrix;
use super::lstm::{finish_row, LstmLayerParams};
use super::model::{DenseParams, Network};

type F = f32;

#[derive(Clone, Debug, PartialEq)]
struct FusedLayer {
    /// `(D + H) x 4H`
    weight: PackedMatrix,
    bias: Array1<F>,
    input_dim: usize,
}

impl FusedLayer {
    fn new(p: &LstmLayerParams<F>) -> Self {
        let stacked = concatenate(Axis(1), &[p.w_input.view(), p.w_recurrent.view()]).expect("both have 4H rows");
        Self {
            weight: PackedMatrix::new(stacked.t()),
            bias: p.bias.clone(),
            input_dim: p.input_dim(),
        }
    }

    fn hidden(&self) -> usize {
        self.bias.len() / 4
    }

    /// `xh` is `B x (D + H)` with the input in front of the previous hidden
    /// state; the new hidden state replaces the old one.
    fn step(&self, xh: &mut Array2<F>, c: &mut Array2<F>, gates: &mut Array2<F>) {
        let (rows, lda, ldc) = (xh.nrows(), xh.ncols(), gates.ncols());
        self.weight.matmul(
            xh.as_slice().expect("standard layout"),
            lda,
            rows,
            gates.as_slice_mut().expect("standard layout"),
            ldc,
        );
        let bias = self.bias.as_slice().expect("contiguous bias");
        let d = self.input_dim;
        for ((mut z, mut c), mut xh) in gates.rows_mut().into_iter().zip(c.rows_mut()).zip(xh.rows_mut()) {
            let xh = xh.as_slice_mut().expect("contiguous row");
            finish_row(
                z.as_slice_mut().expect("contiguous gate row"),
                bias,
                c.as_slice_mut().expect("contiguous cell row"),
                &mut xh[d..],
            );
        }
    }
}

/// Read-only copy of a network laid out for fast batched stepping.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedNetwork {
    l1: FusedLayer,
    l2: FusedLayer,
    dense: DenseParams<F>,
}

/// Recurrent state for a batch of streams of a [`FusedNetwork`].
#[derive(Clone, Debug)]
pub struct FusedState {
    xh1: Array2<F>,
    c1: Array2<F>,
    xh2: Array2<F>,
    c2: Array2<F>,
    gates1: Array2<F>,
    gates2: Array2<F>,
    output: Array2<F>,
}

impl FusedState {
    pub fn batch(&self) -> usize {
        self.c1.nrows()
    }

    /// Cell and hidden values carried between steps.
    pub fn value_count(&self) -> usize {
        2 * (self.c1.len() + self.c2.len())
    }

    pub fn reset(&mut self) {
        for a in [&mut self.xh1, &mut self.c1, &mut self.xh2, &mut self.c2] {
            a.fill(0.0);
        }
    }
}

impl FusedNetwork {
    pub fn new(net: &Network<F>) -> Self {
        Self {
            l1: FusedLayer::new(&net.lstm1),
            l2: FusedLayer::new(&net.lstm2),
            dense: net.dense.clone(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim
    }

    pub fn state(&self, batch: usize) -> FusedState {
        let (d, h1, h2) = (self.l1.input_dim, self.l1.hidden(), self.l2.hidden());
        FusedState {
            xh1: Array2::zeros((batch, d + h1)),
            c1: Array2::zeros((batch, h1)),
            xh2: Array2::zeros((batch, h1 + h2)),
            c2: Array2::zeros((batch, h2)),
            gates1: Array2::zeros((batch, 4 * h1)),
            gates2: Array2::zeros((batch, 4 * h2)),
            output: Array2::zeros((batch, self.dense.bias.len())),
        }
    }

    /// Same contract as [`Network::step`].
    pub fn step<'a>(&self, state: &'a mut FusedState, x: ArrayView2<'_, F>) -> ArrayView2<'a, F> {
        let (d, h1) = (self.l1.input_dim, self.l1.hidden());
        state.xh1.slice_mut(s![.., ..d]).assign(&x);
        self.l1.step(&mut state.xh1, &mut state.c1, &mut state.gates1);
        state.xh2.slice_mut(s![.., ..h1]).assign(&state.xh1.slice(s![.., d..]));
        self.l2.step(&mut state.xh2, &mut state.c2, &mut state.gates2);
        self.dense.apply(&state.xh2.slice(s![.., h1..]), &mut state.output);
        state.output.view()
    }
}
