//! Single LSTM layer: parameters, batched stepping, and BPTT over a sequence.
//!
//! Gate rows are stacked in the order input `i`, forget `f`, cell `g`,
//! output `o`:
//!
//! ```text
//! [zi zf zg zo] = W x + U h + b
//! c' = sigmoid(zf) * c + sigmoid(zi) * tanh(zg)
//! h' = sigmoid(zo) * tanh(c')
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::Real;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams<F> {
    /// `4H x D`
    pub w_input: Array2<F>,
    /// `4H x H`
    pub w_recurrent: Array2<F>,
    /// `4H`
    pub bias: Array1<F>,
}

impl<F: Real> LstmLayerParams<F> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((4 * hidden, input_dim)),
            w_recurrent: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Weights uniform in `+-1/sqrt(H)`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden);
        p.w_input.mapv_inplace(|_| F::lit(rng.random_range(-a..a)));
        p.w_recurrent.mapv_inplace(|_| F::lit(rng.random_range(-a..a)));
        p.bias.slice_mut(s![hidden..2 * hidden]).fill(F::one());
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w_input.len() + self.w_recurrent.len() + self.bias.len()
    }

    pub fn cast<G: Real>(&self) -> LstmLayerParams<G> {
        LstmLayerParams {
            w_input: self.w_input.mapv(|v| G::lit(v.as_f64())),
            w_recurrent: self.w_recurrent.mapv(|v| G::lit(v.as_f64())),
            bias: self.bias.mapv(|v| G::lit(v.as_f64())),
        }
    }

    pub(crate) fn check_shapes(&self, input_dim: usize, hidden: usize, name: &str) -> Result<()> {
        let ok = self.w_input.dim() == (4 * hidden, input_dim)
            && self.w_recurrent.dim() == (4 * hidden, hidden)
            && self.bias.len() == 4 * hidden;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{name}: expected input {input_dim}, hidden {hidden}; got W {:?}, U {:?}, b {}",
                self.w_input.dim(),
                self.w_recurrent.dim(),
                self.bias.len()
            )))
        }
    }
}

/// Memory cells and hidden vectors of one layer for a batch of streams,
/// one row per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<F> {
    pub c: Array2<F>,
    pub h: Array2<F>,
}

impl<F: Real> LayerState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            c: Array2::zeros((batch, hidden)),
            h: Array2::zeros((batch, hidden)),
        }
    }
}

/// Apply gate nonlinearities to pre-activations `z` (rows of `4H`) in place.
fn activate_gates<F: Real>(row: &mut [F], hidden: usize) {
    F::sigmoid_inplace(&mut row[..2 * hidden]);
    F::tanh_inplace(&mut row[2 * hidden..3 * hidden]);
    F::sigmoid_inplace(&mut row[3 * hidden..]);
}

/// Advance every row of `state` by one step with inputs `x` (`B x D`).
///
/// `gates` is scratch of shape `B x 4H`. Rows never interact, so the result
/// for a stream does not depend on which other streams share the batch.
pub fn step_batch<F: Real>(
    params: &LstmLayerParams<F>,
    state: &mut LayerState<F>,
    x: ArrayView2<'_, F>,
    gates: &mut Array2<F>,
) {
    general_mat_mul(F::one(), &x, &params.w_input.t(), F::zero(), gates);
    general_mat_mul(F::one(), &state.h, &params.w_recurrent.t(), F::one(), gates);
    let bias = params.bias.as_slice().expect("contiguous bias");
    for ((mut z, mut c), mut h) in gates
        .rows_mut()
        .into_iter()
        .zip(state.c.rows_mut())
        .zip(state.h.rows_mut())
    {
        finish_row(
            z.as_slice_mut().expect("contiguous gate row"),
            bias,
            c.as_slice_mut().expect("contiguous cell row"),
            h.as_slice_mut().expect("contiguous hidden row"),
        );
    }
}

/// Add the bias to one row of pre-activations `z = [i f g o]`, activate the
/// gates, and advance `c` and `h` in place.
pub(crate) fn finish_row<F: Real>(z: &mut [F], bias: &[F], c: &mut [F], h: &mut [F]) {
    let h_dim = c.len();
    for (v, b) in z.iter_mut().zip(bias) {
        *v += *b;
    }
    activate_gates(z, h_dim);
    let (ifg, o) = z.split_at(3 * h_dim);
    let (i, fg) = ifg.split_at(h_dim);
    let (f, g) = fg.split_at(h_dim);
    for j in 0..h_dim {
        c[j] = f[j] * c[j] + i[j] * g[j];
    }
    F::tanh_into(c, h);
    for j in 0..h_dim {
        h[j] = o[j] * h[j];
    }
}

/// One step for a single stream, returning the new state and output.
pub fn lstm_cell_step<F: Real>(
    params: &LstmLayerParams<F>,
    c: &[F],
    h: &[F],
    input: &[F],
) -> Result<(Vec<F>, Vec<F>)> {
    let hd = params.hidden();
    if c.len() != hd || h.len() != hd || input.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "cell expects state {hd} and input {}, got c {}, h {}, x {}",
            params.input_dim(),
            c.len(),
            h.len(),
            input.len()
        )));
    }
    let mut state = LayerState {
        c: Array2::from_shape_vec((1, hd), c.to_vec()).expect("length checked"),
        h: Array2::from_shape_vec((1, hd), h.to_vec()).expect("length checked"),
    };
    let x = ArrayView2::from_shape((1, input.len()), input).expect("length checked");
    let mut gates = Array2::zeros((1, 4 * hd));
    step_batch(params, &mut state, x, &mut gates);
    Ok((state.c.into_raw_vec_and_offset().0, state.h.into_raw_vec_and_offset().0))
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct LayerTrace<F> {
    /// `(T, B, 4H)` activated gates.
    gates: Array3<F>,
    /// `(T + 1, B, H)`; slot 0 is the zero initial cell.
    cells: Array3<F>,
    /// `(T, B, H)` `tanh(c_t)`.
    cell_tanh: Array3<F>,
    /// `(T + 1, B, H)`; slot 0 is the zero initial hidden vector.
    hidden: Array3<F>,
}

impl<F: Real> LayerTrace<F> {
    /// Hidden outputs `h_1..h_T` as `(T, B, H)`.
    pub(crate) fn outputs(&self) -> ArrayView3<'_, F> {
        self.hidden.slice(s![1.., .., ..])
    }
}

fn flat<F: Real>(a: ArrayView3<'_, F>) -> ArrayView2<'_, F> {
    let (t, b, d) = a.dim();
    a.into_shape_with_order((t * b, d))
        .expect("standard layout sequence tensor")
}

/// Run a layer over `(T, B, D)` inputs from a zero state, keeping the trace.
pub(crate) fn forward_trace<F: Real>(params: &LstmLayerParams<F>, xs: ArrayView3<'_, F>) -> LayerTrace<F> {
    let (t_len, batch, _) = xs.dim();
    let hd = params.hidden();
    let mut gates = Array3::<F>::zeros((t_len, batch, 4 * hd));
    let mut cells = Array3::<F>::zeros((t_len + 1, batch, hd));
    let mut cell_tanh = Array3::<F>::zeros((t_len, batch, hd));
    let mut hidden = Array3::<F>::zeros((t_len + 1, batch, hd));
    {
        let xs_std = xs.as_standard_layout();
        let mut z = gates
            .view_mut()
            .into_shape_with_order((t_len * batch, 4 * hd))
            .expect("fresh array");
        general_mat_mul(F::one(), &flat(xs_std.view()), &params.w_input.t(), F::zero(), &mut z);
    }
    let bias = params.bias.as_slice().expect("contiguous bias");
    for t in 0..t_len {
        let h_prev = hidden.index_axis(Axis(0), t).to_owned();
        let c_prev = cells.index_axis(Axis(0), t).to_owned();
        let mut z = gates.index_axis_mut(Axis(0), t);
        general_mat_mul(F::one(), &h_prev, &params.w_recurrent.t(), F::one(), &mut z);
        for b in 0..batch {
            let mut zrow = z.row_mut(b);
            let zr = zrow.as_slice_mut().expect("contiguous");
            for (v, bb) in zr.iter_mut().zip(bias) {
                *v += *bb;
            }
            activate_gates(zr, hd);
            let (ifg, _) = zr.split_at(3 * hd);
            let (i, fg) = ifg.split_at(hd);
            let (f, g) = fg.split_at(hd);
            let cp = c_prev.row(b);
            let mut cn = cells.slice_mut(s![t + 1, b, ..]);
            for j in 0..hd {
                cn[j] = f[j] * cp[j] + i[j] * g[j];
            }
        }
        let c_now = cells.index_axis(Axis(0), t + 1);
        let mut tc = cell_tanh.index_axis_mut(Axis(0), t);
        F::tanh_into(
            c_now.as_slice().expect("contiguous"),
            tc.as_slice_mut().expect("contiguous"),
        );
        let z = gates.index_axis(Axis(0), t);
        let mut h_now = hidden.index_axis_mut(Axis(0), t + 1);
        for b in 0..batch {
            let o = z.slice(s![b, 3 * hd..]);
            for j in 0..hd {
                h_now[[b, j]] = o[j] * tc[[b, j]];
            }
        }
    }
    LayerTrace {
        gates,
        cells,
        cell_tanh,
        hidden,
    }
}

/// Backpropagate `dh_out` (`(T, B, H)`, gradient w.r.t. each hidden output)
/// through the layer. Parameter gradients are added into `grads`; the input
/// gradient `(T, B, D)` is returned when `want_dx` is set.
pub(crate) fn backward_trace<F: Real>(
    params: &LstmLayerParams<F>,
    xs: ArrayView3<'_, F>,
    trace: &LayerTrace<F>,
    dh_out: ArrayView3<'_, F>,
    grads: &mut LstmLayerParams<F>,
    want_dx: bool,
) -> Option<Array3<F>> {
    let (t_len, batch, d_in) = xs.dim();
    let hd = params.hidden();
    let one = F::one();
    let mut dz = Array3::<F>::zeros((t_len, batch, 4 * hd));
    let mut dh_next = Array2::<F>::zeros((batch, hd));
    let mut dc_next = Array2::<F>::zeros((batch, hd));
    for t in (0..t_len).rev() {
        let gates = trace.gates.index_axis(Axis(0), t);
        let c_prev = trace.cells.index_axis(Axis(0), t);
        let tc = trace.cell_tanh.index_axis(Axis(0), t);
        let dh_t = dh_out.index_axis(Axis(0), t);
        let mut dz_t = dz.index_axis_mut(Axis(0), t);
        for b in 0..batch {
            for j in 0..hd {
                let i = gates[[b, j]];
                let f = gates[[b, hd + j]];
                let g = gates[[b, 2 * hd + j]];
                let o = gates[[b, 3 * hd + j]];
                let tcj = tc[[b, j]];
                let dh = dh_t[[b, j]] + dh_next[[b, j]];
                let d_o = dh * tcj;
                let dc = dh * o * (one - tcj * tcj) + dc_next[[b, j]];
                dc_next[[b, j]] = dc * f;
                dz_t[[b, j]] = dc * g * i * (one - i);
                dz_t[[b, hd + j]] = dc * c_prev[[b, j]] * f * (one - f);
                dz_t[[b, 2 * hd + j]] = dc * i * (one - g * g);
                dz_t[[b, 3 * hd + j]] = d_o * o * (one - o);
            }
        }
        general_mat_mul(one, &dz_t, &params.w_recurrent, F::zero(), &mut dh_next);
    }
    let dz_flat = flat(dz.view());
    let xs_std = xs.as_standard_layout();
    general_mat_mul(one, &dz_flat.t(), &flat(xs_std.view()), one, &mut grads.w_input);
    let h_prev = trace.hidden.slice(s![..t_len, .., ..]);
    general_mat_mul(one, &dz_flat.t(), &flat(h_prev), one, &mut grads.w_recurrent);
    grads.bias += &dz_flat.sum_axis(Axis(0));
    if want_dx {
        let mut dx = Array3::<F>::zeros((t_len, batch, d_in));
        {
            let mut dx_flat = dx
                .view_mut()
                .into_shape_with_order((t_len * batch, d_in))
                .expect("fresh array");
            general_mat_mul(one, &dz_flat, &params.w_input, F::zero(), &mut dx_flat);
        }
        Some(dx)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state() {
        let p = LstmLayerParams::<f64>::zeros(3, 4);
        let (c, h) = lstm_cell_step(&p, &[0.0; 4], &[0.0; 4], &[1.0, -2.0, 3.0]).unwrap();
        assert!(c.iter().chain(&h).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_unit_cell() {
        // Gates are all 0.5 and g = 0: c' = 0.5, h' = 0.5 tanh(0.5).
        let p = LstmLayerParams::<f64>::zeros(3, 4);
        let (c, h) = lstm_cell_step(&p, &[1.0; 4], &[0.0; 4], &[0.3, 0.1, -0.2]).unwrap();
        let want_h = 0.5 * 0.5f64.tanh();
        for (cv, hv) in c.iter().zip(&h) {
            assert!((cv - 0.5).abs() < 1e-15);
            assert!((hv - want_h).abs() < 1e-15);
        }
        assert!((want_h - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn cell_step_is_deterministic_and_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmLayerParams::<f32>::init(5, 6, &mut rng);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        let a = lstm_cell_step(&p, &[0.1; 6], &[0.2; 6], &x).unwrap();
        let b = lstm_cell_step(&p, &[0.1; 6], &[0.2; 6], &x).unwrap();
        assert_eq!(a, b);
        assert!(lstm_cell_step(&p, &[0.1; 5], &[0.2; 6], &x).is_err());
        assert!(lstm_cell_step(&p, &[0.1; 6], &[0.2; 6], &x[..4]).is_err());
    }

    #[test]
    fn init_sets_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmLayerParams::<f64>::init(2, 3, &mut rng);
        assert_eq!(p.bias.to_vec(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let a = 1.0 / 3f64.sqrt();
        assert!(p.w_input.iter().chain(p.w_recurrent.iter()).all(|v| v.abs() <= a));
    }

    #[test]
    fn trace_matches_stepping() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmLayerParams::<f64>::init(4, 5, &mut rng);
        let xs = Array3::from_shape_fn((6, 3, 4), |_| rng.random_range(-1.0..1.0));
        let trace = forward_trace(&p, xs.view());
        let mut state = LayerState::zeros(3, 5);
        let mut gates = Array2::zeros((3, 20));
        for t in 0..6 {
            step_batch(&p, &mut state, xs.index_axis(Axis(0), t), &mut gates);
            let out = trace.outputs();
            for (a, b) in state.h.iter().zip(out.index_axis(Axis(0), t).iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
