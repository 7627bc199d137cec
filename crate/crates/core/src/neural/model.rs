use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lstm::{step_batch, LayerState, LstmLayerParams};
use super::Real;
use crate::cirm::CompressionConfig;
use crate::dsp::StftConfig;
use crate::features::FeatureConfig;
use crate::{Error, Result};

/// Layer sizes of the two-layer forward LSTM with a linear dense head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output_dim: usize,
    pub tau: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden1: usize, hidden2: usize, output_dim: usize, tau: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            hidden1,
            hidden2,
            output_dim,
            tau,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.output_dim == 0 {
            return Err(Error::config(format!("all layer sizes must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for NetConfig {
    /// 31 inputs (N = 15), LSTM 384, LSTM 256, dense 2, two frames of delay.
    fn default() -> Self {
        Self {
            input_dim: 31,
            hidden1: 384,
            hidden2: 256,
            output_dim: 2,
            tau: 2,
        }
    }
}

/// Closed-form learnable count of a [`NetConfig`].
pub fn count_parameters(cfg: &NetConfig) -> usize {
    let (d, h1, h2, o) = (cfg.input_dim, cfg.hidden1, cfg.hidden2, cfg.output_dim);
    4 * (d * h1 + h1 * h1 + h1) + 4 * (h1 * h2 + h2 * h2 + h2) + (h2 * o + o)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<F> {
    /// `out x in`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> DenseParams<F> {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let a = 1.0 / (input_dim as f64).sqrt();
        let mut p = Self::zeros(input_dim, output_dim);
        p.weight.mapv_inplace(|_| F::lit(rng.random_range(-a..a)));
        p
    }

    pub fn cast<G: Real>(&self) -> DenseParams<G> {
        DenseParams {
            weight: self.weight.mapv(|v| G::lit(v.as_f64())),
            bias: self.bias.mapv(|v| G::lit(v.as_f64())),
        }
    }

    /// `out = x W^T + b` for a batch of rows.
    pub(crate) fn apply(&self, x: &ArrayView2<'_, F>, out: &mut Array2<F>) {
        general_mat_mul(F::one(), x, &self.weight.t(), F::zero(), out);
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
    }
}

/// Learnable tensors of the forward network. The same instance serves every
/// frequency bin; nothing here depends on the number of bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    pub lstm1: LstmLayerParams<F>,
    pub lstm2: LstmLayerParams<F>,
    pub dense: DenseParams<F>,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "lstm1.w_input",
    "lstm1.w_recurrent",
    "lstm1.bias",
    "lstm2.w_input",
    "lstm2.w_recurrent",
    "lstm2.bias",
    "dense.weight",
    "dense.bias",
];

impl<F: Real> Network<F> {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            lstm1: LstmLayerParams::zeros(cfg.input_dim, cfg.hidden1),
            lstm2: LstmLayerParams::zeros(cfg.hidden1, cfg.hidden2),
            dense: DenseParams::zeros(cfg.hidden2, cfg.output_dim),
        }
    }

    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lstm1: LstmLayerParams::init(cfg.input_dim, cfg.hidden1, &mut rng),
            lstm2: LstmLayerParams::init(cfg.hidden1, cfg.hidden2, &mut rng),
            dense: DenseParams::init(cfg.hidden2, cfg.output_dim, &mut rng),
        }
    }

    pub fn check_shapes(&self, cfg: &NetConfig) -> Result<()> {
        self.lstm1.check_shapes(cfg.input_dim, cfg.hidden1, "lstm1")?;
        self.lstm2.check_shapes(cfg.hidden1, cfg.hidden2, "lstm2")?;
        if self.dense.weight.dim() != (cfg.output_dim, cfg.hidden2) || self.dense.bias.len() != cfg.output_dim {
            return Err(Error::shape(format!(
                "dense: expected {}x{}, got {:?}",
                cfg.output_dim,
                cfg.hidden2,
                self.dense.weight.dim()
            )));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            lstm1: self.lstm1.cast(),
            lstm2: self.lstm2.cast(),
            dense: self.dense.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors as flat row-major slices, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&[F]> {
        vec![
            self.lstm1.w_input.as_slice().expect("standard layout"),
            self.lstm1.w_recurrent.as_slice().expect("standard layout"),
            self.lstm1.bias.as_slice().expect("standard layout"),
            self.lstm2.w_input.as_slice().expect("standard layout"),
            self.lstm2.w_recurrent.as_slice().expect("standard layout"),
            self.lstm2.bias.as_slice().expect("standard layout"),
            self.dense.weight.as_slice().expect("standard layout"),
            self.dense.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.lstm1.w_input.as_slice_mut().expect("standard layout"),
            self.lstm1.w_recurrent.as_slice_mut().expect("standard layout"),
            self.lstm1.bias.as_slice_mut().expect("standard layout"),
            self.lstm2.w_input.as_slice_mut().expect("standard layout"),
            self.lstm2.w_recurrent.as_slice_mut().expect("standard layout"),
            self.lstm2.bias.as_slice_mut().expect("standard layout"),
            self.dense.weight.as_slice_mut().expect("standard layout"),
            self.dense.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Shapes in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.lstm1.w_input.shape().to_vec(),
            self.lstm1.w_recurrent.shape().to_vec(),
            self.lstm1.bias.shape().to_vec(),
            self.lstm2.w_input.shape().to_vec(),
            self.lstm2.w_recurrent.shape().to_vec(),
            self.lstm2.bias.shape().to_vec(),
            self.dense.weight.shape().to_vec(),
            self.dense.bias.shape().to_vec(),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.lstm1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dense.bias.len()
    }

    /// Advance a batch of streams one step; returns the `B x out` predictions.
    pub fn step<'a>(&self, state: &'a mut LstmState<F>, x: ArrayView2<'_, F>) -> ArrayView2<'a, F> {
        step_batch(&self.lstm1, &mut state.layer1, x, &mut state.gates1);
        step_batch(&self.lstm2, &mut state.layer2, state.layer1.h.view(), &mut state.gates2);
        self.dense.apply(&state.layer2.h.view(), &mut state.output);
        state.output.view()
    }

    /// One stateful step for a single stream (batch of one).
    pub fn stateful_step(&self, state: &mut LstmState<F>, input: &[F]) -> Result<Array1<F>> {
        if state.batch() != 1 || !state.fits(self) {
            return Err(Error::shape(format!(
                "state for batch {} does not belong to a single stream of this network",
                state.batch()
            )));
        }
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("length checked");
        Ok(self.step(state, x).row(0).to_owned())
    }

    /// Run a whole `T x D` sequence from a zero state; row `t` of the result
    /// is the prediction for frame `t - tau`.
    pub fn forward_sequence(&self, input: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if input.ncols() != self.input_dim() || input.nrows() == 0 {
            return Err(Error::shape(format!(
                "sequence is {:?}, network expects T >= 1 rows of {}",
                input.dim(),
                self.input_dim()
            )));
        }
        let mut state = LstmState::zeros(self, 1);
        let mut out = Array2::zeros((input.nrows(), self.output_dim()));
        for (t, row) in input.rows().into_iter().enumerate() {
            let row = row.insert_axis(ndarray::Axis(0));
            let y = self.step(&mut state, row);
            out.row_mut(t).assign(&y.row(0));
        }
        Ok(out)
    }
}

/// Recurrent state of both layers for a batch of independent streams.
///
/// Row `r` of every array belongs to stream `r` (for the engine, frequency
/// bin `r`). Streams share no mutable data.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub layer1: LayerState<F>,
    pub layer2: LayerState<F>,
    gates1: Array2<F>,
    gates2: Array2<F>,
    output: Array2<F>,
}

impl<F: Real> LstmState<F> {
    pub fn zeros(net: &Network<F>, batch: usize) -> Self {
        let h1 = net.lstm1.hidden();
        let h2 = net.lstm2.hidden();
        Self {
            layer1: LayerState::zeros(batch, h1),
            layer2: LayerState::zeros(batch, h2),
            gates1: Array2::zeros((batch, 4 * h1)),
            gates2: Array2::zeros((batch, 4 * h2)),
            output: Array2::zeros((batch, net.output_dim())),
        }
    }

    pub fn batch(&self) -> usize {
        self.layer1.c.nrows()
    }

    pub fn fits(&self, net: &Network<F>) -> bool {
        self.layer1.c.ncols() == net.lstm1.hidden()
            && self.layer2.c.ncols() == net.lstm2.hidden()
            && self.output.ncols() == net.output_dim()
    }

    /// Number of recurrent values held (`c` and `h` of both layers).
    pub fn value_count(&self) -> usize {
        self.layer1.c.len() + self.layer1.h.len() + self.layer2.c.len() + self.layer2.h.len()
    }

    pub fn reset(&mut self) {
        for a in [&mut self.layer1.c, &mut self.layer1.h, &mut self.layer2.c, &mut self.layer2.h] {
            a.fill(F::zero());
        }
    }
}

/// Everything needed to run or resume a model: configuration and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F = f32> {
    pub net: NetConfig,
    pub features: FeatureConfig,
    pub stft: StftConfig,
    pub compression: CompressionConfig,
    pub params: Network<F>,
}

impl<F: Real> ModelBundle<F> {
    pub fn new(
        net: NetConfig,
        features: FeatureConfig,
        stft: StftConfig,
        compression: CompressionConfig,
        params: Network<F>,
    ) -> Result<Self> {
        let bundle = Self {
            net,
            features,
            stft,
            compression,
            params,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Randomly initialized model for the given configuration.
    pub fn init(
        net: NetConfig,
        features: FeatureConfig,
        stft: StftConfig,
        compression: CompressionConfig,
        seed: u64,
    ) -> Result<Self> {
        net.validate()?;
        Self::new(net, features, stft, compression, Network::init(&net, seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.features.validate()?;
        if self.net.input_dim != self.features.input_dim() {
            return Err(Error::config(format!(
                "network input {} does not match 2N+1 = {}",
                self.net.input_dim,
                self.features.input_dim()
            )));
        }
        if self.features.bins != self.stft.bins() {
            return Err(Error::config(format!(
                "feature bins {} do not match STFT bins {}",
                self.features.bins,
                self.stft.bins()
            )));
        }
        if self.net.tau != self.features.tau {
            return Err(Error::config(format!(
                "network delay {} differs from feature delay {}",
                self.net.tau, self.features.tau
            )));
        }
        self.params.check_shapes(&self.net)
    }

    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle {
            net: self.net,
            features: self.features,
            stft: self.stft.clone(),
            compression: self.compression,
            params: self.params.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn forward_sequence(&self, input: ArrayView2<'_, F>) -> Result<Array2<F>> {
        self.params.forward_sequence(input)
    }

    pub fn stateful_step(&self, state: &mut LstmState<F>, input: &[F]) -> Result<Array1<F>> {
        self.params.stateful_step(state, input)
    }
}

impl ModelBundle<f32> {
    /// Default architecture with seeded random weights.
    pub fn default_random(seed: u64) -> Self {
        Self::init(
            NetConfig::default(),
            FeatureConfig::default(),
            StftConfig::default(),
            CompressionConfig::default(),
            seed,
        )
        .expect("default configuration is consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn default_parameter_count() {
        assert_eq!(count_parameters(&NetConfig::default()), 1_295_874);
        let net = Network::<f32>::zeros(&NetConfig::default());
        assert_eq!(net.param_count(), 1_295_874);
        let nominal: f64 = 1.3e6;
        assert!((1_295_874.0 - nominal).abs() / nominal < 0.01);
    }

    #[test]
    fn unit_parameter_count() {
        let cfg = NetConfig::new(1, 1, 1, 1, 0).unwrap();
        assert_eq!(count_parameters(&cfg), 26);
    }

    #[test]
    fn output_dim_changes_tail_only() {
        let a = NetConfig::new(7, 5, 4, 2, 0).unwrap();
        let b = NetConfig { output_dim: 3, ..a };
        assert_eq!(count_parameters(&b) - count_parameters(&a), a.hidden2 + 1);
    }

    proptest! {
        #[test]
        fn count_matches_tensor_enumeration(
            d in 1usize..40, h1 in 1usize..40, h2 in 1usize..40, o in 1usize..5,
        ) {
            let cfg = NetConfig::new(d, h1, h2, o, 0).unwrap();
            let net = Network::<f32>::zeros(&cfg);
            let enumerated: usize = net.shapes().iter().map(|s| s.iter().product::<usize>()).sum();
            prop_assert_eq!(count_parameters(&cfg), enumerated);
        }
    }

    #[test]
    fn zero_model_predicts_bias() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let mut net = Network::<f64>::zeros(&cfg);
        net.dense.bias[0] = 0.25;
        net.dense.bias[1] = -0.5;
        let input = Array2::from_elem((1, 5), 3.0);
        let out = net.forward_sequence(input.view()).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.25, -0.5]);
    }

    #[test]
    fn sequence_equals_chained_steps() {
        let cfg = NetConfig::new(7, 12, 9, 2, 2).unwrap();
        let net = Network::<f32>::init(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = Array2::from_shape_fn((50, 7), |_| rng.random_range(0.0f32..3.0));
        let seq = net.forward_sequence(input.view()).unwrap();
        let mut state = LstmState::zeros(&net, 1);
        for t in 0..50 {
            let y = net.stateful_step(&mut state, input.row(t).as_slice().unwrap()).unwrap();
            for j in 0..2 {
                assert!((y[j] - seq[[t, j]]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn random_model_outputs_are_bounded() {
        let cfg = NetConfig::default();
        let net = Network::<f32>::init(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Array2::from_shape_fn((192, 31), |_| rng.random_range(0.0f32..4.0));
        let out = net.forward_sequence(input.view()).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && v.abs() < 1e3));
    }

    #[test]
    fn shape_errors() {
        let cfg = NetConfig::new(5, 4, 3, 2, 1).unwrap();
        let net = Network::<f64>::zeros(&cfg);
        assert!(net.forward_sequence(Array2::zeros((3, 4)).view()).is_err());
        let mut wrong = LstmState::zeros(&net, 2);
        assert!(net.stateful_step(&mut wrong, &[0.0; 5]).is_err());
        let other = Network::<f64>::zeros(&NetConfig::new(5, 6, 3, 2, 1).unwrap());
        let mut foreign = LstmState::zeros(&other, 1);
        assert!(net.stateful_step(&mut foreign, &[0.0; 5]).is_err());
    }

    #[test]
    fn parameters_do_not_depend_on_bin_count() {
        let narrow = ModelBundle::<f32>::init(
            NetConfig::default(),
            FeatureConfig::new(15, 129, 192, 2).unwrap(),
            StftConfig::new(256, 128, 16_000).unwrap(),
            CompressionConfig::default(),
            1,
        )
        .unwrap();
        let wide = ModelBundle::<f32>::default_random(1);
        assert_eq!(narrow.params.shapes(), wide.params.shapes());
        assert_eq!(narrow.params, wide.params);
    }

    #[test]
    fn bundle_validation() {
        let mut b = ModelBundle::<f32>::default_random(0);
        assert!(b.validate().is_ok());
        b.net.tau = 3;
        assert!(b.validate().is_err());
        let mut b = ModelBundle::<f32>::default_random(0);
        b.features.neighbors = 14;
        assert!(b.validate().is_err());
    }
}
