//! Multilayer perceptrons: the encoders, knowledge transformers and predictor.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// One fully connected layer, `y = x · weightᵀ + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// A Linear→ReLU stack whose last layer is linear, followed by row
/// normalization. Parameters are kept in a fixed order (layer by layer,
/// weight before bias) which `flatten` and `unflatten` preserve.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

/// Parameters of the student and teacher encoders.
pub type EncoderParams = Mlp;

impl Mlp {
    /// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and output extent");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let weight = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Linear {
                    weight: Tensor::matrix(fan_out, fan_in, weight).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn init_seeded(dims: &[usize], seed: u64) -> Self {
        Self::init(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// All-zero parameters with the given extents.
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[1], w[0]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Empty);
        }
        for l in &layers {
            let (out, _) = l.weight.dims2()?;
            if l.bias.shape() != [out] {
                return Err(TensorError::ShapeMismatch {
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(TensorError::ShapeMismatch {
                    left: w[0].weight.shape().to_vec(),
                    right: w[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Linear::out_dim));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.param_slices().for_each(|s| out.extend_from_slice(s));
        out
    }

    /// Rebuilds parameters from `flatten` output and the layer extents.
    pub fn unflatten(dims: &[usize], flat: &[f64]) -> Result<Self, TensorError> {
        let mut mlp = Self::zeros(dims);
        if mlp.num_params() != flat.len() || dims.len() < 2 {
            return Err(TensorError::DataLength {
                shape: dims.to_vec(),
                len: flat.len(),
            });
        }
        let mut offset = 0;
        for s in mlp.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(mlp)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    /// Records the parameters on `tape` for a forward pass.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), requires_grad),
                    tape.leaf(l.bias.clone(), requires_grad),
                )
            })
            .collect();
        MlpVars { layers }
    }

    /// Gradient-free forward pass producing unit-norm rows.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = vars.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Tape handles for the parameters of one [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Linear→ReLU … → Linear, then row normalization.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let x_dim = tape.value(x).dims2()?.1;
        let w_dim = tape.value(self.layers[0].0).shape()[1];
        if x_dim != w_dim {
            return Err(TensorError::ShapeMismatch {
                left: tape.value(x).shape().to_vec(),
                right: tape.value(self.layers[0].0).shape().to_vec(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        tape.l2_normalize(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Gradients in `Mlp::flatten` order; zeros where nothing flowed.
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.vars() {
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).numel())),
            }
        }
        out
    }
}

/// Layer layout of a knowledge transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KtStructure {
    /// d → hidden → d
    #[default]
    TwoLayer,
    /// d → hidden → hidden → hidden → d
    FourLayer,
    /// d → 16·hidden → d
    Bottleneck,
}

/// Width multiplier of the bottleneck hidden layer (256 → 4096).
pub const BOTTLENECK_FACTOR: usize = 16;

impl KtStructure {
    pub fn dims(self, dim: usize, hidden: usize) -> Vec<usize> {
        match self {
            KtStructure::TwoLayer => vec![dim, hidden, dim],
            KtStructure::FourLayer => vec![dim, hidden, hidden, hidden, dim],
            KtStructure::Bottleneck => vec![dim, hidden * BOTTLENECK_FACTOR, dim],
        }
    }

    pub fn num_layers(self) -> usize {
        match self {
            KtStructure::TwoLayer | KtStructure::Bottleneck => 2,
            KtStructure::FourLayer => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KtStructure::TwoLayer => "two_layer",
            KtStructure::FourLayer => "four_layer",
            KtStructure::Bottleneck => "bottleneck",
        }
    }
}

impl fmt::Display for KtStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KtStructure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_layer" => Ok(KtStructure::TwoLayer),
            "four_layer" => Ok(KtStructure::FourLayer),
            "bottleneck" => Ok(KtStructure::Bottleneck),
            other => Err(format!(
                "unknown KT structure `{other}` (expected two_layer, four_layer or bottleneck)"
            )),
        }
    }
}

/// Per-temporal-teacher MLP that re-weights a stored target before the loss.
/// Its output has the teacher's embedding dimension and is re-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTransformer {
    structure: KtStructure,
    mlp: Mlp,
}

impl KnowledgeTransformer {
    pub fn init<R: Rng>(structure: KtStructure, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            structure,
            mlp: Mlp::init(&structure.dims(dim, hidden), rng),
        }
    }

    pub fn from_mlp(structure: KtStructure, mlp: Mlp) -> Result<Self, TensorError> {
        let dims = mlp.layer_dims();
        if dims.len() != structure.num_layers() + 1 || dims[0] != *dims.last().unwrap() {
            return Err(TensorError::ShapeMismatch {
                left: dims,
                right: vec![structure.num_layers() + 1],
            });
        }
        Ok(Self { structure, mlp })
    }

    pub fn structure(&self) -> KtStructure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }
}

/// Extra head on the student used by the L2 objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    mlp: Mlp,
}

impl Predictor {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init(&[dim, hidden, dim], rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::dot;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero_rows() {
        let enc = Mlp::zeros(&[4, 8, 3]);
        let out = enc.embed(&random_input(5, 4, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_preserves_unit_vector() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let enc = Mlp::from_layers(vec![Linear {
            weight: Tensor::matrix(3, 3, w).unwrap(),
            bias: Tensor::zeros(&[3]),
        }])
        .unwrap();
        let x = Tensor::matrix(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        assert_eq!(enc.embed(&x).unwrap().data(), x.data());
    }

    #[test]
    fn encoder_rejects_wrong_input_dim() {
        let enc = Mlp::init_seeded(&[4, 8, 3], 0);
        assert!(enc.embed(&random_input(2, 5, 0)).is_err());
    }

    #[test]
    fn encoder_rows_are_unit_norm() {
        let enc = Mlp::init_seeded(&[32, 256, 128, 16], 11);
        let out = enc.embed(&random_input(50, 32, 1)).unwrap();
        for i in 0..50 {
            let r = out.row(i);
            let n = dot(r, r).sqrt();
            assert!((n - 1.0).abs() < 1e-12 || n < 1e-12, "row {i} norm {n}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::init_seeded(&[8, 16, 4], 3);
        let b = Mlp::init_seeded(&[8, 16, 4], 3);
        let c = Mlp::init_seeded(&[8, 16, 4], 4);
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn he_variance_within_twenty_percent() {
        for fan_in in [64usize, 128, 256] {
            let enc = Mlp::init_seeded(&[fan_in, 128], fan_in as u64);
            let w = enc.layers()[0].weight.data();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
            let expected = 2.0 / fan_in as f64;
            assert!((var / expected - 1.0).abs() < 0.2, "fan_in {fan_in}: {var} vs {expected}");
        }
    }

    #[test]
    fn copies_embed_identically() {
        let student = Mlp::init_seeded(&[6, 12, 4], 9);
        let teacher = student.clone();
        let x = random_input(7, 6, 2);
        assert_eq!(student.embed(&x).unwrap(), teacher.embed(&x).unwrap());
    }

    #[test]
    fn kt_output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kt = KnowledgeTransformer::init(KtStructure::TwoLayer, 4, 4, &mut rng);
        let mut x = random_input(6, 4, 3);
        for i in 0..6 {
            let n = dot(x.row(i), x.row(i)).sqrt();
            x.data_mut()[i * 4..(i + 1) * 4].iter_mut().for_each(|v| *v /= n);
        }
        let out = kt.mlp().embed(&x).unwrap();
        for i in 0..6 {
            assert!((dot(out.row(i), out.row(i)).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_kt_is_nan_free() {
        let kt = KnowledgeTransformer::from_mlp(KtStructure::TwoLayer, Mlp::zeros(&[4, 4, 4])).unwrap();
        let out = kt.mlp().embed(&random_input(3, 4, 0)).unwrap();
        assert!(out.is_finite());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kt_structures_have_expected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let two = KnowledgeTransformer::init(KtStructure::TwoLayer, 256, 256, &mut rng);
        assert_eq!(two.mlp().layer_dims(), vec![256, 256, 256]);
        assert_eq!(two.mlp().param_slices().count(), 4);
        let four = KnowledgeTransformer::init(KtStructure::FourLayer, 16, 32, &mut rng);
        assert_eq!(four.mlp().layer_dims(), vec![16, 32, 32, 32, 16]);
        assert_eq!(four.mlp().param_slices().count(), 8);
        let bottleneck = KnowledgeTransformer::init(KtStructure::Bottleneck, 16, 256, &mut rng);
        assert_eq!(bottleneck.mlp().layer_dims(), vec![16, 4096, 16]);
        assert_eq!(
            bottleneck.mlp().num_params(),
            16 * 4096 + 4096 + 4096 * 16 + 16
        );
        assert!(KnowledgeTransformer::from_mlp(KtStructure::FourLayer, two.mlp().clone()).is_err());
    }

    #[test]
    fn structure_tags_parse() {
        for s in [KtStructure::TwoLayer, KtStructure::FourLayer, KtStructure::Bottleneck] {
            assert_eq!(s.as_str().parse::<KtStructure>().unwrap(), s);
        }
        assert!("three_layer".parse::<KtStructure>().is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trips(dims in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let mlp = Mlp::init_seeded(&dims, seed);
            let flat = mlp.flatten();
            let back = Mlp::unflatten(&dims, &flat).unwrap();
            prop_assert_eq!(&back, &mlp);
            prop_assert_eq!(back.flatten(), flat);
        }
    }
}
