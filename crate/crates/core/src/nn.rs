//! Dense layers, multilayer perceptrons, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = act(x · W + b)` with `W: [in × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RawLayer<T>")]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct RawLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
}

impl<T: Scalar> TryFrom<RawLayer<T>> for DenseLayer<T> {
    type Error = Error;

    fn try_from(raw: RawLayer<T>) -> Result<Self> {
        DenseLayer::new(raw.weight, raw.bias, raw.activation)
    }
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let layer = DenseLayer {
            weight,
            bias,
            activation,
        };
        layer.check()?;
        Ok(layer)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 2 || self.bias.shape() != [ws[1]] {
            return Err(Error::Shape(format!(
                "dense layer weight {:?} with bias {:?}",
                ws,
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of dense layers. Parameter `2i` is layer `i`'s weight, `2i + 1` its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RawMlp<T>")]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct RawMlp<T> {
    layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> TryFrom<RawMlp<T>> for Mlp<T> {
    type Error = Error;

    fn try_from(raw: RawMlp<T>) -> Result<Self> {
        Mlp::new(raw.layers)
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for l in &layers {
            l.check()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    /// Number of parameter tensors (two per layer).
    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Puts the weights on `tape` once so several batches can share them.
    ///
    /// With `first_key = Some(k)` the weights are registered as parameters
    /// `k, k+1, ...`; with `None` they enter as constants and receive no
    /// parameter gradient.
    pub fn bind(&self, tape: &mut Tape<T>, first_key: Option<ParamKey>) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match first_key {
                Some(k) => (
                    tape.param(k + 2 * i, &layer.weight)?,
                    tape.param(k + 2 * i + 1, &layer.bias)?,
                ),
                None => (tape.constant(&layer.weight), tape.constant(&layer.bias)),
            };
            layers.push((w, b, layer.activation));
        }
        Ok(BoundMlp {
            layers,
            in_dim: self.in_dim(),
        })
    }

    /// Binds and applies in one go.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, first_key: Option<ParamKey>) -> Result<Var> {
        self.bind(tape, first_key)?.apply(tape, x)
    }

    /// Forward pass without parameter tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, None)?;
        tape.tensor(out)
    }
}

/// An [`Mlp`] whose weights live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
    in_dim: usize,
}

impl BoundMlp {
    /// Batched forward pass `x: [B × in] → [B × out]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xs = tape.shape(x)?;
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "input of shape {:?} for a network expecting width {}",
                xs, self.in_dim
            )));
        }
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let xw = tape.matmul(h, w)?;
            let pre = tape.add(xw, b)?;
            h = act.apply(tape, pre)?;
        }
        Ok(h)
    }
}

/// Glorot-uniform weights, zero biases. Hidden layers use `activation`;
/// the output layer is linear.
pub fn init_mlp<T: Scalar>(dims: &[usize], activation: Activation, seed: u64) -> Result<Mlp<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp_with(dims, activation, &mut rng)
}

pub fn init_mlp_with<T: Scalar, R: Rng>(
    dims: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Result<Mlp<T>> {
    if dims.len() < 2 {
        return Err(Error::config("dims", "need at least input and output sizes"));
    }
    if dims.contains(&0) {
        return Err(Error::config("dims", "layer sizes must be positive"));
    }
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect();
            let act = if i == last {
                Activation::Identity
            } else {
                activation
            };
            DenseLayer::new(
                Tensor::new(vec![fan_in, fan_out], values)?,
                Tensor::zeros(vec![fan_out])?,
                act,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied directly to the parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay over one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamKey, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates exactly the tensors in `params` and clears their gradients.
    ///
    /// Every tensor must carry a gradient; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut [(ParamKey, &mut Tensor<T>)]) -> Result<()> {
        if let Some((k, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {k} has no gradient")));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps, wd) = (T::lit(c.learning_rate), T::lit(c.eps), T::lit(c.weight_decay));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        for (key, tensor) in params.iter_mut() {
            let n = tensor.len();
            let (m, v) = self
                .moments
                .entry(*key)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::Shape(format!("parameter {key} changed size")));
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            for (i, w) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a: Mlp<f64> = init_mlp(&[4, 3], Activation::Relu, 7).unwrap();
        let b: Mlp<f64> = init_mlp(&[4, 3], Activation::Relu, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers()[0].bias.values().iter().all(|&v| v == 0.0));
        let c: Mlp<f64> = init_mlp(&[4, 3], Activation::Relu, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_short_dims() {
        assert!(init_mlp::<f64>(&[4], Activation::Relu, 0).is_err());
        assert!(init_mlp::<f64>(&[], Activation::Relu, 0).is_err());
    }

    #[test]
    fn glorot_bound_holds_over_seeds() {
        let bound = (6.0f64 / 7.0).sqrt();
        assert!((bound - 0.9258).abs() < 1e-4);
        for seed in 0..1000 {
            let m: Mlp<f64> = init_mlp(&[4, 3], Activation::Tanh, seed).unwrap();
            assert!(m.layers()[0].weight.values().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn identity_layer_passes_input() {
        let layer = DenseLayer::new(
            Tensor::<f64>::identity(3).unwrap(),
            Tensor::zeros(vec![3]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let mlp = Mlp::new(vec![layer]).unwrap();
        let x = Tensor::from_f64_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        assert_eq!(mlp.predict(&x).unwrap().values(), x.values());
    }

    #[test]
    fn zero_input_relu_net_gives_zero() {
        let m: Mlp<f64> = init_mlp(&[5, 8, 3], Activation::Relu, 3).unwrap();
        let x = Tensor::zeros(vec![4, 5]).unwrap();
        assert!(m.predict(&x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_forward_matches_scalar_loops() {
        let m: Mlp<f64> = init_mlp(&[3, 4, 2], Activation::Tanh, 11).unwrap();
        let x = Tensor::from_f64_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]).unwrap();
        let out = m.predict(&x).unwrap();
        for r in 0..2 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for layer in m.layers() {
                let (i_n, o_n) = (layer.in_dim(), layer.out_dim());
                let mut next = vec![0.0; o_n];
                for o in 0..o_n {
                    let mut acc = layer.bias.values()[o];
                    for i in 0..i_n {
                        acc += h[i] * layer.weight.get(i, o);
                    }
                    next[o] = match layer.activation {
                        Activation::Tanh => acc.tanh(),
                        Activation::Relu => acc.max(0.0),
                        Activation::Identity => acc,
                    };
                }
                h = next;
            }
            for (a, b) in out.row(r).iter().zip(&h) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let m: Mlp<f64> = init_mlp(&[3, 2], Activation::Relu, 0).unwrap();
        assert!(m.predict(&Tensor::zeros(vec![2, 4]).unwrap()).is_err());
    }

    #[test]
    fn mlp_rejects_broken_chain() {
        let l1 = DenseLayer::new(
            Tensor::<f64>::zeros(vec![2, 3]).unwrap(),
            Tensor::zeros(vec![3]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let l2 = DenseLayer::new(
            Tensor::<f64>::zeros(vec![4, 1]).unwrap(),
            Tensor::zeros(vec![1]).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        assert!(Mlp::new(vec![l1, l2]).is_err());
    }

    #[test]
    fn adam_zero_grad_no_decay_is_noop() {
        let mut w = Tensor::<f64>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = w.clone();
        w.set_grad(vec![0.0; 3]).unwrap();
        let mut opt = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut [(0, &mut w)]).unwrap();
        assert_eq!(w.values(), before.values());
        assert!(w.grad().is_none());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // closed form: m̂ = g, v̂ = g², so Δ = -r·g/(|g| + ε)
        let mut w = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        w.set_grad(vec![1.0]).unwrap();
        let mut opt = AdamState::new(AdamConfig {
            learning_rate: 0.001,
            ..AdamConfig::default()
        });
        opt.step(&mut [(0, &mut w)]).unwrap();
        let expect = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((w.values()[0] - expect).abs() < 1e-15);
        assert!((w.values()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adam_missing_grad_is_contract_error() {
        let mut w = Tensor::<f64>::zeros(vec![2]).unwrap();
        let mut opt = AdamState::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut [(0, &mut w)]), Err(Error::Contract(_))));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn adam_leaves_other_group_untouched() {
        let mut a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        a.set_grad(vec![0.3, -0.2]).unwrap();
        b.set_grad(vec![0.5, 0.5]).unwrap();
        let b_before = b.clone();
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [(0, &mut a)]).unwrap();
        assert_eq!(b.values(), b_before.values());
        assert_ne!(a.values(), &[1.0, 2.0]);
    }
}
