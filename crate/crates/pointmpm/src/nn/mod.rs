//! Neural building blocks: linear layers and MLPs, layer norm, dropout and
//! stochastic depth, the Gumbel-softmax relaxation, and the composite blocks
//! (mini point encoder, edge convolution, attention, transformer, folding).

pub mod attention;
pub mod edgeconv;
pub mod folding;
pub mod pointnet;
pub mod transformer;

pub use attention::MultiHeadAttention;
pub use edgeconv::EdgeConv;
pub use folding::FoldingLayer;
pub use pointnet::MiniPointNet;
pub use transformer::{Backbone, TransformerBlock, TransformerConfig};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;

/// Forward-pass mode. Training mode carries the RNG that feeds dropout and
/// stochastic depth; eval mode draws nothing and is a pure function.
pub struct ForwardCtx<'a> {
    pub training: bool,
    rng: Option<&'a mut ChaCha12Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &mut ChaCha12Rng) -> ForwardCtx<'_> {
        ForwardCtx {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn draw(&mut self) -> f64 {
        self.rng
            .as_mut()
            .map(|r| r.random::<f64>())
            .expect("rng draw in eval mode")
    }
}

/// Ordered (name, tensor) pairs for optimizers, checkpoints and momentum
/// mirrors. Order is construction order and therefore deterministic.
pub trait ParamGroup {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    fn set_trainable(&self, trainable: bool) {
        for (_, t) in self.params() {
            t.set_requires_grad(trainable);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => ops::relu(x),
            Activation::Gelu => ops::gelu(x),
        }
    }
}

/// Dense layer `x @ w + b` with Xavier-uniform init.
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Linear {
            weight: Tensor::uniform_param(&[input, output], limit, rng),
            bias: Some(Tensor::param(&[output], vec![0.0; output])),
        }
    }

    pub fn new_no_bias(input: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Linear {
            weight: Tensor::uniform_param(&[input, output], limit, rng),
            bias: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies to the last axis; leading axes are flattened into a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sh = x.shape().to_vec();
        if sh.is_empty() || sh[sh.len() - 1] != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear: input {:?} does not end in {}",
                sh,
                self.in_dim()
            )));
        }
        let rows = x.numel() / self.in_dim();
        let flat = ops::reshape(x, &[rows, self.in_dim()])?;
        let mut y = ops::matmul(&flat, &self.weight)?;
        if let Some(b) = &self.bias {
            y = ops::add(&y, b)?;
        }
        let mut out_shape = sh;
        *out_shape.last_mut().unwrap() = self.out_dim();
        ops::reshape(&y, &out_shape)
    }
}

impl ParamGroup for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}bias"), b.clone()));
        }
    }
}

/// Stack of dense layers with a fixed activation between them (none after the
/// last layer).
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(dims: &[usize], activation: Activation, rng: &mut ChaCha12Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }
}

impl ParamGroup for Mlp {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}{i}."), out);
        }
    }
}

/// Learnable layer normalization over the last axis.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(&[dim], vec![1.0; dim]),
            bias: Tensor::param(&[dim], vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layernorm(x, &self.gain, &self.bias, self.eps)
    }
}

impl ParamGroup for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}gain"), self.gain.clone()));
        out.push((format!("{prefix}bias"), self.bias.clone()));
    }
}

/// Inverted dropout: identity in eval mode, mask-and-rescale in training.
pub fn dropout(x: &Tensor, p: f64, ctx: &mut ForwardCtx) -> Tensor {
    if !ctx.training || p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if ctx.draw() < p { 0.0 } else { 1.0 / keep })
        .collect();
    let mask = Tensor::constant(x.shape(), mask);
    ops::mul(x, &mask).expect("dropout mask has matching shape")
}

/// Stochastic depth on a residual branch: in training the whole branch is
/// dropped with probability `rate` and rescaled by 1/(1-rate) otherwise; in
/// eval mode it is the identity.
pub fn stochastic_depth(branch: &Tensor, rate: f64, ctx: &mut ForwardCtx) -> Tensor {
    if !ctx.training || rate <= 0.0 {
        return branch.clone();
    }
    if ctx.draw() < rate {
        ops::scale(branch, 0.0)
    } else {
        ops::scale(branch, 1.0 / (1.0 - rate))
    }
}

/// Temperature-controlled relaxation of categorical sampling:
/// `softmax((logits + noise) / tau)` along the last axis. Zero noise recovers
/// a plain tempered softmax.
pub fn gumbel_softmax(logits: &Tensor, tau: f64, noise: &Tensor) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!(
            "gumbel_softmax: temperature must be positive, got {tau}"
        )));
    }
    if logits.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "gumbel_softmax: noise shape {:?} does not match logits {:?}",
            noise.shape(),
            logits.shape()
        )));
    }
    let shifted = ops::add(logits, noise)?;
    let scaled = ops::scale(&shifted, 1.0 / tau);
    let axis = logits.shape().len().saturating_sub(1);
    ops::softmax(&scaled, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;
    use rand::SeedableRng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(0)
    }

    #[test]
    fn linear_shapes_and_gradient() {
        let mut r = rng();
        let l = Linear::new(3, 2, &mut r);
        let x = Tensor::constant(&[4, 3], (0..12).map(|i| i as f64 * 0.1).collect());
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        let v = Tensor::constant(&[3], vec![1.0, -1.0, 0.5]);
        assert_eq!(l.forward(&v).unwrap().shape(), &[2]);

        let params = l.param_tensors();
        let err = max_rel_err_fd(&params, || Ok(ops::sum_all(&l.forward(&x)?)), 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn dropout_eval_is_identity_and_train_frequency_is_close() {
        let x = Tensor::constant(&[1000], vec![1.0; 1000]);
        let mut eval = ForwardCtx::eval();
        assert_eq!(dropout(&x, 0.3, &mut eval).to_vec(), vec![1.0; 1000]);

        let mut r = rng();
        let mut ctx = ForwardCtx::train(&mut r);
        let y = dropout(&x, 0.3, &mut ctx);
        let zeros = y.data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / 1000.0;
        assert!((frac - 0.3).abs() < 0.06, "dropout frequency {frac}");
    }

    #[test]
    fn stochastic_depth_contract() {
        let x = Tensor::constant(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut eval = ForwardCtx::eval();
        assert_eq!(stochastic_depth(&x, 0.9, &mut eval).to_vec(), x.to_vec());

        let mut r = rng();
        {
            let mut ctx = ForwardCtx::train(&mut r);
            assert_eq!(stochastic_depth(&x, 0.0, &mut ctx).to_vec(), x.to_vec());
        }

        // empirical drop frequency over 10^4 draws within +-0.02 of 0.1
        let mut dropped = 0;
        for _ in 0..10_000 {
            let mut ctx = ForwardCtx::train(&mut r);
            let y = stochastic_depth(&x, 0.1, &mut ctx);
            if y.get(0) == 0.0 {
                dropped += 1;
            } else {
                assert!((y.get(0) - 1.0 / 0.9).abs() < 1e-12);
            }
        }
        let freq = dropped as f64 / 10_000.0;
        assert!((freq - 0.1).abs() < 0.02, "drop frequency {freq}");
    }

    #[test]
    fn gumbel_softmax_examples() {
        let logits = Tensor::param(&[3], vec![0.4, -0.2, 1.1]);
        let zero = Tensor::zeros(&[3]);
        let plain = ops::softmax(&logits, 0).unwrap();
        let relaxed = gumbel_softmax(&logits, 1.0, &zero).unwrap();
        for (a, b) in plain.to_vec().iter().zip(relaxed.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }

        let peaked = Tensor::param(&[3], vec![2.0, 0.0, 0.0]);
        let y = gumbel_softmax(&peaked, 0.01, &zero).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-3);

        assert!(matches!(
            gumbel_softmax(&logits, 0.0, &zero),
            Err(Error::Domain(_))
        ));

        // shift invariance with fixed noise
        let mut r = rng();
        let noise = Tensor::constant(&[3], crate::rng::gumbel_noise(&mut r, 3));
        let a = gumbel_softmax(&logits, 0.5, &noise).unwrap().to_vec();
        let shifted = ops::add_scalar(&logits, 7.5);
        let b = gumbel_softmax(&shifted, 0.5, &noise).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gumbel_softmax_gradient() {
        let logits = Tensor::param(&[2, 4], vec![0.3, -0.8, 0.5, 0.0, 1.2, 0.4, -0.3, 0.9]);
        let mut r = rng();
        let noise = Tensor::constant(&[2, 4], crate::rng::gumbel_noise(&mut r, 8));
        let w = Tensor::constant(&[2, 4], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9, 0.3, -0.4]);
        let err = max_rel_err_fd(
            &[logits.clone()],
            || {
                let y = gumbel_softmax(&logits, 0.5, &noise)?;
                Ok(ops::sum_all(&ops::mul(&y, &w)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
