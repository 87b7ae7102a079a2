//! Multi-head scaled dot-product self-attention. Heads carry their own
//! projection matrices; their outputs are concatenated and mixed by a final
//! linear layer.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamGroup};
use crate::tensor::ops;
use crate::tensor::Tensor;

pub struct MultiHeadAttention {
    pub query_proj: Vec<Linear>, // per head, [d, d_k], no bias
    pub key_proj: Vec<Linear>,
    pub value_proj: Vec<Linear>,
    pub out_proj: Linear, // [d, d]
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(model_dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(
            model_dim % heads == 0,
            "model_dim {model_dim} must be divisible by heads {heads}"
        );
        let head_dim = model_dim / heads;
        let mk = |rng: &mut ChaCha12Rng| Linear::new_no_bias(model_dim, head_dim, rng);
        MultiHeadAttention {
            query_proj: (0..heads).map(|_| mk(rng)).collect(),
            key_proj: (0..heads).map(|_| mk(rng)).collect(),
            value_proj: (0..heads).map(|_| mk(rng)).collect(),
            out_proj: Linear::new(model_dim, model_dim, rng),
            heads,
            head_dim,
        }
    }

    /// Self-attention over a [tokens, model_dim] sequence.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 || sh[1] != self.heads * self.head_dim {
            return Err(Error::Shape(format!(
                "attention: expected [tokens, {}], got {:?}",
                self.heads * self.head_dim,
                sh
            )));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = self.query_proj[h].forward(x)?;
            let k = self.key_proj[h].forward(x)?;
            let v = self.value_proj[h].forward(x)?;
            let scores = ops::scale(&ops::matmul(&q, &ops::transpose(&k)?)?, scale);
            let weights = ops::softmax(&scores, 1)?;
            head_outputs.push(ops::matmul(&weights, &v)?);
        }
        let refs: Vec<&Tensor> = head_outputs.iter().collect();
        let concat = ops::concat_last(&refs)?;
        self.out_proj.forward(&concat)
    }
}

impl ParamGroup for MultiHeadAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (h, l) in self.query_proj.iter().enumerate() {
            l.collect_params(&format!("{prefix}q{h}."), out);
        }
        for (h, l) in self.key_proj.iter().enumerate() {
            l.collect_params(&format!("{prefix}k{h}."), out);
        }
        for (h, l) in self.value_proj.iter().enumerate() {
            l.collect_params(&format!("{prefix}v{h}."), out);
        }
        self.out_proj.collect_params(&format!("{prefix}out."), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;
    use rand::SeedableRng;

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let attn = MultiHeadAttention::new(6, 2, &mut rng);
        let x = Tensor::param(&[1, 6], vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.7]);
        let y = attn.forward(&x).unwrap();
        // with a single token softmax is exactly 1, so the output is the
        // projected value passed through the output layer
        let mut parts = Vec::new();
        for h in 0..2 {
            parts.push(attn.value_proj[h].forward(&x).unwrap());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let manual = attn
            .out_proj
            .forward(&ops::concat_last(&refs).unwrap())
            .unwrap();
        for (a, b) in y.to_vec().iter().zip(manual.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_gives_bias_only_output() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let attn = MultiHeadAttention::new(4, 2, &mut rng);
        for v in &attn.value_proj {
            v.weight.set_data(&vec![0.0; v.weight.numel()]);
        }
        let x = Tensor::param(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect());
        let y = attn.forward(&x).unwrap();
        let bias = attn.out_proj.bias.as_ref().unwrap().to_vec();
        for r in 0..3 {
            for c in 0..4 {
                assert!((y.get(r * 4 + c) - bias[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let attn = MultiHeadAttention::new(8, 2, &mut rng);
        let x = Tensor::param(&[3, 8], (0..24).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.2).collect());
        let mut params = attn.param_tensors();
        params.push(x.clone());
        let err = max_rel_err_fd(
            &params,
            || {
                let y = attn.forward(&x)?;
                Ok(ops::sum_all(&ops::mul(&y, &y)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
