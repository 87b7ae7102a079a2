//! Mini point encoder: a shared per-point MLP, a global max pool, and a
//! second MLP mapping the pooled feature to the embedding dimension. The max
//! pool makes the output invariant to point order.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Activation, Mlp, ParamGroup};
use crate::tensor::ops::{self, Reduce};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiniPointNetDims {
    /// Hidden widths of the shared per-point MLP (input is always xyz).
    pub point_hidden: Vec<usize>,
    /// Hidden widths of the post-pool MLP.
    pub out_hidden: Vec<usize>,
    pub out_dim: usize,
}

pub struct MiniPointNet {
    pub point_mlp: Mlp,
    pub out_mlp: Mlp,
}

impl MiniPointNet {
    pub fn new(dims: &MiniPointNetDims, rng: &mut ChaCha12Rng) -> Self {
        let mut point_dims = vec![3];
        point_dims.extend_from_slice(&dims.point_hidden);
        let pooled = *point_dims.last().unwrap();
        let mut out_dims = vec![pooled];
        out_dims.extend_from_slice(&dims.out_hidden);
        out_dims.push(dims.out_dim);
        // smooth activation: relu's flat region collapses dead points onto a
        // shared constant, which makes the max pool tie-break unstable
        MiniPointNet {
            point_mlp: Mlp::new(&point_dims, Activation::Gelu, rng),
            out_mlp: Mlp::new(&out_dims, Activation::Gelu, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_mlp.out_dim()
    }

    /// Embed one normalized patch of shape [n, 3] into a feature vector.
    pub fn forward(&self, patch: &Tensor) -> Result<Tensor> {
        let per_point = self.point_mlp.forward(patch)?;
        let pooled = ops::reduce(&per_point, Reduce::Max, 0)?;
        self.out_mlp.forward(&pooled)
    }
}

impl ParamGroup for MiniPointNet {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.point_mlp
            .collect_params(&format!("{prefix}point_mlp."), out);
        self.out_mlp
            .collect_params(&format!("{prefix}out_mlp."), out);
    }
}

pub fn patch_to_tensor(patch: &[[f64; 3]]) -> Tensor {
    let data: Vec<f64> = patch.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::constant(&[patch.len(), 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;
    use rand::SeedableRng;

    fn dims() -> MiniPointNetDims {
        MiniPointNetDims {
            point_hidden: vec![8, 12],
            out_hidden: vec![10],
            out_dim: 6,
        }
    }

    #[test]
    fn permutation_invariance_is_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = MiniPointNet::new(&dims(), &mut rng);
        let patch = vec![
            [0.1, 0.2, -0.3],
            [0.5, -0.6, 0.7],
            [-0.4, 0.9, 0.0],
            [1.2, -1.1, 0.3],
        ];
        let base = net.forward(&patch_to_tensor(&patch)).unwrap().to_vec();
        let permuted = vec![patch[2], patch[0], patch[3], patch[1]];
        let other = net.forward(&patch_to_tensor(&permuted)).unwrap().to_vec();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&base), bits(&other));
    }

    #[test]
    fn zero_final_layer_yields_zero_feature() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let net = MiniPointNet::new(&dims(), &mut rng);
        let last = net.out_mlp.layers.last().unwrap();
        last.weight.set_data(&vec![0.0; last.weight.numel()]);
        if let Some(b) = &last.bias {
            b.set_data(&vec![0.0; b.numel()]);
        }
        let y = net
            .forward(&patch_to_tensor(&[[0.3, 1.0, -2.0], [0.0, 0.5, 0.5]]))
            .unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let net = MiniPointNet::new(&dims(), &mut rng);
        let patch = patch_to_tensor(&[[0.2, -0.1, 0.4], [0.9, 0.3, -0.5], [-0.7, 0.8, 0.1]]);
        let params = net.param_tensors();
        let err = max_rel_err_fd(
            &params,
            || {
                let y = net.forward(&patch)?;
                Ok(ops::sum_all(&ops::mul(&y, &y)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
