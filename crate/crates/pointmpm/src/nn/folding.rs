//! Folding decoder layer: tiles a feature vector over a fixed 2D grid in
//! [-1,1]^2, concatenates the grid coordinates, and maps each row to a 3D
//! point through a shared MLP.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::nn::{Activation, Mlp, ParamGroup};
use crate::tensor::ops;
use crate::tensor::Tensor;

/// Row-major s x s grid over [-1,1]^2 (a single point sits at the origin).
pub fn fold_grid(s: usize) -> Vec<[f64; 2]> {
    assert!(s >= 1);
    let coord = |i: usize| {
        if s == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (s - 1) as f64
        }
    };
    let mut grid = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            grid.push([coord(x), coord(y)]);
        }
    }
    grid
}

pub struct FoldingLayer {
    pub mlp: Mlp, // [feature_dim + 2, hidden.., 3]
    pub grid_size: usize,
    grid: Tensor, // [s*s, 2] constant
}

impl FoldingLayer {
    pub fn new(feature_dim: usize, hidden: usize, grid_size: usize, rng: &mut ChaCha12Rng) -> Self {
        let grid_points = fold_grid(grid_size);
        let data: Vec<f64> = grid_points.iter().flat_map(|p| p.iter().copied()).collect();
        FoldingLayer {
            mlp: Mlp::new(&[feature_dim + 2, hidden, hidden, 3], Activation::Relu, rng),
            grid_size,
            grid: Tensor::constant(&[grid_size * grid_size, 2], data),
        }
    }

    /// Deform the grid conditioned on a feature vector: [d] -> [s*s, 3].
    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        let s2 = self.grid_size * self.grid_size;
        let d = feature.numel();
        let ones = Tensor::full(&[s2, 1], 1.0);
        let tiled = ops::matmul(&ones, &ops::reshape(feature, &[1, d])?)?;
        let rows = ops::concat_last(&[&tiled, &self.grid])?;
        self.mlp.forward(&rows)
    }
}

impl ParamGroup for FoldingLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mlp.collect_params(&format!("{prefix}mlp."), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;
    use rand::SeedableRng;

    #[test]
    fn grid_covers_corners() {
        let g = fold_grid(3);
        assert_eq!(g.len(), 9);
        assert!(g.contains(&[-1.0, -1.0]));
        assert!(g.contains(&[1.0, -1.0]));
        assert!(g.contains(&[-1.0, 1.0]));
        assert!(g.contains(&[1.0, 1.0]));
        assert_eq!(fold_grid(1), vec![[0.0, 0.0]]);
    }

    #[test]
    fn zero_weights_put_all_points_at_the_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let fold = FoldingLayer::new(4, 8, 3, &mut rng);
        for layer in &fold.mlp.layers {
            layer.weight.set_data(&vec![0.0; layer.weight.numel()]);
        }
        let last_bias = fold.mlp.layers.last().unwrap().bias.as_ref().unwrap();
        last_bias.set_data(&[0.5, -0.25, 1.0]);
        let y = fold.forward(&Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        for r in 0..9 {
            assert_eq!(y.get(r * 3), 0.5);
            assert_eq!(y.get(r * 3 + 1), -0.25);
            assert_eq!(y.get(r * 3 + 2), 1.0);
        }
    }

    #[test]
    fn gradient_check_wrt_feature() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let fold = FoldingLayer::new(5, 6, 2, &mut rng);
        let feature = Tensor::param(&[5], vec![0.2, -0.7, 0.4, 1.1, -0.3]);
        let mut params = fold.param_tensors();
        params.push(feature.clone());
        let err = max_rel_err_fd(
            &params,
            || {
                let y = fold.forward(&feature)?;
                Ok(ops::sum_all(&ops::mul(&y, &y)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
