//! Edge convolution over a dynamic k-nearest-neighbor graph: a shared layer
//! applied to concat(x_i, x_j - x_i) per edge with max aggregation over
//! neighbors. The graph is recomputed in feature space on every call.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamGroup};
use crate::tensor::ops::{self, Reduce};
use crate::tensor::Tensor;

/// k nearest rows of an [m, c] feature matrix for every row, the node itself
/// first, remaining neighbors by ascending distance (ties toward the lowest
/// index).
pub fn feature_knn(features: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let sh = features.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!(
            "feature_knn: expected [nodes, channels], got {:?}",
            sh
        )));
    }
    let (m, c) = (sh[0], sh[1]);
    if k > m {
        return Err(Error::Size(format!("feature_knn: k={k} exceeds {m} nodes")));
    }
    let d = features.data();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut cand: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                let mut s = 0.0;
                for t in 0..c {
                    let diff = d[i * c + t] - d[j * c + t];
                    s += diff * diff;
                }
                (s, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut neighbors = Vec::with_capacity(k);
        neighbors.push(i);
        neighbors.extend(cand.into_iter().take(k - 1).map(|(_, j)| j));
        out.push(neighbors);
    }
    Ok(out)
}

pub struct EdgeConv {
    pub edge_layer: Linear, // [2*c_in, c_out]
    pub k: usize,
    pub slope: f64,
}

impl EdgeConv {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha12Rng) -> Self {
        EdgeConv {
            edge_layer: Linear::new(2 * c_in, c_out, rng),
            k,
            slope: 0.2,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.edge_layer.out_dim()
    }

    /// `features`: [m, c_in] node values the edges are built from;
    /// `graph_features`: [m, c'] values that define the neighborhood
    /// structure (often the same tensor; only its data is read).
    pub fn forward(&self, features: &Tensor, graph_features: &Tensor) -> Result<Tensor> {
        let sh = features.shape();
        if sh.len() != 2 {
            return Err(Error::Shape(format!(
                "edgeconv: expected [nodes, channels], got {:?}",
                sh
            )));
        }
        let m = sh[0];
        let k = self.k;
        let neighbors = feature_knn(graph_features, k)?;
        let mut self_idx = Vec::with_capacity(m * k);
        let mut nbr_idx = Vec::with_capacity(m * k);
        for (i, ns) in neighbors.iter().enumerate() {
            for &j in ns {
                self_idx.push(i);
                nbr_idx.push(j);
            }
        }
        let x_i = ops::index_rows(features, &self_idx)?;
        let x_j = ops::index_rows(features, &nbr_idx)?;
        let rel = ops::sub(&x_j, &x_i)?;
        let edge_in = ops::concat_last(&[&x_i, &rel])?;
        let edge_out = ops::leaky_relu(&self.edge_layer.forward(&edge_in)?, self.slope);
        let grouped = ops::reshape(&edge_out, &[m, k, self.out_dim()])?;
        ops::reduce(&grouped, Reduce::Max, 1)
    }
}

impl ParamGroup for EdgeConv {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.edge_layer
            .collect_params(&format!("{prefix}edge_layer."), out);
    }
}
