//! Pre-norm transformer blocks and the point-cloud backbone: patch embedder,
//! positional MLP on patch centers, class/mask tokens, and the encoder stack.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::nn::pointnet::{patch_to_tensor, MiniPointNet, MiniPointNetDims};
use crate::nn::{
    dropout, stochastic_depth, Activation, ForwardCtx, LayerNorm, Linear, Mlp,
    MultiHeadAttention, ParamGroup,
};
use crate::tensor::ops::{self, Reduce};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub drop_path_rate: f64,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim {} must be divisible by model.heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "model.drop_path_rate {} must lie in [0,1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }
}

/// Pre-norm residual block: x + DropPath(Attn(LN(x))), then
/// x + DropPath(FFN(LN(x))). The FFN is two linear layers with ReLU and
/// dropout.
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub drop_path_rate: f64,
    pub dropout_rate: f64,
}

impl TransformerBlock {
    pub fn new(cfg: &TransformerConfig, rng: &mut ChaCha12Rng) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(cfg.model_dim),
            attn: MultiHeadAttention::new(cfg.model_dim, cfg.heads, rng),
            norm2: LayerNorm::new(cfg.model_dim),
            ffn_in: Linear::new(cfg.model_dim, cfg.ffn_dim, rng),
            ffn_out: Linear::new(cfg.ffn_dim, cfg.model_dim, rng),
            drop_path_rate: cfg.drop_path_rate,
            dropout_rate: cfg.dropout,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(x)?)?;
        let a = dropout(&a, self.dropout_rate, ctx);
        let a = stochastic_depth(&a, self.drop_path_rate, ctx);
        let x = ops::add(x, &a)?;

        let h = ops::relu(&self.ffn_in.forward(&self.norm2.forward(&x)?)?);
        let h = dropout(&h, self.dropout_rate, ctx);
        let h = self.ffn_out.forward(&h)?;
        let h = dropout(&h, self.dropout_rate, ctx);
        let h = stochastic_depth(&h, self.drop_path_rate, ctx);
        ops::add(&x, &h)
    }
}

impl ParamGroup for TransformerBlock {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect_params(&format!("{prefix}norm1."), out);
        self.attn.collect_params(&format!("{prefix}attn."), out);
        self.norm2.collect_params(&format!("{prefix}norm2."), out);
        self.ffn_in.collect_params(&format!("{prefix}ffn_in."), out);
        self.ffn_out
            .collect_params(&format!("{prefix}ffn_out."), out);
    }
}

/// The encoder: patch embeddings + positional embeddings + class token in
/// front, a stack of transformer blocks, and a final norm. The mask token is
/// owned here so corrupted sequences can be built for pretraining.
pub struct Backbone {
    pub config: TransformerConfig,
    pub embedder: MiniPointNet,
    pub pos_mlp: Mlp,
    pub cls_token: Tensor,
    pub mask_token: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl Backbone {
    pub fn new(
        cfg: &TransformerConfig,
        embedder_dims: &MiniPointNetDims,
        pos_hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if embedder_dims.out_dim != cfg.model_dim {
            return Err(Error::Config(format!(
                "embedder out_dim {} must equal model.dim {}",
                embedder_dims.out_dim, cfg.model_dim
            )));
        }
        let d = cfg.model_dim;
        let embedder = MiniPointNet::new(embedder_dims, rng);
        let pos_mlp = Mlp::new(&[3, pos_hidden, d], Activation::Gelu, rng);
        let cls_token = Tensor::uniform_param(&[d], 0.02, rng);
        let mask_token = Tensor::uniform_param(&[d], 0.02, rng);
        let blocks = (0..cfg.depth)
            .map(|_| TransformerBlock::new(cfg, rng))
            .collect();
        Ok(Backbone {
            config: cfg.clone(),
            embedder,
            pos_mlp,
            cls_token,
            mask_token,
            blocks,
            final_norm: LayerNorm::new(d),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Patch features [g, d] and positional embeddings [g, d] for a patch set.
    pub fn embed_patches(&self, patches: &PatchSet) -> Result<(Tensor, Tensor)> {
        let mut feats = Vec::with_capacity(patches.group_count());
        for patch in &patches.patches {
            feats.push(self.embedder.forward(&patch_to_tensor(patch))?);
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let f = ops::stack(&refs)?;
        let centers: Vec<f64> = patches
            .centers
            .iter()
            .flat_map(|c| c.iter().copied())
            .collect();
        let centers = Tensor::constant(&[patches.group_count(), 3], centers);
        let pos = self.pos_mlp.forward(&centers)?;
        Ok((f, pos))
    }

    /// Input sequence [g+1, d]: class token, then f_i + pos_i per patch. When
    /// `masked` indices are given, those patches contribute mask_token + pos_i
    /// instead (the positional embedding is kept).
    pub fn sequence(&self, f: &Tensor, pos: &Tensor, masked: Option<&[usize]>) -> Result<Tensor> {
        if f.shape() != pos.shape() {
            return Err(Error::Shape(format!(
                "sequence: features {:?} vs positions {:?}",
                f.shape(),
                pos.shape()
            )));
        }
        let g = f.shape()[0];
        let x = ops::add(f, pos)?;
        let mut rows: Vec<Tensor> = Vec::with_capacity(g + 1);
        rows.push(self.cls_token.clone());
        for i in 0..g {
            let masked_here = masked.is_some_and(|m| m.binary_search(&i).is_ok());
            if masked_here {
                rows.push(ops::add(&self.mask_token, &ops::row(pos, i)?)?);
            } else {
                rows.push(ops::row(&x, i)?);
            }
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        ops::stack(&refs)
    }

    /// Run the block stack, returning every layer's output (post-block,
    /// without the final norm).
    pub fn encode_layers(&self, seq: &Tensor, ctx: &mut ForwardCtx) -> Result<Vec<Tensor>> {
        let mut h = seq.clone();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(&h, ctx)?;
            layers.push(h.clone());
        }
        Ok(layers)
    }

    /// Final-norm output of the last layer.
    pub fn encode(&self, seq: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let layers = self.encode_layers(seq, ctx)?;
        self.final_norm.forward(layers.last().unwrap())
    }

    /// Global feature: concat(class-token output, max-pool over patch
    /// outputs) of a normed [g+1, d] sequence output.
    pub fn global_feature(&self, encoded: &Tensor) -> Result<Tensor> {
        let tokens = encoded.shape()[0];
        let cls = ops::row(encoded, 0)?;
        let rest = ops::slice_rows(encoded, 1, tokens - 1)?;
        let pooled = ops::reduce(&rest, Reduce::Max, 0)?;
        ops::concat_last(&[&cls, &pooled])
    }
}

impl ParamGroup for Backbone {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.embedder
            .collect_params(&format!("{prefix}embedder."), out);
        self.pos_mlp
            .collect_params(&format!("{prefix}pos_mlp."), out);
        out.push((format!("{prefix}cls_token"), self.cls_token.clone()));
        out.push((format!("{prefix}mask_token"), self.mask_token.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}blocks.{i}."), out);
        }
        self.final_norm
            .collect_params(&format!("{prefix}final_norm."), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;
    use rand::SeedableRng;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            depth: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            drop_path_rate: 0.0,
            dropout: 0.0,
        }
    }

    fn const_seq(tokens: usize, dim: usize) -> Tensor {
        Tensor::param(
            &[tokens, dim],
            (0..tokens * dim)
                .map(|i| ((i * 31 % 17) as f64 - 8.0) * 0.1)
                .collect(),
        )
    }

    #[test]
    fn zero_sublayers_make_block_an_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let block = TransformerBlock::new(&tiny_cfg(), &mut rng);
        for (_, p) in block.attn.params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        for l in [&block.ffn_in, &block.ffn_out] {
            l.weight.set_data(&vec![0.0; l.weight.numel()]);
            if let Some(b) = &l.bias {
                b.set_data(&vec![0.0; b.numel()]);
            }
        }
        let x = const_seq(3, 8);
        let y = block.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let cfg = TransformerConfig {
            drop_path_rate: 0.2,
            dropout: 0.1,
            ..tiny_cfg()
        };
        let block = TransformerBlock::new(&cfg, &mut rng);
        let x = const_seq(4, 8);
        let y1 = block.forward(&x, &mut ForwardCtx::eval()).unwrap().to_vec();
        let y2 = block.forward(&x, &mut ForwardCtx::eval()).unwrap().to_vec();
        assert_eq!(y1, y2);
    }

    #[test]
    fn block_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let block = TransformerBlock::new(&tiny_cfg(), &mut rng);
        let x = const_seq(3, 8);
        let mut params = block.param_tensors();
        params.push(x.clone());
        let err = max_rel_err_fd(
            &params,
            || {
                let y = block.forward(&x, &mut ForwardCtx::eval())?;
                Ok(ops::sum_all(&ops::mul(&y, &y)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn token_permutation_permutes_outputs() {
        // attention has no positional preference: permuting patch tokens
        // permutes the outputs identically
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let block = TransformerBlock::new(&tiny_cfg(), &mut rng);
        let x = const_seq(5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = ops::index_rows(&x, &perm).unwrap();
        let y = block.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let yp = block.forward(&xp, &mut ForwardCtx::eval()).unwrap();
        let y_permuted = ops::index_rows(&y, &perm).unwrap();
        for (a, b) in y_permuted.to_vec().iter().zip(yp.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
