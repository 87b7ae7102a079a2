//! Discrete patch tokenizer trained as a small VAE: an edge-conv stack maps
//! patch embeddings to logits over a learned codebook, a Gumbel-softmax
//! relaxation keeps sampling differentiable, and a decoder (edge-conv stack,
//! coarse point head, folding layer) reconstructs each sub-cloud. Training
//! minimizes coarse+fine Chamfer distance plus a scheduled KL term against the
//! uniform prior over codewords.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::Manifest;
use crate::error::{Error, Result};
use crate::geometry::{group_patches, PatchSet, Point3, PointCloud};
use crate::nn::pointnet::{patch_to_tensor, MiniPointNet, MiniPointNetDims};
use crate::nn::{gumbel_softmax, Activation, EdgeConv, FoldingLayer, Linear, Mlp, ParamGroup};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::{gumbel_noise, RngHub};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvaeConfig {
    pub vocab_size: usize,
    pub code_dim: usize,
    pub embed_dim: usize,
    pub group_count: usize,
    pub group_size: usize,
    pub coarse_points: usize,
    pub knn_k: usize,
    pub embedder: MiniPointNetDims,
    pub tokenizer_pre: usize,
    pub tokenizer_channels: Vec<usize>,
    pub decoder_pre: usize,
    pub decoder_channels: Vec<usize>,
    pub decoder_feature_dim: usize,
    pub coarse_hidden: usize,
    pub folding_hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub kl_delay_steps: u64,
    pub kl_ramp_steps: u64,
    pub kl_weight_max: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub temp_decay_steps: u64,
    /// Multiplier on the Gumbel draws used during training. 1.0 is the plain
    /// relaxation; 0.0 trains on the noise-free tempered softmax.
    pub noise_scale: f64,
    pub log_every: u64,
}

impl DvaeConfig {
    pub fn schedules(&self) -> DvaeSchedules {
        DvaeSchedules {
            kl_delay_steps: self.kl_delay_steps,
            kl_ramp_steps: self.kl_ramp_steps,
            kl_weight_max: self.kl_weight_max,
            temp_start: self.temp_start,
            temp_end: self.temp_end,
            temp_decay_steps: self.temp_decay_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("dvae.vocab_size must be >= 2".into()));
        }
        if self.tokenizer_channels.is_empty() || self.decoder_channels.is_empty() {
            return Err(Error::Config("dvae edge-conv stacks need >= 1 layer".into()));
        }
        if self.embedder.out_dim != self.embed_dim {
            return Err(Error::Config(
                "dvae.embedder.out_dim must equal dvae.embed_dim".into(),
            ));
        }
        Ok(())
    }
}

/// KL weight ramps from 0 to its maximum after a delay; the Gumbel temperature
/// decays from start to end. Both use half-cosine interpolation and clamp at
/// their endpoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DvaeSchedules {
    pub kl_delay_steps: u64,
    pub kl_ramp_steps: u64,
    pub kl_weight_max: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub temp_decay_steps: u64,
}

impl DvaeSchedules {
    /// (kl_weight, temperature) at a step.
    pub fn at(&self, step: u64) -> (f64, f64) {
        let alpha = if step <= self.kl_delay_steps {
            0.0
        } else if step >= self.kl_delay_steps + self.kl_ramp_steps {
            self.kl_weight_max
        } else {
            let frac = (step - self.kl_delay_steps) as f64 / self.kl_ramp_steps as f64;
            self.kl_weight_max * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
        };
        let tau = if step >= self.temp_decay_steps {
            self.temp_end
        } else {
            let frac = step as f64 / self.temp_decay_steps as f64;
            self.temp_end
                + (self.temp_start - self.temp_end)
                    * 0.5
                    * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        (alpha, tau)
    }
}

/// Stack from the tokenizer/decoder recipe: a linear stem, a chain of dynamic
/// edge convolutions, and a linear head over the concatenation of every
/// conv output.
pub struct DgcnnStack {
    pub stem: Linear,
    pub convs: Vec<EdgeConv>,
    pub head: Linear,
}

impl DgcnnStack {
    pub fn new(
        input_dim: usize,
        stem_dim: usize,
        channels: &[usize],
        out_dim: usize,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let stem = Linear::new(input_dim, stem_dim, rng);
        let mut convs = Vec::with_capacity(channels.len());
        let mut c_in = stem_dim;
        for &c_out in channels {
            convs.push(EdgeConv::new(c_in, c_out, k, rng));
            c_in = c_out;
        }
        let concat_dim: usize = channels.iter().sum();
        let head = Linear::new(concat_dim, out_dim, rng);
        DgcnnStack { stem, convs, head }
    }

    /// [g, input_dim] -> [g, out_dim]; the kNN graph is rebuilt from the
    /// running features before each conv.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        let mut collected = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let graph = h.detached(false);
            h = conv.forward(&h, &graph)?;
            collected.push(h.clone());
        }
        let refs: Vec<&Tensor> = collected.iter().collect();
        self.head.forward(&ops::concat_last(&refs)?)
    }
}

impl ParamGroup for DgcnnStack {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.collect_params(&format!("{prefix}stem."), out);
        for (i, c) in self.convs.iter().enumerate() {
            c.collect_params(&format!("{prefix}convs.{i}."), out);
        }
        self.head.collect_params(&format!("{prefix}head."), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeMode {
    Soft,
    Hard,
}

/// Discrete token ids per patch; soft assignments are kept in training mode.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub soft: Option<Tensor>,
}

/// Decoder output: per-patch coarse and fine predictions, re-anchored at the
/// patch centers.
pub struct Decoded {
    pub coarse: Tensor, // [g, n_c, 3]
    pub fine: Tensor,   // [g, n, 3]
}

pub struct Dvae {
    pub config: DvaeConfig,
    pub embedder: MiniPointNet,
    pub tokenizer: DgcnnStack,
    pub codebook: Tensor, // [N, code_dim]
    pub decoder: DgcnnStack,
    pub coarse_head: Mlp,
    pub folding: FoldingLayer,
}

impl Dvae {
    pub fn new(cfg: &DvaeConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let embedder = MiniPointNet::new(&cfg.embedder, rng);
        let tokenizer = DgcnnStack::new(
            cfg.embed_dim,
            cfg.tokenizer_pre,
            &cfg.tokenizer_channels,
            cfg.vocab_size,
            cfg.knn_k,
            rng,
        );
        let limit = (1.0 / cfg.code_dim as f64).sqrt();
        let codebook = Tensor::uniform_param(&[cfg.vocab_size, cfg.code_dim], limit, rng);
        let decoder = DgcnnStack::new(
            cfg.code_dim,
            cfg.decoder_pre,
            &cfg.decoder_channels,
            cfg.decoder_feature_dim,
            cfg.knn_k,
            rng,
        );
        let coarse_head = Mlp::new(
            &[cfg.decoder_feature_dim, cfg.coarse_hidden, cfg.coarse_points * 3],
            Activation::Relu,
            rng,
        );
        let grid_size = (cfg.group_size as f64).sqrt().ceil() as usize;
        let folding = FoldingLayer::new(cfg.decoder_feature_dim, cfg.folding_hidden, grid_size, rng);
        Ok(Dvae {
            config: cfg.clone(),
            embedder,
            tokenizer,
            codebook,
            decoder,
            coarse_head,
            folding,
        })
    }

    pub fn group(&self, cloud: &PointCloud) -> Result<PatchSet> {
        group_patches(cloud, self.config.group_count, self.config.group_size)
    }

    /// Patch embeddings [g, embed_dim] from the tokenizer's own embedder.
    pub fn embed_patches(&self, patches: &PatchSet) -> Result<Tensor> {
        let mut feats = Vec::with_capacity(patches.group_count());
        for patch in &patches.patches {
            feats.push(self.embedder.forward(&patch_to_tensor(patch))?);
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        ops::stack(&refs)
    }

    /// Map patch embeddings to tokens. Soft mode applies the Gumbel-softmax
    /// relaxation and returns the differentiable convex combination of
    /// codebook rows; hard mode takes the argmax id and its codebook row.
    pub fn tokenize(
        &self,
        patch_embeddings: &Tensor,
        tau: f64,
        mode: TokenizeMode,
        noise: Option<&Tensor>,
    ) -> Result<(TokenSequence, Tensor)> {
        if tau <= 0.0 {
            return Err(Error::Domain(format!(
                "tokenize: temperature must be positive, got {tau}"
            )));
        }
        let logits = self.tokenizer.forward(patch_embeddings)?;
        let g = logits.shape()[0];
        let n = self.config.vocab_size;
        match mode {
            TokenizeMode::Soft => {
                let zeros;
                let noise = match noise {
                    Some(t) => t,
                    None => {
                        zeros = Tensor::zeros(&[g, n]);
                        &zeros
                    }
                };
                let assign = gumbel_softmax(&logits, tau, noise)?;
                let tokens = argmax_rows(&assign);
                let embeddings = ops::matmul(&assign, &self.codebook)?;
                Ok((
                    TokenSequence {
                        tokens,
                        soft: Some(assign),
                    },
                    embeddings,
                ))
            }
            TokenizeMode::Hard => {
                let tokens = argmax_rows(&logits);
                let embeddings = ops::index_rows(&self.codebook, &tokens)?;
                Ok((TokenSequence { tokens, soft: None }, embeddings))
            }
        }
    }

    /// Hard token ids for a patch set (used as pretraining targets once the
    /// tokenizer is frozen).
    pub fn hard_tokens(&self, patches: &PatchSet) -> Result<Vec<usize>> {
        let f = self.embed_patches(patches)?;
        let (seq, _) = self.tokenize(&f, 1.0, TokenizeMode::Hard, None)?;
        Ok(seq.tokens)
    }

    /// Reconstruct sub-clouds from token embeddings; outputs are translated by
    /// the patch centers.
    pub fn decode(&self, token_embeddings: &Tensor, centers: &[Point3]) -> Result<Decoded> {
        let g = token_embeddings.shape()[0];
        if centers.len() != g {
            return Err(Error::Shape(format!(
                "decode: {g} token embeddings but {} centers",
                centers.len()
            )));
        }
        let n = self.config.group_size;
        let nc = self.config.coarse_points;
        let feat = self.decoder.forward(token_embeddings)?;
        let coarse_flat = self.coarse_head.forward(&feat)?; // [g, nc*3]
        let mut coarse_rows = Vec::with_capacity(g);
        let mut fine_rows = Vec::with_capacity(g);
        for i in 0..g {
            let center = Tensor::constant(&[3], centers[i].to_vec());
            let c = ops::reshape(&ops::row(&coarse_flat, i)?, &[nc, 3])?;
            coarse_rows.push(ops::add(&c, &center)?);
            let folded = self.folding.forward(&ops::row(&feat, i)?)?;
            let fine = ops::slice_rows(&folded, 0, n)?;
            fine_rows.push(ops::add(&fine, &center)?);
        }
        let coarse_refs: Vec<&Tensor> = coarse_rows.iter().collect();
        let fine_refs: Vec<&Tensor> = fine_rows.iter().collect();
        Ok(Decoded {
            coarse: ops::stack(&coarse_refs)?,
            fine: ops::stack(&fine_refs)?,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut manifest = Manifest::new();
        manifest.insert_params("dvae.", &self.params());
        manifest.meta = serde_json::json!({
            "kind": "dvae",
            "config": serde_json::to_value(&self.config)?,
            "extra": extra_meta,
        });
        manifest.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Dvae> {
        let manifest = Manifest::load(path)?;
        let cfg: DvaeConfig = serde_json::from_value(manifest.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad dvae config in checkpoint: {e}")))?;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let dvae = Dvae::new(&cfg, &mut rng)?;
        manifest.load_params("dvae.", &dvae.params())?;
        Ok(dvae)
    }

    /// Freeze every parameter (tokenizer weights are fixed during
    /// pretraining).
    pub fn freeze(&self) {
        self.set_trainable(false);
    }
}

use rand::SeedableRng;

impl ParamGroup for Dvae {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.embedder
            .collect_params(&format!("{prefix}embedder."), out);
        self.tokenizer
            .collect_params(&format!("{prefix}tokenizer."), out);
        out.push((format!("{prefix}codebook"), self.codebook.clone()));
        self.decoder
            .collect_params(&format!("{prefix}decoder."), out);
        self.coarse_head
            .collect_params(&format!("{prefix}coarse_head."), out);
        self.folding
            .collect_params(&format!("{prefix}folding."), out);
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let sh = t.shape();
    let (rows, cols) = (sh[0], sh[1]);
    let d = t.data();
    (0..rows)
        .map(|r| {
            let mut best = f64::NEG_INFINITY;
            let mut bj = 0;
            for j in 0..cols {
                let v = d[r * cols + j];
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            bj
        })
        .collect()
}

/// Mean KL divergence of simplex rows against the uniform distribution:
/// mean_rows(sum_j q_j ln q_j) + ln N. Zero for uniform rows, ln N for
/// one-hot rows.
pub fn kl_to_uniform(soft_assignments: &Tensor) -> Result<Tensor> {
    let sh = soft_assignments.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!(
            "kl_to_uniform: expected [g, N], got {:?}",
            sh
        )));
    }
    let (g, n) = (sh[0], sh[1]);
    {
        let d = soft_assignments.data();
        for r in 0..g {
            let s: f64 = d[r * n..(r + 1) * n].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Simplex(format!(
                    "kl_to_uniform: row {r} sums to {s}"
                )));
            }
        }
    }
    let neg_entropy = ops::scale(&ops::sum_all(&ops::xlnx(soft_assignments)?), 1.0 / g as f64);
    Ok(ops::add_scalar(&neg_entropy, (n as f64).ln()))
}

pub struct DvaeLossParts {
    pub total: Tensor,
    pub chamfer_fine: f64,
    pub chamfer_coarse: f64,
    pub kl: f64,
}

/// Reconstruction objective: mean per-patch Chamfer distance for both the
/// fine and coarse predictions, plus `alpha` times the KL term.
pub fn dvae_loss(
    decoded: &Decoded,
    ground_truth: &PatchSet,
    soft_assignments: &Tensor,
    alpha: f64,
) -> Result<DvaeLossParts> {
    if alpha < 0.0 {
        return Err(Error::Domain("dvae_loss: alpha must be >= 0".into()));
    }
    let g = ground_truth.group_count();
    let n = ground_truth.patch_size();
    let nc = decoded.coarse.shape()[1];
    let mut fine_terms = Vec::with_capacity(g);
    let mut coarse_terms = Vec::with_capacity(g);
    for i in 0..g {
        // ground truth in absolute coordinates, matching the re-anchored
        // decoder outputs
        let gt: Vec<f64> = ground_truth.patches[i]
            .iter()
            .map(|p| {
                let c = ground_truth.centers[i];
                [p[0] + c[0], p[1] + c[1], p[2] + c[2]]
            })
            .flatten()
            .collect();
        let gt = Tensor::constant(&[n, 3], gt);
        let fine_i = ops::reshape(&ops::row(&decoded.fine, i)?, &[decoded.fine.shape()[1], 3])?;
        let coarse_i = ops::reshape(&ops::row(&decoded.coarse, i)?, &[nc, 3])?;
        fine_terms.push(ops::chamfer_l1(&fine_i, &gt)?);
        coarse_terms.push(ops::chamfer_l1(&coarse_i, &gt)?);
    }
    let fine_refs: Vec<&Tensor> = fine_terms.iter().collect();
    let coarse_refs: Vec<&Tensor> = coarse_terms.iter().collect();
    let fine = ops::mean_all(&ops::stack(&fine_refs)?);
    let coarse = ops::mean_all(&ops::stack(&coarse_refs)?);
    let kl = kl_to_uniform(soft_assignments)?;
    let mut total = ops::add(&fine, &coarse)?;
    if alpha > 0.0 {
        total = ops::add(&total, &ops::scale(&kl, alpha))?;
    }
    Ok(DvaeLossParts {
        chamfer_fine: fine.item(),
        chamfer_coarse: coarse.item(),
        kl: kl.item(),
        total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DvaeLogRow {
    pub step: u64,
    pub lr: f64,
    pub alpha: f64,
    pub tau: f64,
    pub chamfer_fine: f64,
    pub chamfer_coarse: f64,
    pub kl: f64,
    pub tokens_used: usize,
}

pub struct DvaeTrainResult {
    pub dvae: Dvae,
    pub log: Vec<DvaeLogRow>,
}

/// Full training loop over a corpus of clouds. Deterministic given the hub's
/// root seed. Aborts with a numerics error if the loss stops being finite.
pub fn train_dvae(corpus: &[PointCloud], cfg: &DvaeConfig, hub: &RngHub) -> Result<DvaeTrainResult> {
    train_dvae_with_abort(corpus, cfg, hub, None)
}

/// Like `train_dvae`, but saves the last parameter state to
/// `abort_checkpoint` before returning a numerics error.
pub fn train_dvae_with_abort(
    corpus: &[PointCloud],
    cfg: &DvaeConfig,
    hub: &RngHub,
    abort_checkpoint: Option<&Path>,
) -> Result<DvaeTrainResult> {
    if corpus.is_empty() {
        return Err(Error::Size("train_dvae: empty corpus".into()));
    }
    let mut init_rng = hub.stream("dvae-init");
    let mut gumbel_rng = hub.stream("dvae-gumbel");
    let mut batch_rng = hub.stream("dvae-batch");

    let dvae = Dvae::new(cfg, &mut init_rng)?;
    let patchsets: Vec<PatchSet> = corpus
        .iter()
        .map(|c| dvae.group(c))
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(dvae.param_tensors(), cfg.lr, cfg.weight_decay);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_steps, cfg.steps);
    let schedules = cfg.schedules();
    let mut log = Vec::new();

    let g = cfg.group_count;
    let n_vocab = cfg.vocab_size;
    for step in 0..cfg.steps {
        let (alpha, tau) = schedules.at(step);
        opt.set_lr(schedule.at(step));

        let batch: Vec<usize> = if corpus.len() >= cfg.batch_size {
            crate::rng::sample_without_replacement(&mut batch_rng, corpus.len(), cfg.batch_size)
        } else {
            (0..cfg.batch_size)
                .map(|_| batch_rng.random_range(0..corpus.len()))
                .collect()
        };

        let mut sample_losses = Vec::with_capacity(batch.len());
        let mut fine_sum = 0.0;
        let mut coarse_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut used = std::collections::BTreeSet::new();
        for &ci in &batch {
            let patches = &patchsets[ci];
            let f = dvae.embed_patches(patches)?;
            let mut draws = gumbel_noise(&mut gumbel_rng, g * n_vocab);
            if cfg.noise_scale != 1.0 {
                draws.iter_mut().for_each(|v| *v *= cfg.noise_scale);
            }
            let noise = Tensor::constant(&[g, n_vocab], draws);
            let (seq, token_embeds) = dvae.tokenize(&f, tau, TokenizeMode::Soft, Some(&noise))?;
            let decoded = dvae.decode(&token_embeds, &patches.centers)?;
            let parts = dvae_loss(&decoded, patches, seq.soft.as_ref().unwrap(), alpha)?;
            fine_sum += parts.chamfer_fine;
            coarse_sum += parts.chamfer_coarse;
            kl_sum += parts.kl;
            used.extend(seq.tokens.iter().copied());
            sample_losses.push(parts.total);
        }
        let refs: Vec<&Tensor> = sample_losses.iter().collect();
        let loss = ops::mean_all(&ops::stack(&refs)?);
        if !loss.item().is_finite() {
            if let Some(path) = abort_checkpoint {
                let _ = dvae.save_checkpoint(
                    path,
                    serde_json::json!({"aborted_at_step": step}),
                );
            }
            return Err(Error::Numerics(format!(
                "dvae training diverged at step {step}: loss = {}",
                loss.item()
            )));
        }
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let b = batch.len() as f64;
            log.push(DvaeLogRow {
                step,
                lr: opt.lr,
                alpha,
                tau,
                chamfer_fine: fine_sum / b,
                chamfer_coarse: coarse_sum / b,
                kl: kl_sum / b,
                tokens_used: used.len(),
            });
        }
    }
    Ok(DvaeTrainResult { dvae, log })
}

/// Distinct hard tokens used across a corpus (collapse diagnostic).
pub fn token_histogram(dvae: &Dvae, corpus: &[PointCloud]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; dvae.config.vocab_size];
    for cloud in corpus {
        let patches = dvae.group(cloud)?;
        for t in dvae.hard_tokens(&patches)? {
            counts[t] += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gradcheck::max_rel_err_fd;

    pub(crate) fn toy_config() -> DvaeConfig {
        DvaeConfig {
            vocab_size: 16,
            code_dim: 8,
            embed_dim: 10,
            group_count: 4,
            group_size: 6,
            coarse_points: 3,
            knn_k: 2,
            embedder: MiniPointNetDims {
                point_hidden: vec![8, 8],
                out_hidden: vec![8],
                out_dim: 10,
            },
            tokenizer_pre: 8,
            tokenizer_channels: vec![8, 12],
            decoder_pre: 8,
            decoder_channels: vec![8, 12],
            decoder_feature_dim: 8,
            coarse_hidden: 12,
            folding_hidden: 12,
            steps: 5,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 1,
            kl_delay_steps: 1,
            kl_ramp_steps: 2,
            kl_weight_max: 0.1,
            temp_start: 1.0,
            temp_end: 0.0625,
            temp_decay_steps: 4,
            noise_scale: 1.0,
            log_every: 1,
        }
    }

    fn sample_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn schedules_hit_endpoints_exactly() {
        let s = DvaeSchedules {
            kl_delay_steps: 50,
            kl_ramp_steps: 200,
            kl_weight_max: 0.1,
            temp_start: 1.0,
            temp_end: 0.0625,
            temp_decay_steps: 250,
        };
        assert_eq!(s.at(0), (0.0, 1.0));
        assert_eq!(s.at(50).0, 0.0);
        assert_eq!(s.at(250).0, 0.1);
        assert_eq!(s.at(250).1, 0.0625);
        assert_eq!(s.at(10_000), (0.1, 0.0625));
        // alpha is monotone non-decreasing sampled densely
        let mut last = -1.0;
        for step in (0..400).step_by(2) {
            let (a, _) = s.at(step);
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn kl_examples() {
        let uniform = Tensor::param(&[2, 4], vec![0.25; 8]);
        assert!(kl_to_uniform(&uniform).unwrap().item().abs() < 1e-12);

        let row = Tensor::param(&[1, 2], vec![0.75, 0.25]);
        let expected = 0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln() + 2.0f64.ln();
        assert!((kl_to_uniform(&row).unwrap().item() - expected).abs() < 1e-12);
        // hand value from direct summation
        assert!((expected - 0.13081).abs() < 1e-4);

        let onehot = Tensor::param(&[1, 8], {
            let mut v = vec![0.0; 8];
            v[3] = 1.0;
            v
        });
        assert!((kl_to_uniform(&onehot).unwrap().item() - 8.0f64.ln()).abs() < 1e-12);

        let bad = Tensor::param(&[1, 2], vec![0.9, 0.3]);
        assert!(matches!(kl_to_uniform(&bad), Err(Error::Simplex(_))));
    }

    #[test]
    fn kl_bounds_hold_for_random_simplex_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..30 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let t = Tensor::param(&[1, 6], row);
            let kl = kl_to_uniform(&t).unwrap().item();
            assert!(kl >= -1e-12 && kl <= 6.0f64.ln() + 1e-12);
        }
    }

    #[test]
    fn tokenize_contracts() {
        let cfg = toy_config();
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let dvae = Dvae::new(&cfg, &mut rng).unwrap();
        let cloud = sample_cloud(1, 32);
        let patches = dvae.group(&cloud).unwrap();
        let f = dvae.embed_patches(&patches).unwrap();

        // hard mode deterministic
        let (a, ea) = dvae.tokenize(&f, 1.0, TokenizeMode::Hard, None).unwrap();
        let (b, eb) = dvae.tokenize(&f, 1.0, TokenizeMode::Hard, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(ea.to_vec(), eb.to_vec());

        // soft rows sum to 1
        let (soft, _) = dvae.tokenize(&f, 0.7, TokenizeMode::Soft, None).unwrap();
        let assign = soft.soft.unwrap();
        let d = assign.data();
        for r in 0..cfg.group_count {
            let s: f64 = d[r * cfg.vocab_size..(r + 1) * cfg.vocab_size].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        drop(d);

        // soft embedding stays inside the codebook's convex hull per column
        let (_, emb) = dvae.tokenize(&f, 0.7, TokenizeMode::Soft, None).unwrap();
        let code = dvae.codebook.data();
        for col in 0..cfg.code_dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in 0..cfg.vocab_size {
                lo = lo.min(code[r * cfg.code_dim + col]);
                hi = hi.max(code[r * cfg.code_dim + col]);
            }
            for r in 0..cfg.group_count {
                let v = emb.get(r * cfg.code_dim + col);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        // low temperature with zero noise converges to the argmax codebook
        // row; force a controlled logit gap through the tokenizer head
        let head = &dvae.tokenizer.head;
        head.weight.set_data(&vec![0.0; head.weight.numel()]);
        let mut bias = vec![0.0; cfg.vocab_size];
        bias[5] = 2.0;
        head.bias.as_ref().unwrap().set_data(&bias);
        let (seq, emb) = dvae.tokenize(&f, 0.01, TokenizeMode::Soft, None).unwrap();
        for (r, &tok) in seq.tokens.iter().enumerate() {
            assert_eq!(tok, 5);
            for col in 0..cfg.code_dim {
                let want = code[tok * cfg.code_dim + col];
                let got = emb.get(r * cfg.code_dim + col);
                let denom = want.abs().max(1e-3);
                assert!(
                    ((got - want) / denom).abs() < 1e-3,
                    "row {r} col {col}: {got} vs {want}"
                );
            }
        }

        assert!(matches!(
            dvae.tokenize(&f, 0.0, TokenizeMode::Soft, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn decode_shapes_and_zero_weight_behavior() {
        let cfg = toy_config();
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let dvae = Dvae::new(&cfg, &mut rng).unwrap();
        let embeds = Tensor::param(&[cfg.group_count, cfg.code_dim], vec![0.1; cfg.group_count * cfg.code_dim]);
        let centers: Vec<Point3> = (0..cfg.group_count)
            .map(|i| [i as f64, 0.0, -(i as f64)])
            .collect();
        let decoded = dvae.decode(&embeds, &centers).unwrap();
        assert_eq!(decoded.coarse.shape(), &[cfg.group_count, cfg.coarse_points, 3]);
        assert_eq!(decoded.fine.shape(), &[cfg.group_count, cfg.group_size, 3]);

        // zero decoder weights: all fine points land on the folding bias plus
        // the patch center
        for (_, p) in dvae.decoder.params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        for (_, p) in dvae.folding.params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let bias = dvae.folding.mlp.layers.last().unwrap().bias.as_ref().unwrap();
        bias.set_data(&[0.5, 0.0, -0.5]);
        let decoded = dvae.decode(&embeds, &centers).unwrap();
        for i in 0..cfg.group_count {
            for j in 0..cfg.group_size {
                let base = (i * cfg.group_size + j) * 3;
                assert_eq!(decoded.fine.get(base), 0.5 + centers[i][0]);
                assert_eq!(decoded.fine.get(base + 1), centers[i][1]);
                assert_eq!(decoded.fine.get(base + 2), -0.5 + centers[i][2]);
            }
        }
    }

    #[test]
    fn decode_gradient_wrt_token_embeddings() {
        let mut cfg = toy_config();
        cfg.group_count = 3;
        cfg.group_size = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let dvae = Dvae::new(&cfg, &mut rng).unwrap();
        let embeds = Tensor::param(
            &[3, cfg.code_dim],
            (0..3 * cfg.code_dim).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect(),
        );
        let centers = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let err = max_rel_err_fd(
            &[embeds.clone()],
            || {
                let d = dvae.decode(&embeds, &centers)?;
                Ok(ops::sum_all(&ops::mul(&d.fine, &d.fine)?))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn loss_examples_and_gradient() {
        let cfg = toy_config();
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let dvae = Dvae::new(&cfg, &mut rng).unwrap();
        let cloud = sample_cloud(2, 32);
        let patches = dvae.group(&cloud).unwrap();

        // perfect reconstruction with alpha 0 gives exactly zero
        let g = cfg.group_count;
        let n = cfg.group_size;
        let mut fine = Vec::new();
        for i in 0..g {
            for p in &patches.patches[i] {
                let c = patches.centers[i];
                fine.extend_from_slice(&[p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
            }
        }
        let mut coarse_data: Vec<f64> = Vec::new();
        for i in 0..g {
            let c = patches.centers[i];
            for j in 0..cfg.coarse_points {
                let p = patches.patches[i][j % n];
                coarse_data.extend_from_slice(&[p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
            }
        }
        let perfect = Decoded {
            fine: Tensor::param(&[g, n, 3], fine),
            coarse: Tensor::param(&[g, cfg.coarse_points, 3], coarse_data),
        };
        let uniform = Tensor::param(&[g, cfg.vocab_size], vec![1.0 / cfg.vocab_size as f64; g * cfg.vocab_size]);
        let parts = dvae_loss(&perfect, &patches, &uniform, 0.0).unwrap();
        assert!(parts.chamfer_fine.abs() < 1e-12);
        // coarse uses a subset of ground-truth points, so both directions hit
        // an exact match one way; the other direction may be positive
        assert!(parts.total.item() >= 0.0);

        // alpha = 0 equals the sum of the two chamfer terms
        let f = dvae.embed_patches(&patches).unwrap();
        let (seq, emb) = dvae.tokenize(&f, 0.8, TokenizeMode::Soft, None).unwrap();
        let decoded = dvae.decode(&emb, &patches.centers).unwrap();
        let p0 = dvae_loss(&decoded, &patches, seq.soft.as_ref().unwrap(), 0.0).unwrap();
        assert!((p0.total.item() - (p0.chamfer_fine + p0.chamfer_coarse)).abs() < 1e-12);

        // gradient through the decoder + loss on a tiny instance, driven by
        // leaf token embeddings and leaf assignment logits (well separated so
        // the dynamic knn graph and chamfer assignments stay stable under the
        // finite-difference perturbation)
        let mut cfg2 = toy_config();
        cfg2.group_count = 2;
        cfg2.group_size = 4;
        let mut rng2 = ChaCha12Rng::seed_from_u64(28);
        let dvae2 = Dvae::new(&cfg2, &mut rng2).unwrap();
        let cloud2 = sample_cloud(3, 16);
        let patches2 = dvae2.group(&cloud2).unwrap();
        let embeds = Tensor::uniform_param(&[2, cfg2.code_dim], 1.0, &mut rng2);
        let logits = Tensor::uniform_param(&[2, cfg2.vocab_size], 1.5, &mut rng2);
        let mut params = dvae2.decoder.param_tensors();
        params.extend(dvae2.coarse_head.param_tensors());
        params.extend(dvae2.folding.param_tensors());
        params.push(embeds.clone());
        params.push(logits.clone());
        let err = max_rel_err_fd(
            &params,
            || {
                let assign = ops::softmax(&logits, 1)?;
                let d = dvae2.decode(&embeds, &patches2.centers)?;
                Ok(dvae_loss(&d, &patches2, &assign, 0.05)?.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn lr_zero_training_changes_nothing() {
        let mut cfg = toy_config();
        cfg.lr = 0.0;
        cfg.warmup_steps = 0;
        cfg.steps = 3;
        let corpus: Vec<PointCloud> = (0..3).map(|i| sample_cloud(i, 24)).collect();
        let hub = RngHub::new(99);
        let before = Dvae::new(&cfg, &mut hub.stream("dvae-init")).unwrap();
        let snapshot: Vec<Vec<f64>> = before.param_tensors().iter().map(|p| p.to_vec()).collect();
        let result = train_dvae(&corpus, &cfg, &hub).unwrap();
        for (p, old) in result.dvae.param_tensors().iter().zip(&snapshot) {
            assert_eq!(&p.to_vec(), old);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_hard_tokens() {
        let cfg = toy_config();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let dvae = Dvae::new(&cfg, &mut rng).unwrap();
        let cloud = sample_cloud(5, 32);
        let patches = dvae.group(&cloud).unwrap();
        let tokens = dvae.hard_tokens(&patches).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dvae.ckpt");
        dvae.save_checkpoint(&path, serde_json::Value::Null).unwrap();
        let restored = Dvae::load_checkpoint(&path).unwrap();
        assert_eq!(restored.hard_tokens(&patches).unwrap(), tokens);
    }
}
