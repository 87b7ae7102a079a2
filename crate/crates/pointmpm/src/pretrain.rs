//! Masked-token pretraining: block/random mask generation, input corruption
//! with a learnable mask token, cross-entropy on the frozen tokenizer's ids at
//! masked positions, patch mixing for virtual samples, and an auxiliary
//! momentum-contrast loss against a FIFO memory bank of past keys.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::Manifest;
use crate::data::{augment_scale_translate, ScaleTranslateRange};
use crate::dvae::Dvae;
use crate::error::{Error, Result};
use crate::geometry::{group_patches, knn, PatchSet, Point3, PointCloud};
use crate::nn::pointnet::MiniPointNetDims;
use crate::nn::{Activation, Backbone, ForwardCtx, Linear, Mlp, ParamGroup, TransformerConfig};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::{sample_without_replacement, RngHub};
use crate::tensor::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub group_count: usize,
    pub group_size: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    /// Weight of the contrastive loss relative to the token loss.
    pub moco_weight: f64,
    pub bank_size: usize,
    pub momentum: f64,
    pub moco_temperature: f64,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub augment: bool,
    pub share_patch_embedder: bool,
    pub log_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Block,
    Rand,
}

/// Masked patch indices (sorted) plus how they were chosen.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub block_seed_index: Option<usize>,
    pub neighbor_count: Option<usize>,
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

fn mask_count(g: usize, ratio: f64) -> Result<usize> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Ratio(format!(
            "mask ratio {ratio} must lie strictly inside (0,1)"
        )));
    }
    let count = (ratio * g as f64).floor() as usize;
    if count < 1 {
        return Err(Error::Ratio(format!(
            "mask ratio {ratio} selects no patches out of {g}"
        )));
    }
    Ok(count)
}

/// Block mask: a seed patch plus its floor(r*g)-1 nearest patch centers form
/// one contiguous masked region.
pub fn make_block_mask(
    centers: &[Point3],
    ratio: f64,
    seed_index: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> Result<MaskSpec> {
    let g = centers.len();
    let count = mask_count(g, ratio)?;
    let seed = match seed_index {
        Some(s) if s < g => s,
        Some(s) => {
            return Err(Error::Size(format!(
                "block mask seed {s} out of range for {g} patches"
            )))
        }
        None => rng.random_range(0..g),
    };
    let mut masked = knn(&[centers[seed]], centers, count)?.remove(0);
    masked.sort_unstable();
    Ok(MaskSpec {
        masked,
        strategy: MaskStrategy::Block,
        ratio,
        block_seed_index: Some(seed),
        neighbor_count: Some(count - 1),
    })
}

/// Random mask: floor(r*g) indices drawn uniformly without replacement.
pub fn make_rand_mask(g: usize, ratio: f64, rng: &mut ChaCha12Rng) -> Result<MaskSpec> {
    let count = mask_count(g, ratio)?;
    let mut masked = sample_without_replacement(rng, g, count);
    masked.sort_unstable();
    Ok(MaskSpec {
        masked,
        strategy: MaskStrategy::Rand,
        ratio,
        block_seed_index: None,
        neighbor_count: None,
    })
}

/// How a virtual sample was assembled from two parents.
#[derive(Debug, Clone)]
pub struct MixSpec {
    /// Batch index of parent B (parent A is the sample's own index).
    pub partner_index: usize,
    /// Requested fraction of patches taken from parent A.
    pub mix_ratio: f64,
    /// true = patch i comes from parent A.
    pub selector: Vec<bool>,
}

impl MixSpec {
    pub fn realized_ratio(&self) -> f64 {
        let taken = self.selector.iter().filter(|s| **s).count();
        taken as f64 / self.selector.len() as f64
    }
}

/// Mix two patch sets index-wise into a virtual sample: each position keeps
/// either A's or B's (center, normalized patch) pair. Normalization already
/// removed absolute positions, so no alignment is needed.
pub fn point_patch_mix(
    a: &PatchSet,
    b: &PatchSet,
    partner_index: usize,
    r_mix: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(PatchSet, MixSpec)> {
    let g = a.group_count();
    if b.group_count() != g || a.patch_size() != b.patch_size() {
        return Err(Error::Shape(format!(
            "point_patch_mix: incompatible patch sets ({}x{} vs {}x{})",
            g,
            a.patch_size(),
            b.group_count(),
            b.patch_size()
        )));
    }
    if !(0.0..=1.0).contains(&r_mix) {
        return Err(Error::Ratio(format!("mix ratio {r_mix} outside [0,1]")));
    }
    let take_a = (r_mix * g as f64).round().min(g as f64) as usize;
    let mut selector = vec![false; g];
    for i in sample_without_replacement(rng, g, take_a) {
        selector[i] = true;
    }
    let mut centers = Vec::with_capacity(g);
    let mut patches = Vec::with_capacity(g);
    let mut source_indices = Vec::with_capacity(g);
    for i in 0..g {
        let src = if selector[i] { a } else { b };
        centers.push(src.centers[i]);
        patches.push(src.patches[i].clone());
        source_indices.push(src.source_indices[i].clone());
    }
    Ok((
        PatchSet {
            centers,
            patches,
            source_indices,
        },
        MixSpec {
            partner_index,
            mix_ratio: r_mix,
            selector,
        },
    ))
}

/// Cross-entropy restricted to masked positions: per-patch token logits are
/// gathered at the mask and scored against the frozen tokenizer's ids there.
/// Unmasked positions contribute nothing.
pub fn mpm_loss(logits: &Tensor, targets: &[usize], mask: &MaskSpec) -> Result<Tensor> {
    if mask.is_empty() {
        return Err(Error::Ratio("mpm_loss: empty mask".into()));
    }
    if logits.shape()[0] != targets.len() {
        return Err(Error::Shape(format!(
            "mpm_loss: {} logit rows but {} targets",
            logits.shape()[0],
            targets.len()
        )));
    }
    let masked_logits = ops::index_rows(logits, &mask.masked)?;
    let masked_targets: Vec<usize> = mask.masked.iter().map(|&i| targets[i]).collect();
    ops::cross_entropy_logits(&masked_logits, &masked_targets)
}

/// Fixed-capacity FIFO queue of unit-norm key vectors.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub dim: usize,
    pub capacity: usize,
    entries: Vec<Vec<f64>>,
    pub cursor: usize,
    pub total_enqueued: u64,
}

impl MemoryBank {
    pub fn new(dim: usize, capacity: usize) -> Self {
        MemoryBank {
            dim,
            capacity,
            entries: Vec::new(),
            cursor: 0,
            total_enqueued: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Normalize and store a batch of keys, overwriting the oldest entries
    /// once the queue is full.
    pub fn enqueue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        if keys.len() > self.capacity {
            return Err(Error::Size(format!(
                "bank_enqueue: batch of {} exceeds capacity {}",
                keys.len(),
                self.capacity
            )));
        }
        for key in keys {
            if key.len() != self.dim {
                return Err(Error::Shape(format!(
                    "bank_enqueue: key dim {} expected {}",
                    key.len(),
                    self.dim
                )));
            }
            let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Norm("bank_enqueue: zero-norm key".into()));
            }
            let unit: Vec<f64> = key.iter().map(|v| v / norm).collect();
            if self.entries.len() < self.capacity {
                self.entries.push(unit);
            } else {
                self.entries[self.cursor] = unit;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.total_enqueued += 1;
        }
        Ok(())
    }

    /// Bank contents as a [dim, len] constant for similarity products.
    fn negatives_transposed(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let l = self.entries.len();
        let mut data = vec![0.0; self.dim * l];
        for (j, e) in self.entries.iter().enumerate() {
            for (i, v) in e.iter().enumerate() {
                data[i * l + j] = *v;
            }
        }
        Some(Tensor::constant(&[self.dim, l], data))
    }

    fn to_flat(&self) -> (Vec<usize>, Vec<f64>) {
        let flat: Vec<f64> = self.entries.iter().flatten().copied().collect();
        (vec![self.entries.len(), self.dim], flat)
    }

    fn from_flat(dim: usize, capacity: usize, shape: &[usize], flat: &[f64], cursor: usize, total: u64) -> Self {
        let entries = flat.chunks(dim.max(1)).map(|c| c.to_vec()).collect();
        let _ = shape;
        MemoryBank {
            dim,
            capacity,
            entries,
            cursor,
            total_enqueued: total,
        }
    }
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::Norm(format!("{name} has norm {norm}, expected 1")));
    }
    Ok(())
}

/// l2-normalize a feature vector in-graph.
pub fn unit_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = ops::sqrt(&ops::sum_all(&ops::mul(z, z)?))?;
    ops::div(z, &norm)
}

/// Two-positive contrastive loss for a mixed query: each positive is scored
/// against itself plus every bank entry, and the two terms are weighted by
/// the mixing ratio. With `r_mix = 1` this is plain single-positive InfoNCE.
pub fn moco_loss(
    q: &Tensor,
    k_pos_1: &[f64],
    k_pos_2: &[f64],
    bank: &MemoryBank,
    r_mix: f64,
    temperature: f64,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "moco_loss: temperature {temperature} must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&r_mix) {
        return Err(Error::Ratio(format!("moco_loss: r_mix {r_mix} outside [0,1]")));
    }
    check_unit("query", &q.data())?;
    check_unit("first positive", k_pos_1)?;
    check_unit("second positive", k_pos_2)?;
    let dp = q.numel();
    let q_row = ops::reshape(q, &[1, dp])?;
    let negs = bank.negatives_transposed();
    let term = |k: &[f64]| -> Result<Tensor> {
        let k_col = Tensor::constant(&[dp, 1], k.to_vec());
        let pos = ops::matmul(&q_row, &k_col)?; // [1,1]
        let logits = match &negs {
            Some(nt) => {
                let neg = ops::matmul(&q_row, nt)?; // [1,L]
                ops::concat_last(&[&pos, &neg])?
            }
            None => pos,
        };
        ops::cross_entropy_logits(&ops::scale(&logits, 1.0 / temperature), &[0])
    };
    if r_mix >= 1.0 {
        return term(k_pos_1);
    }
    if r_mix <= 0.0 {
        return term(k_pos_2);
    }
    let t1 = ops::scale(&term(k_pos_1)?, r_mix);
    let t2 = ops::scale(&term(k_pos_2)?, 1.0 - r_mix);
    ops::add(&t1, &t2)
}

/// shadow <- m * shadow + (1-m) * online, elementwise over paired parameter
/// lists.
pub fn momentum_update(
    online: &[(String, Tensor)],
    shadow: &[(String, Tensor)],
    m: f64,
) -> Result<()> {
    if online.len() != shadow.len() {
        return Err(Error::Shape(format!(
            "momentum_update: {} online vs {} shadow parameters",
            online.len(),
            shadow.len()
        )));
    }
    for ((_, o), (_, s)) in online.iter().zip(shadow) {
        if o.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "momentum_update: shape {:?} vs {:?}",
                o.shape(),
                s.shape()
            )));
        }
        let od = o.to_vec();
        s.update_data(|i, x| m * x + (1.0 - m) * od[i]);
    }
    Ok(())
}

/// Online encoder plus its two heads: per-patch token logits for the masked
/// prediction task and a projection for contrastive features.
pub struct PretrainModel {
    pub backbone: Backbone,
    pub token_head: Linear,
    pub proj_head: Mlp,
}

impl PretrainModel {
    pub fn new(
        model_cfg: &TransformerConfig,
        embedder_dims: &MiniPointNetDims,
        pos_hidden: usize,
        vocab_size: usize,
        proj_hidden: usize,
        proj_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let backbone = Backbone::new(model_cfg, embedder_dims, pos_hidden, rng)?;
        let d = model_cfg.model_dim;
        Ok(PretrainModel {
            backbone,
            token_head: Linear::new(d, vocab_size, rng),
            proj_head: Mlp::new(&[2 * d, proj_hidden, proj_dim], Activation::Relu, rng),
        })
    }

    /// Forward a (possibly corrupted) patch set; returns per-patch token
    /// logits [g, N] and the normalized contrastive query [proj_dim].
    pub fn forward(
        &self,
        patches: &PatchSet,
        mask: Option<&MaskSpec>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Tensor)> {
        let (f, pos) = self.backbone.embed_patches(patches)?;
        let masked = mask.map(|m| m.masked.as_slice());
        let seq = self.backbone.sequence(&f, &pos, masked)?;
        let encoded = self.backbone.encode(&seq, ctx)?;
        let g = patches.group_count();
        let patch_rows = ops::slice_rows(&encoded, 1, g)?;
        let logits = self.token_head.forward(&patch_rows)?;
        let global = self.backbone.global_feature(&encoded)?;
        let q = unit_normalize(&self.proj_head.forward(&global)?)?;
        Ok((logits, q))
    }
}

impl ParamGroup for PretrainModel {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone
            .collect_params(&format!("{prefix}backbone."), out);
        self.token_head
            .collect_params(&format!("{prefix}token_head."), out);
        self.proj_head
            .collect_params(&format!("{prefix}proj_head."), out);
    }
}

/// Slowly-updated mirror of the online encoder and projection head. Its
/// parameters never receive gradients; keys come from uncorrupted inputs.
pub struct MomentumEncoder {
    pub backbone: Backbone,
    pub proj_head: Mlp,
    pub momentum: f64,
}

impl MomentumEncoder {
    /// Structural copy of the online model with identical initial values.
    pub fn mirror_of(model: &PretrainModel, momentum: f64) -> Result<Self> {
        let mut scratch = ChaCha12Rng::seed_from_u64(0);
        let dims = MiniPointNetDims {
            point_hidden: model
                .backbone
                .embedder
                .point_mlp
                .layers
                .iter()
                .map(|l| l.out_dim())
                .collect(),
            out_hidden: model
                .backbone
                .embedder
                .out_mlp
                .layers
                .iter()
                .take(model.backbone.embedder.out_mlp.layers.len() - 1)
                .map(|l| l.out_dim())
                .collect(),
            out_dim: model.backbone.embedder.out_dim(),
        };
        let pos_hidden = model.backbone.pos_mlp.layers[0].out_dim();
        let backbone = Backbone::new(&model.backbone.config, &dims, pos_hidden, &mut scratch)?;
        let proj_dims: Vec<usize> = std::iter::once(model.proj_head.layers[0].in_dim())
            .chain(model.proj_head.layers.iter().map(|l| l.out_dim()))
            .collect();
        let proj_head = Mlp::new(&proj_dims, Activation::Relu, &mut scratch);
        let me = MomentumEncoder {
            backbone,
            proj_head,
            momentum,
        };
        // copy the online values, then freeze
        let online = Self::online_params(model);
        let shadow = me.params();
        momentum_update(&online, &shadow, 0.0)?;
        me.set_trainable(false);
        Ok(me)
    }

    /// The subset of online parameters this encoder mirrors (backbone +
    /// projection head; the token head has no shadow).
    pub fn online_params(model: &PretrainModel) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        model.backbone.collect_params("backbone.", &mut out);
        model.proj_head.collect_params("proj_head.", &mut out);
        out
    }

    /// Contrastive key for an uncorrupted, unmixed sample (pure eval-mode
    /// forward; the result carries no gradient).
    pub fn key(&self, patches: &PatchSet) -> Result<Vec<f64>> {
        let mut ctx = ForwardCtx::eval();
        let (f, pos) = self.backbone.embed_patches(patches)?;
        let seq = self.backbone.sequence(&f, &pos, None)?;
        let encoded = self.backbone.encode(&seq, &mut ctx)?;
        let global = self.backbone.global_feature(&encoded)?;
        let k = unit_normalize(&self.proj_head.forward(&global)?)?;
        Ok(k.to_vec())
    }

    pub fn update_from(&self, model: &PretrainModel) -> Result<()> {
        momentum_update(&Self::online_params(model), &self.params(), self.momentum)
    }
}

use rand::SeedableRng;

impl ParamGroup for MomentumEncoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone
            .collect_params(&format!("{prefix}backbone."), out);
        self.proj_head
            .collect_params(&format!("{prefix}proj_head."), out);
    }
}

pub struct PretrainState {
    pub model: PretrainModel,
    pub momentum: MomentumEncoder,
    pub bank: MemoryBank,
    pub opt: AdamW,
    pub step: u64,
}

pub struct PretrainStreams {
    pub batch: ChaCha12Rng,
    pub mask: ChaCha12Rng,
    pub mix: ChaCha12Rng,
    pub regularize: ChaCha12Rng,
    pub augment: ChaCha12Rng,
}

impl PretrainStreams {
    pub fn new(hub: &RngHub) -> Self {
        PretrainStreams {
            batch: hub.stream("pretrain-batch"),
            mask: hub.stream("pretrain-mask"),
            mix: hub.stream("pretrain-mix"),
            regularize: hub.stream("pretrain-regularize"),
            augment: hub.stream("pretrain-augment"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainLogRow {
    pub step: u64,
    pub mpm_loss: f64,
    pub moco_loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
}

pub struct StepStats {
    pub mpm_loss: f64,
    pub moco_loss: f64,
    pub masked_acc: f64,
}

fn draw_mask(
    centers: &[Point3],
    cfg: &PretrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<MaskSpec> {
    let ratio = rng.random_range(cfg.mask_ratio_min..cfg.mask_ratio_max);
    match cfg.mask_strategy {
        MaskStrategy::Block => make_block_mask(centers, ratio, None, rng),
        MaskStrategy::Rand => make_rand_mask(centers.len(), ratio, rng),
    }
}

/// One optimization step over a batch of raw clouds: build real and virtual
/// samples, hard-tokenize the originals for targets, corrupt with masks,
/// forward, combine token and contrastive losses, update the online model,
/// the momentum mirror and the memory bank.
pub fn pretrain_step(
    state: &mut PretrainState,
    dvae: &Dvae,
    batch: &[PointCloud],
    cfg: &PretrainConfig,
    streams: &mut PretrainStreams,
    lr: f64,
) -> Result<StepStats> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Size("pretrain_step: empty batch".into()));
    }
    let aug_range = ScaleTranslateRange::default();
    let mut grouped = Vec::with_capacity(b);
    for cloud in batch {
        let cloud = if cfg.augment {
            augment_scale_translate(cloud, &mut streams.augment, &aug_range).0
        } else {
            cloud.clone()
        };
        grouped.push(group_patches(&cloud, cfg.group_count, cfg.group_size)?);
    }

    // targets from the frozen tokenizer
    let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(b);
    for ps in &grouped {
        tokens.push(dvae.hard_tokens(ps)?);
    }
    // momentum keys from uncorrupted originals
    let mut keys: Vec<Vec<f64>> = Vec::with_capacity(b);
    for ps in &grouped {
        keys.push(state.momentum.key(ps)?);
    }

    // the same number of virtual samples as real ones
    struct Virtual {
        patches: PatchSet,
        targets: Vec<usize>,
        a: usize,
        b: usize,
        realized: f64,
    }
    let mut virtuals = Vec::with_capacity(b);
    if b > 1 {
        for i in 0..b {
            let offset = streams.mix.random_range(1..b);
            let j = (i + offset) % b;
            let r_mix: f64 = streams.mix.random_range(0.0..1.0);
            let (vp, spec) = point_patch_mix(&grouped[i], &grouped[j], j, r_mix, &mut streams.mix)?;
            let targets: Vec<usize> = spec
                .selector
                .iter()
                .enumerate()
                .map(|(p, take_a)| if *take_a { tokens[i][p] } else { tokens[j][p] })
                .collect();
            virtuals.push(Virtual {
                patches: vp,
                targets,
                a: i,
                b: j,
                realized: spec.realized_ratio(),
            });
        }
    }

    // forward every sample, pooling masked positions into one token loss
    let mut masked_logit_rows: Vec<Tensor> = Vec::new();
    let mut masked_targets: Vec<usize> = Vec::new();
    let mut moco_terms: Vec<Tensor> = Vec::new();
    let mut correct = 0usize;
    let mut total_masked = 0usize;

    let mut run_sample = |patches: &PatchSet,
                          targets: &[usize],
                          positives: (&[f64], &[f64], f64),
                          streams: &mut PretrainStreams,
                          state: &PretrainState|
     -> Result<()> {
        let mask = draw_mask(&patches.centers, cfg, &mut streams.mask)?;
        let mut ctx = ForwardCtx::train(&mut streams.regularize);
        let (logits, q) = state.model.forward(patches, Some(&mask), &mut ctx)?;
        let gathered = ops::index_rows(&logits, &mask.masked)?;
        for (row, &pos) in mask.masked.iter().enumerate() {
            let pred = crate::dvae::argmax_rows(&ops::slice_rows(&gathered, row, 1)?)[0];
            if pred == targets[pos] {
                correct += 1;
            }
            total_masked += 1;
            masked_targets.push(targets[pos]);
        }
        masked_logit_rows.push(gathered);
        if cfg.moco_weight > 0.0 {
            let (k1, k2, r) = positives;
            moco_terms.push(moco_loss(
                &q,
                k1,
                k2,
                &state.bank,
                r,
                cfg.moco_temperature,
            )?);
        }
        Ok(())
    };

    for i in 0..b {
        run_sample(
            &grouped[i],
            &tokens[i],
            (&keys[i], &keys[i], 1.0),
            streams,
            state,
        )?;
    }
    for v in &virtuals {
        run_sample(
            &v.patches,
            &v.targets,
            (&keys[v.a], &keys[v.b], v.realized),
            streams,
            state,
        )?;
    }

    let logit_refs: Vec<&Tensor> = masked_logit_rows.iter().collect();
    let all_masked = if logit_refs.len() == 1 {
        logit_refs[0].clone()
    } else {
        // concatenate along rows: stack would add an axis, so rebuild by index
        let mut rows = Vec::new();
        for t in &masked_logit_rows {
            for r in 0..t.shape()[0] {
                rows.push(ops::row(t, r)?);
            }
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        ops::stack(&refs)?
    };
    let mpm = ops::cross_entropy_logits(&all_masked, &masked_targets)?;
    let mpm_value = mpm.item();

    let (total, moco_value) = if cfg.moco_weight > 0.0 {
        let refs: Vec<&Tensor> = moco_terms.iter().collect();
        let moco = ops::mean_all(&ops::stack(&refs)?);
        let value = moco.item();
        (
            ops::add(&mpm, &ops::scale(&moco, cfg.moco_weight))?,
            value,
        )
    } else {
        (mpm, 0.0)
    };

    if !total.item().is_finite() {
        return Err(Error::Numerics(format!(
            "pretraining diverged at step {}: loss = {}",
            state.step,
            total.item()
        )));
    }

    state.opt.set_lr(lr);
    state.opt.zero_grad();
    total.backward()?;
    state.opt.step()?;
    state.momentum.update_from(&state.model)?;
    state.bank.enqueue(&keys)?;
    state.step += 1;

    Ok(StepStats {
        mpm_loss: mpm_value,
        moco_loss: moco_value,
        masked_acc: correct as f64 / total_masked.max(1) as f64,
    })
}

pub struct PretrainResult {
    pub state: PretrainState,
    pub log: Vec<PretrainLogRow>,
}

/// Build a fresh online model (optionally sharing the frozen tokenizer's
/// patch embedder), its momentum mirror and an empty bank.
pub fn init_pretrain_state(
    model_cfg: &TransformerConfig,
    embedder_dims: &MiniPointNetDims,
    pos_hidden: usize,
    dvae: &Dvae,
    cfg: &PretrainConfig,
    hub: &RngHub,
) -> Result<PretrainState> {
    let mut init_rng = hub.stream("pretrain-init");
    let model = PretrainModel::new(
        model_cfg,
        embedder_dims,
        pos_hidden,
        dvae.config.vocab_size,
        cfg.proj_hidden,
        cfg.proj_dim,
        &mut init_rng,
    )?;
    if cfg.share_patch_embedder {
        let from = dvae.embedder.params();
        let to = model.backbone.embedder.params();
        if from.len() != to.len() {
            return Err(Error::Config(
                "share_patch_embedder requires matching embedder architectures".into(),
            ));
        }
        momentum_update(&from, &to, 0.0)?;
        model.backbone.embedder.set_trainable(false);
    }
    let momentum = MomentumEncoder::mirror_of(&model, cfg.momentum)?;
    let bank = MemoryBank::new(cfg.proj_dim, cfg.bank_size);
    let opt = AdamW::new(model.param_tensors(), cfg.lr, cfg.weight_decay);
    Ok(PretrainState {
        model,
        momentum,
        bank,
        opt,
        step: 0,
    })
}

/// Full pretraining loop. The tokenizer is frozen on entry.
pub fn pretrain_run(
    corpus: &[PointCloud],
    dvae: &Dvae,
    model_cfg: &TransformerConfig,
    embedder_dims: &MiniPointNetDims,
    pos_hidden: usize,
    cfg: &PretrainConfig,
    hub: &RngHub,
) -> Result<PretrainResult> {
    if corpus.is_empty() {
        return Err(Error::Size("pretrain_run: empty corpus".into()));
    }
    dvae.freeze();
    let mut state = init_pretrain_state(model_cfg, embedder_dims, pos_hidden, dvae, cfg, hub)?;
    let mut streams = PretrainStreams::new(hub);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_steps, cfg.steps);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if corpus.len() >= cfg.batch_size {
            sample_without_replacement(&mut streams.batch, corpus.len(), cfg.batch_size)
        } else {
            (0..cfg.batch_size)
                .map(|_| streams.batch.random_range(0..corpus.len()))
                .collect()
        };
        let clouds: Vec<PointCloud> = batch.iter().map(|&i| corpus[i].clone()).collect();
        let stats = pretrain_step(&mut state, dvae, &clouds, cfg, &mut streams, schedule.at(step))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(PretrainLogRow {
                step,
                mpm_loss: stats.mpm_loss,
                moco_loss: stats.moco_loss,
                masked_acc: stats.masked_acc,
                lr: schedule.at(step),
            });
        }
    }
    Ok(PretrainResult { state, log })
}

/// Masked-token prediction accuracy on held-out clouds with a dedicated mask
/// stream and eval-mode forward passes.
pub fn masked_token_accuracy(
    model: &PretrainModel,
    dvae: &Dvae,
    clouds: &[PointCloud],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut mask_rng = ChaCha12Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for cloud in clouds {
        let patches = group_patches(cloud, cfg.group_count, cfg.group_size)?;
        let targets = dvae.hard_tokens(&patches)?;
        let mask = draw_mask(&patches.centers, cfg, &mut mask_rng)?;
        let mut ctx = ForwardCtx::eval();
        let (logits, _) = model.forward(&patches, Some(&mask), &mut ctx)?;
        let preds = crate::dvae::argmax_rows(&logits);
        for &i in &mask.masked {
            if preds[i] == targets[i] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Serialize the full pretraining state (online + momentum + bank + stream
/// positions) for exact resume.
pub fn save_pretrain_checkpoint(
    path: &Path,
    state: &PretrainState,
    hub: &RngHub,
    streams: Option<&PretrainStreams>,
    meta_extra: serde_json::Value,
) -> Result<()> {
    let mut manifest = Manifest::new();
    manifest.insert_params("online.", &state.model.params());
    manifest.insert_params("momentum.", &state.momentum.params());
    let (shape, flat) = state.bank.to_flat();
    manifest.insert("bank.entries", &shape, flat);
    let stream_states = streams.map(|s| {
        vec![
            hub.stream_state("pretrain-batch", &s.batch),
            hub.stream_state("pretrain-mask", &s.mask),
            hub.stream_state("pretrain-mix", &s.mix),
            hub.stream_state("pretrain-regularize", &s.regularize),
            hub.stream_state("pretrain-augment", &s.augment),
        ]
    });
    manifest.meta = serde_json::json!({
        "kind": "pretrain",
        "step": state.step,
        "bank_cursor": state.bank.cursor,
        "bank_total": state.bank.total_enqueued,
        "bank_dim": state.bank.dim,
        "bank_capacity": state.bank.capacity,
        "rng_streams": stream_states,
        "extra": meta_extra,
    });
    manifest.save(path)
}

/// Load online/momentum weights and bank contents into an existing state.
pub fn load_pretrain_checkpoint(path: &Path, state: &mut PretrainState) -> Result<u64> {
    let manifest = Manifest::load(path)?;
    manifest.load_params("online.", &state.model.params())?;
    manifest.load_params("momentum.", &state.momentum.params())?;
    let dim = manifest.meta["bank_dim"].as_u64().unwrap_or(0) as usize;
    let capacity = manifest.meta["bank_capacity"].as_u64().unwrap_or(0) as usize;
    let cursor = manifest.meta["bank_cursor"].as_u64().unwrap_or(0) as usize;
    let total = manifest.meta["bank_total"].as_u64().unwrap_or(0);
    if let Some((shape, flat)) = manifest.get("bank.entries") {
        state.bank = MemoryBank::from_flat(dim, capacity, shape, flat, cursor, total);
    }
    let step = manifest.meta["step"].as_u64().unwrap_or(0);
    state.step = step;
    Ok(step)
}
