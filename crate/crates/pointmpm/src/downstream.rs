//! Downstream heads and protocols: object classification, part segmentation
//! through geometry-based feature upsampling plus hierarchical propagation,
//! IoU metrics, and episodic few-shot evaluation.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Manifest;
use crate::data::{augment_scale_translate, ScaleTranslateRange, Taxonomy};
use crate::error::{Error, Result};
use crate::geometry::{group_patches, knn, sample_fps, Point3, PointCloud};
use crate::nn::pointnet::MiniPointNetDims;
use crate::nn::{
    dropout, Activation, Backbone, EdgeConv, ForwardCtx, Linear, Mlp, ParamGroup,
    TransformerConfig,
};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::{sample_without_replacement, shuffle, RngHub};
use crate::tensor::ops;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

/// Two-layer MLP with dropout over the concatenated (class token, max-pooled
/// patches) feature.
pub struct ClsHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout_rate: f64,
}

impl ClsHead {
    pub fn new(
        model_dim: usize,
        hidden_dim: usize,
        n_classes: usize,
        dropout_rate: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ClsHead {
            hidden: Linear::new(2 * model_dim, hidden_dim, rng),
            out: Linear::new(hidden_dim, n_classes, rng),
            dropout_rate,
        }
    }

    pub fn forward(&self, feat: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = ops::relu(&self.hidden.forward(feat)?);
        let h = dropout(&h, self.dropout_rate, ctx);
        self.out.forward(&h)
    }
}

impl ParamGroup for ClsHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.hidden.collect_params(&format!("{prefix}hidden."), out);
        self.out.collect_params(&format!("{prefix}out."), out);
    }
}

pub struct ClassifierModel {
    pub backbone: Backbone,
    pub head: ClsHead,
    pub group_count: usize,
    pub group_size: usize,
}

impl ParamGroup for ClassifierModel {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone
            .collect_params(&format!("{prefix}backbone."), out);
        self.head.collect_params(&format!("{prefix}head."), out);
    }
}

/// Class logits for one cloud. Inputs are centered before grouping, so rigid
/// translations of the cloud cannot reach the network.
pub fn classify_forward(
    cloud: &PointCloud,
    model: &ClassifierModel,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let centered = cloud.centered();
    let patches = group_patches(&centered, model.group_count, model.group_size)?;
    let (f, pos) = model.backbone.embed_patches(&patches)?;
    let seq = model.backbone.sequence(&f, &pos, None)?;
    let encoded = model.backbone.encode(&seq, ctx)?;
    let global = model.backbone.global_feature(&encoded)?;
    model.head.forward(&global, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub augment: bool,
    pub init: InitKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub fn build_classifier(
    model_cfg: &TransformerConfig,
    embedder_dims: &MiniPointNetDims,
    pos_hidden: usize,
    group_count: usize,
    group_size: usize,
    n_classes: usize,
    ft: &FinetuneConfig,
    pretrained: Option<&Manifest>,
    rng: &mut ChaCha12Rng,
) -> Result<ClassifierModel> {
    let backbone = Backbone::new(model_cfg, embedder_dims, pos_hidden, rng)?;
    let head = ClsHead::new(
        model_cfg.model_dim,
        ft.head_hidden,
        n_classes,
        ft.head_dropout,
        rng,
    );
    let model = ClassifierModel {
        backbone,
        head,
        group_count,
        group_size,
    };
    if let Some(manifest) = pretrained {
        manifest.load_params("online.backbone.", &model.backbone.params())?;
    }
    Ok(model)
}

pub fn evaluate_classifier(
    model: &ClassifierModel,
    clouds: &[PointCloud],
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for (cloud, &label) in clouds.iter().zip(labels) {
        let logits = classify_forward(cloud, model, &mut ForwardCtx::eval())?;
        let pred = argmax(&logits.to_vec());
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clouds.len().max(1) as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut bi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > best {
            best = x;
            bi = i;
        }
    }
    bi
}

/// Supervised fine-tuning over a labeled corpus split; logs one row per epoch.
/// `freeze_backbone` turns this into a linear-probe run.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classification(
    model: &ClassifierModel,
    train: (&[PointCloud], &[usize]),
    val: (&[PointCloud], &[usize]),
    ft: &FinetuneConfig,
    freeze_backbone: bool,
    hub: &RngHub,
    stream_tag: &str,
) -> Result<Vec<EpochRow>> {
    let (train_clouds, train_labels) = train;
    let (val_clouds, val_labels) = val;
    if train_clouds.is_empty() {
        return Err(Error::Size("finetune: empty training split".into()));
    }
    let params: Vec<Tensor> = if freeze_backbone {
        model.backbone.set_trainable(false);
        model.head.param_tensors()
    } else {
        model.param_tensors()
    };
    let mut opt = AdamW::new(params, ft.lr, ft.weight_decay);
    let steps_per_epoch = train_clouds.len().div_ceil(ft.batch_size) as u64;
    let schedule = LrSchedule::new(
        ft.lr,
        ft.warmup_epochs as u64 * steps_per_epoch,
        ft.epochs as u64 * steps_per_epoch,
    );
    let mut order_rng = hub.stream(&format!("{stream_tag}-order"));
    let mut reg_rng = hub.stream(&format!("{stream_tag}-regularize"));
    let mut aug_rng = hub.stream(&format!("{stream_tag}-augment"));
    let aug_range = ScaleTranslateRange::default();

    let mut log = Vec::with_capacity(ft.epochs);
    let mut step = 0u64;
    for epoch in 0..ft.epochs {
        let mut order: Vec<usize> = (0..train_clouds.len()).collect();
        shuffle(&mut order_rng, &mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(ft.batch_size) {
            opt.set_lr(schedule.at(step));
            let mut rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let cloud = if ft.augment {
                    augment_scale_translate(&train_clouds[i], &mut aug_rng, &aug_range).0
                } else {
                    train_clouds[i].clone()
                };
                let mut ctx = ForwardCtx::train(&mut reg_rng);
                rows.push(classify_forward(&cloud, model, &mut ctx)?);
                targets.push(train_labels[i]);
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let logits = ops::stack(&refs)?;
            let loss = ops::cross_entropy_logits(&logits, &targets)?;
            if !loss.item().is_finite() {
                return Err(Error::Numerics(format!(
                    "fine-tuning diverged at epoch {epoch}"
                )));
            }
            epoch_loss += loss.item();
            batches += 1;
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            step += 1;
        }
        let val_acc = if val_clouds.is_empty() {
            0.0
        } else {
            evaluate_classifier(model, val_clouds, val_labels)?
        };
        log.push(EpochRow {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_acc,
        });
    }
    if freeze_backbone {
        model.backbone.set_trainable(true);
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// geometry-based upsampling and hierarchical propagation
// ---------------------------------------------------------------------------

/// Inverse-distance weights of each dense point over its k nearest sparse
/// points. A query within 1e-9 of a source short-circuits to that source
/// (the 1/d form is singular there). Weights are non-negative and sum to 1.
pub fn inverse_distance_weights(
    dense: &[Point3],
    sparse: &[Point3],
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let hits = knn(dense, sparse, k)?;
    let mut out = Vec::with_capacity(dense.len());
    for (q, neighbors) in dense.iter().zip(&hits) {
        let dists: Vec<f64> = neighbors
            .iter()
            .map(|&j| {
                let s = sparse[j];
                let dx = q[0] - s[0];
                let dy = q[1] - s[1];
                let dz = q[2] - s[2];
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .collect();
        if let Some(pos) = dists.iter().position(|d| *d < 1e-9) {
            out.push(vec![(neighbors[pos], 1.0)]);
            continue;
        }
        let inv: Vec<f64> = dists.iter().map(|d| 1.0 / d).collect();
        let total: f64 = inv.iter().sum();
        out.push(
            neighbors
                .iter()
                .zip(&inv)
                .map(|(&j, w)| (j, w / total))
                .collect(),
        );
    }
    Ok(out)
}

/// Lift sparse features onto dense query points: inverse-distance weighted
/// average of the k nearest sparse features, concatenated with the query
/// coordinates, mapped through an MLP.
pub fn upsample_features(
    dense: &[Point3],
    sparse: &[Point3],
    sparse_features: &Tensor,
    k: usize,
    mlp: &Mlp,
) -> Result<Tensor> {
    let sh = sparse_features.shape();
    if sh.len() != 2 || sh[0] != sparse.len() {
        return Err(Error::Shape(format!(
            "upsample_features: features {:?} do not match {} sparse points",
            sh,
            sparse.len()
        )));
    }
    let weights = inverse_distance_weights(dense, sparse, k)?;
    let (d_len, s_len) = (dense.len(), sparse.len());
    let mut w = vec![0.0; d_len * s_len];
    for (i, row) in weights.iter().enumerate() {
        for (j, value) in row {
            w[i * s_len + j] = *value;
        }
    }
    let w = Tensor::constant(&[d_len, s_len], w);
    let lifted = ops::matmul(&w, sparse_features)?;
    let coords: Vec<f64> = dense.iter().flat_map(|p| p.iter().copied()).collect();
    let coords = Tensor::constant(&[d_len, 3], coords);
    mlp.forward(&ops::concat_last(&[&lifted, &coords])?)
}

/// Which backbone layers feed the segmentation head and the point-cloud
/// resolution each one is lifted to. The deepest level stays at the patch
/// centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegLevels {
    /// 1-based block indices, shallow to deep.
    pub layers: Vec<usize>,
    /// Target resolutions for all but the deepest layer, shallow to deep.
    pub resolutions: Vec<usize>,
}

impl SegLevels {
    pub fn validate(&self, depth: usize, full_points: usize) -> Result<()> {
        if self.layers.len() < 2 || self.resolutions.len() + 1 != self.layers.len() {
            return Err(Error::Config(
                "segmentation.levels: need n layers and n-1 resolutions".into(),
            ));
        }
        if !self.layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "segmentation.levels: layers must be strictly increasing".into(),
            ));
        }
        if *self.layers.last().unwrap() > depth {
            return Err(Error::Config(format!(
                "segmentation.levels: layer {} exceeds backbone depth {depth}",
                self.layers.last().unwrap()
            )));
        }
        let mut all = self.resolutions.clone();
        all.insert(0, full_points);
        if !all.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config(
                "segmentation.levels: resolutions must strictly decrease with depth".into(),
            ));
        }
        Ok(())
    }
}

/// Segmentation head: per-level skip MLPs (feature + coords -> d), per-stage
/// edge-conv pairs, lift MLPs between resolutions, and a per-point classifier.
pub struct SegHead {
    pub skip_mlps: Vec<Mlp>,
    pub lift_mlps: Vec<Mlp>,
    pub stage_convs: Vec<(EdgeConv, EdgeConv)>,
    pub classifier: Linear,
    pub levels: SegLevels,
    pub knn_k: usize,
}

impl SegHead {
    pub fn new(
        model_dim: usize,
        hidden: usize,
        n_parts: usize,
        levels: &SegLevels,
        knn_k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let n_levels = levels.layers.len();
        let skip_mlps = (0..n_levels)
            .map(|_| Mlp::new(&[model_dim + 3, hidden, model_dim], Activation::Relu, rng))
            .collect();
        let lift_mlps = (0..n_levels)
            .map(|_| Mlp::new(&[model_dim + 3, hidden, model_dim], Activation::Relu, rng))
            .collect();
        let stage_convs = (0..n_levels + 1)
            .map(|_| {
                (
                    EdgeConv::new(model_dim, hidden, knn_k, rng),
                    EdgeConv::new(hidden, model_dim, knn_k, rng),
                )
            })
            .collect();
        SegHead {
            skip_mlps,
            lift_mlps,
            stage_convs,
            classifier: Linear::new(model_dim, n_parts, rng),
            levels: levels.clone(),
            knn_k,
        }
    }
}

impl ParamGroup for SegHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, m) in self.skip_mlps.iter().enumerate() {
            m.collect_params(&format!("{prefix}skip.{i}."), out);
        }
        for (i, m) in self.lift_mlps.iter().enumerate() {
            m.collect_params(&format!("{prefix}lift.{i}."), out);
        }
        for (i, (a, b)) in self.stage_convs.iter().enumerate() {
            a.collect_params(&format!("{prefix}stage.{i}.a."), out);
            b.collect_params(&format!("{prefix}stage.{i}.b."), out);
        }
        self.classifier
            .collect_params(&format!("{prefix}classifier."), out);
    }
}

fn conv_pair(pair: &(EdgeConv, EdgeConv), x: &Tensor) -> Result<Tensor> {
    let g1 = x.detached(false);
    let h = pair.0.forward(x, &g1)?;
    let g2 = h.detached(false);
    pair.1.forward(&h, &g2)
}

/// Hierarchical propagation from the deepest selected layer down to every
/// point: at each stage features are lifted to the next (finer) resolution,
/// summed with that level's lifted skip features, and refined by an edge-conv
/// pair. Returns per-point features at full resolution.
pub fn propagate_features(
    head: &SegHead,
    level_features: &[Tensor], // shallow -> deep, each [g, d] at patch centers
    centers: &[Point3],
    level_points: &[Vec<Point3>], // shallow -> deep resolutions (excl. deepest)
    full_points: &[Point3],
) -> Result<Tensor> {
    let n_levels = level_features.len();
    if n_levels != head.levels.layers.len() || level_points.len() + 1 != n_levels {
        return Err(Error::Shape(format!(
            "propagate_features: got {} levels, {} resolutions",
            n_levels,
            level_points.len()
        )));
    }
    let k = head.knn_k.min(centers.len());

    // deepest level at the patch centers
    let deep_idx = n_levels - 1;
    let coords: Vec<f64> = centers.iter().flat_map(|p| p.iter().copied()).collect();
    let coords = Tensor::constant(&[centers.len(), 3], coords);
    let mut feats = head.skip_mlps[deep_idx]
        .forward(&ops::concat_last(&[&level_features[deep_idx], &coords])?)?;
    feats = conv_pair(&head.stage_convs[0], &feats)?;
    let mut current_points: &[Point3] = centers;

    // walk deep -> shallow through the intermediate resolutions
    for (stage, level) in (0..n_levels - 1).rev().enumerate() {
        let target = &level_points[level];
        let lifted = upsample_features(
            target,
            current_points,
            &feats,
            k.min(current_points.len()),
            &head.lift_mlps[level],
        )?;
        let skip = upsample_features(
            target,
            centers,
            &level_features[level],
            k,
            &head.skip_mlps[level],
        )?;
        feats = ops::add(&lifted, &skip)?;
        feats = conv_pair(&head.stage_convs[stage + 1], &feats)?;
        current_points = target;
    }

    // final lift to every point
    let lifted = upsample_features(
        full_points,
        current_points,
        &feats,
        k.min(current_points.len()),
        head.lift_mlps.last().unwrap(),
    )?;
    conv_pair(head.stage_convs.last().unwrap(), &lifted)
}

pub struct SegModel {
    pub backbone: Backbone,
    pub head: SegHead,
    pub group_count: usize,
    pub group_size: usize,
}

impl ParamGroup for SegModel {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone
            .collect_params(&format!("{prefix}backbone."), out);
        self.head.collect_params(&format!("{prefix}head."), out);
    }
}

/// Per-point part logits for one cloud.
pub fn segment_forward(cloud: &PointCloud, model: &SegModel, ctx: &mut ForwardCtx) -> Result<Tensor> {
    let centered = cloud.centered();
    let patches = group_patches(&centered, model.group_count, model.group_size)?;
    let (f, pos) = model.backbone.embed_patches(&patches)?;
    let seq = model.backbone.sequence(&f, &pos, None)?;
    let layers = model.backbone.encode_layers(&seq, ctx)?;

    let g = patches.group_count();
    let mut level_features = Vec::new();
    for &layer in &model.head.levels.layers {
        let h = &layers[layer - 1];
        level_features.push(ops::slice_rows(h, 1, g)?);
    }
    let mut level_points = Vec::new();
    for &res in &model.head.levels.resolutions {
        let idx = sample_fps(&centered.points, res, 0)?;
        level_points.push(idx.into_iter().map(|i| centered.points[i]).collect());
    }
    let per_point = propagate_features(
        &model.head,
        &level_features,
        &patches.centers,
        &level_points,
        &centered.points,
    )?;
    model.head.classifier.forward(&per_point)
}

/// Argmax restricted to the parts valid for the instance's class.
pub fn predict_parts(logits: &Tensor, valid_parts: &[usize]) -> Vec<usize> {
    let sh = logits.shape();
    let (p, n) = (sh[0], sh[1]);
    let d = logits.data();
    (0..p)
        .map(|i| {
            let mut best = f64::NEG_INFINITY;
            let mut bp = valid_parts[0];
            for &part in valid_parts {
                let v = d[i * n + part];
                if v > best {
                    best = v;
                    bp = part;
                }
            }
            bp
        })
        .collect()
}

// ---------------------------------------------------------------------------
// IoU metrics
// ---------------------------------------------------------------------------

pub struct SegInstance {
    pub class_id: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    /// Mean over instances, percent.
    pub miou_instance: f64,
    /// Mean of per-category means, percent.
    pub miou_category: f64,
    pub per_category: Vec<(usize, f64)>,
}

/// Instance IoU averaged over the instance's class parts; parts absent from
/// both prediction and ground truth count as IoU 1 for that instance.
pub fn miou(instances: &[SegInstance], taxonomy: &Taxonomy) -> Result<MiouReport> {
    if instances.is_empty() {
        return Err(Error::Size("miou: no instances".into()));
    }
    let n_classes = taxonomy.class_parts.len();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut all = Vec::with_capacity(instances.len());
    for inst in instances {
        let parts = taxonomy
            .class_parts
            .get(inst.class_id)
            .ok_or_else(|| Error::Label(format!("unknown class {}", inst.class_id)))?;
        for &l in inst.labels.iter().chain(inst.predictions.iter()) {
            if !parts.contains(&l) {
                return Err(Error::Label(format!(
                    "part {l} not in the taxonomy of class {}",
                    inst.class_id
                )));
            }
        }
        let mut iou_sum = 0.0;
        for &part in parts {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (p, l) in inst.predictions.iter().zip(&inst.labels) {
                let in_pred = *p == part;
                let in_gt = *l == part;
                if in_pred && in_gt {
                    inter += 1;
                }
                if in_pred || in_gt {
                    union += 1;
                }
            }
            iou_sum += if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
        }
        let iou = iou_sum / parts.len() as f64;
        per_class[inst.class_id].push(iou);
        all.push(iou);
    }
    let miou_instance = 100.0 * all.iter().sum::<f64>() / all.len() as f64;
    let per_category: Vec<(usize, f64)> = per_class
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, v)| (c, 100.0 * v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let miou_category =
        per_category.iter().map(|(_, v)| v).sum::<f64>() / per_category.len() as f64;
    Ok(MiouReport {
        miou_instance,
        miou_category,
        per_category,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SegEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// Supervised per-point training of backbone + segmentation head.
pub fn train_segmentation(
    model: &SegModel,
    clouds: &[PointCloud],
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    hub: &RngHub,
) -> Result<Vec<SegEpochRow>> {
    if clouds.iter().any(|c| c.labels.is_none()) {
        return Err(Error::Label("train_segmentation: unlabeled cloud".into()));
    }
    let mut opt = AdamW::new(model.param_tensors(), lr, weight_decay);
    let schedule = LrSchedule::new(lr, 0, (epochs * clouds.len()) as u64);
    let mut order_rng = hub.stream("seg-order");
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        shuffle(&mut order_rng, &mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for &i in &order {
            opt.set_lr(schedule.at(step));
            let cloud = &clouds[i];
            let targets: Vec<usize> = cloud
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .map(|l| *l as usize)
                .collect();
            let logits = segment_forward(cloud, model, &mut ForwardCtx::eval())?;
            let loss = ops::cross_entropy_logits(&logits, &targets)?;
            if !loss.item().is_finite() {
                return Err(Error::Numerics(format!(
                    "segmentation training diverged at epoch {epoch}"
                )));
            }
            loss_sum += loss.item();
            let preds = preds_from_logits(&logits);
            for (p, t) in preds.iter().zip(&targets) {
                if p == t {
                    correct += 1;
                }
                total += 1;
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            step += 1;
        }
        log.push(SegEpochRow {
            epoch,
            train_loss: loss_sum / clouds.len() as f64,
            train_acc: correct as f64 / total.max(1) as f64,
        });
    }
    Ok(log)
}

fn preds_from_logits(logits: &Tensor) -> Vec<usize> {
    let sh = logits.shape();
    let (p, n) = (sh[0], sh[1]);
    let d = logits.data();
    (0..p).map(|i| argmax(&d[i * n..(i + 1) * n])).collect()
}

// ---------------------------------------------------------------------------
// few-shot evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewshotMode {
    /// Fine-tune the whole model per episode.
    Full,
    /// Freeze the backbone and train only the head (cheap CI mode).
    Probe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotConfig {
    pub way: usize,
    pub shot: usize,
    pub episodes: usize,
    pub query_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: FewshotMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct FewshotReport {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub episode_acc: Vec<f64>,
}

/// One episode's class and item selections (reproducible given the stream).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    /// Per selected class: (support item indices, query item indices) into
    /// the source split.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

pub fn sample_episode(
    by_class: &[Vec<usize>],
    way: usize,
    shot: usize,
    query_per_class: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Episode> {
    let eligible: Vec<usize> = (0..by_class.len())
        .filter(|&c| by_class[c].len() >= shot + query_per_class)
        .collect();
    if eligible.len() < way {
        return Err(Error::Size(format!(
            "fewshot: only {} classes have >= {} items, need {way}",
            eligible.len(),
            shot + query_per_class
        )));
    }
    let picked = sample_without_replacement(rng, eligible.len(), way);
    let classes: Vec<usize> = picked.into_iter().map(|i| eligible[i]).collect();
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way);
    for &c in &classes {
        let pool = &by_class[c];
        let chosen = sample_without_replacement(rng, pool.len(), shot + query_per_class);
        let items: Vec<usize> = chosen.into_iter().map(|i| pool[i]).collect();
        support.push(items[..shot].to_vec());
        query.push(items[shot..].to_vec());
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// Episodic protocol: sample `way` classes and `shot`+query items per class,
/// fine-tune a fresh classifier on the support set, evaluate on the query
/// set; report mean and standard deviation over episodes.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_eval(
    clouds: &[PointCloud],
    by_class: &[Vec<usize>],
    model_cfg: &TransformerConfig,
    embedder_dims: &MiniPointNetDims,
    pos_hidden: usize,
    group: (usize, usize),
    cfg: &FewshotConfig,
    ft: &FinetuneConfig,
    pretrained: Option<&Manifest>,
    hub: &RngHub,
) -> Result<FewshotReport> {
    let mut episode_rng = hub.stream("fewshot-episodes");
    let mut accs = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let episode = sample_episode(
            by_class,
            cfg.way,
            cfg.shot,
            cfg.query_per_class,
            &mut episode_rng,
        )?;
        // remap episode classes onto 0..way
        let mut support_clouds = Vec::new();
        let mut support_labels = Vec::new();
        let mut query_clouds = Vec::new();
        let mut query_labels = Vec::new();
        for (local, _) in episode.classes.iter().enumerate() {
            for &i in &episode.support[local] {
                support_clouds.push(clouds[i].clone());
                support_labels.push(local);
            }
            for &i in &episode.query[local] {
                query_clouds.push(clouds[i].clone());
                query_labels.push(local);
            }
        }
        let mut init_rng = hub.stream(&format!("fewshot-init-{e}"));
        let model = build_classifier(
            model_cfg,
            embedder_dims,
            pos_hidden,
            group.0,
            group.1,
            cfg.way,
            ft,
            pretrained,
            &mut init_rng,
        )?;
        let episode_ft = FinetuneConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            ..ft.clone()
        };
        finetune_classification(
            &model,
            (&support_clouds, &support_labels),
            (&[], &[]),
            &episode_ft,
            cfg.mode == FewshotMode::Probe,
            hub,
            &format!("fewshot-{e}"),
        )?;
        accs.push(evaluate_classifier(&model, &query_clouds, &query_labels)?);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    Ok(FewshotReport {
        mean_acc: mean,
        std_acc: var.sqrt(),
        episode_acc: accs,
    })
}
