//! Run configuration: two named presets (`toy` for CI-scale runs, `paper` for
//! the full-scale settings), JSON config files layered on top of a preset,
//! and repeatable dotted-path overrides. Unknown keys are rejected with their
//! full path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{CorpusConfig, ShapeFamily};
use crate::downstream::{FewshotConfig, FewshotMode, FinetuneConfig, InitKind, SegLevels};
use crate::dvae::DvaeConfig;
use crate::error::{Error, Result};
use crate::nn::pointnet::MiniPointNetDims;
use crate::nn::TransformerConfig;
use crate::pretrain::{MaskStrategy, PretrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub drop_path_rate: f64,
    pub dropout: f64,
    pub pos_hidden: usize,
    pub embedder: MiniPointNetDims,
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            depth: self.depth,
            model_dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            drop_path_rate: self.drop_path_rate,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegSection {
    pub layers: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub group_count: usize,
    pub group_size: usize,
    pub head_hidden: usize,
    pub knn_k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Labeled training clouds for the supervised run (taken from the train
    /// split of the chosen family).
    pub train_instances: usize,
    pub family: ShapeFamily,
}

impl SegSection {
    pub fn levels(&self) -> SegLevels {
        SegLevels {
            layers: self.layers.clone(),
            resolutions: self.resolutions.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub split: String,
    pub cloud_index: usize,
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// "cls" or "seg".
    pub task: String,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_dir: String,
    pub dvae_checkpoint: String,
    pub pretrain_checkpoint: String,
    pub classifier_checkpoint: String,
    pub seg_checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub dvae: DvaeConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub segmentation: SegSection,
    pub fewshot: FewshotConfig,
    pub reconstruct: ReconstructConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Desk-scale preset: every command finishes in seconds to minutes on one
    /// CPU core.
    pub fn toy() -> RunConfig {
        RunConfig {
            preset: Some("toy".into()),
            seed: 7,
            model: ModelConfig {
                dim: 48,
                depth: 4,
                heads: 4,
                ffn_dim: 192,
                drop_path_rate: 0.0,
                dropout: 0.0,
                pos_hidden: 32,
                embedder: MiniPointNetDims {
                    point_hidden: vec![32, 64],
                    out_hidden: vec![64],
                    out_dim: 48,
                },
            },
            corpus: CorpusConfig {
                families: ShapeFamily::all().to_vec(),
                per_class_train: 30,
                per_class_val: 5,
                per_class_test: 5,
                point_count: 256,
                noise_sigma: 0.01,
            },
            dvae: DvaeConfig {
                vocab_size: 128,
                code_dim: 64,
                embed_dim: 64,
                group_count: 16,
                group_size: 16,
                coarse_points: 8,
                knn_k: 4,
                embedder: MiniPointNetDims {
                    point_hidden: vec![48, 96],
                    out_hidden: vec![96],
                    out_dim: 64,
                },
                tokenizer_pre: 32,
                tokenizer_channels: vec![32, 48, 48, 64],
                decoder_pre: 32,
                decoder_channels: vec![32, 48, 48, 64],
                decoder_feature_dim: 64,
                coarse_hidden: 128,
                folding_hidden: 128,
                steps: 300,
                batch_size: 8,
                lr: 7e-3,
                weight_decay: 1e-4,
                warmup_steps: 30,
                kl_delay_steps: 50,
                kl_ramp_steps: 200,
                kl_weight_max: 0.1,
                temp_start: 1.0,
                temp_end: 0.0625,
                temp_decay_steps: 250,
                // 300 steps cannot average over per-step categorical sampling
                // noise; the toy preset trains on the noise-free tempered
                // softmax (the paper-scale preset keeps full Gumbel draws)
                noise_scale: 0.0,
                log_every: 10,
            },
            pretrain: PretrainConfig {
                steps: 200,
                batch_size: 4,
                group_count: 16,
                group_size: 16,
                mask_strategy: MaskStrategy::Block,
                mask_ratio_min: 0.25,
                mask_ratio_max: 0.45,
                moco_weight: 1.0,
                bank_size: 256,
                momentum: 0.999,
                moco_temperature: 0.07,
                proj_dim: 32,
                proj_hidden: 64,
                lr: 1e-3,
                weight_decay: 0.05,
                warmup_steps: 20,
                augment: true,
                share_patch_embedder: false,
                log_every: 10,
            },
            finetune: FinetuneConfig {
                epochs: 8,
                batch_size: 8,
                lr: 1e-3,
                weight_decay: 0.05,
                warmup_epochs: 1,
                head_hidden: 64,
                head_dropout: 0.5,
                augment: true,
                init: InitKind::Scratch,
            },
            segmentation: SegSection {
                layers: vec![2, 3, 4],
                resolutions: vec![128, 64],
                group_count: 32,
                group_size: 16,
                head_hidden: 64,
                knn_k: 4,
                epochs: 30,
                lr: 1e-3,
                weight_decay: 1e-4,
                train_instances: 3,
                family: ShapeFamily::Cylinder,
            },
            fewshot: FewshotConfig {
                way: 5,
                shot: 10,
                episodes: 10,
                query_per_class: 20,
                epochs: 5,
                batch_size: 10,
                lr: 1e-3,
                mode: FewshotMode::Full,
            },
            reconstruct: ReconstructConfig {
                split: "test".into(),
                cloud_index: 0,
                mask_ratio: 0.45,
                strategy: MaskStrategy::Block,
            },
            eval: EvalConfig {
                task: "cls".into(),
                split: "test".into(),
            },
            paths: PathsConfig {
                corpus_dir: "runs/corpus".into(),
                dvae_checkpoint: "runs/train-dvae/dvae.ckpt".into(),
                pretrain_checkpoint: "runs/pretrain/pretrain.ckpt".into(),
                classifier_checkpoint: "runs/finetune-cls/classifier.ckpt".into(),
                seg_checkpoint: "runs/finetune-seg/seg.ckpt".into(),
            },
        }
    }

    /// Full-scale settings as published; documented for reference, not
    /// exercised by CI.
    pub fn paper() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.preset = Some("paper".into());
        cfg.seed = 1;
        cfg.model = ModelConfig {
            dim: 384,
            depth: 12,
            heads: 6,
            ffn_dim: 1536,
            drop_path_rate: 0.1,
            dropout: 0.1,
            pos_hidden: 128,
            embedder: MiniPointNetDims {
                point_hidden: vec![128, 256],
                out_hidden: vec![256],
                out_dim: 384,
            },
        };
        cfg.corpus.point_count = 1024;
        cfg.dvae = DvaeConfig {
            vocab_size: 8192,
            code_dim: 256,
            embed_dim: 256,
            group_count: 64,
            group_size: 32,
            coarse_points: 16,
            knn_k: 4,
            embedder: MiniPointNetDims {
                point_hidden: vec![128, 256],
                out_hidden: vec![256],
                out_dim: 256,
            },
            tokenizer_pre: 128,
            tokenizer_channels: vec![256, 512, 512, 1024],
            decoder_pre: 128,
            decoder_channels: vec![256, 512, 512, 1024],
            decoder_feature_dim: 256,
            coarse_hidden: 1024,
            folding_hidden: 1024,
            steps: 150_000,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 5e-4,
            warmup_steps: 5_000,
            kl_delay_steps: 10_000,
            kl_ramp_steps: 100_000,
            kl_weight_max: 0.1,
            temp_start: 1.0,
            temp_end: 0.0625,
            temp_decay_steps: 100_000,
            noise_scale: 1.0,
            log_every: 100,
        };
        cfg.pretrain = PretrainConfig {
            steps: 117_000,
            batch_size: 128,
            group_count: 64,
            group_size: 32,
            mask_strategy: MaskStrategy::Block,
            mask_ratio_min: 0.25,
            mask_ratio_max: 0.45,
            moco_weight: 1.0,
            bank_size: 16_384,
            momentum: 0.999,
            moco_temperature: 0.07,
            proj_dim: 128,
            proj_hidden: 384,
            lr: 5e-4,
            weight_decay: 0.05,
            warmup_steps: 1_170,
            augment: true,
            share_patch_embedder: false,
            log_every: 100,
        };
        cfg.finetune = FinetuneConfig {
            epochs: 300,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.05,
            warmup_epochs: 10,
            head_hidden: 256,
            head_dropout: 0.5,
            augment: true,
            init: InitKind::Pretrained,
        };
        cfg.segmentation = SegSection {
            layers: vec![4, 8, 12],
            resolutions: vec![512, 256],
            group_count: 128,
            group_size: 32,
            head_hidden: 512,
            knn_k: 4,
            epochs: 300,
            lr: 5e-4,
            weight_decay: 5e-4,
            train_instances: 30,
            family: ShapeFamily::Cylinder,
        };
        cfg.fewshot = FewshotConfig {
            way: 5,
            shot: 10,
            episodes: 10,
            query_per_class: 20,
            epochs: 60,
            batch_size: 32,
            lr: 5e-4,
            mode: FewshotMode::Full,
        };
        cfg
    }

    pub fn by_name(name: &str) -> Result<RunConfig> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `toy` or `paper`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.transformer().validate()?;
        self.dvae.validate()?;
        if self.model.embedder.out_dim != self.model.dim {
            return Err(Error::Config(
                "model.embedder.out_dim must equal model.dim".into(),
            ));
        }
        for (name, r) in [
            ("pretrain.mask_ratio_min", self.pretrain.mask_ratio_min),
            ("pretrain.mask_ratio_max", self.pretrain.mask_ratio_max),
        ] {
            if !(0.0 < r && r < 1.0) {
                return Err(Error::Config(format!("{name} {r} must lie in (0,1)")));
            }
        }
        if self.pretrain.mask_ratio_min >= self.pretrain.mask_ratio_max {
            return Err(Error::Config(
                "pretrain.mask_ratio_min must be below mask_ratio_max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pretrain.momentum) {
            return Err(Error::Config("pretrain.momentum must lie in [0,1]".into()));
        }
        if self.pretrain.moco_temperature <= 0.0 {
            return Err(Error::Config(
                "pretrain.moco_temperature must be positive".into(),
            ));
        }
        self.segmentation
            .levels()
            .validate(self.model.depth, self.corpus.point_count)?;
        if self.eval.task != "cls" && self.eval.task != "seg" {
            return Err(Error::Config(format!(
                "eval.task must be `cls` or `seg`, got `{}`",
                self.eval.task
            )));
        }
        if !(0.0 < self.reconstruct.mask_ratio && self.reconstruct.mask_ratio < 1.0) {
            return Err(Error::Config(
                "reconstruct.mask_ratio must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Merge `user` into `base`, requiring every user key to exist in the base
/// tree (presets are complete, so any absent key is a typo) with a matching
/// JSON kind. Arrays and scalars replace; objects merge recursively.
fn merge_checked(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (key, uv) in u {
                let child_path = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match b.get_mut(key) {
                    Some(bv) => merge_checked(bv, uv, &child_path)?,
                    None => {
                        return Err(Error::Config(format!("unknown key `{child_path}`")));
                    }
                }
            }
            Ok(())
        }
        (b, u) => {
            // null in the base (optional fields) accepts any kind
            if kind_of(b) != kind_of(u) && !b.is_null() && !u.is_null() {
                return Err(Error::Config(format!(
                    "type mismatch at `{path}`: expected {}, got {}",
                    kind_of(b),
                    kind_of(u)
                )));
            }
            *b = u.clone();
            Ok(())
        }
    }
}

/// Apply one `key.path=value` override.
fn apply_override(base: &mut Value, setting: &str) -> Result<()> {
    let (path, raw) = setting.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{setting}` must look like key.path=value"))
    })?;
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut user = value;
    for key in path.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(key.to_string(), user);
        user = Value::Object(obj);
    }
    merge_checked(base, &user, "")
}

/// Parse a config from a Value layered over its preset, with overrides.
pub fn resolve_config(file_value: Value, overrides: &[String]) -> Result<RunConfig> {
    let preset_name = file_value
        .get("preset")
        .and_then(|v| v.as_str())
        .unwrap_or("toy")
        .to_string();
    let preset = RunConfig::by_name(&preset_name)?;
    let mut merged = serde_json::to_value(&preset)?;
    merge_checked(&mut merged, &file_value, "")?;
    for setting in overrides {
        apply_override(&mut merged, setting)?;
    }
    let cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file (or the literal preset names `toy` / `paper`) and apply
/// dotted-path overrides.
pub fn parse_config(path: &str, overrides: &[String]) -> Result<RunConfig> {
    let file_value: Value = if path == "toy" || path == "paper" {
        serde_json::json!({ "preset": path })
    } else {
        let p = Path::new(path);
        if !p.exists() {
            return Err(Error::Config(format!("config file not found: {path}")));
        }
        let text = std::fs::read_to_string(p)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "config parse error at line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?
    };
    resolve_config(file_value, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn paper_preset_echoes_published_values() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.dvae.vocab_size, 8192);
        assert_eq!(cfg.model.depth, 12);
        assert_eq!(cfg.model.dim, 384);
        assert_eq!(cfg.model.heads, 6);
        assert_eq!(cfg.pretrain.bank_size, 16_384);
        assert_eq!(cfg.pretrain.moco_temperature, 0.07);
        assert_eq!(cfg.pretrain.momentum, 0.999);
        assert_eq!(cfg.dvae.group_count, 64);
        assert_eq!(cfg.dvae.group_size, 32);
        assert_eq!(cfg.dvae.temp_end, 0.0625);
        assert_eq!(cfg.dvae.kl_weight_max, 0.1);
    }

    #[test]
    fn override_is_reflected() {
        let cfg = resolve_config(
            serde_json::json!({"preset": "toy"}),
            &["model.dim=24".into(), "model.embedder.out_dim=24".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 24);
        let echoed = serde_json::to_value(&cfg).unwrap();
        assert_eq!(echoed["model"]["dim"], 24);
    }

    #[test]
    fn unknown_key_is_named_with_its_path() {
        let err = resolve_config(
            serde_json::json!({"preset": "toy", "model": {"dmi": 48}}),
            &[],
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("model.dmi"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        let err = resolve_config(
            serde_json::json!({"preset": "toy"}),
            &["model.dmi=48".into()],
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("model.dmi"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatch_is_named() {
        let err = resolve_config(
            serde_json::json!({"preset": "toy", "model": {"dim": "tall"}}),
            &[],
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("model.dim"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn string_overrides_hit_enums_and_paths() {
        let cfg = resolve_config(
            serde_json::json!({"preset": "toy"}),
            &[
                "pretrain.mask_strategy=rand".into(),
                "paths.corpus_dir=/tmp/somewhere".into(),
                "finetune.init=pretrained".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.mask_strategy, MaskStrategy::Rand);
        assert_eq!(cfg.paths.corpus_dir, "/tmp/somewhere");
        assert_eq!(cfg.finetune.init, InitKind::Pretrained);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let err = resolve_config(
            serde_json::json!({"preset": "toy"}),
            &["pretrain.mask_ratio_min=0.9".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
