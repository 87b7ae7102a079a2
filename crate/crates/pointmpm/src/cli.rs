//! Command-line orchestration: corpus building, tokenizer training,
//! pretraining, fine-tuning (classification and segmentation), few-shot
//! evaluation, masked reconstruction dumps, gradient checking and checkpoint
//! evaluation. Every command runs deterministically under its seed and leaves
//! an auditable run directory: effective config, version stamp and logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Manifest;
use crate::config::{parse_config, RunConfig};
use crate::data::{build_corpus, load_corpus, write_corpus, Corpus};
use crate::downstream::{
    build_classifier, evaluate_classifier, fewshot_eval, finetune_classification, miou,
    predict_parts, segment_forward, train_segmentation, ClassifierModel, InitKind, SegHead,
    SegInstance, SegModel,
};
use crate::dvae::{train_dvae_with_abort, Dvae};
use crate::error::{Error, Result};
use crate::geometry::io::{write_cloud, write_cloud_csv};
use crate::geometry::{group_patches, PointCloud};
use crate::gradcheck::gradcheck_suite;
use crate::nn::{ForwardCtx, ParamGroup};
use crate::pretrain::{
    init_pretrain_state, make_block_mask, make_rand_mask, masked_token_accuracy, pretrain_run,
    save_pretrain_checkpoint, MaskStrategy,
};
use crate::rng::{fnv1a, RngHub};
use crate::tensor::ops;

#[derive(Parser)]
#[command(
    name = "pointmpm",
    version,
    about = "Point-cloud transformer pretraining on synthetic shapes: discrete tokenizer, masked token prediction, momentum contrast, and downstream heads"
)]
pub struct Cli {
    /// Config file path, or a builtin preset name: `toy` or `paper`.
    #[arg(long, global = true, default_value = "toy")]
    pub config: String,
    /// Dotted-path override, repeatable: --set model.dim=48
    #[arg(long = "set", global = true, action = clap::ArgAction::Append)]
    pub set: Vec<String>,
    /// Root seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for logs and artifacts (default: runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic labeled corpus and write it to paths.corpus_dir.
    BuildCorpus,
    /// Train the discrete patch tokenizer (encoder, codebook, decoder).
    TrainDvae,
    /// Masked-token pretraining with patch mixing and momentum contrast.
    Pretrain,
    /// Supervised classification fine-tuning (scratch or pretrained init).
    FinetuneCls,
    /// Supervised part-segmentation training on one shape family.
    FinetuneSeg,
    /// Episodic few-shot evaluation.
    Fewshot,
    /// Mask a cloud, predict the missing tokens, decode and dump the merged
    /// reconstruction.
    Reconstruct,
    /// Finite-difference verification of every op family.
    Gradcheck,
    /// Evaluate a trained checkpoint (classification accuracy or mIoU).
    Eval,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildCorpus => "build-corpus",
            Command::TrainDvae => "train-dvae",
            Command::Pretrain => "pretrain",
            Command::FinetuneCls => "finetune-cls",
            Command::FinetuneSeg => "finetune-seg",
            Command::Fewshot => "fewshot",
            Command::Reconstruct => "reconstruct",
            Command::Gradcheck => "gradcheck",
            Command::Eval => "eval",
        }
    }
}

/// Binary entry point: parse argv, run, map errors to exit codes
/// (2 config, 3 missing artifact, 4 numerics, 1 other).
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Execute one command with explicit arguments (the testable surface).
pub fn run_command(
    command: Command,
    config: &str,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cli = Cli {
        config: config.to_string(),
        set: sets.to_vec(),
        seed,
        out: out.map(Path::to_path_buf),
        command,
    };
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut sets = cli.set.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let cfg = parse_config(&cli.config, &sets)?;

    let run_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    fs::create_dir_all(&run_dir)?;

    // auditable run directory: effective config + version stamp (the stamp
    // hashes the effective config, so identical runs stamp identically)
    let effective = serde_json::to_string_pretty(&cfg)?;
    fs::write(run_dir.join("config.json"), &effective)?;
    let stamp = serde_json::json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_hash": format!("{:016x}", fnv1a(&effective)),
        "command": cli.command.name(),
    });
    fs::write(
        run_dir.join("version.json"),
        serde_json::to_string_pretty(&stamp)?,
    )?;

    match cli.command {
        Command::BuildCorpus => cmd_build_corpus(&cfg, &run_dir),
        Command::TrainDvae => cmd_train_dvae(&cfg, &run_dir),
        Command::Pretrain => cmd_pretrain(&cfg, &run_dir),
        Command::FinetuneCls => cmd_finetune_cls(&cfg, &run_dir),
        Command::FinetuneSeg => cmd_finetune_seg(&cfg, &run_dir),
        Command::Fewshot => cmd_fewshot(&cfg, &run_dir),
        Command::Reconstruct => cmd_reconstruct(&cfg, &run_dir),
        Command::Gradcheck => cmd_gradcheck(&cfg, &run_dir),
        Command::Eval => cmd_eval(&cfg, &run_dir),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 48 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_summary(run_dir: &Path, value: serde_json::Value) -> Result<()> {
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&value)?,
    )?;
    Ok(())
}

fn load_corpus_checked(cfg: &RunConfig) -> Result<Corpus> {
    load_corpus(Path::new(&cfg.paths.corpus_dir))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn cmd_build_corpus(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = build_corpus(&cfg.corpus, cfg.seed)?;
    let dir = PathBuf::from(&cfg.paths.corpus_dir);
    write_corpus(&corpus, &dir)?;
    let counts: serde_json::Value = corpus
        .manifest
        .splits
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::json!(v.len())))
        .collect::<serde_json::Map<_, _>>()
        .into();
    write_summary(
        run_dir,
        serde_json::json!({
            "corpus_dir": cfg.paths.corpus_dir,
            "classes": corpus.manifest.class_names,
            "parts": corpus.manifest.part_names.len(),
            "instances": counts,
            "point_count": cfg.corpus.point_count,
        }),
    )?;
    println!(
        "corpus written to {} ({} classes, {} train clouds)",
        dir.display(),
        corpus.class_count(),
        corpus.split("train").len()
    );
    Ok(())
}

fn cmd_train_dvae(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let hub = RngHub::new(cfg.seed);
    let ckpt_path = PathBuf::from(&cfg.paths.dvae_checkpoint);
    ensure_parent(&ckpt_path)?;
    let result = train_dvae_with_abort(corpus.split("train"), &cfg.dvae, &hub, Some(&ckpt_path))?;

    let rows: Vec<String> = result
        .log
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.step, r.lr, r.alpha, r.tau, r.chamfer_fine, r.chamfer_coarse, r.kl, r.tokens_used
            )
        })
        .collect();
    write_csv(
        &run_dir.join("dvae_log.csv"),
        "step,lr,alpha,tau,chamfer_fine,chamfer_coarse,kl,tokens_used",
        &rows,
    )?;
    result
        .dvae
        .save_checkpoint(&ckpt_path, serde_json::json!({"steps": cfg.dvae.steps}))?;

    let first = result.log.first();
    let last = result.log.last();
    let tokens_used = crate::dvae::token_histogram(&result.dvae, corpus.split("train"))?
        .iter()
        .filter(|c| **c > 0)
        .count();
    write_summary(
        run_dir,
        serde_json::json!({
            "checkpoint": cfg.paths.dvae_checkpoint,
            "steps": cfg.dvae.steps,
            "initial_chamfer_fine": first.map(|r| r.chamfer_fine),
            "final_chamfer_fine": last.map(|r| r.chamfer_fine),
            "final_kl": last.map(|r| r.kl),
            "distinct_tokens_used": tokens_used,
        }),
    )?;
    println!(
        "tokenizer trained for {} steps; fine chamfer {:.4} -> {:.4}; checkpoint {}",
        cfg.dvae.steps,
        first.map(|r| r.chamfer_fine).unwrap_or(f64::NAN),
        last.map(|r| r.chamfer_fine).unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let dvae = Dvae::load_checkpoint(Path::new(&cfg.paths.dvae_checkpoint))?;
    dvae.freeze();
    let hub = RngHub::new(cfg.seed);
    let ckpt_path = PathBuf::from(&cfg.paths.pretrain_checkpoint);
    ensure_parent(&ckpt_path)?;
    let model_cfg = cfg.model.transformer();

    if cfg.pretrain.steps == 0 {
        // an init checkpoint: identical to a fresh initialization
        let state = init_pretrain_state(
            &model_cfg,
            &cfg.model.embedder,
            cfg.model.pos_hidden,
            &dvae,
            &cfg.pretrain,
            &hub,
        )?;
        save_pretrain_checkpoint(&ckpt_path, &state, &hub, None, serde_json::json!({"steps": 0}))?;
        write_csv(&run_dir.join("pretrain_log.csv"), "step,mpm_loss,moco_loss,masked_acc,lr", &[])?;
        write_summary(
            run_dir,
            serde_json::json!({"checkpoint": cfg.paths.pretrain_checkpoint, "steps": 0}),
        )?;
        println!("wrote init checkpoint to {}", ckpt_path.display());
        return Ok(());
    }

    let result = pretrain_run(
        corpus.split("train"),
        &dvae,
        &model_cfg,
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        &cfg.pretrain,
        &hub,
    )?;
    let rows: Vec<String> = result
        .log
        .iter()
        .map(|r| format!("{},{},{},{},{}", r.step, r.mpm_loss, r.moco_loss, r.masked_acc, r.lr))
        .collect();
    write_csv(
        &run_dir.join("pretrain_log.csv"),
        "step,mpm_loss,moco_loss,masked_acc,lr",
        &rows,
    )?;
    save_pretrain_checkpoint(
        &ckpt_path,
        &result.state,
        &hub,
        None,
        serde_json::json!({"steps": cfg.pretrain.steps}),
    )?;

    let heldout_acc = masked_token_accuracy(
        &result.state.model,
        &dvae,
        corpus.split("val"),
        &cfg.pretrain,
        hub.stream_seed("pretrain-eval-mask"),
    )?;
    let chance = 1.0 / cfg.dvae.vocab_size as f64;
    write_summary(
        run_dir,
        serde_json::json!({
            "checkpoint": cfg.paths.pretrain_checkpoint,
            "steps": cfg.pretrain.steps,
            "final_mpm_loss": result.log.last().map(|r| r.mpm_loss),
            "heldout_masked_accuracy": heldout_acc,
            "chance_level": chance,
        }),
    )?;
    println!(
        "pretrained {} steps; held-out masked token accuracy {:.4} (chance {:.4})",
        cfg.pretrain.steps, heldout_acc, chance
    );
    Ok(())
}

fn build_classifier_from_cfg(
    cfg: &RunConfig,
    n_classes: usize,
    hub: &RngHub,
) -> Result<ClassifierModel> {
    let pretrained = match cfg.finetune.init {
        InitKind::Pretrained => Some(Manifest::load(Path::new(&cfg.paths.pretrain_checkpoint))?),
        InitKind::Scratch => None,
    };
    let mut init_rng = hub.stream("finetune-init");
    build_classifier(
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        cfg.pretrain.group_count,
        cfg.pretrain.group_size,
        n_classes,
        &cfg.finetune,
        pretrained.as_ref(),
        &mut init_rng,
    )
}

fn save_classifier(path: &Path, model: &ClassifierModel, meta: serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    let mut manifest = Manifest::new();
    manifest.insert_params("classifier.", &model.params());
    manifest.meta = meta;
    manifest.save(path)
}

fn cmd_finetune_cls(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let hub = RngHub::new(cfg.seed);
    let model = build_classifier_from_cfg(cfg, corpus.class_count(), &hub)?;
    let train_labels = corpus.class_ids("train");
    let val_labels = corpus.class_ids("val");
    let log = finetune_classification(
        &model,
        (corpus.split("train"), &train_labels),
        (corpus.split("val"), &val_labels),
        &cfg.finetune,
        false,
        &hub,
        "finetune",
    )?;
    let rows: Vec<String> = log
        .iter()
        .map(|r| format!("{},{},{}", r.epoch, r.train_loss, r.val_acc))
        .collect();
    write_csv(&run_dir.join("finetune_log.csv"), "epoch,train_loss,val_acc", &rows)?;

    let ckpt = PathBuf::from(&cfg.paths.classifier_checkpoint);
    save_classifier(
        &ckpt,
        &model,
        serde_json::json!({
            "kind": "classifier",
            "classes": corpus.class_count(),
            "init": serde_json::to_value(cfg.finetune.init)?,
        }),
    )?;
    let test_labels = corpus.class_ids("test");
    let test_acc = evaluate_classifier(&model, corpus.split("test"), &test_labels)?;
    write_summary(
        run_dir,
        serde_json::json!({
            "checkpoint": cfg.paths.classifier_checkpoint,
            "epochs": cfg.finetune.epochs,
            "init": serde_json::to_value(cfg.finetune.init)?,
            "final_train_loss": log.last().map(|r| r.train_loss),
            "final_val_acc": log.last().map(|r| r.val_acc),
            "test_acc": test_acc,
        }),
    )?;
    println!(
        "fine-tuned {} epochs ({:?} init); val acc {:.4}, test acc {:.4}",
        cfg.finetune.epochs,
        cfg.finetune.init,
        log.last().map(|r| r.val_acc).unwrap_or(0.0),
        test_acc
    );
    Ok(())
}

fn build_seg_model(cfg: &RunConfig, n_parts: usize, hub: &RngHub) -> Result<SegModel> {
    let mut init_rng = hub.stream("seg-init");
    let backbone = crate::nn::Backbone::new(
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        &mut init_rng,
    )?;
    if cfg.finetune.init == InitKind::Pretrained {
        let manifest = Manifest::load(Path::new(&cfg.paths.pretrain_checkpoint))?;
        manifest.load_params("online.backbone.", &backbone.params())?;
    }
    let head = SegHead::new(
        cfg.model.dim,
        cfg.segmentation.head_hidden,
        n_parts,
        &cfg.segmentation.levels(),
        cfg.segmentation.knn_k,
        &mut init_rng,
    );
    Ok(SegModel {
        backbone,
        head,
        group_count: cfg.segmentation.group_count,
        group_size: cfg.segmentation.group_size,
    })
}

fn seg_training_set(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vec<PointCloud>, usize)> {
    let class_id = cfg
        .corpus
        .families
        .iter()
        .position(|f| *f == cfg.segmentation.family)
        .ok_or_else(|| {
            Error::Config(format!(
                "segmentation.family {:?} not present in corpus.families",
                cfg.segmentation.family
            ))
        })?;
    let by_class = corpus.by_class("train");
    let picked: Vec<PointCloud> = by_class[class_id]
        .iter()
        .take(cfg.segmentation.train_instances)
        .map(|&i| corpus.split("train")[i].clone())
        .collect();
    if picked.is_empty() {
        return Err(Error::Size("no training clouds for the chosen family".into()));
    }
    Ok((picked, class_id))
}

fn cmd_finetune_seg(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let hub = RngHub::new(cfg.seed);
    let taxonomy = corpus.manifest.taxonomy();
    let model = build_seg_model(cfg, taxonomy.part_count, &hub)?;
    let (clouds, class_id) = seg_training_set(cfg, &corpus)?;
    let log = train_segmentation(
        &model,
        &clouds,
        cfg.segmentation.epochs,
        cfg.segmentation.lr,
        cfg.segmentation.weight_decay,
        &hub,
    )?;
    let rows: Vec<String> = log
        .iter()
        .map(|r| format!("{},{},{}", r.epoch, r.train_loss, r.train_acc))
        .collect();
    write_csv(&run_dir.join("seg_log.csv"), "epoch,train_loss,train_acc", &rows)?;

    // train-set instance metrics with class-restricted predictions
    let mut instances = Vec::new();
    for cloud in &clouds {
        let logits = segment_forward(cloud, &model, &mut ForwardCtx::eval())?;
        let preds = predict_parts(&logits, &taxonomy.class_parts[class_id]);
        instances.push(SegInstance {
            class_id,
            predictions: preds,
            labels: cloud.labels.as_ref().unwrap().iter().map(|l| *l as usize).collect(),
        });
    }
    let report = miou(&instances, &taxonomy)?;

    let ckpt = PathBuf::from(&cfg.paths.seg_checkpoint);
    ensure_parent(&ckpt)?;
    let mut manifest = Manifest::new();
    manifest.insert_params("seg.", &model.params());
    manifest.meta = serde_json::json!({"kind": "seg", "parts": taxonomy.part_count});
    manifest.save(&ckpt)?;

    write_summary(
        run_dir,
        serde_json::json!({
            "checkpoint": cfg.paths.seg_checkpoint,
            "epochs": cfg.segmentation.epochs,
            "train_acc": log.last().map(|r| r.train_acc),
            "miou_instance": report.miou_instance,
            "miou_category": report.miou_category,
        }),
    )?;
    println!(
        "segmentation trained {} epochs; per-point train acc {:.4}; mIoU_I {:.2}",
        cfg.segmentation.epochs,
        log.last().map(|r| r.train_acc).unwrap_or(0.0),
        report.miou_instance
    );
    Ok(())
}

fn cmd_fewshot(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let hub = RngHub::new(cfg.seed);
    let pretrained = match cfg.finetune.init {
        InitKind::Pretrained => Some(Manifest::load(Path::new(&cfg.paths.pretrain_checkpoint))?),
        InitKind::Scratch => None,
    };
    let by_class = corpus.by_class("train");
    let report = fewshot_eval(
        corpus.split("train"),
        &by_class,
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        (cfg.pretrain.group_count, cfg.pretrain.group_size),
        &cfg.fewshot,
        &cfg.finetune,
        pretrained.as_ref(),
        &hub,
    )?;
    let rows: Vec<String> = report
        .episode_acc
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{i},{a}"))
        .collect();
    write_csv(&run_dir.join("fewshot_log.csv"), "episode,accuracy", &rows)?;
    write_summary(
        run_dir,
        serde_json::json!({
            "way": cfg.fewshot.way,
            "shot": cfg.fewshot.shot,
            "episodes": cfg.fewshot.episodes,
            "mode": serde_json::to_value(cfg.fewshot.mode)?,
            "init": serde_json::to_value(cfg.finetune.init)?,
            "mean_acc": report.mean_acc,
            "std_acc": report.std_acc,
        }),
    )?;
    println!(
        "{}-way {}-shot over {} episodes: {:.4} +- {:.4}",
        cfg.fewshot.way, cfg.fewshot.shot, cfg.fewshot.episodes, report.mean_acc, report.std_acc
    );
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let dvae = Dvae::load_checkpoint(Path::new(&cfg.paths.dvae_checkpoint))?;
    dvae.freeze();
    let hub = RngHub::new(cfg.seed);
    let mut state = init_pretrain_state(
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        &dvae,
        &cfg.pretrain,
        &hub,
    )?;
    crate::pretrain::load_pretrain_checkpoint(
        Path::new(&cfg.paths.pretrain_checkpoint),
        &mut state,
    )?;

    let split = corpus.split(&cfg.reconstruct.split);
    let cloud = split.get(cfg.reconstruct.cloud_index).ok_or_else(|| {
        Error::Size(format!(
            "reconstruct: cloud index {} out of range for split `{}` ({} clouds)",
            cfg.reconstruct.cloud_index,
            cfg.reconstruct.split,
            split.len()
        ))
    })?;
    let (g, n) = (cfg.pretrain.group_count, cfg.pretrain.group_size);
    let patches = group_patches(cloud, g, n)?;
    let mut mask_rng = hub.stream("reconstruct-mask");
    let mask = match cfg.reconstruct.strategy {
        MaskStrategy::Block => {
            make_block_mask(&patches.centers, cfg.reconstruct.mask_ratio, None, &mut mask_rng)?
        }
        MaskStrategy::Rand => make_rand_mask(g, cfg.reconstruct.mask_ratio, &mut mask_rng)?,
    };

    // predict tokens at the masked positions
    let (logits, _) = state
        .model
        .forward(&patches, Some(&mask), &mut ForwardCtx::eval())?;
    let predicted = crate::dvae::argmax_rows(&logits);
    let actual = dvae.hard_tokens(&patches)?;

    // decode the masked patches from the predicted tokens
    let token_ids: Vec<usize> = (0..g)
        .map(|i| if mask.contains(i) { predicted[i] } else { actual[i] })
        .collect();
    let token_embeds = ops::index_rows(&dvae.codebook, &token_ids)?;
    let decoded = dvae.decode(&token_embeds, &patches.centers)?;

    // assemble: original points for visible patches, decoded points for
    // masked ones
    let mut visible = Vec::new();
    let mut merged = Vec::new();
    let fine = decoded.fine.data();
    for i in 0..g {
        if mask.contains(i) {
            for j in 0..n {
                let base = (i * n + j) * 3;
                merged.push([fine[base], fine[base + 1], fine[base + 2]]);
            }
        } else {
            for p in &patches.patches[i] {
                let c = patches.centers[i];
                let abs = [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
                visible.push(abs);
                merged.push(abs);
            }
        }
    }
    drop(fine);

    let masked_correct = mask
        .masked
        .iter()
        .filter(|&&i| predicted[i] == actual[i])
        .count();

    write_cloud(&run_dir.join("original.pcld"), cloud)?;
    let visible_cloud = PointCloud::new(visible);
    write_cloud(&run_dir.join("masked_input.pcld"), &visible_cloud)?;
    let merged_cloud = PointCloud::new(merged);
    write_cloud(&run_dir.join("reconstruction.pcld"), &merged_cloud)?;
    write_cloud_csv(&run_dir.join("reconstruction.csv"), &merged_cloud)?;

    write_summary(
        run_dir,
        serde_json::json!({
            "split": cfg.reconstruct.split,
            "cloud_index": cfg.reconstruct.cloud_index,
            "strategy": serde_json::to_value(cfg.reconstruct.strategy)?,
            "mask_ratio": cfg.reconstruct.mask_ratio,
            "masked_patches": mask.len(),
            "total_patches": g,
            "reconstruction_points": merged_cloud.len(),
            "masked_token_accuracy": masked_correct as f64 / mask.len() as f64,
        }),
    )?;
    println!(
        "reconstructed {} points ({} of {} patches masked, token acc {:.3})",
        merged_cloud.len(),
        mask.len(),
        g,
        masked_correct as f64 / mask.len() as f64
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let seeds: Vec<u64> = (0..5).map(|i| cfg.seed.wrapping_add(i)).collect();
    let cases = gradcheck_suite(&seeds)?;
    let mut rows = Vec::with_capacity(cases.len());
    let mut all_pass = true;
    let mut table = String::new();
    writeln!(table, "{:<20} {:>12} {:>8} {:>6}", "op family", "max rel err", "params", "status").ok();
    for c in &cases {
        let pass = c.passed(1e-4);
        all_pass &= pass;
        writeln!(
            table,
            "{:<20} {:>12.3e} {:>8} {:>6}",
            c.name,
            c.max_rel_err,
            c.checked_params,
            if pass { "ok" } else { "FAIL" }
        )
        .ok();
        rows.push(format!(
            "{},{},{},{}",
            c.name,
            c.max_rel_err,
            c.checked_params,
            if pass { "ok" } else { "fail" }
        ));
    }
    print!("{table}");
    write_csv(
        &run_dir.join("gradcheck.csv"),
        "family,max_rel_err,checked_params,status",
        &rows,
    )?;
    write_summary(
        run_dir,
        serde_json::json!({
            "seeds": seeds,
            "tolerance": 1e-4,
            "families": cases.len(),
            "all_pass": all_pass,
        }),
    )?;
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numerics(
            "gradient check failed for at least one op family".into(),
        ))
    }
}

fn cmd_eval(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus_checked(cfg)?;
    let hub = RngHub::new(cfg.seed);
    match cfg.eval.task.as_str() {
        "cls" => {
            let manifest = Manifest::load(Path::new(&cfg.paths.classifier_checkpoint))?;
            let model = build_classifier_from_scratch_shape(cfg, &corpus, &hub)?;
            manifest.load_params("classifier.", &model.params())?;
            let labels = corpus.class_ids(&cfg.eval.split);
            let acc = evaluate_classifier(&model, corpus.split(&cfg.eval.split), &labels)?;
            write_summary(
                run_dir,
                serde_json::json!({"task": "cls", "split": cfg.eval.split, "accuracy": acc}),
            )?;
            println!("classification accuracy on {}: {:.4}", cfg.eval.split, acc);
        }
        "seg" => {
            let manifest = Manifest::load(Path::new(&cfg.paths.seg_checkpoint))?;
            let taxonomy = corpus.manifest.taxonomy();
            let model = build_seg_model_skeleton(cfg, taxonomy.part_count, &hub)?;
            manifest.load_params("seg.", &model.params())?;
            let class_id = cfg
                .corpus
                .families
                .iter()
                .position(|f| *f == cfg.segmentation.family)
                .unwrap_or(0);
            let by_class = corpus.by_class(&cfg.eval.split);
            let mut instances = Vec::new();
            for &i in &by_class[class_id] {
                let cloud = &corpus.split(&cfg.eval.split)[i];
                let logits = segment_forward(cloud, &model, &mut ForwardCtx::eval())?;
                instances.push(SegInstance {
                    class_id,
                    predictions: predict_parts(&logits, &taxonomy.class_parts[class_id]),
                    labels: cloud
                        .labels
                        .as_ref()
                        .map(|l| l.iter().map(|x| *x as usize).collect())
                        .unwrap_or_default(),
                });
            }
            let report = miou(&instances, &taxonomy)?;
            write_summary(
                run_dir,
                serde_json::json!({
                    "task": "seg",
                    "split": cfg.eval.split,
                    "miou_instance": report.miou_instance,
                    "miou_category": report.miou_category,
                    "per_category": report.per_category,
                }),
            )?;
            println!(
                "mIoU_I {:.2} mIoU_C {:.2} on {}",
                report.miou_instance, report.miou_category, cfg.eval.split
            );
        }
        other => {
            return Err(Error::Config(format!(
                "eval.task must be `cls` or `seg`, got `{other}`"
            )))
        }
    }
    Ok(())
}

fn build_classifier_from_scratch_shape(
    cfg: &RunConfig,
    corpus: &Corpus,
    hub: &RngHub,
) -> Result<ClassifierModel> {
    let mut rng = hub.stream("eval-init");
    build_classifier(
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        cfg.pretrain.group_count,
        cfg.pretrain.group_size,
        corpus.class_count(),
        &cfg.finetune,
        None,
        &mut rng,
    )
}

fn build_seg_model_skeleton(cfg: &RunConfig, n_parts: usize, hub: &RngHub) -> Result<SegModel> {
    let mut rng = hub.stream("eval-seg-init");
    let backbone = crate::nn::Backbone::new(
        &cfg.model.transformer(),
        &cfg.model.embedder,
        cfg.model.pos_hidden,
        &mut rng,
    )?;
    let head = SegHead::new(
        cfg.model.dim,
        cfg.segmentation.head_hidden,
        n_parts,
        &cfg.segmentation.levels(),
        cfg.segmentation.knn_k,
        &mut rng,
    );
    Ok(SegModel {
        backbone,
        head,
        group_count: cfg.segmentation.group_count,
        group_size: cfg.segmentation.group_size,
    })
}

