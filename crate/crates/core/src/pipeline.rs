//! End-to-end experiment orchestration shared by the CLI and the acceptance
//! suite: dataset preparation, the pretraining and finetuning loops with
//! cosine schedules and CSV logs, evaluation, profiling and the
//! finite-difference verification suite. Everything is deterministic given
//! the configuration and seed.

use crate::config::Config;
use crate::data::{synth_dataset, ClipRecord, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{EngineError, Result};
use crate::metrics::IouAccum;
use crate::optim::{cosine_lr, AdamW};
use crate::pretrain::{
    pretrain_step, FixtureTeacher, PretrainModel, RandomConvTeacher, Teacher, ZeroTeacher,
};
use crate::profiler::{InferCtx, ProfileReport};
use crate::seghead::{build_seg_model, finetune_step, SegHeadConfig, SegModel};
use crate::tape::ParamStore;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Experiment {
    pub enc: EncoderConfig,
    pub head: SegHeadConfig,
    pub synth: SynthConfig,
    pub clips_train: usize,
    pub clips_eval: usize,
    pub data_dir: Option<PathBuf>,
    // pretraining
    pub pre_steps: usize,
    pub pre_schedule_max: usize,
    pub pre_lr: f64,
    pub pre_batch: usize,
    pub alpha: f64,
    pub lambda_kd: f64,
    pub teacher_kind: String,
    pub teacher_channels: usize,
    pub fixture_dir: Option<PathBuf>,
    // finetuning
    pub ft_steps: usize,
    pub ft_schedule_max: usize,
    pub ft_lr: f64,
    pub ft_batch: usize,
    pub freeze_encoder: bool,
    pub weight_decay: f64,
}

impl Experiment {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mut enc = EncoderConfig::by_name(cfg.str_or("model", "variant", "tiny"))?;
        enc.net.conv_gain = cfg.f64_or("model", "conv_gain", enc.net.conv_gain)?;
        enc.net.u_th = cfg.f64_or("model", "u_th", enc.net.u_th)?;
        enc.net.surrogate_width =
            cfg.f64_or("model", "surrogate_width", enc.net.surrogate_width)?;
        let classes = cfg.usize_or("model", "classes", 2)?;
        let mut head = SegHeadConfig::new(cfg.usize_or("model", "head_channels", 32)?, classes);
        head.focal_gamma = cfg.f64_or("finetune", "gamma", 2.0)?;
        head.mem_capacity = cfg.usize_or("model", "mem_capacity", 3)?;

        let h = cfg.usize_or("data", "h", 64)?;
        let w = cfg.usize_or("data", "w", 64)?;
        let seed0 = cfg.u64_or("data", "seed", 1)?;
        let mut synth = if cfg.str_or("data", "preset", "default") == "surgical" {
            SynthConfig::surgical_scale(h, w, seed0)
        } else {
            SynthConfig::new(h, w, classes, seed0)
        };
        synth.t = cfg.usize_or("data", "t", 4)?;
        synth.noise = cfg.f64_or("data", "noise", synth.noise)?;
        synth.blobs = cfg.usize_or("data", "blobs", synth.blobs)?;
        synth.occluders = cfg.bool_or("data", "occluders", synth.occluders)?;
        synth.r_min = cfg.f64_or("data", "r_min", synth.r_min)?;
        synth.r_max = cfg.f64_or("data", "r_max", synth.r_max)?;
        synth.vel_min = cfg.f64_or("data", "vel_min", synth.vel_min)?;
        synth.vel_max = cfg.f64_or("data", "vel_max", synth.vel_max)?;
        synth.contrast = cfg.f64_or("data", "contrast", synth.contrast)?;

        Ok(Experiment {
            enc,
            head,
            synth,
            clips_train: cfg.usize_or("data", "clips_train", 24)?,
            clips_eval: cfg.usize_or("data", "clips_eval", 8)?,
            data_dir: cfg.get("data", "dir").map(PathBuf::from),
            pre_steps: cfg.usize_or("pretrain", "steps", 200)?,
            pre_schedule_max: cfg.usize_or("pretrain", "schedule_max", 250)?,
            pre_lr: cfg.f64_or("pretrain", "lr", 2e-3)?,
            pre_batch: cfg.usize_or("pretrain", "batch", 2)?,
            alpha: cfg.f64_or("pretrain", "alpha", 0.5)?,
            lambda_kd: cfg.f64_or("pretrain", "lambda_kd", 0.1)?,
            teacher_kind: cfg.str_or("pretrain", "teacher", "random").to_string(),
            teacher_channels: cfg.usize_or("pretrain", "teacher_channels", 16)?,
            fixture_dir: cfg.get("pretrain", "fixture_dir").map(PathBuf::from),
            ft_steps: cfg.usize_or("finetune", "steps", 200)?,
            ft_schedule_max: cfg.usize_or("finetune", "schedule_max", 300)?,
            ft_lr: cfg.f64_or("finetune", "lr", 2e-3)?,
            ft_batch: cfg.usize_or("finetune", "batch", 2)?,
            freeze_encoder: cfg.bool_or("finetune", "freeze_encoder", false)?,
            weight_decay: cfg.f64_or("finetune", "weight_decay", 0.0)?,
        })
    }

    pub fn teacher(&self, seed: u64) -> Result<Box<dyn Teacher>> {
        match self.teacher_kind.as_str() {
            "random" => Ok(Box::new(RandomConvTeacher::new(
                seed ^ 0x7eac4e2,
                self.teacher_channels,
            ))),
            "zero" => Ok(Box::new(ZeroTeacher {
                ch: self.teacher_channels,
            })),
            "fixture" => {
                let dir = self.fixture_dir.clone().ok_or_else(|| {
                    EngineError::InvalidConfig("teacher = fixture needs fixture_dir".into())
                })?;
                Ok(Box::new(FixtureTeacher {
                    dir,
                    ch: self.teacher_channels,
                }))
            }
            other => Err(EngineError::InvalidConfig(format!(
                "unknown teacher '{other}'"
            ))),
        }
    }

    fn train_clips(&self, seed: u64) -> Result<Vec<ClipRecord>> {
        if let Some(dir) = &self.data_dir {
            let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            subdirs.sort();
            return subdirs.iter().map(|d| crate::data::load_clip(d)).collect();
        }
        let cfg = SynthConfig {
            seed: self.synth.seed ^ seed,
            ..self.synth.clone()
        };
        synth_dataset(&cfg, self.clips_train)
    }

    fn eval_clips(&self, seed: u64) -> Result<Vec<ClipRecord>> {
        let cfg = SynthConfig {
            seed: self.synth.seed ^ seed,
            ..self.synth.clone()
        };
        (self.clips_train..self.clips_train + self.clips_eval)
            .map(|i| crate::data::synth_clip(&cfg, i))
            .collect()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Masked-autoencoding pretraining; writes a loss CSV and the encoder-only
/// checkpoint. Returns the checkpoint path.
pub fn run_pretrain(exp: &Experiment, config_echo: &str, seed: u64, out: &Path) -> Result<PathBuf> {
    let clips = exp.train_clips(seed)?;
    if clips.is_empty() {
        return Err(EngineError::InvalidConfig("empty pretraining set".into()));
    }
    let (t, h, w) = (clips[0].t, clips[0].h, clips[0].w);
    let mut store = ParamStore::new();
    let model = PretrainModel::build(
        &mut store,
        &exp.enc,
        t,
        h,
        w,
        exp.teacher_channels,
        exp.lambda_kd,
        exp.alpha,
        seed,
    )?;
    let teacher = exp.teacher(seed)?;
    let tensors: Vec<(String, crate::tensor::PotentialTensor)> = clips
        .iter()
        .map(|c| (c.id.clone(), c.to_tensor()))
        .collect();
    let mut opt = AdamW::new(exp.weight_decay);
    let mut csv = String::from("step,lr,recon,kd,total\n");
    for step in 0..exp.pre_steps {
        let lr = cosine_lr(step, exp.pre_schedule_max, exp.pre_lr)?;
        let batch: Vec<_> = (0..exp.pre_batch)
            .map(|i| tensors[(step * exp.pre_batch + i) % tensors.len()].clone())
            .collect();
        let m = pretrain_step(
            &mut store,
            &model,
            teacher.as_ref(),
            &batch,
            &mut opt,
            lr,
            seed ^ step as u64,
        )?;
        csv.push_str(&format!(
            "{step},{lr:.8},{:.6},{:.6},{:.6}\n",
            m.recon, m.kd, m.total
        ));
    }
    write_file(&out.join("pretrain.csv"), &csv)?;
    let ckpt = out.join("encoder.spkc");
    crate::pretrain::export_encoder(&ckpt, &store, config_echo)?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub ckpt: PathBuf,
    pub eval_miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Segmentation finetuning from scratch or from a pretrained encoder
/// checkpoint; evaluates on held-out clips and writes CSV + checkpoint.
pub fn run_finetune(
    exp: &Experiment,
    config_echo: &str,
    seed: u64,
    out: &Path,
    init: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let clips = exp.train_clips(seed)?;
    let labeled: Vec<(crate::tensor::PotentialTensor, Vec<u8>)> = clips
        .iter()
        .map(|c| {
            let labels = c.labels.clone().ok_or_else(|| {
                EngineError::InvalidConfig(format!("clip {} has no labels", c.id))
            })?;
            Ok((c.to_tensor(), labels))
        })
        .collect::<Result<_>>()?;
    let mut store = ParamStore::new();
    let model = build_seg_model(&mut store, &exp.enc, &exp.head, seed)?;
    if let Some(ckpt) = init {
        let (_echo, entries) = crate::encoder::load_checkpoint(ckpt)?;
        crate::encoder::load_into(&mut store, &entries, "enc.")?;
    }
    let mut opt = AdamW::new(exp.weight_decay);
    let mut csv = String::from("step,lr,ce,focal,total,miou_batch\n");
    for step in 0..exp.ft_steps {
        let lr = cosine_lr(step, exp.ft_schedule_max, exp.ft_lr)?;
        let batch: Vec<_> = (0..exp.ft_batch)
            .map(|i| labeled[(step * exp.ft_batch + i) % labeled.len()].clone())
            .collect();
        let m = finetune_step(&mut store, &model, &batch, &mut opt, lr, exp.freeze_encoder)?;
        csv.push_str(&format!(
            "{step},{lr:.8},{:.6},{:.6},{:.6},{:.4}\n",
            m.ce, m.focal, m.total, m.miou_batch
        ));
    }
    write_file(&out.join("finetune.csv"), &csv)?;
    let ckpt = out.join("model.spkc");
    crate::encoder::save_checkpoint(&ckpt, &store, None, config_echo)?;

    let (eval_miou, per_class) = evaluate(&store, &model, &exp.eval_clips(seed)?, None)?;
    Ok(FinetuneOutcome {
        ckpt,
        eval_miou,
        per_class,
    })
}

/// Evaluate a model over labeled clips; optionally export predictions.
pub fn evaluate(
    store: &ParamStore,
    model: &SegModel,
    clips: &[ClipRecord],
    pred_dir: Option<&Path>,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut acc = IouAccum::new(model.head.cfg.classes);
    for clip in clips {
        let labels = clip
            .labels
            .as_ref()
            .ok_or_else(|| EngineError::InvalidConfig(format!("clip {} has no labels", clip.id)))?;
        let mut ctx = InferCtx::new();
        let pred = model.predict(store, &clip.to_tensor(), &mut ctx)?;
        acc.add(&pred, labels)?;
        if let Some(dir) = pred_dir {
            std::fs::create_dir_all(dir)?;
            crate::data::save_prediction(&dir.join(&clip.id), &pred, clip.t, clip.h, clip.w)?;
        }
    }
    Ok((acc.miou()?, acc.per_class()))
}

/// Rebuild the model from config, load a full checkpoint, evaluate.
pub fn run_eval(
    exp: &Experiment,
    seed: u64,
    ckpt: &Path,
    out: &Path,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut store = ParamStore::new();
    let model = build_seg_model(&mut store, &exp.enc, &exp.head, seed)?;
    let (_echo, entries) = crate::encoder::load_checkpoint(ckpt)?;
    crate::encoder::load_into(&mut store, &entries, "")?;
    let clips = exp.eval_clips(seed)?;
    let (miou, per_class) = evaluate(&store, &model, &clips, Some(&out.join("predictions")))?;
    let mut csv = String::from("class,iou\n");
    for (k, v) in per_class.iter().enumerate() {
        match v {
            Some(x) => csv.push_str(&format!("{k},{x:.6}\n")),
            None => csv.push_str(&format!("{k},undefined\n")),
        }
    }
    csv.push_str(&format!("mIoU,{miou:.6}\n"));
    write_file(&out.join("eval.csv"), &csv)?;
    Ok((miou, per_class))
}

/// Instrumented inference over one synthetic clip: op counts, energy,
/// latency, parameter counts. The clip is fresh-built from the data config.
pub fn run_profile(exp: &Experiment, seed: u64, out: &Path) -> Result<ProfileReport> {
    let mut store = ParamStore::new();
    let model = build_seg_model(&mut store, &exp.enc, &exp.head, seed)?;
    let cfg = SynthConfig {
        seed: exp.synth.seed ^ seed,
        ..exp.synth.clone()
    };
    let clip = crate::data::synth_clip(&cfg, 0)?.to_tensor();
    let mut ctx = InferCtx::new();
    let _ = model.infer_logits(&store, &clip, &mut ctx)?;
    let params = store.scalar_count(Some("enc.")) + store.scalar_count(Some("head."));
    let report = ProfileReport::new(params, ctx.counter);
    write_file(&out.join("profile.csv"), &report.to_csv())?;
    write_file(&out.join("profile.txt"), &format!("{report}"))?;
    Ok(report)
}

/// The relaxation-mode finite-difference verification suite (encoder blocks,
/// channel MLP, the SDHA path, the FPN, and all four losses plus the mask
/// embedding). Returns (fragment name, max relative error) pairs.
pub fn run_gradcheck(seed: u64) -> Vec<(String, f64)> {
    crate::verify::gradcheck_suite(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct BenefitOutcome {
    pub pretrained_miou: f64,
    pub scratch_miou: f64,
}

/// The pretraining-benefit experiment: pretrain, then finetune twice (from
/// the pretrained encoder and from scratch) under the same budget and seed.
pub fn pretraining_benefit(
    exp: &Experiment,
    config_echo: &str,
    seed: u64,
    out: &Path,
) -> Result<BenefitOutcome> {
    let ckpt = run_pretrain(exp, config_echo, seed, &out.join("pretrain"))?;
    let pre = run_finetune(
        exp,
        config_echo,
        seed,
        &out.join("ft_pretrained"),
        Some(&ckpt),
    )?;
    let scratch = run_finetune(exp, config_echo, seed, &out.join("ft_scratch"), None)?;
    Ok(BenefitOutcome {
        pretrained_miou: pre.eval_miou,
        scratch_miou: scratch.eval_miou,
    })
}

/// Mask-ratio sweep: rerun the benefit pipeline per ratio, recording the
/// best-performing ratio (no assertion about which wins).
pub fn mask_ratio_sweep(
    exp: &Experiment,
    ratios: &[f64],
    seed: u64,
    out: &Path,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut rows = Vec::new();
    for &alpha in ratios {
        let mut e = exp.clone();
        e.alpha = alpha;
        let tag = format!("alpha_{:.2}", alpha);
        let ckpt = run_pretrain(&e, &tag, seed, &out.join(&tag).join("pretrain"))?;
        let ft = run_finetune(
            &e,
            &tag,
            seed,
            &out.join(&tag).join("finetune"),
            Some(&ckpt),
        )?;
        rows.push((alpha, ft.eval_miou));
    }
    let mut csv = String::from("alpha,miou\n");
    for (a, m) in &rows {
        csv.push_str(&format!("{a:.2},{m:.6}\n"));
    }
    let best = rows
        .iter()
        .cloned()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, r| {
            if r.1 > acc.1 {
                r
            } else {
                acc
            }
        });
    csv.push_str(&format!("best,{:.2}\n", best.0));
    write_file(&out.join("mask_sweep.csv"), &csv)?;
    Ok((best.0, rows))
}
