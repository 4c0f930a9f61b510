//! The workflows behind each subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use posediff_core::denoiser::PromptedDenoiser;
use posediff_core::io::container::Container;
use posediff_core::io::dataset::{load_dataset, Dataset, SequenceRecord};
use posediff_core::io::normalize::{normalize_record, observation, NormalizationMode};
use posediff_core::io::synth::{synth_generate, synth_mixed, synth_scene, MotionKind};
use posediff_core::metrics::{evaluate_sequence, MetricReport, SequenceMetrics};
use posediff_core::prompt::{frozen_tokens_from_container, HashTextEncoder, PromptBank, PromptSpec};
use posediff_core::rng::derive_seed;
use posediff_core::sampler::{estimate_multi, estimate_single, JpmaMode, PoseDenoiser};
use posediff_core::training::{checkpoint_config_hash, Model, Trainer, TrainingSample};
use posediff_core::Tensor;
use serde_json::json;

use crate::config::RunConfig;

pub const TRAIN_FILE: &str = "train.ptc";
pub const VALIDATION_FILE: &str = "val.ptc";
pub const SCENE_FILE: &str = "scene.ptc";
pub const CHECKPOINT_FILE: &str = "checkpoint.ptc";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,step,loss,lr,wall_ms";
/// `S×N×J×3` predicted poses in camera-frame millimetres, one row per
/// sequence in dataset order.
pub const POSES: &str = "pred/poses";
/// `S×J` (or `S×N×J` with per-frame selection) chosen hypothesis indices.
pub const HYPOTHESIS_INDEX: &str = "pred/per_joint_hypothesis_index";
/// Characters in the generated multi-person scene.
pub const SCENE_CHARACTERS: usize = 3;

fn provenance(cfg: &RunConfig) -> serde_json::Value {
    json!({ "config_hash": cfg.hash(), "preset": cfg.preset, "seed": cfg.seed })
}

fn write_dataset(path: &Path, ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    let mut c = ds.to_container()?;
    c.set_metadata("provenance", provenance(cfg));
    c.write(path).with_context(|| format!("writing {}", path.display()))
}

/// Writes the training split, a disjoint validation split and a
/// multi-person scene into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (n, j) = (cfg.denoiser.frames, cfg.denoiser.joints);
    let split = |count: usize, seed: u64| -> Result<Dataset> {
        Ok(match cfg.data.motion.as_str() {
            "mixed" => synth_mixed(count, n, j, seed)?,
            kind => synth_generate(count, n, j, seed, MotionKind::parse(kind)?)?,
        })
    };
    let mut val = split(cfg.data.validation_sequences.max(1), derive_seed(cfg.seed, &[11]))?;
    for r in &mut val.records {
        r.id = format!("val_{}", r.id);
        r.scene = r.id.clone();
    }
    let files = [
        (TRAIN_FILE, split(cfg.data.sequences, derive_seed(cfg.seed, &[10]))?),
        (VALIDATION_FILE, val),
        (SCENE_FILE, synth_scene(SCENE_CHARACTERS, n, j, derive_seed(cfg.seed, &[12]))?),
    ];
    let mut written = Vec::new();
    for (name, ds) in files {
        let path = out.join(name);
        write_dataset(&path, &ds, cfg)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_dims(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (n, j) = (cfg.denoiser.frames, cfg.denoiser.joints);
    for r in &ds.records {
        ensure!(
            r.frames() == n && r.joints() == j,
            "sequence {} is {}x{} (frames x joints) but the model expects {n}x{j}; \
             regenerate the data or set denoiser.frames/denoiser.joints",
            r.id,
            r.frames(),
            r.joints()
        );
    }
    Ok(())
}

/// Frozen prompt tokens for every action not yet in `bank`, from the
/// configured precomputed file or the built-in hash encoder.
pub fn register_prompts<'a>(bank: &mut PromptBank, actions: impl IntoIterator<Item = &'a str>, cfg: &RunConfig) -> Result<()> {
    match &cfg.data.prompt_embeddings {
        Some(path) => {
            let c = Container::read(path).with_context(|| format!("reading prompt embeddings {}", path.display()))?;
            let tokens = frozen_tokens_from_container(&c, bank.dim())?;
            for a in actions {
                let key = PromptSpec::new(a).action().to_string();
                if bank.frozen(&key).is_err() {
                    bank.set_frozen(&key, tokens.clone())?;
                }
            }
        }
        None => {
            let enc = HashTextEncoder::new(bank.dim());
            for a in actions {
                bank.register_action(a, &enc)?;
            }
        }
    }
    Ok(())
}

pub fn training_samples(ds: &Dataset, mode: NormalizationMode) -> Result<Vec<TrainingSample>> {
    ds.records
        .iter()
        .map(|r| {
            let n = normalize_record(r, mode)?;
            let pose = n.pose.ok_or_else(|| anyhow!("sequence {} has no gt_3d and cannot be trained on", r.id))?;
            Ok(TrainingSample { keypoints: n.keypoints, pose, action: r.action.clone() })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn checkpoint_container(trainer: &Trainer, cfg: &RunConfig) -> Result<Container> {
    let mut c = trainer.to_container(&cfg.hash())?;
    c.set_metadata("run_config", serde_json::to_value(cfg)?);
    Ok(c)
}

/// Log rows of the first `steps` steps of an earlier run.
fn kept_log_rows(path: &Path, steps: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let step: usize = line
            .split(',')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| anyhow!("malformed row in {}: {line}", path.display()))?;
        if step <= steps {
            rows.push(line.to_string());
        }
    }
    Ok(rows)
}

/// Trains on the dataset at `data`, checkpointing every epoch into `out`.
/// With `resume`, continues from `out/checkpoint.ptc`.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: bool,
    mut progress: impl FnMut(&str),
) -> Result<TrainSummary> {
    let ds = read_dataset(data)?;
    check_dims(cfg, &ds)?;
    let samples = training_samples(&ds, cfg.data.normalization)?;
    let sched = cfg.schedule.build()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);

    let (mut trainer, rows) = if resume {
        let c = Container::read(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
        let stored = checkpoint_config_hash(&c).unwrap_or_default();
        ensure!(
            stored == cfg.hash(),
            "{} was written with config {stored}, the current config hashes to {}; resume with the same config",
            ckpt_path.display(),
            cfg.hash()
        );
        let t = Trainer::from_container(&c)?;
        let rows = kept_log_rows(&log_path, t.progress.step)?;
        (t, rows)
    } else {
        let mut model = Model::init(&cfg.denoiser, cfg.seed)?;
        register_prompts(&mut model.bank, ds.records.iter().map(|r| r.action.as_str()), cfg)?;
        (Trainer::new(model, cfg.train.clone(), cfg.seed)?, Vec::new())
    };

    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(log, "{r}")?;
    }
    let start = Instant::now();
    let mut last = f64::NAN;
    while trainer.progress.epoch < cfg.train.epochs {
        last = trainer.train_epoch(&samples, &sched, |s, _| {
            writeln!(log, "{},{},{:e},{:e},{}", s.epoch, s.step, s.loss, s.lr, start.elapsed().as_millis())?;
            Ok(())
        })?;
        log.flush()?;
        let epoch = trainer.progress.epoch;
        let c = checkpoint_container(&trainer, cfg)?;
        c.write(&ckpt_path)?;
        if epoch % cfg.output.checkpoint_every == 0 || epoch == cfg.train.epochs {
            c.write(out.join(format!("checkpoint_epoch_{epoch:04}.ptc")))?;
        }
        progress(&format!("epoch {epoch}/{} step {} loss {last:.5}", cfg.train.epochs, trainer.progress.step));
    }
    if !ckpt_path.exists() {
        checkpoint_container(&trainer, cfg)?.write(&ckpt_path)?;
    }
    Ok(TrainSummary { epochs: trainer.progress.epoch, steps: trainer.progress.step, final_loss: last, checkpoint: ckpt_path })
}

/// A trained model together with the configuration it was trained under.
pub struct LoadedCheckpoint {
    pub trainer: Trainer,
    pub config: Option<RunConfig>,
    pub config_hash: String,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let c = Container::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let trainer = Trainer::from_container(&c).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let config = match c.metadata().get("run_config") {
        Some(v) => Some(serde_json::from_value(v.clone()).context("checkpoint run_config")?),
        None => None,
    };
    Ok(LoadedCheckpoint { trainer, config, config_hash: checkpoint_config_hash(&c).unwrap_or_default() })
}

/// Checks that `cfg` describes the same network and noise schedule as the
/// checkpoint.
pub fn check_compatible(cfg: &RunConfig, ckpt: &LoadedCheckpoint) -> Result<()> {
    let have = &ckpt.trainer.model.config;
    if &cfg.denoiser != have {
        bail!(
            "checkpoint is incompatible with the config: checkpoint denoiser {} vs config {}",
            serde_json::to_string(have)?,
            serde_json::to_string(&cfg.denoiser)?
        );
    }
    if let Some(trained) = &ckpt.config {
        ensure!(
            trained.schedule == cfg.schedule,
            "checkpoint was trained with a different noise schedule ({:?} vs {:?})",
            trained.schedule,
            cfg.schedule
        );
    }
    Ok(())
}

/// Runs the sampler on every record of `ds`. Records sharing a scene with
/// other records go through the multi-person path.
pub fn estimate(cfg: &RunConfig, ckpt: &LoadedCheckpoint, ds: &Dataset) -> Result<Container> {
    check_compatible(cfg, ckpt)?;
    check_dims(cfg, ds)?;
    ensure!(
        ckpt.config.as_ref().map_or(true, |c| c.data.normalization == NormalizationMode::RootCentered),
        "estimation needs a model trained on root_centered poses"
    );
    let model = &ckpt.trainer.model;
    let mut bank: PromptBank = model.bank.clone();
    register_prompts(&mut bank, ds.records.iter().map(|r| r.action.as_str()), cfg)?;
    let sched = cfg.schedule.build()?;

    let mut scenes: BTreeMap<&str, Vec<&SequenceRecord>> = BTreeMap::new();
    for r in &ds.records {
        scenes.entry(r.scene.as_str()).or_default().push(r);
    }
    let mut results: BTreeMap<&str, (Tensor, Vec<usize>, bool)> = BTreeMap::new();
    for (scene, mut members) in scenes {
        members.sort_by_key(|r| (r.character, r.id.clone()));
        let dens = members
            .iter()
            .map(|r| PromptedDenoiser::new(&model.config, &model.weights, &bank, &r.action))
            .collect::<posediff_core::Result<Vec<_>>>()?;
        let obs = members.iter().map(|r| observation(r)).collect::<posediff_core::Result<Vec<_>>>()?;
        let scene_seed = derive_seed(cfg.seed, &[string_key(scene)]);
        let multi = members.len() > 1;
        let (poses, indices): (Vec<Tensor>, Vec<Vec<usize>>) = if multi {
            let refs: Vec<&dyn PoseDenoiser> = dens.iter().map(|d| d as &dyn PoseDenoiser).collect();
            let m = estimate_multi(&refs, &obs, &sched, &cfg.sampler, scene_seed)?;
            ((0..members.len()).map(|k| m.poses.index0(k)).collect(), m.hypothesis_index)
        } else {
            let e = estimate_single(&dens[0], &obs[0], &sched, &cfg.sampler, scene_seed)?;
            (vec![e.pose], vec![e.hypothesis_index])
        };
        for ((r, pose), index) in members.iter().zip(poses).zip(indices) {
            results.insert(r.id.as_str(), (pose, index, multi));
        }
    }

    let (n, j) = (cfg.denoiser.frames, cfg.denoiser.joints);
    let index_shape = match cfg.sampler.jpma {
        JpmaMode::PerSequence => vec![j],
        JpmaMode::PerFrame => vec![n, j],
    };
    let mut poses = Vec::with_capacity(ds.records.len());
    let mut indices = Vec::with_capacity(ds.records.len());
    let mut entries = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        let (pose, index, multi) = results.remove(r.id.as_str()).expect("every record was estimated");
        poses.push(pose);
        indices.push(Tensor::from_vec(index_shape.clone(), index.iter().map(|&i| i as f64).collect())?);
        entries.push(json!({
            "id": r.id,
            "action": r.action,
            "scene": r.scene,
            "character": r.character,
            "multi_person": multi,
            "camera": r.camera_or_default(),
            "camera_source": if r.camera.is_some() { "dataset" } else { "default" },
        }));
    }
    let mut c = Container::new();
    c.insert(POSES, &Tensor::stack(&poses)?);
    c.insert(HYPOTHESIS_INDEX, &Tensor::stack(&indices)?);
    c.set_metadata(
        "predictions",
        json!({
            "units": "mm",
            "coordinates": "camera frame",
            "config_hash": cfg.hash(),
            "checkpoint_config_hash": ckpt.config_hash,
            "seed": cfg.seed,
            "jpma": cfg.sampler.jpma,
            "sequences": entries,
        }),
    );
    c.set_metadata("run_config", serde_json::to_value(cfg)?);
    Ok(c)
}

/// Stable 64-bit key of a string, for seeding.
fn string_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Predicted poses keyed by sequence id, and the config hash they were
/// produced under.
pub fn read_predictions(path: &Path) -> Result<(BTreeMap<String, Tensor>, String)> {
    let c = Container::read(path).with_context(|| format!("reading predictions {}", path.display()))?;
    let meta = c
        .metadata()
        .get("predictions")
        .ok_or_else(|| anyhow!("{} is not a prediction file", path.display()))?;
    let hash = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let ids: Vec<&str> = meta
        .get("sequences")
        .and_then(|v| v.as_array())
        .ok_or_else(|| anyhow!("{} lists no sequences", path.display()))?
        .iter()
        .map(|e| e.get("id").and_then(|v| v.as_str()).ok_or_else(|| anyhow!("sequence entry without id")))
        .collect::<Result<_>>()?;
    let poses = c.get(POSES)?;
    ensure!(
        poses.ndim() == 4 && poses.shape()[0] == ids.len(),
        "{POSES} is {:?} for {} listed sequences",
        poses.shape(),
        ids.len()
    );
    let out = ids.iter().enumerate().map(|(i, id)| (id.to_string(), poses.index0(i))).collect();
    Ok((out, hash))
}

/// Frames of `t` whose presence flag is set.
pub fn present_frames(t: &Tensor, presence: &[bool]) -> Result<Tensor> {
    let per = t.numel() / t.shape()[0];
    let data: Vec<f64> = presence
        .iter()
        .enumerate()
        .filter(|(_, p)| **p)
        .flat_map(|(f, _)| t.data()[f * per..(f + 1) * per].to_vec())
        .collect();
    let mut shape = t.shape().to_vec();
    shape[0] = presence.iter().filter(|p| **p).count();
    Ok(Tensor::from_vec(shape, data)?)
}

/// Prediction and ground truth of one sequence over its present frames.
pub fn paired(pred: &Tensor, rec: &SequenceRecord) -> Result<(Tensor, Tensor)> {
    let gt = rec.gt_3d.as_ref().ok_or_else(|| anyhow!("sequence {} has no ground truth to evaluate against", rec.id))?;
    ensure!(
        pred.shape() == gt.shape(),
        "sequence {}: prediction {:?} vs ground truth {:?}",
        rec.id,
        pred.shape(),
        gt.shape()
    );
    ensure!(rec.presence.iter().any(|p| *p), "sequence {} has no present frames", rec.id);
    Ok((present_frames(pred, &rec.presence)?, present_frames(gt, &rec.presence)?))
}

/// Metrics for every prediction; every prediction needs a dataset record
/// and vice versa.
pub fn evaluate(preds: &BTreeMap<String, Tensor>, ds: &Dataset, cfg: &RunConfig) -> Result<MetricReport> {
    let ids: Vec<&str> = ds.records.iter().map(|r| r.id.as_str()).collect();
    let missing_gt: Vec<&str> = ids.iter().copied().filter(|id| !preds.contains_key(*id)).collect();
    let orphans: Vec<&str> = preds.keys().map(String::as_str).filter(|id| ds.get(id).is_none()).collect();
    if !missing_gt.is_empty() || !orphans.is_empty() {
        bail!(
            "predictions and dataset do not pair up: without prediction [{}]; without dataset record [{}]",
            missing_gt.join(", "),
            orphans.join(", ")
        );
    }
    let sequences = ds
        .records
        .iter()
        .map(|r| {
            let (p, g) = paired(&preds[&r.id], r)?;
            Ok(evaluate_sequence(&r.id, &r.action, &p, &g, cfg.eval.alignment)?)
        })
        .collect::<Result<Vec<SequenceMetrics>>>()?;
    Ok(MetricReport::from_sequences(sequences)?)
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes `report.csv`, `per_action.csv` and `per_joint.csv` into `out`.
pub fn write_report(report: &MetricReport, config_hash: &str, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut seq = String::from("sequence,action,frames,mpjpe_mm,p_mpjpe_mm,pck_percent,auc_percent,config_hash\n");
    for s in &report.sequences {
        seq += &format!(
            "{},{},{},{},{},{},{},{config_hash}\n",
            s.id,
            s.action,
            s.frames,
            num(s.mpjpe_mm),
            num(s.p_mpjpe_mm),
            num(s.pck_percent),
            num(s.auc_percent)
        );
    }
    let frames: usize = report.sequences.iter().map(|s| s.frames).sum();
    seq += &format!(
        "ALL,,{frames},{},{},{},{},{config_hash}\n",
        num(report.mpjpe_mm),
        num(report.p_mpjpe_mm),
        num(report.pck_percent),
        num(report.auc_percent)
    );

    let mut act = String::from("action,mpjpe_mm\n");
    for (a, v) in &report.per_action {
        act += &format!("{a},{}\n", num(*v));
    }
    act += &format!("Avg,{}\n", num(report.action_average_mm));

    let mut joint = String::from("sequence,joint,mpjpe_mm\n");
    for s in &report.sequences {
        for (j, v) in s.per_joint_mm.iter().enumerate() {
            joint += &format!("{},{j},{v:e}\n", s.id);
        }
    }
    for (j, v) in report.per_joint_mm.iter().enumerate() {
        joint += &format!("ALL,{j},{v:e}\n");
    }

    let mut written = Vec::new();
    for (name, body) in [("report.csv", seq), ("per_action.csv", act), ("per_joint.csv", joint)] {
        let path = out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
