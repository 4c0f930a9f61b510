//! Loss, AdamW, epoch loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::denoiser::{bind_prompt, denoise_in_graph, BoundWeights, DenoiserConfig, DenoiserWeights};
use crate::diffusion::{forward_diffuse, NoiseSample, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::io::container::Container;
use crate::prompt::{FrozenTokens, PromptBank, PromptSpec, TextEncoder, PROMPT_COUNT};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping; off when `None`.
    pub grad_clip: Option<f64>,
    pub h_train: usize,
    pub m_train: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr0: 6e-5,
            lr_decay: 0.993,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: None,
            h_train: 1,
            m_train: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.adam_eps].iter().all(|v| *v > 0.0)
            && self.epochs > 0
            && self.batch_size > 0
            && self.h_train > 0
            && self.m_train > 0;
        if !positive {
            return Err(Error::Config("epochs, batch_size, lr0, adam_eps, h_train and m_train must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("weight_decay must be non-negative and grad_clip positive".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Root of the mean squared coordinate error.
pub fn mse_loss(y0: &Tensor, y0_hat: &Tensor) -> Result<f64> {
    if y0.shape() != y0_hat.shape() {
        return shape_err(format!("loss operands {:?} vs {:?}", y0.shape(), y0_hat.shape()));
    }
    let n = y0.numel().max(1) as f64;
    Ok((y0.data().iter().zip(y0_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt())
}

/// [`mse_loss`] recorded in `g`.
pub fn mse_loss_in_graph(g: &mut Graph, target: Var, pred: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq);
    Ok(g.sqrt(m))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One decoupled-weight-decay Adam update of every parameter that has a
/// gradient: `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return shape_err(format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let (mh, vh) = (md[i] / c1, vd[i] / c2);
            pd[i] -= lr * cfg.weight_decay * pd[i] + lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Everything learnable plus the frozen prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DenoiserConfig,
    pub weights: DenoiserWeights,
    pub bank: PromptBank,
}

impl Model {
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let weights = DenoiserWeights::init(config, derive_seed(seed, &[0]))?;
        let bank = crate::prompt::init_modifiers(&PromptSpec::new("motion"), config.dim, derive_seed(seed, &[1]))?;
        Ok(Self { config: config.clone(), weights, bank })
    }

    pub fn register_actions<'a>(&mut self, actions: impl IntoIterator<Item = &'a str>, enc: &dyn TextEncoder) -> Result<()> {
        for a in actions {
            self.bank.register_action(a, enc)?;
        }
        Ok(())
    }

    /// Denoiser weights and prompt modifiers under their parameter names.
    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        let mut p = self.weights.tensors.clone();
        p.extend(self.bank.modifier_map());
        p
    }

    pub fn set_parameters(&mut self, mut p: BTreeMap<String, Tensor>) -> Result<()> {
        let modifiers = self.bank.modifier_map();
        let mods = modifiers.keys().map(|k| (k.clone(), p.remove(k).unwrap())).collect();
        self.bank.set_modifier_map(&mods)?;
        self.weights.tensors = p;
        self.weights.validate(&self.config)
    }
}

/// One training example in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// `N×J×2`
    pub keypoints: Tensor,
    /// `N×J×3` root-relative target.
    pub pose: Tensor,
    pub action: String,
}

/// RMSE and parameter gradients for one noised sample.
pub fn sample_gradients(
    model: &Model,
    sample: &TrainingSample,
    sched: &NoiseSchedule,
    t: usize,
    noise: &NoiseSample,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let yt = forward_diffuse(&sample.pose, t, sched, noise)?;
    let mut g = Graph::new();
    let w = BoundWeights::bind(&mut g, &model.weights, true)?;
    let prompt = if model.config.use_prompt { Some(bind_prompt(&mut g, &model.bank, &sample.action, true)?) } else { None };
    let pred = denoise_in_graph(&mut g, &w, &model.config, &yt, &sample.keypoints, t, prompt)?;
    let target = g.constant(sample.pose.clone());
    let loss = mse_loss_in_graph(&mut g, target, pred)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss is {value}")));
    }
    Ok((value, g.backward(loss)?.into_param_map()))
}

/// Seed of sample `i` in step `step` of `epoch`.
fn sample_seed(seed: u64, epoch: usize, step: usize, i: usize) -> u64 {
    derive_seed(seed, &[epoch as u64, step as u64, i as u64])
}

/// Counters that, with the run seed, fully determine the remaining run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Model, optimizer and counters of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub progress: Progress,
    pub config: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, optimizer: OptimizerState::default(), progress: Progress::default(), config, seed })
    }

    /// Batches of sample indices for `epoch`, shuffled from the seed.
    pub fn batches(&self, epoch: usize, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(derive_seed(self.seed, &[u64::MAX, epoch as u64])));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One optimizer step on `batch`; returns the mean per-sample loss.
    pub fn train_step(&mut self, data: &[TrainingSample], batch: &[usize], sched: &NoiseSchedule, epoch: usize) -> Result<f64> {
        let step = self.progress.step;
        let model = &self.model;
        let seed = self.seed;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let s = sample_seed(seed, epoch, step, i);
                let mut rng = seeded_rng(s);
                let t = rand::Rng::random_range(&mut rng, 1..=sched.steps());
                let noise = NoiseSample::generate(data[idx].pose.shape(), derive_seed(s, &[1]));
                sample_gradients(model, &data[idx], sched, t, &noise)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (l, g) in results {
            loss += l * scale;
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(scale);
        }
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let mut params = self.model.parameters();
        adamw_step(&mut params, &grads, &mut self.optimizer, lr_schedule(epoch, &self.config), &self.config)?;
        self.model.set_parameters(params)?;
        self.progress.step += 1;
        Ok(loss)
    }

    /// Runs the next epoch; `on_step` sees every step as it finishes.
    pub fn train_epoch(
        &mut self,
        data: &[TrainingSample],
        sched: &NoiseSchedule,
        mut on_step: impl FnMut(&StepLog, &Self) -> Result<()>,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.progress.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let mut total = 0.0;
        let batches = self.batches(epoch, data.len());
        for batch in &batches {
            let loss = self.train_step(data, batch, sched, epoch)?;
            total += loss;
            on_step(&StepLog { epoch, step: self.progress.step, loss, lr }, self)?;
        }
        self.progress.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    pub fn to_container(&self, config_hash: &str) -> Result<Container> {
        let mut c = Container::new();
        for (name, t) in &self.model.weights.tensors {
            c.insert(format!("weights/{name}"), t);
        }
        for (name, t) in self.model.bank.modifier_map() {
            c.insert(name, &t);
        }
        for (action, FrozenTokens(blocks)) in self.model.bank.actions() {
            for (k, t) in blocks.iter().enumerate() {
                c.insert(format!("prompt_frozen/{action}/{k}"), t);
            }
        }
        for (name, t) in &self.optimizer.m {
            c.insert(format!("optim/m/{name}"), t);
        }
        for (name, t) in &self.optimizer.v {
            c.insert(format!("optim/v/{name}"), t);
        }
        c.set_metadata(
            "checkpoint",
            json!({
                "epoch": self.progress.epoch,
                "step": self.progress.step,
                "optimizer_step": self.optimizer.step,
                "seed": self.seed,
                "config_hash": config_hash,
                "denoiser": self.model.config,
                "train": self.config,
            }),
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.metadata().get("checkpoint").ok_or_else(|| Error::Load("not a checkpoint".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Load(format!("checkpoint metadata lacks {k}")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let config: DenoiserConfig =
            serde_json::from_value(parse("denoiser")?).map_err(|e| Error::Load(format!("denoiser config: {e}")))?;
        let train: TrainConfig =
            serde_json::from_value(parse("train")?).map_err(|e| Error::Load(format!("train config: {e}")))?;
        let num = |k: &str| -> Result<u64> {
            field(k)?.as_u64().ok_or_else(|| Error::Load(format!("checkpoint field {k} is not an integer")))
        };
        let mut model = Model::init(&config, 0)?;
        let weights = c
            .names_with_prefix("weights/")
            .map(|n| Ok((n.to_string(), c.get(&format!("weights/{n}"))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        model.weights = DenoiserWeights { tensors: weights };
        model.weights.validate(&config).map_err(|e| Error::Load(format!("checkpoint weights: {e}")))?;
        let mods = (0..PROMPT_COUNT)
            .map(|k| {
                let name = crate::prompt::modifier_name(k);
                Ok((name.clone(), c.get(&name)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        model.bank.set_modifier_map(&mods)?;
        let mut frozen: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for rest in c.names_with_prefix("prompt_frozen/") {
            let (action, _) = rest.rsplit_once('/').ok_or_else(|| Error::Load(format!("bad frozen entry {rest}")))?;
            frozen.entry(action.to_string()).or_default();
        }
        for (action, blocks) in frozen.iter_mut() {
            for k in 0..PROMPT_COUNT {
                blocks.push(c.get(&format!("prompt_frozen/{action}/{k}"))?);
            }
        }
        for (action, blocks) in frozen {
            model.bank.set_frozen(&action, FrozenTokens(blocks))?;
        }
        let moments = |prefix: &str| -> Result<BTreeMap<String, Tensor>> {
            c.names_with_prefix(prefix)
                .map(|n| Ok((n.to_string(), c.get(&format!("{prefix}{n}"))?)))
                .collect()
        };
        let optimizer = OptimizerState { m: moments("optim/m/")?, v: moments("optim/v/")?, step: num("optimizer_step")? };
        Ok(Self {
            model,
            optimizer,
            progress: Progress { epoch: num("epoch")? as usize, step: num("step")? as usize },
            config: train,
            seed: num("seed")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        self.to_container(config_hash)?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Config hash recorded in a checkpoint, if any.
pub fn checkpoint_config_hash(c: &Container) -> Option<String> {
    c.metadata().get("checkpoint")?.get("config_hash")?.as_str().map(str::to_string)
}
