//! Adam, the step-decay schedule and the epoch loop.
//!
//! All randomness is derived from `TrainConfig::seed`: model init, the
//! per-epoch batch order and any per-step sampling (Mixup). The position in
//! the loop (`Progress`) is therefore the whole RNG state, and a checkpoint
//! taken between two steps resumes bit-for-bit.

mod run;

pub use run::{train_run, RunOutcome, StepRecord, METRICS_HEADER};

use crate::cir::{LossParts, MaskPolicy};
use crate::data::{batch_iter, Batch, Dataset, DatasetMeta};
use crate::error::{CirError, Result};
use crate::model::{Block, Checkpoint, CirModel, ModelConfig, Progress};
use crate::ndmath::{Tape, Tensor};
use crate::objective::{Objective, ObjectiveParams, ObjectiveRegistry};
use crate::seed::sub_seed;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Adam moment buffers, one per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &CirModel) -> Self {
        Self::for_params(model.params())
    }

    pub fn for_params(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of `params` in place. Every gradient is
/// checked before anything is modified; `name` labels a block in the error.
pub fn adam_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    name: impl Fn(usize) -> String,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(CirError::shape(
            "adam",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(CirError::shape("adam", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(CirError::NonFinite(format!("gradient of {}", name(i))));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// [`adam_update`] on the model blocks, then the temperature clamp.
pub fn adam_step(
    model: &mut CirModel,
    state: &mut AdamState,
    grads: &[Tensor],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_update(model.params_mut(), grads, state, lr, cfg, |i| {
        Block::ALL[i].name().to_string()
    })?;
    model.clamp_tau();
    Ok(())
}

/// Step decay: `base / factor^k` where `k` counts milestones already passed.
pub fn learning_rate(base: f64, epoch: u64, milestones: &[u64], factor: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base / factor.powi(k as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: String,
    /// Base learning rate; the method's default when absent.
    pub lr: Option<f64>,
    pub epochs: u64,
    pub lr_decay_epochs: Vec<u64>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mask_policy: MaskPolicy,
    pub mixup_alpha: f64,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub qk_dim: usize,
    pub tau_init: f64,
    /// Batches fed to the attention analysis in the report; one pass over
    /// the training split when absent.
    pub attention_batches: Option<usize>,
    /// Feature store the run was launched on. Not read by the trainer;
    /// recorded so that a written config can be replayed on its own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Split manifest the run was launched on, as for `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let model = ModelConfig::default();
        TrainConfig {
            method: "cir".into(),
            lr: None,
            epochs: 50,
            lr_decay_epochs: vec![30, 40],
            lr_decay_factor: 10.0,
            batch_size: 128,
            lambda1: 1.0,
            lambda2: 0.5,
            mask_policy: MaskPolicy::PERMISSIVE,
            mixup_alpha: 0.2,
            gamma1: None,
            gamma2: None,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            hidden_dim: model.hidden_dim,
            embed_dim: model.embed_dim,
            qk_dim: model.qk_dim,
            tau_init: model.tau_init,
            attention_batches: None,
            data: None,
            split: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CirError::Param(format!("lr must be positive, got {lr}")));
            }
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CirError::Param(format!(
                "lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(CirError::Param(format!(
                "lr_decay_factor must be ≥ 1, got {}",
                self.lr_decay_factor
            )));
        }
        if self.batch_size < 2 {
            return Err(CirError::Param(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(CirError::Param("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            mask_policy: self.mask_policy,
            mixup_alpha: self.mixup_alpha,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_config(&self, meta: &DatasetMeta) -> ModelConfig {
        ModelConfig {
            video_dim: meta.video_dim,
            text_dim: meta.text_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            qk_dim: self.qk_dim,
            num_classes: meta.num_classes,
            seed: sub_seed(self.seed, "model-init", 0),
            tau_init: self.tau_init,
        }
    }

    /// Copy with the learning rate filled in from the method default, so
    /// the written config reproduces the run on its own.
    pub fn resolved(&self, registry: &ObjectiveRegistry) -> Result<TrainConfig> {
        self.validate()?;
        let objective = registry.create(&self.method, &self.objective_params())?;
        Ok(TrainConfig {
            lr: Some(self.lr.unwrap_or_else(|| objective.default_lr())),
            ..self.clone()
        })
    }
}

/// Model, optimizer state and loop position of one run.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CirModel,
    pub adam: AdamState,
    pub progress: Progress,
    objective: Box<dyn Objective>,
    base_lr: f64,
}

impl Trainer {
    pub fn new(config: &TrainConfig, meta: &DatasetMeta, registry: &ObjectiveRegistry) -> Result<Self> {
        let model = CirModel::init(&config.model_config(meta))?;
        let adam = AdamState::new(&model);
        Self::assemble(config, model, adam, Progress::default(), registry)
    }

    /// Continues from a checkpoint; missing optimizer state starts fresh.
    pub fn from_checkpoint(config: &TrainConfig, ckpt: Checkpoint, registry: &ObjectiveRegistry) -> Result<Self> {
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(&ckpt.model));
        Self::assemble(config, ckpt.model, adam, ckpt.progress, registry)
    }

    fn assemble(
        config: &TrainConfig,
        model: CirModel,
        adam: AdamState,
        progress: Progress,
        registry: &ObjectiveRegistry,
    ) -> Result<Self> {
        config.validate()?;
        let objective = registry.create(&config.method, &config.objective_params())?;
        let base_lr = config.lr.unwrap_or_else(|| objective.default_lr());
        Ok(Trainer {
            config: config.clone(),
            model,
            adam,
            progress,
            objective,
            base_lr,
        })
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    /// Learning rate in effect for the current epoch.
    pub fn current_lr(&self) -> f64 {
        learning_rate(
            self.base_lr,
            self.progress.epoch,
            &self.config.lr_decay_epochs,
            self.config.lr_decay_factor,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            progress: self.progress,
            adam: Some(self.adam.clone()),
        }
    }

    /// One optimizer step on `batch` at the current learning rate. Does not
    /// move `progress`.
    pub fn step(&mut self, batch: &Batch) -> Result<LossParts> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let step_seed = sub_seed(self.config.seed, "step", self.progress.step);
        let out = self
            .objective
            .forward(&self.model, &mut tape, &vars, batch, step_seed)?;
        if !out.parts.total.is_finite() {
            return Err(CirError::NonFinite(format!("loss ({:?})", out.parts)));
        }
        tape.backward(out.loss)?;
        let grads: Vec<Tensor> = vars.all().iter().map(|&v| tape.grad_tensor(v)).collect();
        let lr = self.current_lr();
        adam_step(&mut self.model, &mut self.adam, &grads, lr, &self.config.adam())?;
        if let Some(stats) = &out.bn_stats {
            self.model.update_running_stats(stats);
        }
        Ok(out.parts)
    }

    /// Runs the batch at the current loop position and advances it, rolling
    /// over to the next epoch after the last batch.
    pub fn step_next(&mut self, dataset: &Dataset, train_ids: &[usize]) -> Result<StepRecord> {
        let Progress { epoch, next_batch, .. } = self.progress;
        let batches = batch_iter(train_ids, self.config.batch_size, self.config.seed, epoch);
        if batches.is_empty() {
            return Err(CirError::Split(format!(
                "training split of {} samples yields no batch of size ≥ 2",
                train_ids.len()
            )));
        }
        let ids = batches.get(next_batch as usize).ok_or_else(|| {
            CirError::Consistency(format!(
                "checkpoint points at batch {next_batch} of epoch {epoch}, which has {} batches",
                batches.len()
            ))
        })?;
        let lr = self.current_lr();
        let at_batch = |e: CirError| CirError::AtBatch {
            epoch,
            batch: next_batch,
            source: Box::new(e),
        };
        let batch = dataset.batch(ids).map_err(at_batch)?;
        let parts = self.step(&batch).map_err(at_batch)?;
        self.progress.step += 1;
        self.progress.next_batch += 1;
        let end_of_epoch = self.progress.next_batch as usize == batches.len();
        if end_of_epoch {
            self.progress.epoch += 1;
            self.progress.next_batch = 0;
        }
        Ok(StepRecord {
            step: self.progress.step,
            epoch,
            batch: next_batch,
            lr,
            parts,
            end_of_epoch,
        })
    }
}
