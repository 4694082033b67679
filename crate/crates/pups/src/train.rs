//! Batched optimization and evaluation over in-memory scenes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::matching::{assign, stage_loss, Assignment, LossWeights, StageValues};
use crate::model::PupsModel;
use crate::panoptic::{PqAccumulator, PqReport};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Epoch after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestone: usize,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 4,
            adamw: AdamWConfig::default(),
            lr_milestone: 50,
            lr_decay: 0.1,
            grad_clip: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_milestone {
            self.adamw.lr * self.lr_decay
        } else {
            self.adamw.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adamw;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(self.lr_decay > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("lr_decay must be positive and grad_clip nonnegative".into()));
        }
        Ok(())
    }
}

/// Loss and gradients of one scene.
pub struct SceneGrad {
    pub loss: f64,
    pub stage_losses: Vec<f64>,
    pub grads: Vec<Tensor>,
    pub assignments: Vec<Assignment>,
}

pub fn scene_grad(model: &PupsModel, scene: &Scene, w: &LossWeights) -> Result<SceneGrad> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &scene.cloud)?;
    let mut stage_losses = Vec::with_capacity(out.stages.len());
    let mut assignments = Vec::with_capacity(out.stages.len());
    let mut total = None;
    for stage in &out.stages {
        let a = assign(&StageValues::from_graph(&g, stage), &scene.gt, &model.taxonomy, w)?;
        let l = stage_loss(&mut g, stage, &scene.gt, &a, w)?;
        stage_losses.push(g.value(l).data()[0]);
        assignments.push(a);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let loss = g.scale(total.expect("at least one stage"), 1.0 / out.stages.len() as f64);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    g.backward(loss)?;
    Ok(SceneGrad {
        loss: value,
        stage_losses,
        grads: model.params.grads(&g, &p),
        assignments,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub stage_losses: Vec<f64>,
    pub grad_norm: f64,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: PupsModel,
    pub optim: AdamW,
    pub config: OptimConfig,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(model: PupsModel, config: OptimConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let optim = AdamW::new(config.adamw, &model.params);
        Ok(Self {
            model,
            optim,
            config,
            weights,
        })
    }

    /// One optimizer step on the batch-averaged loss. Scenes are processed
    /// in parallel; gradients are summed in batch order.
    pub fn step(&mut self, batch: &[Scene], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let model = &self.model;
        let weights = &self.weights;
        let results: Vec<SceneGrad> = batch
            .par_iter()
            .map(|s| scene_grad(model, s, weights))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = results[0].grads.iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut stage_losses = vec![0.0; results[0].stage_losses.len()];
        let mut loss = 0.0;
        for r in &results {
            loss += r.loss * scale;
            for (acc, l) in stage_losses.iter_mut().zip(&r.stage_losses) {
                *acc += l * scale;
            }
            for (acc, t) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(t.data()) {
                    *a += v * scale;
                }
            }
        }
        let grad_norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {grad_norm}")));
        }
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            let f = self.config.grad_clip / grad_norm;
            grads.iter_mut().flatten().for_each(|v| *v *= f);
        }
        let tensors: Vec<Tensor> = grads
            .into_iter()
            .zip(&results[0].grads)
            .map(|(d, t)| Tensor::new(t.shape().to_vec(), d))
            .collect::<Result<_>>()?;
        self.optim.step(&mut self.model.params, &tensors, lr)?;
        Ok(StepStats {
            loss,
            stage_losses,
            grad_norm,
        })
    }
}

/// Dataset-level panoptic quality of the model's last-stage predictions.
pub fn evaluate(model: &PupsModel, scenes: &[Scene]) -> Result<PqReport> {
    Ok(accumulate(model, scenes)?.report(&model.taxonomy))
}

pub fn accumulate(model: &PupsModel, scenes: &[Scene]) -> Result<PqAccumulator> {
    let parts: Vec<PqAccumulator> = scenes
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.cloud)?.segments(&model.taxonomy)?;
            let mut acc = PqAccumulator::new();
            acc.add(&pred, &s.gt, &model.taxonomy)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = PqAccumulator::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}
