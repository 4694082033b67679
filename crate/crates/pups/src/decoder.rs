//! Point-level classifiers and their iterative refinement.
//!
//! `N` learnable classifiers `θ ∈ R^{N×C}` score every point through
//! `sigmoid(θ·Fᵀ)` and every class through `sigmoid(θ·ψᵀ)`. Each refinement
//! stage pools point features with the current grouping scores, blends them
//! into the classifiers through a learned per-channel gate, and lets the
//! classifiers attend to each other. Scores are recomputed after every stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// `N`
    pub classifiers: usize,
    /// `C`
    pub channels: usize,
    /// `S`
    pub stages: usize,
    /// `H`
    pub heads: usize,
    /// `T`
    pub classes: usize,
    /// Number of stuff classes; the last this many classifiers are reserved for them.
    pub stuff_classes: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("at least one refinement stage is required".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.classifiers <= self.stuff_classes {
            return Err(Error::Config(format!(
                "{} classifiers leave no room beside {} stuff slots",
                self.classifiers, self.stuff_classes
            )));
        }
        if self.classes == 0 || self.stuff_classes > self.classes {
            return Err(Error::Config("class counts are inconsistent".into()));
        }
        Ok(())
    }
}

/// `θ` (`N×C`) and the semantic head `ψ` (`T×C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierBank {
    pub theta: ParamId,
    pub psi: ParamId,
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineStageParams {
    /// Gate projection; `m = 1 − sigmoid(φ1(F_θ))`.
    pub phi1: Linear,
    /// Feature projection into classifier space.
    pub phi2: Linear,
    pub attention: AttentionParams,
    pub norm: LayerNorm,
}

/// Scores produced from one set of classifiers.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// `θ·Fᵀ`, `N×K`.
    pub grouping_logits: Var,
    /// `ĝ = sigmoid(θ·Fᵀ)`.
    pub grouping_scores: Var,
    /// `θ·ψᵀ`, `N×T`.
    pub semantic_logits: Var,
    /// `Δ = sigmoid(θ·ψᵀ)`.
    pub semantic_scores: Var,
    /// Classifiers that produced these scores.
    pub theta: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PupsDecoder {
    pub config: DecoderConfig,
    pub bank: ClassifierBank,
    pub stages: Vec<RefineStageParams>,
}

impl PupsDecoder {
    /// Registers `bank.*` and `stage{s}.*` parameters.
    pub fn new<R: Rng>(config: DecoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bound = 1.0 / (c as f64).sqrt();
        let bank = ClassifierBank {
            theta: store.add_uniform("bank.theta", config.classifiers, c, bound, rng),
            psi: store.add_uniform("bank.psi", config.classes, c, bound, rng),
        };
        let stages = (0..config.stages)
            .map(|s| {
                let name = |part: &str| format!("stage{s}.{part}");
                RefineStageParams {
                    phi1: Linear::new(store, &name("phi1"), c, c, rng),
                    phi2: Linear::new(store, &name("phi2"), c, c, rng),
                    attention: AttentionParams {
                        query: Linear::new(store, &name("attn.query"), c, c, rng),
                        key: Linear::new(store, &name("attn.key"), c, c, rng),
                        value: Linear::new(store, &name("attn.value"), c, c, rng),
                        output: Linear::new(store, &name("attn.output"), c, c, rng),
                        heads: config.heads,
                    },
                    norm: LayerNorm::new(store, &name("norm"), c),
                }
            })
            .collect();
        Ok(Self {
            config,
            bank,
            stages,
        })
    }

    /// Runs the unrefined classifiers and then every refinement stage;
    /// returns one output per stage (the initial scores are not included).
    pub fn decode(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Vec<StageOutput>> {
        Ok(self.decode_with_initial(g, p, features)?.1)
    }

    /// Like [`PupsDecoder::decode`] but also returns the scores of the
    /// unrefined classifiers.
    pub fn decode_with_initial(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(StageOutput, Vec<StageOutput>)> {
        let psi = p[self.bank.psi];
        let initial = scores(g, p[self.bank.theta], psi, features)?;
        let mut current = initial;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let pooled = query_features(g, current.grouping_scores, features)?;
            let blended = momentum_update(g, p, pooled, current.theta, stage)?;
            let (refined, _) = classifier_self_attention(g, p, blended, stage)?;
            current = scores(g, refined, psi, features)?;
            outputs.push(current);
        }
        Ok((initial, outputs))
    }

    /// Index of the classifier reserved for the stuff class of rank `rank`.
    pub fn stuff_slot(&self, rank: usize) -> usize {
        self.config.classifiers - self.config.stuff_classes + rank
    }
}

fn scores(g: &mut Graph, theta: Var, psi: Var, features: Var) -> Result<StageOutput> {
    let (grouping_logits, grouping_scores) = grouping_scores(g, theta, features)?;
    let (semantic_logits, semantic_scores) = semantic_scores(g, psi, theta)?;
    Ok(StageOutput {
        grouping_logits,
        grouping_scores,
        semantic_logits,
        semantic_scores,
        theta,
    })
}

/// `(θ·Fᵀ, sigmoid(θ·Fᵀ))`
pub fn grouping_scores(g: &mut Graph, theta: Var, features: Var) -> Result<(Var, Var)> {
    let logits = g.matmul_t(theta, features)?;
    Ok((logits, g.sigmoid(logits)))
}

/// `(θ·ψᵀ, sigmoid(θ·ψᵀ))`
pub fn semantic_scores(g: &mut Graph, psi: Var, theta: Var) -> Result<(Var, Var)> {
    let logits = g.matmul_t(theta, psi)?;
    Ok((logits, g.sigmoid(logits)))
}

/// `F_θ = (1/K)·ĝ·F`, `N×C`.
pub fn query_features(g: &mut Graph, grouping: Var, features: Var) -> Result<Var> {
    let k = g.value(features).rows();
    let pooled = g.matmul(grouping, features)?;
    Ok(g.scale(pooled, 1.0 / k as f64))
}

/// `θ̃ = (1 − m)·φ2(F_θ) + m·θ` with `m = 1 − sigmoid(φ1(F_θ))` per channel.
pub fn momentum_update(g: &mut Graph, p: &Bound, pooled: Var, theta: Var, stage: &RefineStageParams) -> Result<Var> {
    if g.value(pooled).shape() != g.value(theta).shape() {
        return Err(Error::Shape {
            op: "momentum_update",
            lhs: g.value(pooled).shape().to_vec(),
            rhs: g.value(theta).shape().to_vec(),
        });
    }
    let gate_logits = stage.phi1.forward(g, p, pooled)?;
    let open = g.sigmoid(gate_logits); // 1 − m
    let projected = stage.phi2.forward(g, p, pooled)?;
    let fresh = g.mul(open, projected)?;
    let keep = g.rsub_scalar(1.0, open); // m
    let kept = g.mul(keep, theta)?;
    g.add(fresh, kept)
}

/// Multi-head scaled dot-product attention among classifiers followed by a
/// residual connection and layer normalization. Also returns each head's
/// `N×N` attention weights.
pub fn classifier_self_attention(g: &mut Graph, p: &Bound, theta: Var, stage: &RefineStageParams) -> Result<(Var, Vec<Var>)> {
    let att = &stage.attention;
    let c = g.value(theta).cols();
    if att.heads == 0 || !c.is_multiple_of(att.heads) {
        return Err(Error::Shape {
            op: "classifier_self_attention",
            lhs: g.value(theta).shape().to_vec(),
            rhs: vec![att.heads],
        });
    }
    let d = c / att.heads;
    let q = att.query.forward(g, p, theta)?;
    let k = att.key.forward(g, p, theta)?;
    let v = att.value.forward(g, p, theta)?;
    let mut heads = Vec::with_capacity(att.heads);
    let mut weights = Vec::with_capacity(att.heads);
    for h in 0..att.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let w = g.softmax_rows(logits);
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = g.concat_cols(&heads)?;
    let attended = att.output.forward(g, p, merged)?;
    let residual = g.add(theta, attended)?;
    Ok((stage.norm.forward(g, p, residual)?, weights))
}
