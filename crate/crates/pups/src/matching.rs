//! Bipartite matching of classifiers to ground-truth groups and the
//! deeply supervised training loss.
//!
//! Cost and loss share one formula: `α·dice + β·focal + γ·bce`. Stuff groups
//! are always matched to the classifier slot reserved for their class; thing
//! groups are matched to the remaining classifiers by minimum total cost.
//! Unmatched classifiers are pushed towards "no class" by the focal term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::decoder::StageOutput;
use crate::error::{Error, Result};
use crate::scene::{ClassTaxonomy, GroundTruth};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of a mask cross-entropy towards all-zero masks for unmatched
    /// classifiers. Zero disables it.
    pub negative_mask_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 1.0,
            gamma: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            negative_mask_weight: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.focal_gamma,
            self.negative_mask_weight,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One-to-one mapping from ground-truth groups to classifiers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(ground-truth group, classifier)`, sorted by group.
    pub pairs: Vec<(usize, usize)>,
    /// Classifiers without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn classifier_of(&self, group: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == group).map(|p| p.1)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "loss",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `1 − (2·Σpg + ε) / (Σp + Σg + ε)`
pub fn dice_loss(p: &[f64], g: &[f64]) -> Result<f64> {
    check_len(p, g)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `g`.
pub fn mask_bce_loss(logits: &[f64], g: &[f64]) -> Result<f64> {
    check_len(logits, g)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = logits.iter().zip(g).map(|(&x, &t)| kernels::softplus(x) - t * x).sum();
    Ok(s / logits.len() as f64)
}

/// Sigmoid focal loss of one classifier's class logits, summed over classes.
/// `target` is a column index, `None` for a negative.
pub fn focal_loss(logits: &[f64], target: Option<usize>, w: &LossWeights) -> Result<f64> {
    if let Some(t) = target {
        if t >= logits.len() {
            return Err(Error::UnknownClass(ClassTaxonomy::from_column(t)));
        }
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(c, &x)| {
            if Some(c) == target {
                w.focal_alpha * kernels::sigmoid(-x).powf(w.focal_gamma) * kernels::softplus(-x)
            } else {
                (1.0 - w.focal_alpha) * kernels::sigmoid(x).powf(w.focal_gamma) * kernels::softplus(x)
            }
        })
        .sum())
}

/// Plain-valued scores of one stage, as used for matching.
#[derive(Clone, Debug)]
pub struct StageValues {
    pub grouping_logits: Tensor,
    pub semantic_logits: Tensor,
}

impl StageValues {
    pub fn from_graph(g: &Graph, stage: &StageOutput) -> Self {
        Self {
            grouping_logits: g.value(stage.grouping_logits).clone(),
            semantic_logits: g.value(stage.semantic_logits).clone(),
        }
    }

    pub fn classifiers(&self) -> usize {
        self.grouping_logits.rows()
    }
}

fn pair_cost(logits: &[f64], probs: &[f64], class_logits: &[f64], mask: &[f64], column: usize, w: &LossWeights) -> Result<f64> {
    Ok(w.alpha * dice_loss(probs, mask)?
        + w.beta * focal_loss(class_logits, Some(column), w)?
        + w.gamma * mask_bce_loss(logits, mask)?)
}

/// Costs between thing ground truths (rows, in `thing_groups` order) and
/// the first `N − T_stuff` classifiers (columns).
pub fn build_cost_matrix(
    stage: &StageValues,
    gt: &GroundTruth,
    taxonomy: &ClassTaxonomy,
    w: &LossWeights,
) -> Result<Tensor> {
    let slots = free_slots(stage.classifiers(), taxonomy)?;
    let things: Vec<usize> = gt.thing_groups(taxonomy).collect();
    if things.len() > slots {
        return Err(Error::Capacity {
            things: things.len(),
            slots,
        });
    }
    if stage.grouping_logits.cols() != gt.num_points() {
        return Err(Error::Shape {
            op: "build_cost_matrix",
            lhs: stage.grouping_logits.shape().to_vec(),
            rhs: vec![gt.num_points()],
        });
    }
    let probs: Vec<Vec<f64>> = (0..slots)
        .map(|i| stage.grouping_logits.row(i).iter().map(|&x| kernels::sigmoid(x)).collect())
        .collect();
    let mut data = Vec::with_capacity(things.len() * slots);
    for &j in &things {
        let mask = gt.mask(j);
        let column = ClassTaxonomy::column(gt.classes()[j]);
        for (i, p) in probs.iter().enumerate() {
            data.push(pair_cost(
                stage.grouping_logits.row(i),
                p,
                stage.semantic_logits.row(i),
                &mask,
                column,
                w,
            )?);
        }
    }
    Tensor::matrix(things.len(), slots, data)
}

fn free_slots(n: usize, taxonomy: &ClassTaxonomy) -> Result<usize> {
    let stuff = taxonomy.stuff_classes().len();
    if n <= stuff {
        return Err(Error::Capacity { things: 0, slots: 0 });
    }
    Ok(n - stuff)
}

/// Index of the classifier reserved for stuff class `class`.
pub fn stuff_slot(n: usize, taxonomy: &ClassTaxonomy, class: crate::scene::ClassId) -> Option<usize> {
    taxonomy
        .stuff_rank(class)
        .map(|r| n - taxonomy.stuff_classes().len() + r)
}

/// Minimum-cost assignment of every row to a distinct column (`M ≤ N`).
/// Returns the column of each row.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<usize>> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > n {
        return Err(Error::Capacity { things: m, slots: n });
    }
    if let Some((index, &value)) = cost.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // virtual column.
    let a = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; m];
    for j in 1..=n {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    Ok(result)
}

/// Stuff groups go to their reserved slots; thing groups are matched to the
/// other classifiers by [`hungarian_match`] on [`build_cost_matrix`].
pub fn assign(stage: &StageValues, gt: &GroundTruth, taxonomy: &ClassTaxonomy, w: &LossWeights) -> Result<Assignment> {
    let n = stage.classifiers();
    let cost = build_cost_matrix(stage, gt, taxonomy, w)?;
    let things: Vec<usize> = gt.thing_groups(taxonomy).collect();
    let cols = hungarian_match(&cost)?;
    let mut pairs: Vec<(usize, usize)> = things.into_iter().zip(cols).collect();
    for j in gt.stuff_groups(taxonomy) {
        let slot = stuff_slot(n, taxonomy, gt.classes()[j]).ok_or(Error::UnknownClass(gt.classes()[j]))?;
        pairs.push((j, slot));
    }
    pairs.sort_unstable();
    let mut taken = vec![false; n];
    for &(_, i) in &pairs {
        taken[i] = true;
    }
    let unmatched = (0..n).filter(|&i| !taken[i]).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Per-row dice loss of `probs` (`R×K`) against constant masks, `R×1`.
pub fn dice_rows(g: &mut Graph, probs: Var, masks: &Tensor) -> Result<Var> {
    let target = g.constant(masks.clone());
    let inter = g.mul(probs, target)?;
    let inter = g.sum_rows(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum_rows(probs);
    let sg = g.sum_rows(target);
    let den = g.add(sp, sg)?;
    let den = g.add_scalar(den, DICE_EPS);
    let ratio = g.div(num, den)?;
    Ok(g.rsub_scalar(1.0, ratio))
}

/// Per-row mean cross-entropy of `sigmoid(logits)` against masks, `R×1`.
pub fn mask_bce_rows(g: &mut Graph, logits: Var, masks: &Tensor) -> Result<Var> {
    let target = g.constant(masks.clone());
    let sp = g.softplus(logits);
    let tx = g.mul(target, logits)?;
    let per_point = g.sub(sp, tx)?;
    Ok(g.mean_rows(per_point))
}

/// Per-row focal loss of class logits (`R×T`) against one-hot targets
/// (zero rows mark negatives), `R×1`.
pub fn focal_rows(g: &mut Graph, logits: Var, targets: &Tensor, w: &LossWeights) -> Result<Var> {
    let pos = g.constant(targets.clone());
    let neg = g.constant(Tensor::from_parts(
        targets.shape().to_vec(),
        targets.data().iter().map(|t| 1.0 - t).collect(),
    ));
    let p = g.sigmoid(logits);
    let q = g.rsub_scalar(1.0, p);
    // −log p = softplus(−x), −log(1 − p) = softplus(x)
    let neg_logits = g.neg(logits);
    let nlog_p = g.softplus(neg_logits);
    let nlog_q = g.softplus(logits);
    let qf = g.powf(q, w.focal_gamma);
    let pf = g.powf(p, w.focal_gamma);
    let a = g.mul(qf, nlog_p)?;
    let a = g.mul(a, pos)?;
    let a = g.scale(a, w.focal_alpha);
    let b = g.mul(pf, nlog_q)?;
    let b = g.mul(b, neg)?;
    let b = g.scale(b, 1.0 - w.focal_alpha);
    let both = g.add(a, b)?;
    Ok(g.sum_rows(both))
}

/// Loss of one stage under a given assignment.
pub fn stage_loss(
    g: &mut Graph,
    stage: &StageOutput,
    gt: &GroundTruth,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    let (n, k) = {
        let v = g.value(stage.grouping_logits);
        (v.rows(), v.cols())
    };
    let t = g.value(stage.semantic_logits).cols();
    let mut targets = vec![0.0; n * t];
    for &(j, i) in &assignment.pairs {
        targets[i * t + ClassTaxonomy::column(gt.classes()[j])] = 1.0;
    }
    let focal = focal_rows(g, stage.semantic_logits, &Tensor::from_parts(vec![n, t], targets), w)?;
    let mut total = g.sum(focal);
    total = g.scale(total, w.beta);

    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let mut masks = Vec::with_capacity(rows.len() * k);
        for &(j, _) in &assignment.pairs {
            masks.extend(gt.mask(j));
        }
        let masks = Tensor::from_parts(vec![rows.len(), k], masks);
        let probs = g.gather_rows(stage.grouping_scores, &rows)?;
        let logits = g.gather_rows(stage.grouping_logits, &rows)?;
        let dice = dice_rows(g, probs, &masks)?;
        let dice = g.sum(dice);
        let dice = g.scale(dice, w.alpha);
        let bce = mask_bce_rows(g, logits, &masks)?;
        let bce = g.sum(bce);
        let bce = g.scale(bce, w.gamma);
        total = g.add(total, dice)?;
        total = g.add(total, bce)?;
    }
    if w.negative_mask_weight > 0.0 && !assignment.unmatched.is_empty() {
        let logits = g.gather_rows(stage.grouping_logits, &assignment.unmatched)?;
        let zeros = Tensor::zeros(vec![assignment.unmatched.len(), k]);
        let bce = mask_bce_rows(g, logits, &zeros)?;
        let bce = g.sum(bce);
        let bce = g.scale(bce, w.negative_mask_weight);
        total = g.add(total, bce)?;
    }
    Ok(total)
}

/// Mean over stages of each stage's loss, matching every stage
/// independently. Returns the loss and the assignments used.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StageOutput],
    gt: &GroundTruth,
    taxonomy: &ClassTaxonomy,
    w: &LossWeights,
) -> Result<(Var, Vec<Assignment>)> {
    let assignments = stages
        .iter()
        .map(|s| assign(&StageValues::from_graph(g, s), gt, taxonomy, w))
        .collect::<Result<Vec<_>>>()?;
    let loss = total_loss_with(g, stages, gt, &assignments, w)?;
    Ok((loss, assignments))
}

/// [`total_loss`] with assignments held fixed.
pub fn total_loss_with(
    g: &mut Graph,
    stages: &[StageOutput],
    gt: &GroundTruth,
    assignments: &[Assignment],
    w: &LossWeights,
) -> Result<Var> {
    if stages.is_empty() || stages.len() != assignments.len() {
        return Err(Error::Contract(format!(
            "{} stages with {} assignments",
            stages.len(),
            assignments.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (s, a) in stages.iter().zip(assignments) {
        let l = stage_loss(g, s, gt, a, w)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / stages.len() as f64))
}
