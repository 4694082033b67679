//! Exclusive panoptic inference and panoptic-quality evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::matching::stuff_slot;
use crate::scene::{kitti, ClassId, ClassKind, ClassTaxonomy, GroundTruth, VOID_GROUP};

/// Per-point group and per-classifier class decisions from one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticPrediction {
    /// Winning classifier of each point.
    pub group_of_point: Vec<usize>,
    /// Class of each classifier (fixed for stuff slots).
    pub class_of_group: Vec<ClassId>,
    /// Classifiers owning at least one point, ascending.
    pub active_groups: Vec<usize>,
    /// Highest semantic score of each classifier.
    pub group_confidence: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `grouping` is `N×K`, `semantic` is `N×T`. Each point goes to the
/// classifier with the highest grouping score, ties to the lower index.
pub fn infer(grouping: &Tensor, semantic: &Tensor, taxonomy: &ClassTaxonomy) -> Result<PanopticPrediction> {
    let (n, k) = (grouping.rows(), grouping.cols());
    if semantic.rows() != n || semantic.cols() != taxonomy.num_classes() || n <= taxonomy.stuff_classes().len() {
        return Err(Error::Shape {
            op: "infer",
            lhs: grouping.shape().to_vec(),
            rhs: semantic.shape().to_vec(),
        });
    }
    let mut class_of_group: Vec<ClassId> = (0..n)
        .map(|i| ClassTaxonomy::from_column(argmax(semantic.row(i))))
        .collect();
    for &c in taxonomy.stuff_classes() {
        class_of_group[stuff_slot(n, taxonomy, c).expect("stuff class")] = c;
    }
    let group_confidence = (0..n)
        .map(|i| semantic.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let data = grouping.data();
    let mut group_of_point = vec![0usize; k];
    let mut best = data[..k].to_vec();
    for i in 1..n {
        for (p, &v) in data[i * k..(i + 1) * k].iter().enumerate() {
            if v > best[p] {
                best[p] = v;
                group_of_point[p] = i;
            }
        }
    }
    let mut owns = vec![false; n];
    for &i in &group_of_point {
        owns[i] = true;
    }
    Ok(PanopticPrediction {
        group_of_point,
        class_of_group,
        active_groups: (0..n).filter(|&i| owns[i]).collect(),
        group_confidence,
    })
}

impl PanopticPrediction {
    /// Predicted segments. Empty groups disappear, every group of a stuff
    /// class joins the single segment of that class.
    pub fn segments(&self, taxonomy: &ClassTaxonomy) -> Result<GroundTruth> {
        let mut segment_of = vec![VOID_GROUP; self.class_of_group.len()];
        let mut classes = Vec::new();
        let mut stuff_segment: BTreeMap<ClassId, u32> = BTreeMap::new();
        for &i in &self.active_groups {
            let c = self.class_of_group[i];
            segment_of[i] = if taxonomy.is_stuff(c) {
                *stuff_segment.entry(c).or_insert_with(|| {
                    classes.push(c);
                    (classes.len() - 1) as u32
                })
            } else {
                classes.push(c);
                (classes.len() - 1) as u32
            };
        }
        GroundTruth::new(self.group_of_point.iter().map(|&i| segment_of[i]).collect(), classes, taxonomy)
    }
}

/// Summable per-class counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
    /// Point-level intersection and union of the class masks.
    pub intersection: u64,
    pub union: u64,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
        self.intersection += o.intersection;
        self.union += o.union;
    }

    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Accumulates counts over scenes; dataset-level metrics come from the sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    pub counts: BTreeMap<ClassId, ClassCounts>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores one scene. Points that are void in `gt` are ignored.
    pub fn add(&mut self, pred: &GroundTruth, gt: &GroundTruth, taxonomy: &ClassTaxonomy) -> Result<()> {
        for (c, counts) in scene_counts(pred, gt, taxonomy)? {
            self.counts.entry(c).or_default().add(&counts);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (c, counts) in &other.counts {
            self.counts.entry(*c).or_default().add(counts);
        }
    }

    pub fn report(&self, taxonomy: &ClassTaxonomy) -> PqReport {
        PqReport::from_counts(&self.counts, taxonomy)
    }
}

fn scene_counts(pred: &GroundTruth, gt: &GroundTruth, taxonomy: &ClassTaxonomy) -> Result<BTreeMap<ClassId, ClassCounts>> {
    if pred.num_points() != gt.num_points() {
        return Err(Error::Shape {
            op: "pq_evaluate",
            lhs: vec![pred.num_points()],
            rhs: vec![gt.num_points()],
        });
    }
    let (np, ng) = (pred.num_groups(), gt.num_groups());
    let mut pred_size = vec![0u64; np];
    let mut gt_size = vec![0u64; ng];
    let mut overlap: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&p, &g) in pred.group_of_point().iter().zip(gt.group_of_point()) {
        if g == VOID_GROUP {
            continue;
        }
        gt_size[g as usize] += 1;
        if p != VOID_GROUP {
            pred_size[p as usize] += 1;
            *overlap.entry((p as usize, g as usize)).or_default() += 1;
        }
    }
    let mut counts: BTreeMap<ClassId, ClassCounts> = BTreeMap::new();
    let mut pred_matched = vec![false; np];
    let mut gt_matched = vec![false; ng];
    let mut inter_by_class: BTreeMap<ClassId, u64> = BTreeMap::new();
    for (&(p, g), &inter) in &overlap {
        let (pc, gc) = (pred.classes()[p], gt.classes()[g]);
        if pc != gc {
            continue;
        }
        *inter_by_class.entry(pc).or_default() += inter;
        let union = pred_size[p] + gt_size[g] - inter;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            if pred_matched[p] || gt_matched[g] {
                return Err(Error::Contract("segment matched twice".into()));
            }
            pred_matched[p] = true;
            gt_matched[g] = true;
            let e = counts.entry(pc).or_default();
            e.tp += 1;
            e.iou_sum += iou;
        }
    }
    let mut class_size: BTreeMap<ClassId, u64> = BTreeMap::new();
    for (p, &size) in pred_size.iter().enumerate() {
        let c = pred.classes()[p];
        *class_size.entry(c).or_default() += size;
        if !pred_matched[p] && size > 0 {
            counts.entry(c).or_default().fp += 1;
        }
    }
    for (g, &size) in gt_size.iter().enumerate() {
        let c = gt.classes()[g];
        *class_size.entry(c).or_default() += size;
        if !gt_matched[g] && size > 0 {
            counts.entry(c).or_default().fn_ += 1;
        }
    }
    for (c, total) in class_size {
        if !taxonomy.contains(c) {
            return Err(Error::UnknownClass(c));
        }
        let inter = inter_by_class.get(&c).copied().unwrap_or(0);
        let e = counts.entry(c).or_default();
        e.intersection += inter;
        e.union += total - inter;
    }
    Ok(counts)
}

/// Scores a single scene.
pub fn pq_evaluate(pred: &GroundTruth, gt: &GroundTruth, taxonomy: &ClassTaxonomy) -> Result<PqReport> {
    let mut acc = PqAccumulator::new();
    acc.add(pred, gt, taxonomy)?;
    Ok(acc.report(taxonomy))
}

/// Scores two SemanticKITTI `.label` files against each other.
pub fn evaluate_kitti_files(pred_labels: &Path, gt_labels: &Path, taxonomy: &ClassTaxonomy) -> Result<PqReport> {
    let map = taxonomy.semantic_map();
    let pred = kitti::read_labels(pred_labels, &map, taxonomy)?;
    let gt = kitti::read_labels(gt_labels, &map, taxonomy)?;
    pq_evaluate(&pred, &gt, taxonomy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ClassId,
    pub name: String,
    pub kind: ClassKind,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Point-level IoU of the class masks.
    pub iou: f64,
    #[serde(flatten)]
    pub counts: ClassCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Number of classes averaged.
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub all: Summary,
    pub things: Summary,
    pub stuff: Summary,
    /// Mean over classes of thing PQ and stuff IoU.
    pub pq_dagger: f64,
    /// Classes seen in either ground truth or prediction, by id.
    pub per_class: Vec<ClassReport>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a ClassReport>) -> Summary {
    let mut s = Summary::default();
    for r in rows {
        s.pq += r.pq;
        s.sq += r.sq;
        s.rq += r.rq;
        s.classes += 1;
    }
    if s.classes > 0 {
        let n = s.classes as f64;
        s.pq /= n;
        s.sq /= n;
        s.rq /= n;
    }
    s
}

impl PqReport {
    pub fn from_counts(counts: &BTreeMap<ClassId, ClassCounts>, taxonomy: &ClassTaxonomy) -> Self {
        let per_class: Vec<ClassReport> = counts
            .iter()
            .filter(|(_, c)| c.present())
            .map(|(&class, c)| {
                let info = taxonomy.info(class).expect("evaluated classes are in the taxonomy");
                let sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
                let rq = c.tp as f64 / (c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64);
                let iou = if c.union > 0 {
                    c.intersection as f64 / c.union as f64
                } else {
                    0.0
                };
                ClassReport {
                    class,
                    name: info.name.clone(),
                    kind: info.kind,
                    pq: sq * rq,
                    sq,
                    rq,
                    iou,
                    counts: *c,
                }
            })
            .collect();
        let all = summarize(per_class.iter());
        let things = summarize(per_class.iter().filter(|r| r.kind == ClassKind::Thing));
        let stuff = summarize(per_class.iter().filter(|r| r.kind == ClassKind::Stuff));
        let pq_dagger = if per_class.is_empty() {
            0.0
        } else {
            per_class
                .iter()
                .map(|r| if r.kind == ClassKind::Stuff { r.iou } else { r.pq })
                .sum::<f64>()
                / per_class.len() as f64
        };
        Self {
            all,
            things,
            stuff,
            pq_dagger,
            per_class,
        }
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassReport> {
        self.per_class.iter().find(|r| r.class == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table, one row per class followed by the means.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "class", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN"
        );
        for r in &self.per_class {
            let _ = writeln!(
                out,
                "{:<12} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6} {:>6} {:>6}",
                r.name,
                100.0 * r.pq,
                100.0 * r.sq,
                100.0 * r.rq,
                100.0 * r.iou,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_
            );
        }
        let _ = writeln!(out, "{}", "-".repeat(61));
        for (name, s) in [("all", &self.all), ("things", &self.things), ("stuff", &self.stuff)] {
            let _ = writeln!(
                out,
                "{:<12} {:>6.1} {:>6.1} {:>6.1}",
                name,
                100.0 * s.pq,
                100.0 * s.sq,
                100.0 * s.rq
            );
        }
        let _ = writeln!(out, "{:<12} {:>6.1}", "PQ-dagger", 100.0 * self.pq_dagger);
        out
    }
}

#[cfg(test)]
mod tests;
