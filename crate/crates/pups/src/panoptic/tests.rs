use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gt_from(groups: &[u32], classes: &[ClassId]) -> GroundTruth {
    GroundTruth::new(groups.to_vec(), classes.to_vec(), &ClassTaxonomy::toy()).unwrap()
}

#[test]
fn hand_case_reproduces_eq_values() {
    let tax = ClassTaxonomy::toy();
    let gt = gt_from(&[0, 0, 0, 0, 1, 2, 2, 1, 1, 1], &[1, 4, 1]);
    let pred = gt_from(&[0, 0, 0, 1, 0, 1, 1, 2, 2, 1], &[1, 4, 1]);
    let r = pq_evaluate(&pred, &gt, &tax).unwrap();
    let car = r.class(1).unwrap();
    assert_eq!(car.pq, 0.3);
    assert_eq!(car.sq, 0.6);
    assert_eq!(car.rq, 0.5);
    assert_eq!((car.counts.tp, car.counts.fp, car.counts.fn_), (1, 1, 1));
}

#[test]
fn perfect_prediction_scores_one() {
    let tax = ClassTaxonomy::toy();
    let gt = gt_from(&[0, 1, 1, 2, 3, 3, 0], &[4, 1, 3, 5]);
    let r = pq_evaluate(&gt, &gt, &tax).unwrap();
    assert_eq!(r.per_class.len(), 4);
    for c in &r.per_class {
        assert_eq!((c.pq, c.sq, c.rq, c.iou), (1.0, 1.0, 1.0, 1.0));
    }
    assert_eq!(r.all.pq, 1.0);
    assert_eq!(r.pq_dagger, 1.0);
}

#[test]
fn void_points_are_ignored() {
    let tax = ClassTaxonomy::toy();
    let gt = gt_from(&[0, 0, VOID_GROUP, VOID_GROUP], &[4]);
    let pred = gt_from(&[0, 0, 1, 1], &[4, 1]);
    let r = pq_evaluate(&pred, &gt, &tax).unwrap();
    assert_eq!(r.per_class.len(), 1);
    assert_eq!(r.all.pq, 1.0);
}

#[test]
fn length_mismatch_is_an_error() {
    let tax = ClassTaxonomy::toy();
    assert!(pq_evaluate(&gt_from(&[0, 0], &[4]), &gt_from(&[0], &[4]), &tax).is_err());
}

/// Enumerates every (prediction, ground truth) segment pair directly.
fn oracle(pred: &GroundTruth, gt: &GroundTruth, tax: &ClassTaxonomy) -> BTreeMap<ClassId, (f64, f64, f64)> {
    let valid: Vec<usize> = (0..gt.num_points()).filter(|&k| gt.group(k).is_some()).collect();
    let member = |s: &GroundTruth, j: usize, k: usize| s.group(k) == Some(j);
    let mut stats: BTreeMap<ClassId, (f64, f64, f64, f64)> = BTreeMap::new();
    let mut matched_p = vec![false; pred.num_groups()];
    let mut matched_g = vec![false; gt.num_groups()];
    for p in 0..pred.num_groups() {
        for g in 0..gt.num_groups() {
            if pred.classes()[p] != gt.classes()[g] {
                continue;
            }
            let inter = valid.iter().filter(|&&k| member(pred, p, k) && member(gt, g, k)).count();
            let union = valid.iter().filter(|&&k| member(pred, p, k) || member(gt, g, k)).count();
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                assert!(!matched_p[p] && !matched_g[g]);
                matched_p[p] = true;
                matched_g[g] = true;
                let e = stats.entry(gt.classes()[g]).or_default();
                e.0 += 1.0;
                e.3 += iou;
            }
        }
    }
    for p in 0..pred.num_groups() {
        let visible = valid.iter().any(|&k| member(pred, p, k));
        if !matched_p[p] && visible {
            stats.entry(pred.classes()[p]).or_default().1 += 1.0;
        }
    }
    for g in 0..gt.num_groups() {
        if !matched_g[g] {
            stats.entry(gt.classes()[g]).or_default().2 += 1.0;
        }
    }
    let _ = tax;
    stats
        .into_iter()
        .map(|(c, (tp, fp, fn_, iou))| {
            let sq = if tp > 0.0 { iou / tp } else { 0.0 };
            let rq = tp / (tp + 0.5 * fp + 0.5 * fn_);
            (c, (iou / (tp + 0.5 * fp + 0.5 * fn_), sq, rq))
        })
        .collect()
}

pub(crate) fn random_partition(rng: &mut ChaCha8Rng, k: usize, max_groups: usize, void: bool) -> GroundTruth {
    let tax = ClassTaxonomy::toy();
    let groups = rng.gen_range(1..=max_groups);
    let mut classes = Vec::new();
    let mut used_stuff = Vec::new();
    for _ in 0..groups {
        let c: ClassId = loop {
            let c = rng.gen_range(1..=5);
            if tax.is_thing(c) || !used_stuff.contains(&c) {
                break c;
            }
        };
        if tax.is_stuff(c) {
            used_stuff.push(c);
        }
        classes.push(c);
    }
    let gop: Vec<u32> = (0..k)
        .map(|_| {
            if void && rng.gen_bool(0.1) {
                VOID_GROUP
            } else {
                rng.gen_range(0..groups as u32)
            }
        })
        .collect();
    GroundTruth::from_parts(gop, classes).drop_empty_groups()
}

#[test]
fn matches_pair_enumeration_oracle() {
    let tax = ClassTaxonomy::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.gen_range(1..=64);
        let gt = random_partition(&mut rng, k, 6, true);
        // Half the time derive the prediction by perturbing the truth so matches occur.
        let pred = if rng.gen_bool(0.5) {
            let mut gop = gt.group_of_point().to_vec();
            let groups = gt.num_groups().max(1) as u32;
            for g in gop.iter_mut() {
                if *g == VOID_GROUP || rng.gen_bool(0.15) {
                    *g = rng.gen_range(0..groups);
                }
            }
            let classes = if gt.num_groups() == 0 { vec![1] } else { gt.classes().to_vec() };
            GroundTruth::from_parts(gop, classes).drop_empty_groups()
        } else {
            random_partition(&mut rng, k, 6, false)
        };
        let report = pq_evaluate(&pred, &gt, &tax).unwrap();
        let want = oracle(&pred, &gt, &tax);
        assert_eq!(report.per_class.len(), want.len());
        for r in &report.per_class {
            let (pq, sq, rq) = want[&r.class];
            assert!((r.pq - pq).abs() < 1e-12 && (r.sq - sq).abs() < 1e-12 && (r.rq - rq).abs() < 1e-12);
            assert_eq!(r.pq, r.sq * r.rq);
        }
        let mean = want.values().map(|v| v.0).sum::<f64>() / want.len().max(1) as f64;
        assert!((report.all.pq - mean).abs() < 1e-12);
    }
}

#[test]
fn extra_false_positive_never_raises_pq() {
    let tax = ClassTaxonomy::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let gt = random_partition(&mut rng, 40, 5, false);
        let pred = random_partition(&mut rng, 40, 5, false);
        let before = pq_evaluate(&pred, &gt, &tax).unwrap();
        // Carve one point out into a fresh car segment.
        let mut gop = pred.group_of_point().to_vec();
        let mut classes = pred.classes().to_vec();
        gop[rng.gen_range(0..40)] = classes.len() as u32;
        classes.push(1);
        let after = pq_evaluate(&GroundTruth::from_parts(gop, classes).drop_empty_groups(), &gt, &tax).unwrap();
        if let (Some(a), Some(b)) = (after.class(1), before.class(1)) {
            assert!(a.pq <= b.pq + 1e-15);
        }
    }
}

#[test]
fn accumulator_merging_is_order_independent() {
    let tax = ClassTaxonomy::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scenes: Vec<(GroundTruth, GroundTruth)> = (0..6)
        .map(|_| (random_partition(&mut rng, 30, 5, false), random_partition(&mut rng, 30, 5, true)))
        .collect();
    let mut a = PqAccumulator::new();
    for (p, g) in &scenes {
        a.add(p, g, &tax).unwrap();
    }
    let mut b = PqAccumulator::new();
    let mut c = PqAccumulator::new();
    for (i, (p, g)) in scenes.iter().enumerate().rev() {
        if i % 2 == 0 { &mut b } else { &mut c }.add(p, g, &tax).unwrap();
    }
    b.merge(&c);
    assert_eq!(a.counts.keys().collect::<Vec<_>>(), b.counts.keys().collect::<Vec<_>>());
    for (k, v) in &a.counts {
        let w = &b.counts[k];
        assert_eq!((v.tp, v.fp, v.fn_, v.intersection, v.union), (w.tp, w.fp, w.fn_, w.intersection, w.union));
        assert!((v.iou_sum - w.iou_sum).abs() < 1e-12);
    }
}

#[test]
fn infer_argmax_and_ties() {
    let tax = ClassTaxonomy::toy();
    // Classifier 1 wins the tie at point 0; classifier 3 (stuff slot for road) wins point 2.
    let grouping = Tensor::matrix(
        4,
        3,
        vec![0.2, 0.1, 0.1, 0.9, 0.95, 0.1, 0.9, 0.1, 0.1, 0.1, 0.1, 0.8],
    )
    .unwrap();
    let semantic = Tensor::matrix(4, 5, (0..20).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
    let pred = infer(&grouping, &semantic, &tax).unwrap();
    assert_eq!(pred.group_of_point, vec![1, 1, 3]);
    assert_eq!(pred.active_groups, vec![1, 3]);
    assert_eq!(pred.class_of_group[2], 4);
    assert_eq!(pred.class_of_group[3], 5);
}

#[test]
fn infer_matches_per_point_argmax() {
    let tax = ClassTaxonomy::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let g: Vec<f64> = (0..12).map(|_| f64::from(rng.gen_range(0..4u8)) / 4.0).collect();
        let grouping = Tensor::matrix(3, 4, g.clone()).unwrap();
        let semantic = Tensor::matrix(3, 5, (0..15).map(|_| rng.gen()).collect()).unwrap();
        let pred = infer(&grouping, &semantic, &tax).unwrap();
        for k in 0..4 {
            let col = [g[k], g[4 + k], g[8 + k]];
            let best = col.iter().cloned().fold(f64::MIN, f64::max);
            let want = col.iter().position(|&v| v == best).unwrap();
            assert_eq!(pred.group_of_point[k], want);
        }
        let seg = pred.segments(&tax).unwrap();
        assert_eq!(seg.void_count(), 0);
    }
}

#[test]
fn stuff_predictions_merge_into_one_segment() {
    let tax = ClassTaxonomy::toy();
    let pred = PanopticPrediction {
        group_of_point: vec![0, 1, 2, 4, 4],
        class_of_group: vec![4, 1, 4, 4, 5],
        active_groups: vec![0, 1, 2, 4],
        group_confidence: vec![0.9; 5],
    };
    let seg = pred.segments(&tax).unwrap();
    assert_eq!(seg, gt_from(&[0, 1, 0, 2, 2], &[4, 1, 5]));
}

#[test]
fn kitti_files_against_themselves_score_one() {
    let tax = ClassTaxonomy::toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.label");
    let gt = gt_from(&[0, 1, 1, 2, 3, 3, 0, VOID_GROUP], &[4, 1, 3, 5]);
    kitti::write_labels(&path, &gt, &tax.semantic_map(), &tax).unwrap();
    let r = evaluate_kitti_files(&path, &path, &tax).unwrap();
    assert_eq!((r.all.pq, r.all.sq, r.all.rq, r.pq_dagger), (1.0, 1.0, 1.0, 1.0));

    let pred_path = dir.path().join("p.label");
    let gt_path = dir.path().join("g.label");
    kitti::write_labels(&gt_path, &gt_from(&[0, 0, 0, 0, 1, 2, 2, 1, 1, 1], &[1, 4, 1]), &tax.semantic_map(), &tax)
        .unwrap();
    kitti::write_labels(&pred_path, &gt_from(&[0, 0, 0, 1, 0, 1, 1, 2, 2, 1], &[1, 4, 1]), &tax.semantic_map(), &tax)
        .unwrap();
    let r = evaluate_kitti_files(&pred_path, &gt_path, &tax).unwrap();
    assert_eq!(r.class(1).unwrap().pq, 0.3);
}

#[test]
fn report_renders() {
    let tax = ClassTaxonomy::toy();
    let gt = gt_from(&[0, 1, 1], &[4, 1]);
    let r = pq_evaluate(&gt, &gt, &tax).unwrap();
    let back: PqReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let table = r.to_table();
    assert!(table.contains("car") && table.contains("PQ-dagger"));
}
