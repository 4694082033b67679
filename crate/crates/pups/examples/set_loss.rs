//! Matching-based loss of an untrained model on one scene, with the
//! per-stage assignments and a finite-difference check of its gradient.

use pups::autodiff::Tensor;
use pups::gradcheck;
use pups::matching::{dice_loss, dice_rows, focal_loss, mask_bce_loss, mask_bce_rows, total_loss, LossWeights};
use pups::model::{ModelConfig, PupsModel};
use pups::scene::{generate_scene, ClassTaxonomy, SceneConfig};

fn main() -> pups::Result<()> {
    let w = LossWeights::default();
    let g = [1.0, 1.0, 0.0, 0.0];
    let logits: [f64; 4] = [2.0, 0.5, -1.0, -3.0];
    let probs: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
    println!("dice {:.4}", dice_loss(&probs, &g)?);
    println!("mask bce {:.4}", mask_bce_loss(&logits, &g)?);
    println!("focal (target col 0) {:.4}", focal_loss(&logits, Some(0), &w)?);
    println!("focal (no object) {:.4}", focal_loss(&logits, None, &w)?);

    let tax = ClassTaxonomy::toy();
    let scene = generate_scene(&SceneConfig::toy().with_seed(3), &tax)?;
    let model = PupsModel::new(ModelConfig::toy(), tax.clone(), 0)?;
    let mut graph = pups::autodiff::Graph::new();
    let p = model.params.bind(&mut graph);
    let out = model.forward(&mut graph, &p, &scene.cloud)?;
    let (loss, assignments) = total_loss(&mut graph, &out.stages, &scene.gt, &tax, &w)?;
    println!("\ntotal loss {:.4}", graph.value(loss).data()[0]);
    for (s, a) in assignments.iter().enumerate() {
        println!("stage {s}: (group, classifier) {:?}", a.pairs);
    }

    // Gradient of the mask terms with respect to raw logits.
    let x = Tensor::matrix(1, 4, logits.to_vec())?;
    let mask = Tensor::matrix(1, 4, g.to_vec())?;
    let check = gradcheck::check(&[x], 1e-5, |g, v| {
        let probs = g.sigmoid(v[0]);
        let d = dice_rows(g, probs, &mask)?;
        let b = mask_bce_rows(g, v[0], &mask)?;
        let s = g.add(d, b)?;
        Ok(g.sum(s))
    })?;
    println!("\ngradient relative error {:.2e}", check.max_relative_error());
    Ok(())
}
