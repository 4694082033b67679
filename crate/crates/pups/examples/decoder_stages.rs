//! Runs the encoder and every refinement stage on one scene and reports
//! how the grouping changes from stage to stage.

use pups::autodiff::Graph;
use pups::model::{ModelConfig, PupsModel};
use pups::panoptic::{infer, pq_evaluate};
use pups::scene::{generate_scene, ClassTaxonomy, SceneConfig};

fn main() -> pups::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let tax = ClassTaxonomy::toy();
    let scene = generate_scene(&SceneConfig::toy().with_seed(seed), &tax)?;
    let model = PupsModel::new(ModelConfig::toy(), tax.clone(), seed)?;

    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &scene.cloud)?;
    println!("encoder: {:?}", out.info);
    for (s, stage) in out.stages.iter().enumerate() {
        let pred = infer(g.value(stage.grouping_scores), g.value(stage.semantic_scores), &tax)?;
        let report = pq_evaluate(&pred.segments(&tax)?, &scene.gt, &tax)?;
        println!(
            "stage {s}: grouping {:?}, {} active classifiers, PQ {:.3}",
            g.value(stage.grouping_scores).shape(),
            pred.active_groups.len(),
            report.all.pq
        );
    }
    Ok(())
}
