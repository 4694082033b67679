//! Pastes instances from a small database into a scene in both placement
//! modes and counts context violations.

use pups::cutmix::{build_db, context_violations, mix, MixPolicy, PlacementMode};
use pups::scene::{generate_scene, ClassTaxonomy, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pups::Result<()> {
    let tax = ClassTaxonomy::toy();
    let cfg = SceneConfig::toy();
    let sources: Vec<_> = (0..50).map(|i| generate_scene(&cfg.with_seed(i), &tax)).collect::<Result<_, _>>()?;
    let db = build_db(&sources, &tax);
    println!("database: {} instances", db.len());

    let target = generate_scene(&cfg.with_seed(1000), &tax)?;
    for mode in [PlacementMode::ContextAware, PlacementMode::Random] {
        let policy = MixPolicy {
            counts: [("car".to_string(), 2), ("person".to_string(), 3)].into(),
            mode,
            ..MixPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mixed, summary) = mix(&target, &db, &policy, &tax, &mut rng)?;
        let pasted: Vec<usize> = (target.gt.num_groups()..mixed.gt.num_groups()).collect();
        println!("\n{mode:?}: {} points", mixed.cloud.len());
        print!("{}", summary.to_text());
        println!("recount of violations: {}", context_violations(&mixed, &pasted, &tax, policy.snap_radius));
    }
    Ok(())
}
