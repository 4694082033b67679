//! Generates one toy street scene and writes it as SemanticKITTI files.
//!
//! cargo run --release --example generate_scene -- [seed] [out_dir]

use std::path::PathBuf;

use pups::scene::{generate_scene, kitti, ClassTaxonomy, SceneConfig};

fn main() -> pups::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scene_out".into()));

    let tax = ClassTaxonomy::toy();
    let scene = generate_scene(&SceneConfig::toy().with_seed(seed), &tax)?;
    println!("{} points, {} groups", scene.cloud.len(), scene.gt.num_groups());
    for (group, size) in scene.gt.group_sizes().into_iter().enumerate() {
        let class = scene.gt.classes()[group];
        println!("  group {group:2}  {:<9} {size:4} points", tax.info(class).unwrap().name);
    }

    std::fs::create_dir_all(&out)?;
    kitti::write_points(&out.join("scene.bin"), &scene.cloud)?;
    kitti::write_labels(&out.join("scene.label"), &scene.gt, &tax.semantic_map(), &tax)?;
    println!("wrote {}", out.display());
    Ok(())
}
