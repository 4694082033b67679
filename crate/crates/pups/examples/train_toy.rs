//! Short training run on toy scenes, then a checkpoint round trip.
//!
//! cargo run --release --example train_toy -- [train_scenes] [epochs] [stages]

use pups::app::{self, RunConfig, CHECKPOINT_FILE};

fn main() -> pups::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("integer argument"));
    let mut cfg = RunConfig::toy();
    cfg.data.train_scenes = args.next().unwrap_or(400);
    cfg.data.val_scenes = 100;
    cfg.optim.epochs = args.next().unwrap_or(4);
    cfg.optim.lr_milestone = cfg.optim.epochs * 3 / 4;
    cfg.model.stages = args.next().unwrap_or(3);

    let out = std::env::temp_dir().join("pups_train_toy");
    let outcome = app::train(&cfg, &out)?;
    for m in &outcome.metrics {
        println!("epoch {:2}  loss {:.4}  val PQ {:.4}", m.epoch, m.loss, m.val_pq.unwrap_or(f64::NAN));
    }
    print!("{}", outcome.report.to_table());

    let reloaded = app::load_model(&cfg, &out.join(CHECKPOINT_FILE))?;
    let again = pups::train::evaluate(&reloaded, &app::Dataset::generate(&cfg)?.val)?;
    println!("reloaded checkpoint reproduces the report: {}", again == outcome.report);
    Ok(())
}
