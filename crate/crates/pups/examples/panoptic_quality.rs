//! Scores a hand-made prediction against ground truth.

use pups::panoptic::pq_evaluate;
use pups::scene::{ClassTaxonomy, GroundTruth};

fn main() -> pups::Result<()> {
    let tax = ClassTaxonomy::toy();
    // Ten points: two cars (ids 0, 1) on road (id 2).
    let gt = GroundTruth::new(vec![0, 0, 0, 1, 1, 2, 2, 2, 2, 2], vec![1, 1, 4], &tax)?;
    // The second car is split in two and one road point is taken by the first.
    let pred = GroundTruth::new(vec![0, 0, 0, 1, 3, 2, 2, 2, 2, 0], vec![1, 1, 4, 1], &tax)?;
    let report = pq_evaluate(&pred, &gt, &tax)?;
    print!("{}", report.to_table());
    println!("{}", report.to_json());
    Ok(())
}
