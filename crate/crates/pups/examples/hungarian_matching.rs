//! Minimum-cost assignment of ground-truth rows to classifier columns.

use pups::autodiff::Tensor;
use pups::matching::hungarian_match;

fn main() -> pups::Result<()> {
    // Three objects, five candidate classifiers.
    let cost = Tensor::from_rows(&[
        &[4.0, 1.0, 3.0, 9.0, 2.5],
        &[2.0, 0.5, 5.0, 8.0, 3.0],
        &[3.0, 2.0, 2.0, 0.1, 7.0],
    ])?;
    let cols = hungarian_match(&cost)?;
    let total: f64 = cols.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
    for (r, c) in cols.iter().enumerate() {
        println!("object {r} -> classifier {c} (cost {})", cost.get(r, *c));
    }
    println!("total {total}");
    Ok(())
}
