//! Per-point feature extractor: a shared SiLU MLP over normalized point
//! attributes followed by one k-nearest-neighbor mean-aggregation block.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Neighbors, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::nn::Linear;
use crate::scene::PointCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Widths of the hidden layers before the output width.
    pub hidden: Vec<usize>,
    /// Neighbors averaged by the aggregation block.
    pub neighbors: usize,
    /// Number of octaves of sin/cos planar position encodings; 0 disables them.
    pub fourier_bands: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            neighbors: 16,
            fourier_bands: 5,
        }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        4 + 4 * self.fourier_bands
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    pub config: EncoderConfig,
    pub channels: usize,
    mlp: Vec<Linear>,
    aggregate: Linear,
}

/// Side information from one [`PointEncoder::encode`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeInfo {
    pub neighbors_used: usize,
    /// `true` when the configured neighbor count had to be reduced to `K − 1`.
    pub clamped: bool,
}

impl PointEncoder {
    /// Registers parameters under `encoder.*`.
    pub fn new<R: Rng>(config: EncoderConfig, channels: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut widths = vec![config.input_width()];
        widths.extend(&config.hidden);
        widths.push(channels);
        let mlp = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("encoder.mlp{i}"), w[0], w[1], rng))
            .collect();
        let aggregate = Linear::new(store, "encoder.aggregate", 2 * channels, channels, rng);
        Self {
            config,
            channels,
            mlp,
            aggregate,
        }
    }

    /// Produces `F` (`K×C`).
    pub fn encode(&self, g: &mut Graph, p: &Bound, cloud: &PointCloud) -> Result<(Var, EncodeInfo)> {
        let (coords, input) = input_features(cloud, self.config.fourier_bands);
        let (neighbors, info) = knn(&coords, self.config.neighbors);
        if info.clamped {
            log::warn!(
                "neighbor count {} clamped to {} for a {}-point cloud",
                self.config.neighbors,
                info.neighbors_used,
                cloud.len()
            );
        }
        let mut h = g.constant(input);
        for layer in &self.mlp {
            let z = layer.forward(g, p, h)?;
            let gate = g.sigmoid(z);
            h = g.mul(z, gate)?;
        }
        let pooled = g.neighbor_mean(h, Arc::new(neighbors))?;
        let both = g.concat_cols(&[h, pooled])?;
        let features = self.aggregate.forward(g, p, both)?;
        Ok((features, info))
    }
}

/// Normalizes coordinates to zero mean and unit RMS radius, then appends
/// intensity and optional planar sin/cos encodings. Returns the normalized
/// coordinates alongside the `K×D` input matrix.
pub fn input_features(cloud: &PointCloud, fourier_bands: usize) -> (Vec<[f64; 3]>, Tensor) {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
    }
    let rms = (pts
        .iter()
        .map(|p| (0..3).map(|d| (p[d] - mean[d]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n)
        .sqrt();
    let scale = if rms > 1e-9 { 1.0 / rms } else { 1.0 };
    let coords: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| [(p[0] - mean[0]) * scale, (p[1] - mean[1]) * scale, (p[2] - mean[2]) * scale])
        .collect();
    let width = 4 + 4 * fourier_bands;
    let mut data = Vec::with_capacity(pts.len() * width);
    for (c, p) in coords.iter().zip(pts) {
        data.extend_from_slice(&[c[0], c[1], c[2], p[3]]);
        for b in 0..fourier_bands {
            let f = (1u64 << b) as f64;
            data.extend_from_slice(&[(f * c[0]).sin(), (f * c[0]).cos(), (f * c[1]).sin(), (f * c[1]).cos()]);
        }
    }
    (coords, Tensor::from_parts(vec![pts.len(), width], data))
}

/// `k` nearest other points of every point (Euclidean, ties by index).
pub fn knn(coords: &[[f64; 3]], k: usize) -> (Neighbors, EncodeInfo) {
    let n = coords.len();
    if n == 1 {
        return (
            Neighbors { k: 1, indices: vec![0] },
            EncodeInfo {
                neighbors_used: 0,
                clamped: k > 0,
            },
        );
    }
    let used = k.min(n - 1).max(1);
    let mut indices = Vec::with_capacity(n * used);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, a) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(coords.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, b)| {
            let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            (d, j)
        }));
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if used < cand.len() {
            cand.select_nth_unstable_by(used - 1, cmp);
        }
        let mut chosen = cand[..used].to_vec();
        chosen.sort_unstable_by(cmp);
        indices.extend(chosen.iter().map(|&(_, j)| j));
    }
    (
        Neighbors { k: used, indices },
        EncodeInfo {
            neighbors_used: used,
            clamped: k > n - 1,
        },
    )
}
