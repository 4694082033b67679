//! Global scene transforms: flips along x/y, rotation about z, uniform scaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalAugment {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Maximum absolute yaw in radians.
    pub max_rotation: f64,
    /// Inclusive scale range.
    pub scale: [f64; 2],
}

impl Default for GlobalAugment {
    fn default() -> Self {
        Self {
            flip_x: true,
            flip_y: true,
            max_rotation: 0.0,
            scale: [1.0, 1.0],
        }
    }
}

impl GlobalAugment {
    pub fn none() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            max_rotation: 0.0,
            scale: [1.0, 1.0],
        }
    }

    pub fn apply<R: Rng>(&self, cloud: &PointCloud, rng: &mut R) -> PointCloud {
        let fx = if self.flip_x && rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let fy = if self.flip_y && rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let yaw = if self.max_rotation > 0.0 {
            rng.gen_range(-self.max_rotation..=self.max_rotation)
        } else {
            0.0
        };
        let s = if self.scale[1] > self.scale[0] {
            rng.gen_range(self.scale[0]..=self.scale[1])
        } else {
            self.scale[0]
        };
        let (sn, cs) = yaw.sin_cos();
        let points: Vec<Point> = cloud
            .points()
            .iter()
            .map(|&[x, y, z, i]| {
                let (x, y) = (x * fx, y * fy);
                [s * (cs * x - sn * y), s * (sn * x + cs * y), s * z, i]
            })
            .collect();
        PointCloud::new(points).expect("transform keeps points finite")
    }
}
