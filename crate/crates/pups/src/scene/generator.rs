use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, ClassTaxonomy, GroundTruth, Point, PointCloud, Scene};
use crate::error::{Error, Result};

/// A horizontal stuff strip spanning the scene along `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub class: ClassId,
    pub y_min: f64,
    pub y_max: f64,
    /// Surface height in meters.
    pub height: f64,
    pub intensity: f64,
}

/// Box-shaped thing instances of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThingConfig {
    pub class: ClassId,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Points sampled per instance.
    pub points: usize,
    /// Relative sampling frequency among thing classes.
    pub weight: f64,
    pub intensity: f64,
}

impl ThingConfig {
    /// Radius of the footprint's circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Inclusive range of points per scene.
    pub points: [usize; 2],
    /// Inclusive range of thing instances per scene.
    pub instances: [usize; 2],
    /// The scene spans `[-half_length, half_length]` along `x`.
    pub half_length: f64,
    /// Minimum gap between instance footprints.
    pub min_separation: f64,
    pub max_attempts: usize,
    pub height_noise: f64,
    pub intensity_noise: f64,
    #[serde(rename = "band")]
    pub bands: Vec<BandConfig>,
    #[serde(rename = "thing")]
    pub things: Vec<ThingConfig>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl SceneConfig {
    /// 30 m × 30 m street: a road between two raised sidewalks, with cars,
    /// bicycles and people in a 6 : 2.5 : 1.5 ratio.
    pub fn toy() -> Self {
        let band = |class, y_min, y_max, height, intensity| BandConfig {
            class,
            y_min,
            y_max,
            height,
            intensity,
        };
        let thing = |class, length, width, height, points, weight, intensity| ThingConfig {
            class,
            length,
            width,
            height,
            points,
            weight,
            intensity,
        };
        Self {
            seed: 0,
            points: [512, 512],
            instances: [0, 8],
            half_length: 15.0,
            min_separation: 1.0,
            max_attempts: 200,
            height_noise: 0.03,
            intensity_noise: 0.05,
            bands: vec![
                band(5, -15.0, -9.0, 0.2, 0.55),
                band(4, -9.0, 9.0, 0.0, 0.15),
                band(5, 9.0, 15.0, 0.2, 0.55),
            ],
            things: vec![
                thing(1, 4.2, 1.8, 1.5, 36, 0.6, 0.85),
                thing(2, 1.8, 0.6, 1.1, 24, 0.25, 0.7),
                thing(3, 0.7, 0.7, 1.8, 20, 0.15, 0.35),
            ],
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.points[0] == 0 || self.points[0] > self.points[1] {
            return bad(format!("points range {:?} is empty", self.points));
        }
        if self.instances[0] > self.instances[1] {
            return bad(format!("instances range {:?} is empty", self.instances));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if !(self.half_length > 0.0) || self.min_separation < 0.0 {
            return bad("half_length must be positive and min_separation nonnegative".into());
        }
        if self.bands.is_empty() {
            return bad("at least one stuff band is required".into());
        }
        for b in &self.bands {
            if !taxonomy.is_stuff(b.class) {
                return bad(format!("band class {} is not a stuff class", b.class));
            }
            if !(b.y_max > b.y_min) || !(0.0..=1.0).contains(&b.intensity) {
                return bad(format!("band of class {} is malformed", b.class));
            }
        }
        for t in &self.things {
            if !taxonomy.is_thing(t.class) {
                return bad(format!("thing class {} is not a thing class", t.class));
            }
            if t.points == 0 || !(t.weight >= 0.0) || !(t.length > 0.0 && t.width > 0.0 && t.height > 0.0) {
                return bad(format!("thing config of class {} is malformed", t.class));
            }
            if !self.bands.iter().any(|b| taxonomy.context(t.class).contains(&b.class)) {
                return bad(format!("no band provides context for class {}", t.class));
            }
        }
        if self.instances[1] > 0 && self.things.iter().all(|t| t.weight == 0.0) {
            return bad("instances requested but every thing weight is zero".into());
        }
        Ok(())
    }

    pub fn thing(&self, class: ClassId) -> Option<&ThingConfig> {
        self.things.iter().find(|t| t.class == class)
    }

    /// Stuff class under planar position `(x, y)`, if any band covers it.
    pub fn band_at(&self, x: f64, y: f64) -> Option<&BandConfig> {
        if x.abs() > self.half_length {
            return None;
        }
        self.bands.iter().find(|b| y >= b.y_min && y <= b.y_max)
    }
}

struct Placement {
    class: ClassId,
    center: [f64; 2],
    yaw: f64,
    base: f64,
}

/// Generates one scene from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, taxonomy: &ClassTaxonomy) -> Result<Scene> {
    cfg.validate(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = rng.gen_range(cfg.points[0]..=cfg.points[1]);
    let count = rng.gen_range(cfg.instances[0]..=cfg.instances[1]);

    let total_weight: f64 = cfg.things.iter().map(|t| t.weight).sum();
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.gen::<f64>() * total_weight;
        let thing = cfg
            .things
            .iter()
            .find(|t| {
                pick -= t.weight;
                pick < 0.0 && t.weight > 0.0
            })
            .unwrap_or_else(|| cfg.things.iter().rev().find(|t| t.weight > 0.0).unwrap());
        let p = place(cfg, taxonomy, thing, &placed, &mut rng)?;
        placed.push(p);
    }

    let thing_points: usize = placed
        .iter()
        .map(|p| cfg.thing(p.class).unwrap().points)
        .sum();
    let mut stuff_classes: Vec<ClassId> = cfg.bands.iter().map(|b| b.class).collect();
    stuff_classes.sort_unstable();
    stuff_classes.dedup();
    if k < thing_points + cfg.bands.len() {
        return Err(Error::Generation(format!(
            "{k} points cannot hold {thing_points} instance points plus every stuff band"
        )));
    }

    let mut points: Vec<(Point, u32)> = Vec::with_capacity(k);
    let mut classes: Vec<ClassId> = Vec::new();
    for p in &placed {
        let t = cfg.thing(p.class).unwrap();
        let group = classes.len() as u32;
        classes.push(p.class);
        let (s, c) = p.yaw.sin_cos();
        for _ in 0..t.points {
            let u = rng.gen_range(-0.5..0.5) * t.length;
            let v = rng.gen_range(-0.5..0.5) * t.width;
            let h = rng.gen_range(0.0..t.height);
            let x = p.center[0] + c * u - s * v;
            let y = p.center[1] + s * u + c * v;
            let i = jitter(&mut rng, t.intensity, cfg.intensity_noise);
            points.push(([x, y, p.base + h, i], group));
        }
    }

    let stuff_group: Vec<u32> = stuff_classes
        .iter()
        .map(|&c| {
            classes.push(c);
            (classes.len() - 1) as u32
        })
        .collect();
    let remaining = k - thing_points;
    let areas: Vec<f64> = cfg.bands.iter().map(|b| b.y_max - b.y_min).collect();
    let total_area: f64 = areas.iter().sum();
    let mut quota: Vec<usize> = areas
        .iter()
        .map(|a| ((a / total_area) * remaining as f64).floor().max(1.0) as usize)
        .collect();
    while quota.iter().sum::<usize>() > remaining {
        let i = (0..quota.len()).max_by_key(|&i| quota[i]).unwrap();
        quota[i] -= 1;
    }
    let bands = quota.len();
    let mut next = 0;
    while quota.iter().sum::<usize>() < remaining {
        quota[next % bands] += 1;
        next += 1;
    }
    for (band, &n) in cfg.bands.iter().zip(&quota) {
        let rank = stuff_classes.binary_search(&band.class).unwrap();
        for _ in 0..n {
            let x = rng.gen_range(-cfg.half_length..cfg.half_length);
            let y = rng.gen_range(band.y_min..band.y_max);
            let z = band.height + rng.gen_range(-1.0..1.0) * cfg.height_noise;
            let i = jitter(&mut rng, band.intensity, cfg.intensity_noise);
            points.push(([x, y, z, i], stuff_group[rank]));
        }
    }
    points.shuffle(&mut rng);

    let (pts, gop): (Vec<Point>, Vec<u32>) = points.into_iter().unzip();
    let gt = GroundTruth::from_parts(gop, classes).drop_empty_groups();
    gt.validate(taxonomy)?;
    Scene::new(PointCloud::new(pts)?, gt)
}

fn jitter<R: Rng>(rng: &mut R, base: f64, noise: f64) -> f64 {
    (base + rng.gen_range(-1.0..1.0) * noise).clamp(0.0, 1.0)
}

fn place<R: Rng>(
    cfg: &SceneConfig,
    taxonomy: &ClassTaxonomy,
    thing: &ThingConfig,
    placed: &[Placement],
    rng: &mut R,
) -> Result<Placement> {
    let r = thing.radius();
    let bands: Vec<&super::BandConfig> = cfg
        .bands
        .iter()
        .filter(|b| taxonomy.context(thing.class).contains(&b.class))
        .filter(|b| b.y_max - b.y_min > 2.0 * r && cfg.half_length > r)
        .collect();
    if bands.is_empty() {
        return Err(Error::Generation(format!(
            "no context band is wide enough for class {}",
            thing.class
        )));
    }
    let total: f64 = bands.iter().map(|b| b.y_max - b.y_min).sum();
    for _ in 0..cfg.max_attempts {
        let mut pick = rng.gen::<f64>() * total;
        let band = bands
            .iter()
            .find(|b| {
                pick -= b.y_max - b.y_min;
                pick < 0.0
            })
            .unwrap_or(bands.last().unwrap());
        let x = rng.gen_range(-cfg.half_length + r..cfg.half_length - r);
        let y = rng.gen_range(band.y_min + r..band.y_max - r);
        let yaw = rng.gen_range(-0.3..0.3);
        let clear = placed.iter().all(|p| {
            let other = cfg.thing(p.class).unwrap().radius();
            (p.center[0] - x).hypot(p.center[1] - y) >= r + other + cfg.min_separation
        });
        if clear {
            return Ok(Placement {
                class: thing.class,
                center: [x, y],
                yaw,
                base: band.height,
            });
        }
    }
    Err(Error::Generation(format!(
        "could not place an instance of class {} after {} attempts",
        thing.class, cfg.max_attempts
    )))
}
