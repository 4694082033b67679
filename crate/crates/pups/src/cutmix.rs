//! Instance database and instance-paste augmentation.
//!
//! Thing instances are cut out of training scenes and pasted into other
//! scenes. In context-aware mode a pasted instance is moved onto the nearest
//! point of a stuff class it plausibly stands on; in random mode it keeps
//! the sampled planar position and its original height.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{kitti, ClassId, ClassTaxonomy, Point, PointCloud, Scene};

/// One cut-out instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEntry {
    pub class: ClassId,
    /// Points relative to `centroid` (intensity unchanged).
    pub points: Vec<Point>,
    /// Centroid in the source scene.
    pub centroid: [f64; 3],
    /// `centroid_z − min_z`.
    pub ground_offset: f64,
    pub scene_id: u64,
}

impl InstanceEntry {
    /// Largest planar distance of a point from the centroid.
    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max)
    }

    /// Points moved so the centroid lands on `centroid`, rotated by `yaw`
    /// about the vertical axis.
    pub fn placed_at(&self, centroid: [f64; 3], yaw: f64) -> Vec<Point> {
        let (s, c) = yaw.sin_cos();
        self.points
            .iter()
            .map(|&[x, y, z, i]| [centroid[0] + c * x - s * y, centroid[1] + s * x + c * y, centroid[2] + z, i])
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceDb {
    pub entries: Vec<InstanceEntry>,
    pub by_class: BTreeMap<ClassId, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    class: ClassId,
    centroid: [f64; 3],
    ground_offset: f64,
    scene_id: u64,
}

impl InstanceDb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: InstanceEntry) {
        self.by_class.entry(entry.class).or_default().push(self.entries.len());
        self.entries.push(entry);
    }

    /// Writes `entry_NNNNN.bin` point files (f32, relative coordinates) and
    /// a `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("entry_{i:05}.bin");
            kitti::write_points(&dir.join(&file), &PointCloud::new(e.points.clone())?)?;
            manifest.push(ManifestEntry {
                file,
                class: e.class,
                centroid: e.centroid,
                ground_offset: e.ground_offset,
                scene_id: e.scene_id,
            });
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut db = Self::default();
        for m in manifest {
            if !taxonomy.is_thing(m.class) {
                return Err(Error::UnknownClass(m.class));
            }
            let cloud = kitti::read_points(&dir.join(&m.file))?;
            db.push(InstanceEntry {
                class: m.class,
                points: cloud.into_points(),
                centroid: m.centroid,
                ground_offset: m.ground_offset,
                scene_id: m.scene_id,
            });
        }
        Ok(db)
    }
}

/// Cuts every thing group out of the given scenes; scene ids are their
/// positions in the slice.
pub fn build_db(scenes: &[Scene], taxonomy: &ClassTaxonomy) -> InstanceDb {
    let mut db = InstanceDb::default();
    for (id, scene) in scenes.iter().enumerate() {
        for j in scene.gt.thing_groups(taxonomy) {
            let members = scene.gt.members(j);
            let pts: Vec<Point> = members.iter().map(|&k| scene.cloud.points()[k]).collect();
            let n = pts.len() as f64;
            let mut centroid = [0.0; 3];
            for p in &pts {
                for d in 0..3 {
                    centroid[d] += p[d] / n;
                }
            }
            let min_z = pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
            db.push(InstanceEntry {
                class: scene.gt.classes()[j],
                points: pts
                    .iter()
                    .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2], p[3]])
                    .collect(),
                centroid,
                ground_offset: centroid[2] - min_z,
                scene_id: id as u64,
            });
        }
    }
    db
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementMode {
    ContextAware,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixPolicy {
    /// Instances pasted per scene, by class name.
    pub counts: BTreeMap<String, usize>,
    pub mode: PlacementMode,
    pub max_attempts: usize,
    /// Minimum gap between pasted and existing instance footprints.
    pub min_separation: f64,
    /// Existing points closer than this (planar) to a pasted point are removed.
    pub removal_radius: f64,
    /// A pasted instance's lowest point must have a compatible stuff point
    /// within this planar distance.
    pub snap_radius: f64,
    /// Maximum absolute yaw applied to pasted instances, in radians.
    pub max_yaw: f64,
}

impl Default for MixPolicy {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            mode: PlacementMode::ContextAware,
            max_attempts: 20,
            min_separation: 1.0,
            removal_radius: 0.1,
            snap_radius: 2.0,
            max_yaw: 0.0,
        }
    }
}

impl MixPolicy {
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.max_attempts == 0 {
            return Err(Error::Config("cutmix max_attempts must be at least 1".into()));
        }
        for name in self.counts.keys() {
            match taxonomy.class_by_name(name) {
                Some(c) if taxonomy.is_thing(c) => {}
                _ => return Err(Error::Config(format!("cutmix count for unknown thing class {name:?}"))),
            }
        }
        let all = [self.min_separation, self.removal_radius, self.snap_radius, self.max_yaw];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("cutmix distances must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn requested(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Bookkeeping for one or more [`mix`] calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSummary {
    pub requested: usize,
    pub placed: usize,
    pub skipped: usize,
    pub removed_points: usize,
    /// Existing thing instances that lost all their points.
    pub removed_instances: usize,
    pub context_violations: usize,
}

impl MixSummary {
    pub fn add(&mut self, o: &MixSummary) {
        self.requested += o.requested;
        self.placed += o.placed;
        self.skipped += o.skipped;
        self.removed_points += o.removed_points;
        self.removed_instances += o.removed_instances;
        self.context_violations += o.context_violations;
    }

    pub fn to_text(&self) -> String {
        format!(
            "requested {}\nplaced {}\nskipped {}\nremoved_points {}\nremoved_instances {}\ncontext_violations {}\n",
            self.requested,
            self.placed,
            self.skipped,
            self.removed_points,
            self.removed_instances,
            self.context_violations
        )
    }
}

struct Footprint {
    center: [f64; 2],
    radius: f64,
}

fn footprints(scene: &Scene, taxonomy: &ClassTaxonomy) -> Vec<Footprint> {
    scene
        .gt
        .thing_groups(taxonomy)
        .map(|j| {
            let members = scene.gt.members(j);
            let pts = scene.cloud.points();
            let n = members.len() as f64;
            let cx = members.iter().map(|&k| pts[k][0]).sum::<f64>() / n;
            let cy = members.iter().map(|&k| pts[k][1]).sum::<f64>() / n;
            let radius = members
                .iter()
                .map(|&k| (pts[k][0] - cx).hypot(pts[k][1] - cy))
                .fold(0.0, f64::max);
            Footprint {
                center: [cx, cy],
                radius,
            }
        })
        .collect()
}

/// Nearest point (planar) whose class is one of `classes`.
fn nearest_of(scene: &Scene, x: f64, y: f64, classes: &[ClassId], skip_from: usize) -> Option<(usize, f64)> {
    let pts = scene.cloud.points();
    (0..skip_from.min(pts.len()))
        .filter(|&k| classes.contains(&scene.gt.class_of_point(k)))
        .map(|k| (k, (pts[k][0] - x).hypot(pts[k][1] - y)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Context violations of the instances occupying the trailing
/// `placed` groups: an instance violates when the stuff point nearest its
/// lowest point is of an incompatible class or farther than `snap_radius`.
pub fn context_violations(scene: &Scene, placed_groups: &[usize], taxonomy: &ClassTaxonomy, snap_radius: f64) -> usize {
    let pts = scene.cloud.points();
    placed_groups
        .iter()
        .filter(|&&j| {
            let class = scene.gt.classes()[j];
            let members = scene.gt.members(j);
            let Some(&low) = members.iter().min_by(|&&a, &&b| pts[a][2].total_cmp(&pts[b][2]).then(a.cmp(&b)))
            else {
                return false;
            };
            let [x, y, _, _] = pts[low];
            match nearest_of(scene, x, y, taxonomy.stuff_classes(), pts.len()) {
                Some((k, d)) => d > snap_radius || !taxonomy.context(class).contains(&scene.gt.class_of_point(k)),
                None => true,
            }
        })
        .count()
}

/// Pastes instances from `db` into a copy of `scene`.
pub fn mix<R: Rng>(
    scene: &Scene,
    db: &InstanceDb,
    policy: &MixPolicy,
    taxonomy: &ClassTaxonomy,
    rng: &mut R,
) -> Result<(Scene, MixSummary)> {
    let mut summary = MixSummary {
        requested: policy.requested(),
        ..MixSummary::default()
    };
    if db.is_empty() || summary.requested == 0 {
        summary.skipped = summary.requested;
        return Ok((scene.clone(), summary));
    }
    let pts = scene.cloud.points();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x_lo = x_lo.min(p[0]);
        x_hi = x_hi.max(p[0]);
        y_lo = y_lo.min(p[1]);
        y_hi = y_hi.max(p[1]);
    }
    let mut current = scene.clone();
    let mut occupied = footprints(scene, taxonomy);
    let things_before = scene.gt.thing_groups(taxonomy).count();
    let mut placed_ids: Vec<u32> = Vec::new();

    let mut plan: Vec<ClassId> = Vec::new();
    for (name, &n) in &policy.counts {
        let c = taxonomy.class_by_name(name).ok_or_else(|| Error::Config(format!("unknown class {name:?}")))?;
        plan.extend(std::iter::repeat_n(c, n));
    }
    for class in plan {
        let Some(candidates) = db.by_class.get(&class).filter(|v| !v.is_empty()) else {
            summary.skipped += 1;
            continue;
        };
        let entry = &db.entries[*candidates.choose(rng).expect("nonempty")];
        let radius = entry.radius();
        let mut done = false;
        for _ in 0..policy.max_attempts {
            let cx = if x_hi > x_lo { rng.gen_range(x_lo..=x_hi) } else { x_lo };
            let cy = if y_hi > y_lo { rng.gen_range(y_lo..=y_hi) } else { y_lo };
            let yaw = if policy.max_yaw > 0.0 {
                rng.gen_range(-policy.max_yaw..=policy.max_yaw)
            } else {
                0.0
            };
            let centroid = match policy.mode {
                PlacementMode::ContextAware => {
                    let Some((k, _)) = nearest_of(&current, cx, cy, taxonomy.context(class), current.cloud.len()) else {
                        continue;
                    };
                    let [sx, sy, sz, _] = current.cloud.points()[k];
                    [sx, sy, sz + entry.ground_offset]
                }
                PlacementMode::Random => [cx, cy, entry.centroid[2]],
            };
            let clear = occupied
                .iter()
                .all(|f| (f.center[0] - centroid[0]).hypot(f.center[1] - centroid[1]) >= f.radius + radius + policy.min_separation);
            if !clear {
                continue;
            }
            let new_points = entry.placed_at(centroid, yaw);
            let (candidate, removed, remap) = paste(&current, &new_points, class, policy.removal_radius)?;
            let group = candidate.gt.num_groups() - 1;
            if policy.mode == PlacementMode::ContextAware
                && context_violations(&candidate, &[group], taxonomy, policy.snap_radius) > 0
            {
                continue;
            }
            placed_ids = placed_ids.iter().filter_map(|&g| remap[g as usize]).collect();
            placed_ids.push(group as u32);
            current = candidate;
            summary.removed_points += removed;
            occupied.push(Footprint {
                center: [centroid[0], centroid[1]],
                radius,
            });
            summary.placed += 1;
            done = true;
            break;
        }
        if !done {
            summary.skipped += 1;
        }
    }
    let groups: Vec<usize> = placed_ids.iter().map(|&g| g as usize).collect();
    summary.context_violations = context_violations(&current, &groups, taxonomy, policy.snap_radius);
    let things_after = current.gt.thing_groups(taxonomy).count();
    summary.removed_instances = things_before + summary.placed - things_after;
    Ok((current, summary))
}

/// Appends `points` as a new group of `class` after removing existing points
/// within `radius` (planar) of any of them. Also returns the number of
/// removed points and the new index of every old group that survived.
fn paste(scene: &Scene, points: &[Point], class: ClassId, radius: f64) -> Result<(Scene, usize, Vec<Option<u32>>)> {
    let old = scene.cloud.points();
    let keep: Vec<usize> = (0..old.len())
        .filter(|&k| {
            points
                .iter()
                .all(|p| (old[k][0] - p[0]).hypot(old[k][1] - p[1]) > radius)
        })
        .collect();
    let removed = old.len() - keep.len();
    let mut alive = vec![false; scene.gt.num_groups()];
    for &k in &keep {
        if let Some(g) = scene.gt.group(k) {
            alive[g] = true;
        }
    }
    let mut next = 0;
    let remap = alive
        .iter()
        .map(|&a| {
            a.then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    let mut gt = scene.gt.select_points(&keep);
    let mut cloud: Vec<Point> = keep.iter().map(|&k| old[k]).collect();
    cloud.extend_from_slice(points);
    let group = gt.push_group(class);
    gt.push_points(group, points.len());
    Ok((Scene::new(PointCloud::new(cloud)?, gt)?, removed, remap))
}
