//! Point clouds, ground-truth groupings, the synthetic scene generator and
//! SemanticKITTI file formats.

mod generator;
pub mod kitti;
mod taxonomy;
pub mod transform;

pub use generator::{generate_scene, BandConfig, SceneConfig, ThingConfig};
pub use taxonomy::{ClassId, ClassInfo, ClassKind, ClassTaxonomy, SemanticMap, VOID_CLASS};

use crate::error::{Error, Result};

/// One point: `x, y, z` in meters and intensity in `[0, 1]`.
pub type Point = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("a point cloud needs at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::Contract(format!(
                    "point {i} has intensity {} outside [0, 1]",
                    p[3]
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Sentinel group index for void (ignored) points.
pub const VOID_GROUP: u32 = u32::MAX;

/// Exclusive groupings of a scene: every point carries exactly one group
/// index, and every group has a semantic class.
///
/// Point groups are stored as a per-point index, which makes the masks
/// mutually exclusive by construction. Void points (only produced when
/// decoding real label files) carry [`VOID_GROUP`].
#[derive(Clone, Debug)]
pub struct GroundTruth {
    group_of_point: Vec<u32>,
    classes: Vec<ClassId>,
}

impl GroundTruth {
    pub fn new(group_of_point: Vec<u32>, classes: Vec<ClassId>, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let gt = Self {
            group_of_point,
            classes,
        };
        gt.validate(taxonomy)?;
        Ok(gt)
    }

    pub(crate) fn from_parts(group_of_point: Vec<u32>, classes: Vec<ClassId>) -> Self {
        Self {
            group_of_point,
            classes,
        }
    }

    /// Checks class validity, nonempty groups, stuff uniqueness.
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let sizes = self.group_sizes();
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Contract(format!("group {j} has no points")));
        }
        if self
            .group_of_point
            .iter()
            .any(|&g| g != VOID_GROUP && g as usize >= self.classes.len())
        {
            return Err(Error::Contract("point refers to a missing group".into()));
        }
        let mut seen_stuff = std::collections::HashSet::new();
        for &c in &self.classes {
            if !taxonomy.contains(c) {
                return Err(Error::UnknownClass(c));
            }
            if taxonomy.is_stuff(c) && !seen_stuff.insert(c) {
                return Err(Error::Contract(format!("stuff class {c} appears in two groups")));
            }
        }
        Ok(())
    }

    /// `K`
    pub fn num_points(&self) -> usize {
        self.group_of_point.len()
    }

    /// `M`
    pub fn num_groups(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn group_of_point(&self) -> &[u32] {
        &self.group_of_point
    }

    pub fn group(&self, point: usize) -> Option<usize> {
        match self.group_of_point[point] {
            VOID_GROUP => None,
            g => Some(g as usize),
        }
    }

    pub fn class_of_point(&self, point: usize) -> ClassId {
        self.group(point).map_or(VOID_CLASS, |g| self.classes[g])
    }

    pub fn void_count(&self) -> usize {
        self.group_of_point.iter().filter(|&&g| g == VOID_GROUP).count()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes.len()];
        for &g in &self.group_of_point {
            if let Some(s) = sizes.get_mut(g as usize) {
                *s += 1;
            }
        }
        sizes
    }

    /// Binary mask `g_j` as `0.0`/`1.0` values.
    pub fn mask(&self, group: usize) -> Vec<f64> {
        self.group_of_point
            .iter()
            .map(|&g| if g as usize == group { 1.0 } else { 0.0 })
            .collect()
    }

    /// Point indices of a group.
    pub fn members(&self, group: usize) -> Vec<usize> {
        self.group_of_point
            .iter()
            .enumerate()
            .filter(|(_, &g)| g as usize == group)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn thing_groups<'a>(&'a self, taxonomy: &'a ClassTaxonomy) -> impl Iterator<Item = usize> + 'a {
        (0..self.classes.len()).filter(move |&j| taxonomy.is_thing(self.classes[j]))
    }

    pub fn stuff_groups<'a>(&'a self, taxonomy: &'a ClassTaxonomy) -> impl Iterator<Item = usize> + 'a {
        (0..self.classes.len()).filter(move |&j| taxonomy.is_stuff(self.classes[j]))
    }

    /// Same grouping with groups renumbered in order of first appearance.
    pub fn canonical(&self) -> Self {
        let mut remap = vec![u32::MAX; self.classes.len()];
        let mut classes = Vec::with_capacity(self.classes.len());
        let group_of_point = self
            .group_of_point
            .iter()
            .map(|&g| {
                if g == VOID_GROUP {
                    return VOID_GROUP;
                }
                let slot = &mut remap[g as usize];
                if *slot == u32::MAX {
                    *slot = classes.len() as u32;
                    classes.push(self.classes[g as usize]);
                }
                *slot
            })
            .collect();
        Self {
            group_of_point,
            classes,
        }
    }

    /// Keeps only the listed points (in the given order) and drops groups that become empty.
    pub fn select_points(&self, keep: &[usize]) -> Self {
        let gop = keep.iter().map(|&k| self.group_of_point[k]).collect();
        Self::from_parts(gop, self.classes.clone()).drop_empty_groups()
    }

    pub(crate) fn drop_empty_groups(self) -> Self {
        let sizes = self.group_sizes();
        if sizes.iter().all(|&s| s > 0) {
            return self;
        }
        let mut remap = vec![VOID_GROUP; sizes.len()];
        let mut classes = Vec::new();
        for (j, &s) in sizes.iter().enumerate() {
            if s > 0 {
                remap[j] = classes.len() as u32;
                classes.push(self.classes[j]);
            }
        }
        let gop = self
            .group_of_point
            .iter()
            .map(|&g| if g == VOID_GROUP { g } else { remap[g as usize] })
            .collect();
        Self::from_parts(gop, classes)
    }

    /// Appends a group covering the given new points (their indices must
    /// already be counted by `num_points` after the caller extends it).
    pub(crate) fn push_points(&mut self, group: u32, count: usize) {
        self.group_of_point.extend(std::iter::repeat_n(group, count));
    }

    pub(crate) fn push_group(&mut self, class: ClassId) -> u32 {
        self.classes.push(class);
        (self.classes.len() - 1) as u32
    }
}

/// Two groundings are equal when they describe the same partition with the
/// same classes, regardless of group numbering.
impl PartialEq for GroundTruth {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (self.canonical(), other.canonical());
        a.group_of_point == b.group_of_point && a.classes == b.classes
    }
}

/// A point cloud with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt: GroundTruth,
}

impl Scene {
    pub fn new(cloud: PointCloud, gt: GroundTruth) -> Result<Self> {
        if cloud.len() != gt.num_points() {
            return Err(Error::Contract(format!(
                "cloud has {} points but ground truth has {}",
                cloud.len(),
                gt.num_points()
            )));
        }
        Ok(Self { cloud, gt })
    }
}
