//! SemanticKITTI `.bin` point files and `.label` files.
//!
//! A label is a little-endian `u32` per point: the lower 16 bits hold the
//! semantic label, the upper 16 bits the instance id. Stuff points carry
//! instance id 0.

use std::collections::HashMap;
use std::path::Path;

use super::{ClassTaxonomy, GroundTruth, Point, PointCloud, SemanticMap, VOID_CLASS, VOID_GROUP};
use crate::error::{Error, Result};

pub fn pack(semantic: u16, instance: u16) -> u32 {
    (instance as u32) << 16 | semantic as u32
}

pub fn unpack(label: u32) -> (u16, u16) {
    ((label & 0xFFFF) as u16, (label >> 16) as u16)
}

/// Encodes groupings as one packed label per point. Thing groups receive
/// instance ids `1, 2, …` in group order.
pub fn encode_labels(gt: &GroundTruth, map: &SemanticMap, taxonomy: &ClassTaxonomy) -> Result<Vec<u8>> {
    let mut instance_of_group = vec![0u16; gt.num_groups()];
    let mut next: u32 = 1;
    for (j, &c) in gt.classes().iter().enumerate() {
        if taxonomy.is_thing(c) {
            instance_of_group[j] = u16::try_from(next).map_err(|_| {
                Error::Encoding(format!("instance id {next} does not fit in 16 bits"))
            })?;
            next += 1;
        }
    }
    let labels: Vec<u16> = gt
        .classes()
        .iter()
        .map(|&c| {
            map.label(c)
                .ok_or_else(|| Error::Encoding(format!("class {c} has no semantic label")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(gt.num_points() * 4);
    for &g in gt.group_of_point() {
        let word = if g == VOID_GROUP {
            0
        } else {
            pack(labels[g as usize], instance_of_group[g as usize])
        };
        out.extend_from_slice(&word.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_labels`]. Groups are keyed by (class, instance);
/// stuff classes ignore the instance field. Labels without a class in
/// `map` (including 0) become void points.
pub fn decode_labels(bytes: &[u8], num_points: usize, map: &SemanticMap, taxonomy: &ClassTaxonomy) -> Result<GroundTruth> {
    if bytes.len() != 4 * num_points {
        return Err(Error::Format(format!(
            "label data has {} bytes, expected {} for {num_points} points",
            bytes.len(),
            4 * num_points
        )));
    }
    let mut key_to_group: HashMap<(u16, u16), u32> = HashMap::new();
    let mut classes = Vec::new();
    let mut gop = Vec::with_capacity(num_points);
    for chunk in bytes.chunks_exact(4) {
        let (sem, inst) = unpack(u32::from_le_bytes(chunk.try_into().unwrap()));
        let class = map.class(sem);
        if class == VOID_CLASS || !taxonomy.contains(class) {
            gop.push(VOID_GROUP);
            continue;
        }
        let inst = if taxonomy.is_stuff(class) { 0 } else { inst };
        let g = *key_to_group.entry((class, inst)).or_insert_with(|| {
            classes.push(class);
            (classes.len() - 1) as u32
        });
        gop.push(g);
    }
    let gt = GroundTruth::from_parts(gop, classes);
    gt.validate(taxonomy)?;
    Ok(gt)
}

pub fn write_labels(path: &Path, gt: &GroundTruth, map: &SemanticMap, taxonomy: &ClassTaxonomy) -> Result<()> {
    std::fs::write(path, encode_labels(gt, map, taxonomy)?)?;
    Ok(())
}

/// Reads a `.label` file; the point count is implied by the file length.
pub fn read_labels(path: &Path, map: &SemanticMap, taxonomy: &ClassTaxonomy) -> Result<GroundTruth> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    decode_labels(&bytes, bytes.len() / 4, map, taxonomy)
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "point data has {} bytes, not a multiple of 16",
            bytes.len()
        )));
    }
    let points: Vec<Point> = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2), f(3).clamp(0.0, 1.0)]
        })
        .collect();
    PointCloud::new(points)
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_points(cloud))?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    decode_points(&std::fs::read(path)?)
}
