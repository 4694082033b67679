use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic class identifier. Valid classes are `1..=T`; `0` is reserved
/// for void points.
pub type ClassId = u16;

pub const VOID_CLASS: ClassId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    pub kind: ClassKind,
    /// Raw label written to SemanticKITTI `.label` files.
    pub label: u16,
    /// Stuff classes a thing of this class plausibly stands on, best first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<ClassId>,
}

/// Thing and stuff classes plus the thing→stuff context table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct ClassTaxonomy {
    classes: Vec<ClassInfo>,
    things: Vec<ClassId>,
    stuff: Vec<ClassId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    #[serde(rename = "class")]
    classes: Vec<ClassInfo>,
}

impl TryFrom<TaxonomyFile> for ClassTaxonomy {
    type Error = Error;

    fn try_from(f: TaxonomyFile) -> Result<Self> {
        Self::new(f.classes)
    }
}

impl From<ClassTaxonomy> for TaxonomyFile {
    fn from(t: ClassTaxonomy) -> Self {
        TaxonomyFile { classes: t.classes }
    }
}

impl ClassTaxonomy {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "class ids must be exactly 1..={}, found {}",
                    classes.len(),
                    c.id
                )));
            }
        }
        let kind: HashMap<ClassId, ClassKind> = classes.iter().map(|c| (c.id, c.kind)).collect();
        let mut labels = std::collections::HashSet::new();
        for c in &classes {
            if !labels.insert(c.label) || c.label == 0 {
                return Err(Error::Config(format!(
                    "class {}: label {} is zero or reused",
                    c.name, c.label
                )));
            }
            if c.kind == ClassKind::Stuff && !c.context.is_empty() {
                return Err(Error::Config(format!("stuff class {} has a context list", c.name)));
            }
            if let Some(bad) = c.context.iter().find(|s| kind.get(s) != Some(&ClassKind::Stuff)) {
                return Err(Error::Config(format!(
                    "context of {} names {bad}, which is not a stuff class",
                    c.name
                )));
            }
        }
        let things = classes
            .iter()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| c.id)
            .collect();
        let stuff = classes
            .iter()
            .filter(|c| c.kind == ClassKind::Stuff)
            .map(|c| c.id)
            .collect();
        Ok(Self {
            classes,
            things,
            stuff,
        })
    }

    /// Three things (car, bicycle, person) and two stuff classes (road, sidewalk).
    pub fn toy() -> Self {
        let class = |id, name: &str, kind, label, context: Vec<ClassId>| ClassInfo {
            id,
            name: name.into(),
            kind,
            label,
            context,
        };
        Self::new(vec![
            class(1, "car", ClassKind::Thing, 10, vec![4]),
            class(2, "bicycle", ClassKind::Thing, 11, vec![4]),
            class(3, "person", ClassKind::Thing, 30, vec![5]),
            class(4, "road", ClassKind::Stuff, 40, vec![]),
            class(5, "sidewalk", ClassKind::Stuff, 48, vec![]),
        ])
        .expect("toy taxonomy is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    /// `T`, the total number of classes.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn info(&self, id: ClassId) -> Option<&ClassInfo> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| self.classes.get(i))
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.info(id).is_some()
    }

    pub fn is_thing(&self, id: ClassId) -> bool {
        self.info(id).is_some_and(|c| c.kind == ClassKind::Thing)
    }

    pub fn is_stuff(&self, id: ClassId) -> bool {
        self.info(id).is_some_and(|c| c.kind == ClassKind::Stuff)
    }

    pub fn thing_classes(&self) -> &[ClassId] {
        &self.things
    }

    pub fn stuff_classes(&self) -> &[ClassId] {
        &self.stuff
    }

    /// Position of a stuff class among the stuff classes.
    pub fn stuff_rank(&self, id: ClassId) -> Option<usize> {
        self.stuff.iter().position(|&s| s == id)
    }

    pub fn context(&self, thing: ClassId) -> &[ClassId] {
        self.info(thing).map_or(&[], |c| c.context.as_slice())
    }

    /// Column of `id` in a semantic score row.
    pub fn column(id: ClassId) -> usize {
        id as usize - 1
    }

    pub fn from_column(col: usize) -> ClassId {
        (col + 1) as ClassId
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn semantic_map(&self) -> SemanticMap {
        SemanticMap::new(self.classes.iter().map(|c| (c.id, c.label)))
    }
}

/// Bidirectional class ↔ raw label mapping used by the label codec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    to_label: BTreeMap<ClassId, u16>,
    to_class: HashMap<u16, ClassId>,
}

impl SemanticMap {
    pub fn new(pairs: impl IntoIterator<Item = (ClassId, u16)>) -> Self {
        let to_label: BTreeMap<_, _> = pairs.into_iter().collect();
        let to_class = to_label.iter().map(|(&c, &l)| (l, c)).collect();
        Self { to_label, to_class }
    }

    pub fn identity(num_classes: u16) -> Self {
        Self::new((1..=num_classes).map(|c| (c, c)))
    }

    pub fn label(&self, class: ClassId) -> Option<u16> {
        self.to_label.get(&class).copied()
    }

    /// Unknown labels map to [`VOID_CLASS`].
    pub fn class(&self, label: u16) -> ClassId {
        self.to_class.get(&label).copied().unwrap_or(VOID_CLASS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_taxonomy_shape() {
        let t = ClassTaxonomy::toy();
        assert_eq!(t.num_classes(), 5);
        assert_eq!(t.thing_classes(), &[1, 2, 3]);
        assert_eq!(t.stuff_classes(), &[4, 5]);
        assert_eq!(t.context(1), &[4]);
        assert_eq!(t.stuff_rank(5), Some(1));
    }

    #[test]
    fn toml_round_trip() {
        let t = ClassTaxonomy::toy();
        let back = ClassTaxonomy::from_toml(&t.to_toml()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_gaps_and_bad_context() {
        let mut classes = ClassTaxonomy::toy().classes().to_vec();
        classes[0].context = vec![2];
        assert!(ClassTaxonomy::new(classes).is_err());
        let mut classes = ClassTaxonomy::toy().classes().to_vec();
        classes.pop();
        classes[0].id = 7;
        assert!(ClassTaxonomy::new(classes).is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = ClassTaxonomy::toy().to_toml().replacen("name", "nmae", 1);
        assert!(ClassTaxonomy::from_toml(&text).is_err());
    }
}
