//! Encoder and decoder bundled with their parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Bound, Graph, ParamStore};
use crate::decoder::{DecoderConfig, PupsDecoder, StageOutput};
use crate::encoder::{EncodeInfo, EncoderConfig, PointEncoder};
use crate::error::{Error, Result};
use crate::panoptic::{infer, PanopticPrediction};
use crate::scene::{ClassTaxonomy, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `C`
    pub channels: usize,
    /// `N`
    pub classifiers: usize,
    /// `S`
    pub stages: usize,
    /// `H`
    pub heads: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            channels: 32,
            classifiers: 16,
            stages: 3,
            heads: 4,
            encoder: EncoderConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            channels: 128,
            classifiers: 100,
            stages: 3,
            heads: 8,
            encoder: EncoderConfig {
                hidden: vec![64, 128],
                ..EncoderConfig::default()
            },
        }
    }

    pub fn decoder(&self, taxonomy: &ClassTaxonomy) -> DecoderConfig {
        DecoderConfig {
            classifiers: self.classifiers,
            channels: self.channels,
            stages: self.stages,
            heads: self.heads,
            classes: taxonomy.num_classes(),
            stuff_classes: taxonomy.stuff_classes().len(),
        }
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.channels == 0 || self.encoder.neighbors == 0 || self.encoder.hidden.contains(&0) {
            return Err(Error::Config("model widths and neighbor count must be positive".into()));
        }
        self.decoder(taxonomy).validate()
    }
}

#[derive(Clone, Debug)]
pub struct PupsModel {
    pub config: ModelConfig,
    pub taxonomy: ClassTaxonomy,
    pub params: ParamStore,
    pub encoder: PointEncoder,
    pub decoder: PupsDecoder,
}

/// Forward pass result on one graph.
pub struct Forward {
    pub stages: Vec<StageOutput>,
    pub info: EncodeInfo,
}

impl PupsModel {
    /// Parameters are drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, taxonomy: ClassTaxonomy, seed: u64) -> Result<Self> {
        config.validate(&taxonomy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = PointEncoder::new(config.encoder.clone(), config.channels, &mut params, &mut rng);
        let decoder = PupsDecoder::new(config.decoder(&taxonomy), &mut params, &mut rng)?;
        Ok(Self {
            config,
            taxonomy,
            params,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, cloud: &PointCloud) -> Result<Forward> {
        let (features, info) = self.encoder.encode(g, p, cloud)?;
        let stages = self.decoder.decode(g, p, features)?;
        Ok(Forward { stages, info })
    }

    /// Panoptic prediction from the last stage.
    pub fn predict(&self, cloud: &PointCloud) -> Result<PanopticPrediction> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, cloud)?;
        let last = out.stages.last().expect("at least one stage");
        infer(g.value(last.grouping_scores), g.value(last.semantic_scores), &self.taxonomy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Replaces the parameters with those of a checkpoint; names and shapes
    /// must match this model exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        self.params.load_from(&loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 8,
            classifiers: 6,
            stages: 2,
            heads: 2,
            encoder: EncoderConfig {
                hidden: vec![8],
                neighbors: 4,
                fourier_bands: 1,
            },
        }
    }

    #[test]
    fn predicts_an_exclusive_partition() {
        let tax = ClassTaxonomy::toy();
        let model = PupsModel::new(tiny(), tax.clone(), 3).unwrap();
        let scene = generate_scene(&SceneConfig::toy().with_seed(1), &tax).unwrap();
        let pred = model.predict(&scene.cloud).unwrap();
        assert_eq!(pred.group_of_point.len(), 512);
        let seg = pred.segments(&tax).unwrap();
        assert_eq!(seg.void_count(), 0);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        let tax = ClassTaxonomy::toy();
        let model = PupsModel::new(tiny(), tax.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let mut other = PupsModel::new(tiny(), tax.clone(), 99).unwrap();
        assert_ne!(other.params, model.params);
        other.load(&path).unwrap();
        assert_eq!(other.params, model.params);

        let mut wider = tiny();
        wider.channels = 10;
        let mut wrong = PupsModel::new(wider, tax, 0).unwrap();
        assert!(matches!(wrong.load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn profiles_are_valid() {
        let tax = ClassTaxonomy::toy();
        ModelConfig::toy().validate(&tax).unwrap();
        ModelConfig::full().validate(&tax).unwrap();
    }
}
