//! Run configuration and the commands behind the `pups` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cutmix::{build_db, mix, InstanceDb, MixPolicy, MixSummary};
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::model::{ModelConfig, PupsModel};
use crate::panoptic::{evaluate_kitti_files, PqReport};
use crate::scene::transform::GlobalAugment;
use crate::scene::{generate_scene, kitti, ClassTaxonomy, Scene, SceneConfig};
use crate::train::{evaluate, OptimConfig, Trainer};

/// Offset between the seeds of training and validation scenes.
pub const VAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Base seed of scene generation; independent of the run seed so
    /// runs with different seeds see the same scenes.
    pub scene_seed: u64,
    pub augment: GlobalAugment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutMixConfig {
    pub enabled: bool,
    /// Fraction of training scenes that receive pasted instances.
    pub probability: f64,
    pub policy: MixPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Taxonomy TOML; the built-in toy taxonomy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    /// Scene-generator TOML; the built-in toy street when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub cutmix: CutMixConfig,
    /// Evaluate on the validation scenes every this many epochs (and after the last).
    pub eval_every: usize,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            seed: 0,
            taxonomy: None,
            scene: None,
            model: ModelConfig::toy(),
            loss: LossWeights {
                negative_mask_weight: 1.0,
                ..LossWeights::default()
            },
            optim: OptimConfig {
                epochs: 12,
                lr_milestone: 9,
                ..OptimConfig::default()
            },
            data: DataConfig {
                train_scenes: 2000,
                val_scenes: 200,
                scene_seed: 0,
                augment: GlobalAugment::default(),
            },
            cutmix: CutMixConfig {
                enabled: true,
                probability: 0.5,
                policy: MixPolicy {
                    counts: [("bicycle".to_string(), 1), ("person".to_string(), 1)].into(),
                    max_yaw: 0.3,
                    ..MixPolicy::default()
                },
            },
            eval_every: 1,
        }
    }

    pub fn full() -> Self {
        let toy = Self::toy();
        Self {
            profile: Profile::Full,
            model: ModelConfig::full(),
            optim: OptimConfig::default(),
            data: DataConfig {
                train_scenes: 20_000,
                val_scenes: 1000,
                ..toy.data.clone()
            },
            eval_every: 5,
            ..toy
        }
    }

    /// Parses a TOML document over the built-in profile it names
    /// (`profile = "toy"` when absent). Unknown keys are rejected; relative
    /// paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Toy,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
        };
        let mut merged = toml::Table::try_from(Self::profile(profile)).expect("profile serializes");
        merge(&mut merged, user);
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            for p in [&mut cfg.taxonomy, &mut cfg.scene].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        match &self.taxonomy {
            None => Ok(ClassTaxonomy::toy()),
            Some(p) => ClassTaxonomy::from_toml(&fs::read_to_string(p)?),
        }
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        match &self.scene {
            None => Ok(SceneConfig::toy()),
            Some(p) => SceneConfig::from_toml(&fs::read_to_string(p)?),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tax = self.taxonomy()?;
        let scene = self.scene_config()?;
        scene.validate(&tax)?;
        self.model.validate(&tax)?;
        let pasted = if self.cutmix.enabled { self.cutmix.policy.requested() } else { 0 };
        let slots = self.model.classifiers - tax.stuff_classes().len();
        if scene.instances[1] + pasted > slots {
            return Err(Error::Capacity {
                things: scene.instances[1] + pasted,
                slots,
            });
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.cutmix.policy.validate(&tax)?;
        if !(0.0..=1.0).contains(&self.cutmix.probability) {
            return Err(Error::Config("cutmix probability must lie in [0, 1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Training and validation scenes of a run.
pub struct Dataset {
    pub taxonomy: ClassTaxonomy,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let taxonomy = cfg.taxonomy()?;
        let scene_cfg = cfg.scene_config()?;
        let make = |offset: u64, n: usize| -> Result<Vec<Scene>> {
            (0..n as u64)
                .map(|i| generate_scene(&scene_cfg.with_seed(cfg.data.scene_seed + offset + i), &taxonomy))
                .collect()
        };
        Ok(Self {
            train: make(0, cfg.data.train_scenes)?,
            val: make(VAL_SEED_OFFSET, cfg.data.val_scenes)?,
            taxonomy,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub stage_losses: Vec<f64>,
    pub grad_norm: f64,
    pub mix: MixSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pq_things: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pq_stuff: Option<f64>,
}

pub struct TrainOutcome {
    pub model: PupsModel,
    pub metrics: Vec<EpochMetrics>,
    /// Validation report of the final parameters.
    pub report: PqReport,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains on generated scenes, writing `model.ckpt` after every epoch,
/// `metrics.jsonl`, `config.toml` and the final `val_report.{json,txt}`
/// into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    train_on(cfg, &data, out)
}

/// [`train`] on pre-generated scenes.
pub fn train_on(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let model = PupsModel::new(cfg.model.clone(), data.taxonomy.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.optim.clone(), cfg.loss.clone())?;
    let db = if cfg.cutmix.enabled {
        build_db(&data.train, &data.taxonomy)
    } else {
        InstanceDb::default()
    };
    let mut log = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut metrics = Vec::new();
    trainer.model.save(&out.join(CHECKPOINT_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut mix_total = MixSummary::default();
        let (mut loss, mut grad_norm) = (0.0, 0.0);
        let mut stage_losses = vec![0.0; cfg.model.stages];
        let batches = order.chunks(cfg.optim.batch_size);
        let n_batches = batches.len().max(1) as f64;
        for (b, chunk) in batches.enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let src = &data.train[i];
                let mut scene = if cfg.cutmix.enabled && rand::Rng::gen_bool(&mut rng, cfg.cutmix.probability) {
                    let (s, summary) = mix(src, &db, &cfg.cutmix.policy, &data.taxonomy, &mut rng)?;
                    mix_total.add(&summary);
                    s
                } else {
                    src.clone()
                };
                scene.cloud = cfg.data.augment.apply(&scene.cloud, &mut rng);
                batch.push(scene);
            }
            let stats = match trainer.step(&batch, lr) {
                Ok(s) => s,
                Err(e @ Error::Diverged(_)) => {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "batch": b,
                        "scenes": chunk,
                        "error": e.to_string(),
                    });
                    fs::write(out.join("diverged.json"), serde_json::to_string_pretty(&dump)?)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            loss += stats.loss / n_batches;
            grad_norm += stats.grad_norm / n_batches;
            for (a, l) in stage_losses.iter_mut().zip(&stats.stage_losses) {
                *a += l / n_batches;
            }
        }
        trainer.model.save(&out.join(CHECKPOINT_FILE))?;
        let last = epoch + 1 == cfg.optim.epochs;
        let report = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(&trainer.model, &data.val)?)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            lr,
            loss,
            stage_losses,
            grad_norm,
            mix: mix_total,
            val_pq: report.as_ref().map(|r| r.all.pq),
            val_sq: report.as_ref().map(|r| r.all.sq),
            val_rq: report.as_ref().map(|r| r.all.rq),
            val_pq_things: report.as_ref().map(|r| r.things.pq),
            val_pq_stuff: report.as_ref().map(|r| r.stuff.pq),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}{}",
            m.loss,
            m.val_pq.map(|p| format!(", val PQ {p:.4}")).unwrap_or_default()
        );
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        log.flush()?;
        metrics.push(m);
    }
    let report = evaluate(&trainer.model, &data.val)?;
    write_report(&report, out, "val_report")?;
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        report,
    })
}

/// Writes `{stem}.json` and `{stem}.txt`.
pub fn write_report(report: &PqReport, out: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{stem}.json")), report.to_json())?;
    fs::write(out.join(format!("{stem}.txt")), report.to_table())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Builds the configured model and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<PupsModel> {
    let mut model = PupsModel::new(cfg.model.clone(), cfg.taxonomy()?, cfg.seed)?;
    model.load(checkpoint)?;
    Ok(model)
}

/// Evaluates a checkpoint on generated scenes and writes `report.{json,txt}`.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path, split: Split, out: &Path) -> Result<PqReport> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let mut data_cfg = cfg.clone();
    match split {
        Split::Train => data_cfg.data.val_scenes = 0,
        Split::Val => data_cfg.data.train_scenes = 0,
    }
    let data = Dataset::generate(&data_cfg)?;
    let scenes = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let report = evaluate(&model, scenes)?;
    write_report(&report, out, "report")?;
    Ok(report)
}

/// Scores a prediction label file against a ground-truth label file and
/// writes `report.{json,txt}`.
pub fn eval_labels(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<PqReport> {
    let report = evaluate_kitti_files(pred, gt, &cfg.taxonomy()?)?;
    write_report(&report, out, "report")?;
    Ok(report)
}

/// Mixes `count` validation-seeded scenes with instances cut from the
/// training scenes and writes `scene_NNNN.{bin,label}` plus
/// `mix_summary.txt`.
pub fn augment_preview(cfg: &RunConfig, count: usize, out: &Path) -> Result<MixSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut data_cfg = cfg.clone();
    data_cfg.data.val_scenes = count;
    let data = Dataset::generate(&data_cfg)?;
    let db = build_db(&data.train, &data.taxonomy);
    let map = data.taxonomy.semantic_map();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total = MixSummary::default();
    for (i, scene) in data.val.iter().enumerate() {
        let (mixed, summary) = mix(scene, &db, &cfg.cutmix.policy, &data.taxonomy, &mut rng)?;
        total.add(&summary);
        kitti::write_points(&out.join(format!("scene_{i:04}.bin")), &mixed.cloud)?;
        kitti::write_labels(&out.join(format!("scene_{i:04}.label")), &mixed.gt, &map, &data.taxonomy)?;
    }
    fs::write(out.join("mix_summary.txt"), total.to_text())?;
    Ok(total)
}

/// Centroid of one predicted group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub classifier: usize,
    pub x: f64,
    pub y: f64,
    pub scene: usize,
}

/// Bird's-eye centroids of every predicted group of `class_name` over
/// `count` validation scenes, within a square window of side `window`
/// centered on the origin. Writes `centers_NNN.csv` per classifier.
pub fn export_centers(
    cfg: &RunConfig,
    model: &PupsModel,
    count: usize,
    class_name: &str,
    window: f64,
    out: &Path,
) -> Result<Vec<Center>> {
    let tax = &model.taxonomy;
    let class = tax
        .class_by_name(class_name)
        .ok_or_else(|| Error::Config(format!("class {class_name:?} is not in the taxonomy")))?;
    fs::create_dir_all(out)?;
    let mut data_cfg = cfg.clone();
    data_cfg.data.train_scenes = 0;
    data_cfg.data.val_scenes = count;
    let data = Dataset::generate(&data_cfg)?;
    let mut centers = Vec::new();
    for (s, scene) in data.val.iter().enumerate() {
        let pred = model.predict(&scene.cloud)?;
        let pts = scene.cloud.points();
        for &i in &pred.active_groups {
            if pred.class_of_group[i] != class {
                continue;
            }
            let members: Vec<usize> = (0..pts.len()).filter(|&k| pred.group_of_point[k] == i).collect();
            let n = members.len() as f64;
            let x = members.iter().map(|&k| pts[k][0]).sum::<f64>() / n;
            let y = members.iter().map(|&k| pts[k][1]).sum::<f64>() / n;
            if x.abs() <= window / 2.0 && y.abs() <= window / 2.0 {
                centers.push(Center {
                    classifier: i,
                    x,
                    y,
                    scene: s,
                });
            }
        }
    }
    for i in 0..model.config.classifiers {
        let mut f = BufWriter::new(File::create(out.join(format!("centers_{i:03}.csv")))?);
        writeln!(f, "classifier_id,x,y,scene_id")?;
        for c in centers.iter().filter(|c| c.classifier == i) {
            writeln!(f, "{},{},{},{}", c.classifier, c.x, c.y, c.scene)?;
        }
        f.flush()?;
    }
    Ok(centers)
}

#[cfg(test)]
mod tests;
