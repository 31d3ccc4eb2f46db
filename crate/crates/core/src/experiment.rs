//! End-to-end runs driven by a TOML experiment file: contrastive
//! pretraining, the modality grid, linear probes and the statistics.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! checkpoints/<stem>.{safetensors,json}
//! logs/<stem>.jsonl
//! reports/<config>.json       metrics per grid configuration
//! table1.csv  table2.csv  stats.txt  stats.json  roc/
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelSpace, ModalityConfig, Resolution, Sample};
use crate::error::{Error, Result};
use crate::evalx::export::{write_roc_csvs, write_table1, write_table2};
use crate::evalx::infer::{evaluate, run_detector, BoxProvider, BoxSource, DetectionFile, DEFAULT_DETECTION_THRESHOLD};
use crate::evalx::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::evalx::probe::{
    linear_probe, AutoencoderLatent, ClipImageEncoder, ClipTextEncoder, FrozenEncoder, NoiseFeatures, ResNetFeatures,
};
use crate::heatmap::DEFAULT_SIGMA_SCALE;
use crate::ingest::{load_dataset, DatasetManifest, Split};
use crate::model::checkpoint::{
    self, config_hash, load_autoencoder, load_clip, load_fusion, read_meta, AUTOENCODER_KIND, CLIP_KIND, FUSION_KIND,
};
use crate::model::resnet::load_pretrained_file;
use crate::model::{
    Autoencoder, AutoencoderConfig, ClipConfig, ClipPair, DistilBertBackbone, FusionClassifier, FusionConfig,
    HashedTokenBackbone, TextBackbone,
};
use crate::stats::{analyze, render_significance, AurocTable, ComparisonResult, Sidedness};
use crate::train::{
    report_embeddings, train_autoencoder, train_clip, train_fusion, ClassWeights, FusionInputs, TrainConfig,
};

pub const CLIP_STEM: &str = "clip";
pub const AUTOENCODER_STEM: &str = "autoencoder";

/// Frozen text backbone used by the report pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextBackboneSpec {
    /// Hashed word and bigram embeddings; needs no downloaded weights.
    Hashed { buckets: usize, dim: usize },
    /// A DistilBERT directory with config.json, model.safetensors and
    /// tokenizer.json.
    Distilbert { path: PathBuf },
}

impl Default for TextBackboneSpec {
    fn default() -> Self {
        Self::Hashed {
            buckets: 4096,
            dim: 256,
        }
    }
}

impl TextBackboneSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn TextBackbone>> {
        Ok(match self {
            Self::Hashed { buckets, dim } => Box::new(HashedTokenBackbone::new(*buckets, *dim, seed)?),
            Self::Distilbert { path } => Box::new(DistilBertBackbone::load(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Channels of the first ResNet18 stage; 64 is the standard width.
    pub base_width: usize,
    pub text: TextBackboneSpec,
    /// torchvision-named ImageNet weights for the spatial encoder and the
    /// probe baseline; seeded random initialization when absent.
    pub pretrained_resnet: Option<PathBuf>,
    pub autoencoder_width: usize,
    pub autoencoder_latent: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_width: 64,
            text: TextBackboneSpec::default(),
            pretrained_resnet: None,
            autoencoder_width: 32,
            autoencoder_latent: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub box_source: BoxSource,
    /// Cached detections, required for the `cached` source.
    pub detections: Option<PathBuf>,
    /// Shell command for the `detector` source.
    pub detector_command: Option<String>,
    pub detection_threshold: f64,
    /// Decision threshold on the sigmoid outputs.
    pub threshold: f64,
    /// Heatmap spread relative to the box size.
    pub sigma_scale: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            box_source: BoxSource::GroundTruth,
            detections: None,
            detector_command: None,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
            threshold: DEFAULT_THRESHOLD,
            sigma_scale: DEFAULT_SIGMA_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsSection {
    pub alpha: f64,
    pub sidedness: Sidedness,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            sidedness: Sidedness::TwoSided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Overrides the seed of every training section.
    pub seed: u64,
    pub resolution: Resolution,
    pub label_space: LabelSpace,
    /// Train grid configurations concurrently.
    pub parallel: bool,
    pub model: ModelSection,
    pub eval: EvalSection,
    pub stats: StatsSection,
    pub train: TrainConfig,
    pub clip: TrainConfig,
    pub autoencoder: TrainConfig,
    pub probe: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            resolution: Resolution::full(),
            label_space: LabelSpace::grazped_default(),
            parallel: false,
            model: ModelSection::default(),
            eval: EvalSection::default(),
            stats: StatsSection::default(),
            train: TrainConfig::default(),
            clip: TrainConfig::clip_default(),
            autoencoder: TrainConfig {
                augment: false,
                ..TrainConfig::default()
            },
            probe: TrainConfig {
                augment: false,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing {
                what: "experiment config",
                path: path.to_path_buf(),
            });
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for t in [&self.train, &self.clip, &self.autoencoder, &self.probe] {
            t.validate()?;
        }
        if self.model.base_width == 0 {
            return Err(Error::Config("model.base_width must be positive".into()));
        }
        let m = crate::model::ResNet18::SIZE_MULTIPLE;
        if !self.resolution.rows.is_multiple_of(m) || !self.resolution.cols.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of {m} in both axes",
                self.resolution
            )));
        }
        if !(self.eval.sigma_scale > 0.0 && self.eval.sigma_scale.is_finite()) {
            return Err(Error::Config("eval.sigma_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || !(0.0..=1.0).contains(&self.eval.detection_threshold) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        match self.eval.box_source {
            BoxSource::Cached if self.eval.detections.is_none() => {
                Err(Error::Config("box source `cached` needs eval.detections".into()))
            }
            BoxSource::Detector if self.eval.detector_command.is_none() => Err(Error::Config(
                "box source `detector` needs eval.detector_command".into(),
            )),
            _ => Ok(()),
        }
    }

    fn seeded(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..t.clone()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.output_dir.join("logs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn fusion_config(&self, modalities: ModalityConfig) -> FusionConfig {
        FusionConfig {
            modalities,
            base_width: self.model.base_width,
            text_dim: 8 * self.model.base_width,
            num_classes: self.label_space.len(),
            dropout: self.train.dropout,
        }
    }
}

/// Everything that determines a trained fusion checkpoint.
#[derive(Serialize)]
struct FusionRunKey<'a> {
    dataset_root: &'a Path,
    resolution: Resolution,
    label_space: &'a LabelSpace,
    sigma_scale: f64,
    model: &'a FusionConfig,
    train: &'a TrainConfig,
    clip: Option<&'a str>,
    pretrained: Option<&'a Path>,
}

#[derive(Serialize)]
struct ClipRunKey<'a> {
    dataset_root: &'a Path,
    resolution: Resolution,
    model: &'a ClipConfig,
    text: &'a TextBackboneSpec,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct AutoencoderRunKey<'a> {
    dataset_root: &'a Path,
    model: &'a AutoencoderConfig,
    train: &'a TrainConfig,
}

/// Report embeddings for both splits and the hash of the CLIP run that
/// produced them.
pub struct TextEmbeddings {
    pub train: Tensor,
    pub test: Tensor,
    pub clip_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub modalities: ModalityConfig,
    pub report: MetricsReport,
    /// Set when a matching checkpoint was reused instead of retrained.
    pub reused: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Configuration name and error for every configuration that failed.
    pub failures: Vec<(String, String)>,
    pub comparisons: Option<Vec<ComparisonResult>>,
    /// Classes left out of the paired tests because some configuration has
    /// an undefined AUROC for them.
    pub stats_excluded: Vec<String>,
}

/// A loaded dataset together with its experiment configuration.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Experiment {
    /// Loads both splits. Samples without a segmentation are dropped so every
    /// configuration sees the same train and test sets.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = load_dataset(&cfg.dataset_root, &cfg.label_space, cfg.resolution)?;
        let missing = &manifest.missing_segmentation;
        if !missing.is_empty() {
            log::warn!("dropping {} samples without a segmentation", missing.len());
        }
        let keep = |s: &Sample| s.segmentation.is_some();
        let train: Vec<Sample> = manifest.load_split(Split::Train)?.into_iter().filter(keep).collect();
        let test: Vec<Sample> = manifest.load_split(Split::Test)?.into_iter().filter(keep).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Dataset(format!(
                "need non-empty train and test splits, found {} and {}",
                train.len(),
                test.len()
            )));
        }
        log::info!("{}: {} train, {} test samples", cfg.name, train.len(), test.len());
        Ok(Self {
            cfg,
            manifest,
            train,
            test,
        })
    }

    pub fn class_weights(&self) -> Result<ClassWeights> {
        ClassWeights::from_labels(self.train.iter().map(|s| &s.labels), &self.cfg.label_space)
    }

    fn clip_config(&self, backbone: &dyn TextBackbone) -> ClipConfig {
        let id = match &self.cfg.model.text {
            TextBackboneSpec::Hashed { buckets, dim } => format!("hashed-{buckets}-{dim}-{}", self.cfg.seed),
            TextBackboneSpec::Distilbert { .. } => backbone.name().to_string(),
        };
        ClipConfig::new(self.cfg.model.base_width, backbone.hidden_dim(), id)
    }

    fn clip_hash(&self, model: &ClipConfig) -> Result<String> {
        let train = self.cfg.seeded(&self.cfg.clip);
        config_hash(&ClipRunKey {
            dataset_root: &self.cfg.dataset_root,
            resolution: self.cfg.resolution,
            model,
            text: &self.cfg.model.text,
            train: &train,
        })
    }

    /// Loads the contrastive checkpoint when its run key matches, otherwise
    /// trains it on the training split and saves it.
    pub fn clip_pretrain(&self, backbone: &dyn TextBackbone) -> Result<(ClipPair, String)> {
        let model_cfg = self.clip_config(backbone);
        let hash = self.clip_hash(&model_cfg)?;
        let dir = self.cfg.checkpoint_dir();
        if let Some(meta) = read_meta(&dir, CLIP_STEM)? {
            if meta.config_hash == hash {
                log::info!("clip: reusing checkpoint {}", dir.display());
                return Ok((load_clip(&dir, CLIP_STEM)?.0, hash));
            }
        }
        let train = self.cfg.seeded(&self.cfg.clip);
        let (cp, log) = train_clip(
            ClipPair::new(model_cfg.clone(), self.cfg.seed)?,
            &self.train,
            backbone,
            &train,
        )?;
        let key = ClipRunKey {
            dataset_root: &self.cfg.dataset_root,
            resolution: self.cfg.resolution,
            model: &model_cfg,
            text: &self.cfg.model.text,
            train: &train,
        };
        checkpoint::save(cp.var_map(), &dir, CLIP_STEM, CLIP_KIND, &model_cfg, &key, None)?;
        std::fs::create_dir_all(self.cfg.log_dir())?;
        log.write_jsonl(&self.cfg.log_dir().join(format!("{CLIP_STEM}.jsonl")))?;
        Ok((cp, hash))
    }

    /// Report embeddings from the frozen text pathway of the contrastive
    /// model, pretraining it first when needed.
    pub fn text_embeddings(&self) -> Result<TextEmbeddings> {
        let backbone = self.cfg.model.text.build(self.cfg.seed)?;
        let (cp, clip_hash) = self.clip_pretrain(backbone.as_ref())?;
        Ok(TextEmbeddings {
            train: report_embeddings(&cp, backbone.as_ref(), &self.train)?,
            test: report_embeddings(&cp, backbone.as_ref(), &self.test)?,
            clip_hash,
        })
    }

    /// Source of test-time boxes as configured.
    pub fn box_provider(&self) -> Result<BoxProvider> {
        let e = &self.cfg.eval;
        let file = match e.box_source {
            BoxSource::GroundTruth => return Ok(BoxProvider::GroundTruth),
            BoxSource::Cached => DetectionFile::read(e.detections.as_deref().unwrap_or(Path::new("")))?,
            BoxSource::Detector => {
                let ids: Vec<String> = self.test.iter().map(|s| s.id.clone()).collect();
                run_detector(
                    e.detector_command.as_deref().unwrap_or(""),
                    &self.cfg.dataset_root,
                    &ids,
                )?
            }
        };
        Ok(BoxProvider::Detections {
            by_id: file.at_resolution(self.cfg.resolution)?,
            threshold: e.detection_threshold,
        })
    }

    /// Trains (or reloads) one configuration and evaluates it on the test
    /// split. Writes the checkpoint, training log and metrics report.
    pub fn run_config(
        &self,
        modalities: ModalityConfig,
        weights: &ClassWeights,
        text: Option<&TextEmbeddings>,
        boxes: &BoxProvider,
    ) -> Result<GridRow> {
        let name = modalities.name();
        let stem = format!("fusion-{name}");
        let model_cfg = self.cfg.fusion_config(modalities);
        let train_cfg = self.cfg.seeded(&self.cfg.train);
        let text = if modalities.use_report {
            Some(text.ok_or_else(|| Error::Config(format!("{name} needs report embeddings")))?)
        } else {
            None
        };
        let key = FusionRunKey {
            dataset_root: &self.cfg.dataset_root,
            resolution: self.cfg.resolution,
            label_space: &self.cfg.label_space,
            sigma_scale: self.cfg.eval.sigma_scale,
            model: &model_cfg,
            train: &train_cfg,
            clip: text.map(|t| t.clip_hash.as_str()),
            pretrained: self.cfg.model.pretrained_resnet.as_deref(),
        };
        let hash = config_hash(&key)?;
        let dir = self.cfg.checkpoint_dir();

        let reusable = read_meta(&dir, &stem)?.is_some_and(|m| m.config_hash == hash);
        let model = if reusable {
            log::info!("{name}: reusing checkpoint");
            load_fusion(&dir, &stem)?.0
        } else {
            log::info!("{name}: training");
            let inputs = FusionInputs::ground_truth(
                &self.train,
                modalities,
                self.cfg.eval.sigma_scale,
                text.map(|t| t.train.clone()),
            )?;
            let model = FusionClassifier::new(model_cfg.clone(), self.cfg.seed)?;
            if let Some(path) = &self.cfg.model.pretrained_resnet {
                let import = load_pretrained_file(model.var_map(), FusionClassifier::ENCODER_PREFIX, path)?;
                log::info!(
                    "{name}: {} pretrained tensors copied, {} adapted",
                    import.copied.len(),
                    import.adapted.len()
                );
            }
            let (model, log) = train_fusion(model, inputs, weights, &train_cfg)?;
            checkpoint::save(
                model.var_map(),
                &dir,
                &stem,
                FUSION_KIND,
                &model_cfg,
                &key,
                Some(&self.cfg.label_space),
            )?;
            std::fs::create_dir_all(self.cfg.log_dir())?;
            log.write_jsonl(&self.cfg.log_dir().join(format!("{stem}.jsonl")))?;
            model
        };
        let report = evaluate(
            &model,
            &self.test,
            boxes,
            text.map(|t| t.test.clone()),
            &self.cfg.label_space,
            self.cfg.eval.threshold,
            self.cfg.eval.sigma_scale,
        )?;
        std::fs::create_dir_all(self.cfg.report_dir())?;
        let path = self.cfg.report_dir().join(format!("{name}.json"));
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        Ok(GridRow {
            modalities,
            report,
            reused: reusable,
        })
    }

    /// Evaluates an already trained configuration with the configured box
    /// source, without touching the stored report.
    pub fn evaluate_checkpoint(&self, modalities: ModalityConfig) -> Result<MetricsReport> {
        let stem = format!("fusion-{}", modalities.name());
        let (model, _) = load_fusion(&self.cfg.checkpoint_dir(), &stem)?;
        if model.config().modalities != modalities {
            return Err(Error::Config(format!(
                "checkpoint {stem} was trained for {}",
                model.config().modalities
            )));
        }
        let text = if modalities.use_report {
            Some(self.text_embeddings()?.test)
        } else {
            None
        };
        evaluate(
            &model,
            &self.test,
            &self.box_provider()?,
            text,
            &self.cfg.label_space,
            self.cfg.eval.threshold,
            self.cfg.eval.sigma_scale,
        )
    }

    /// Runs every configuration in `configs` with a shared seed. A failing
    /// configuration is recorded and the rest still run. Tables, ROC curves
    /// and statistics are written from whatever succeeded.
    pub fn run_grid(&self, configs: &[ModalityConfig]) -> Result<GridReport> {
        let weights = self.class_weights()?;
        let boxes = self.box_provider()?;
        let text = if configs.iter().any(|c| c.use_report) {
            Some(self.text_embeddings()?)
        } else {
            None
        };
        let run = |c: &ModalityConfig| (c.name(), self.run_config(*c, &weights, text.as_ref(), &boxes));
        let outcomes: Vec<(String, Result<GridRow>)> = if self.cfg.parallel {
            configs.par_iter().map(run).collect()
        } else {
            configs.iter().map(run).collect()
        };

        let mut out = GridReport::default();
        for (name, r) in outcomes {
            match r {
                Ok(row) => out.rows.push(row),
                Err(e) => {
                    log::error!("{name}: {e}");
                    out.failures.push((name, e.to_string()));
                }
            }
        }
        let reports: BTreeMap<ModalityConfig, MetricsReport> =
            out.rows.iter().map(|r| (r.modalities, r.report.clone())).collect();
        write_outputs(&self.cfg.output_dir, &reports)?;
        if reports.len() == ModalityConfig::all().len() {
            let (comparisons, excluded) =
                write_stats(&self.cfg.output_dir, &reports, &self.cfg.label_space, &self.cfg.stats)?;
            out.comparisons = Some(comparisons);
            out.stats_excluded = excluded;
        } else {
            log::warn!(
                "statistics need all {} configurations; skipping",
                ModalityConfig::all().len()
            );
        }
        Ok(out)
    }

    /// Loads or trains the autoencoder baseline on the training split.
    pub fn autoencoder(&self) -> Result<Autoencoder> {
        let model_cfg = AutoencoderConfig {
            resolution: self.cfg.resolution,
            base_width: self.cfg.model.autoencoder_width,
            latent_dim: self.cfg.model.autoencoder_latent,
        };
        let train = TrainConfig {
            augment: false,
            ..self.cfg.seeded(&self.cfg.autoencoder)
        };
        let key = AutoencoderRunKey {
            dataset_root: &self.cfg.dataset_root,
            model: &model_cfg,
            train: &train,
        };
        let hash = config_hash(&key)?;
        let dir = self.cfg.checkpoint_dir();
        if read_meta(&dir, AUTOENCODER_STEM)?.is_some_and(|m| m.config_hash == hash) {
            return Ok(load_autoencoder(&dir, AUTOENCODER_STEM)?.0);
        }
        let (ae, log) = train_autoencoder(Autoencoder::new(model_cfg, self.cfg.seed)?, &self.train, &train)?;
        checkpoint::save(
            ae.var_map(),
            &dir,
            AUTOENCODER_STEM,
            AUTOENCODER_KIND,
            &model_cfg,
            &key,
            None,
        )?;
        std::fs::create_dir_all(self.cfg.log_dir())?;
        log.write_jsonl(&self.cfg.log_dir().join(format!("{AUTOENCODER_STEM}.jsonl")))?;
        Ok(ae)
    }

    /// Linear probes on frozen encoders; writes table2.csv.
    pub fn run_linear_probes(&self) -> Result<Vec<(String, MetricsReport)>> {
        let backbone = self.cfg.model.text.build(self.cfg.seed)?;
        let (cp, _) = self.clip_pretrain(backbone.as_ref())?;
        let ae = self.autoencoder()?;
        let resnet = ResNetFeatures::new(
            self.cfg.model.base_width,
            self.cfg.seed,
            self.cfg.model.pretrained_resnet.as_deref(),
        )?;
        let encoders: Vec<Box<dyn FrozenEncoder + '_>> = vec![
            Box::new(ClipImageEncoder(&cp)),
            Box::new(ClipTextEncoder {
                clip: &cp,
                backbone: backbone.as_ref(),
            }),
            Box::new(resnet),
            Box::new(AutoencoderLatent(&ae)),
            Box::new(NoiseFeatures {
                dim: 8 * self.cfg.model.base_width,
                seed: self.cfg.seed,
            }),
        ];
        let probe = TrainConfig {
            augment: false,
            ..self.cfg.seeded(&self.cfg.probe)
        };
        let mut rows = Vec::with_capacity(encoders.len());
        for enc in &encoders {
            log::info!("probe: {}", enc.name());
            let report = linear_probe(enc.as_ref(), &self.train, &self.test, &self.cfg.label_space, &probe)?;
            rows.push((enc.name().to_string(), report));
        }
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        write_table2(
            &self.cfg.output_dir.join("table2.csv"),
            rows.iter().map(|(n, r)| (n.as_str(), r)),
        )?;
        std::fs::create_dir_all(self.cfg.report_dir())?;
        std::fs::write(
            self.cfg.report_dir().join("probes.json"),
            serde_json::to_string_pretty(&rows)?,
        )?;
        Ok(rows)
    }
}

/// table1.csv and per-class ROC curves, rows in canonical grid order.
pub fn write_outputs(output_dir: &Path, reports: &BTreeMap<ModalityConfig, MetricsReport>) -> Result<()> {
    std::fs::create_dir_all(output_dir)?;
    let ordered: Vec<(&ModalityConfig, &MetricsReport)> = ModalityConfig::all()
        .iter()
        .filter_map(|c| reports.get_key_value(c))
        .collect();
    write_table1(&output_dir.join("table1.csv"), ordered.iter().copied())?;
    write_roc_csvs(&output_dir.join("roc"), ordered.iter().copied())
}

/// Per-class AUROC vectors for the paired tests. A class is dropped from
/// every vector when any configuration has an undefined AUROC for it;
/// returns the dropped class codes.
pub fn auroc_table(
    reports: &BTreeMap<ModalityConfig, MetricsReport>,
    ls: &LabelSpace,
) -> Result<(AurocTable, Vec<String>)> {
    let per: BTreeMap<ModalityConfig, Vec<Option<f64>>> = reports.iter().map(|(c, r)| (*c, r.class_aurocs())).collect();
    let k = ls.len();
    if let Some((c, v)) = per.iter().find(|(_, v)| v.len() != k) {
        return Err(Error::Stats(format!("{c} reports {} classes, expected {k}", v.len())));
    }
    let keep: Vec<usize> = (0..k).filter(|&i| per.values().all(|v| v[i].is_some())).collect();
    let dropped = (0..k)
        .filter(|i| !keep.contains(i))
        .map(|i| ls.code(i).to_string())
        .collect();
    let table = per
        .into_iter()
        .map(|(c, v)| (c, keep.iter().map(|&i| v[i].unwrap_or(f64::NAN)).collect()))
        .collect();
    Ok((table, dropped))
}

/// Runs the paired tests and writes stats.txt and stats.json.
pub fn write_stats(
    output_dir: &Path,
    reports: &BTreeMap<ModalityConfig, MetricsReport>,
    ls: &LabelSpace,
    stats: &StatsSection,
) -> Result<(Vec<ComparisonResult>, Vec<String>)> {
    let (table, excluded) = auroc_table(reports, ls)?;
    let results = analyze(&table, stats.alpha, stats.sidedness)?;
    let mut text = String::new();
    if !excluded.is_empty() {
        text.push_str(&format!(
            "classes without a defined AUROC in every configuration: {}\n\n",
            excluded.join(", ")
        ));
    }
    text.push_str(&render_significance(&results));
    std::fs::create_dir_all(output_dir)?;
    std::fs::write(output_dir.join("stats.txt"), text)?;
    let json = serde_json::json!({ "excluded_classes": excluded, "comparisons": results });
    std::fs::write(output_dir.join("stats.json"), serde_json::to_string_pretty(&json)?)?;
    Ok((results, excluded))
}

/// Reads the per-configuration reports written by a grid run.
pub fn read_grid_reports(output_dir: &Path) -> Result<BTreeMap<ModalityConfig, MetricsReport>> {
    let dir = output_dir.join("reports");
    let mut out = BTreeMap::new();
    for c in ModalityConfig::all() {
        let path = dir.join(format!("{}.json", c.name()));
        if path.is_file() {
            out.insert(c, serde_json::from_str(&std::fs::read_to_string(&path)?)?);
        }
    }
    Ok(out)
}

/// Recomputes the statistics from stored reports without training.
pub fn run_stats(
    output_dir: &Path,
    ls: &LabelSpace,
    stats: &StatsSection,
) -> Result<(Vec<ComparisonResult>, Vec<String>)> {
    let reports = read_grid_reports(output_dir)?;
    let missing: Vec<String> = ModalityConfig::all()
        .iter()
        .filter(|c| !reports.contains_key(c))
        .map(|c| c.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing {
            what: "grid reports",
            path: output_dir
                .join("reports")
                .join(format!("{{{}}}.json", missing.join(","))),
        });
    }
    write_stats(output_dir, &reports, ls, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalx::metrics::metrics_from_probabilities;
    use crate::LabelVector;

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);

        let partial = ExperimentConfig::from_toml(
            r#"
            seed = 7
            resolution = { rows = 64, cols = 32 }
            [model.text]
            kind = "distilbert"
            path = "bert"
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 64);
        assert_eq!(partial.seeded(&partial.train).seed, 7);
        assert_eq!(partial.model.text, TextBackboneSpec::Distilbert { path: "bert".into() });

        assert!(ExperimentConfig::from_toml("resolution = { rows = 60, cols = 32 }").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nbox_source = \"cached\"").is_err());
    }

    #[test]
    fn auroc_table_drops_undefined_classes_everywhere() {
        let ls = LabelSpace::new(["a", "b", "none"], "none").unwrap();
        let labels: Vec<LabelVector> = [[1, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1]]
            .iter()
            .map(|b| LabelVector::from_bits(b.to_vec()).unwrap())
            .collect();
        let probs = vec![vec![0.9, 0.1, 0.2]; 4];
        let r = metrics_from_probabilities(&probs, &labels, &ls, 0.5).unwrap();
        let reports: BTreeMap<_, _> = ModalityConfig::all().into_iter().map(|c| (c, r.clone())).collect();
        let (table, dropped) = auroc_table(&reports, &ls).unwrap();
        assert_eq!(dropped, vec!["b".to_string()]);
        assert!(table.values().all(|v| v.len() == 2));
    }
}
