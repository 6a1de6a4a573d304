//! End-to-end desk-scale run: corpus synthesis, base denoiser, control
//! branch, segmenter and feature network, with an on-disk checkpoint cache
//! keyed by the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{encode_condition, ConditionSpec};
use crate::control::{sample_controlled, train_controlnet, ControlError, ControlNet};
use crate::corpus::Split;
use crate::ddpm::{images_to_tensor, make_schedule, sample, train_base, DenoiserConfig, DiffusionError, Denoiser, ScheduleConfig, TrainConfig, TrainLog, TrainSample};
use crate::features::{train_feature_net, FeatureConfig, FeatureError, FeatureNet, FeatureSample, FeatureTrainConfig};
use crate::nn::{Checkpoint, CheckpointError};
use crate::scene::{synth_corpus, CorpusConfig, CorpusItem, SceneError};
use crate::seg::{evaluate_segmenter, train_segmenter, SegError, SegSample, SegTrainConfig, Segmenter, SegmenterConfig};
use crate::taxonomy::RoadMask;

/// Bumped whenever training code changes in a way that invalidates cached
/// checkpoints.
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cache io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cache metadata: {0}")]
    Meta(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub base_train: TrainConfig,
    pub control_train: TrainConfig,
    pub segmenter: SegmenterConfig,
    pub seg_train: SegTrainConfig,
    pub features: FeatureConfig,
    pub feature_train: FeatureTrainConfig,
}

impl PipelineConfig {
    /// The shipped desk preset: 2,000 scenes at 64×64, 30 base epochs and
    /// 20 control epochs.
    pub fn desk(seed: u64) -> Self {
        let res = 64;
        Self {
            corpus: CorpusConfig { n: 2000, seed, resolution: res, ..CorpusConfig::default() },
            denoiser: DenoiserConfig { resolution: res, widths: [16, 32, 64], ..DenoiserConfig::default() },
            schedule: ScheduleConfig::default(),
            base_train: TrainConfig { epochs: 30, lr: 1e-3, seed, ..TrainConfig::default() },
            control_train: TrainConfig { epochs: 20, lr: 1e-3, seed: seed ^ 0xc0, ..TrainConfig::default() },
            segmenter: SegmenterConfig::default(),
            seg_train: SegTrainConfig { epochs: 8, seed: seed ^ 0x5e, ..SegTrainConfig::default() },
            features: FeatureConfig::default(),
            feature_train: FeatureTrainConfig { seed: seed ^ 0xfe, ..FeatureTrainConfig::default() },
        }
    }

    /// Same wiring at a size that trains in seconds; for tests.
    pub fn tiny(seed: u64) -> Self {
        let res = 32;
        Self {
            corpus: CorpusConfig { n: 24, seed, resolution: res, test_fraction: 0.25, ..CorpusConfig::default() },
            denoiser: DenoiserConfig { resolution: res, widths: [4, 8, 8], time_dim: 8, emb_dim: 16, ..DenoiserConfig::default() },
            schedule: ScheduleConfig { steps: 10, beta_start: 1e-3, beta_end: 0.2, ..ScheduleConfig::default() },
            base_train: TrainConfig { epochs: 2, lr: 1e-3, seed, ..TrainConfig::default() },
            control_train: TrainConfig { epochs: 2, lr: 1e-3, seed, ..TrainConfig::default() },
            segmenter: SegmenterConfig { widths: [4, 8, 8], patch: 2 },
            seg_train: SegTrainConfig { epochs: 1, seed, ..SegTrainConfig::default() },
            features: FeatureConfig { widths: [4, 8, 8, 8] },
            feature_train: FeatureTrainConfig { epochs: 1, seed, ..FeatureTrainConfig::default() },
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(CACHE_VERSION.to_le_bytes());
        h.update(serde_json::to_vec(self).expect("config serialises"));
        hex::encode(&h.finalize()[..8])
    }
}

/// All trained networks. Parameters are immutable after construction.
#[derive(Clone, Debug)]
pub struct Models {
    pub control: ControlNet,
    pub segmenter: Segmenter,
    pub features: FeatureNet,
}

/// One generation request; the mask selects the controlled model.
#[derive(Clone, Debug)]
pub struct GenRequest {
    pub spec: ConditionSpec,
    pub mask: Option<RoadMask>,
    pub seed: u64,
}

impl Models {
    pub fn base(&self) -> &Denoiser {
        self.control.base.get()
    }

    pub fn resolution(&self) -> usize {
        self.base().cfg.resolution
    }

    pub fn hashes(&self) -> std::collections::BTreeMap<String, String> {
        [
            ("base", self.base().weights_hash()),
            ("control", self.control.params.weights_hash()),
            ("segmenter", self.segmenter.params.weights_hash()),
            ("features", self.features.params.weights_hash()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Generates one image per request, in request order. Requests with and
    /// without masks are batched separately; the result for a request
    /// depends only on its own spec, mask and seed.
    pub fn generate(&self, reqs: &[GenRequest], batch: usize) -> Result<Vec<RgbImage>, PipelineError> {
        let sched = make_schedule(&self.base().schedule)?;
        let mut out: Vec<Option<RgbImage>> = vec![None; reqs.len()];
        let (masked, plain): (Vec<usize>, Vec<usize>) = (0..reqs.len()).partition(|&i| reqs[i].mask.is_some());
        if !plain.is_empty() {
            let conds: Vec<_> = plain.iter().map(|&i| encode_condition(&reqs[i].spec)).collect();
            let seeds: Vec<u64> = plain.iter().map(|&i| reqs[i].seed).collect();
            for (i, img) in plain.iter().zip(sample(self.base(), &conds, &seeds, &sched, batch)?) {
                out[*i] = Some(img);
            }
        }
        if !masked.is_empty() {
            let conds: Vec<_> = masked.iter().map(|&i| encode_condition(&reqs[i].spec)).collect();
            let seeds: Vec<u64> = masked.iter().map(|&i| reqs[i].seed).collect();
            let masks: Vec<&RoadMask> = masked.iter().map(|&i| reqs[i].mask.as_ref().expect("partitioned")).collect();
            for (i, img) in masked.iter().zip(sample_controlled(&self.control, &conds, &masks, &seeds, &sched, batch)?) {
                out[*i] = Some(img);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every request generated")).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
        self.base().to_checkpoint().save(&dir.join("base.ckpt"))?;
        self.control.to_checkpoint().save(&dir.join("control.ckpt"))?;
        self.segmenter.to_checkpoint().save(&dir.join("segmenter.ckpt"))?;
        self.features.to_checkpoint().save(&dir.join("features.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let base = Denoiser::from_checkpoint(Checkpoint::load(&dir.join("base.ckpt"))?)?;
        let control = ControlNet::from_checkpoint(base, Checkpoint::load(&dir.join("control.ckpt"))?)?;
        let segmenter = Segmenter::from_checkpoint(Checkpoint::load(&dir.join("segmenter.ckpt"))?)?;
        let features = FeatureNet::from_checkpoint(Checkpoint::load(&dir.join("features.ckpt"))?)?;
        Ok(Self { control, segmenter, features })
    }
}

pub fn train_sample(item: &CorpusItem, with_mask: bool) -> TrainSample {
    let t = images_to_tensor(&[&item.record.image]);
    TrainSample {
        id: item.id.clone(),
        image: t.data,
        cond: encode_condition(&item.record.condition()),
        mask: with_mask.then(|| item.record.road_mask.bits.iter().map(|&b| f32::from(b != 0)).collect()),
    }
}

pub fn seg_sample(item: &CorpusItem) -> SegSample {
    SegSample { id: item.id.clone(), image: item.record.image.clone(), labels: item.record.seg_map.clone() }
}

pub fn feature_sample(item: &CorpusItem) -> FeatureSample {
    FeatureSample::new(&item.id, item.record.image.clone(), item.record.style, &item.record.seg_map)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLogs {
    pub base: TrainLog,
    pub control: TrainLog,
    pub segmenter: TrainLog,
    pub features: TrainLog,
    pub segmenter_heldout_miou: f64,
    pub base_hash_before_control: String,
    pub base_hash_after_control: String,
    /// Wall-clock seconds for all training stages.
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheMeta {
    config: PipelineConfig,
    logs: RunLogs,
}

pub struct PipelineRun {
    pub config: PipelineConfig,
    pub corpus: Vec<CorpusItem>,
    pub models: Models,
    pub logs: RunLogs,
    pub from_cache: bool,
}

impl PipelineRun {
    pub fn split(&self, split: Split) -> Vec<&CorpusItem> {
        self.corpus.iter().filter(|c| c.split == split).collect()
    }
}

/// Trains every stage from scratch.
pub fn train_all(cfg: &PipelineConfig, corpus: &[CorpusItem]) -> Result<(Models, RunLogs), PipelineError> {
    let start = Instant::now();
    let train: Vec<&CorpusItem> = corpus.iter().filter(|c| c.split == Split::Train).collect();
    let test: Vec<&CorpusItem> = corpus.iter().filter(|c| c.split == Split::Test).collect();
    let mut logs = RunLogs::default();

    log::info!("training base denoiser on {} scenes", train.len());
    let samples: Vec<TrainSample> = train.iter().map(|c| train_sample(c, false)).collect();
    let mut base = Denoiser::init(cfg.denoiser.clone(), cfg.schedule.clone(), cfg.base_train.seed);
    logs.base = train_base(&mut base, &samples, &cfg.base_train, |_, _, _| Ok(()))?;

    log::info!("training control branch");
    let samples: Vec<TrainSample> = train.iter().map(|c| train_sample(c, true)).collect();
    let mut control = ControlNet::init(base);
    logs.base_hash_before_control = control.base_hash();
    logs.control = train_controlnet(&mut control, &samples, &cfg.control_train, |_, _, _| Ok(()))?;
    logs.base_hash_after_control = control.base_hash();

    log::info!("training segmenter");
    let seg_train: Vec<SegSample> = train.iter().map(|c| seg_sample(c)).collect();
    let seg_test: Vec<SegSample> = test.iter().map(|c| seg_sample(c)).collect();
    let mut segmenter = Segmenter::init(cfg.segmenter.clone(), cfg.seg_train.seed);
    logs.segmenter = train_segmenter(&mut segmenter, &seg_train, &cfg.seg_train, |_, _, _| {})?;
    logs.segmenter_heldout_miou = evaluate_segmenter(&segmenter, &seg_test, 16)?.miou();
    log::info!("segmenter held-out mIoU {:.3}", logs.segmenter_heldout_miou);

    log::info!("training feature network");
    let feat: Vec<FeatureSample> = train.iter().map(|c| feature_sample(c)).collect();
    let mut features = FeatureNet::init(cfg.features.clone(), cfg.feature_train.seed);
    logs.features = train_feature_net(&mut features, &feat, &cfg.feature_train)?;

    logs.train_seconds = start.elapsed().as_secs_f64();
    Ok((Models { control, segmenter, features }, logs))
}

/// Synthesises the corpus and loads models from `cache_root/<hash>` when a
/// complete entry exists; otherwise trains and fills the cache.
pub fn run_pipeline(cfg: &PipelineConfig, cache_root: Option<&Path>) -> Result<PipelineRun, PipelineError> {
    let corpus = synth_corpus(&cfg.corpus)?;
    let dir = cache_root.map(|r| r.join(cfg.hash()));
    if let Some(dir) = &dir {
        let meta_path = dir.join("meta.json");
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|source| PipelineError::Io { path: meta_path.clone(), source })?;
            let meta: CacheMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Meta(e.to_string()))?;
            if meta.config == *cfg {
                let models = Models::load(dir)?;
                log::info!("loaded cached models from {}", dir.display());
                return Ok(PipelineRun { config: cfg.clone(), corpus, models, logs: meta.logs, from_cache: true });
            }
        }
    }
    let (models, logs) = train_all(cfg, &corpus)?;
    if let Some(dir) = &dir {
        models.save(dir)?;
        let meta = CacheMeta { config: cfg.clone(), logs: logs.clone() };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serialises"))
            .map_err(|source| PipelineError::Io { path, source })?;
    }
    Ok(PipelineRun { config: cfg.clone(), corpus, models, logs, from_cache: false })
}
