//! Experiment harness: held-out evaluation with and without the road mask,
//! text sweeps, mask variation, text/mask conflict, and report emission.
//!
//! Every experiment pins one seed per sample index, so a step or arm
//! differs from another only in its conditioning.

pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditioning::{perturb_targets, ConditionError, ConditionSpec};
use crate::features::FeatureError;
use crate::metrics::{self, consistency_fit, LinearFit, MetricError, MetricReport};
use crate::pipeline::{GenRequest, Models, PipelineError};
use crate::scene::CorpusItem;
use crate::seeds;
use crate::seg::SegError;
use crate::taxonomy::{base_class, CityStyle, Class, LabelMap, RoadMask};

/// Classes broken out individually in evaluation tables.
pub const SELECTED_CLASSES: [Class; 4] = [Class::Tree, Class::Sky, Class::Building, Class::Road];
/// Minimum generations per sweep step.
pub const MIN_PER_STEP: usize = 8;
/// Headroom kept for the unlisted class when choosing sweep bases.
const OTHER_HEADROOM: f64 = 6.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("no test record fits the plan: {0}")]
    Infeasible(String),
    #[error("record {0} not found")]
    MissingRecord(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plan file: {0}")]
    Plan(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Hashes and seed recorded with every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hashes: BTreeMap<String, String>,
    pub corpus_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(models: &Models, corpus: &[CorpusItem], seed: u64) -> Self {
        Self { model_hashes: models.hashes(), corpus_hash: corpus_hash(corpus), seed }
    }
}

/// Content hash over ids, splits, prompts and rasters.
pub fn corpus_hash(items: &[CorpusItem]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.id.as_bytes());
        h.update([it.split as u8]);
        h.update(it.record.prompt.as_bytes());
        h.update(it.record.image.as_raw());
        h.update(&it.record.seg_map.ids);
    }
    hex::encode(&h.finalize()[..16])
}

/// Per-sample seed shared across arms and steps.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    seeds::derive(master, &[0x5a17, index])
}

/// Segments generated images and returns the maps with their percentages.
pub fn realize(models: &Models, images: &[RgbImage]) -> Result<Vec<(LabelMap, [f64; 7])>, HarnessError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        for map in models.segmenter.segment_batch(&refs)? {
            let p = metrics::class_proportions(&map)?.as_array();
            out.push((map, p));
        }
    }
    Ok(out)
}

/// IoU between the road pixels of a segmentation and a mask.
pub fn mask_iou(seg: &LabelMap, mask: &RoadMask) -> Result<f64, HarnessError> {
    if seg.width != mask.width || seg.height != mask.height {
        return Err(HarnessError::Invalid(format!(
            "mask {}x{} vs map {}x{}",
            mask.width, mask.height, seg.width, seg.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&id, &m) in seg.ids.iter().zip(&mask.bits) {
        let (p, g) = (base_class(id) == Class::Road, m != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Percent change from `from` to `to`.
pub fn percent_change(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        if to == 0.0 { 0.0 } else { f64::INFINITY.copysign(to) }
    } else {
        (to - from) / from.abs() * 100.0
    }
}

/// `+71.43%` style formatting.
pub fn format_change(pct: f64) -> String {
    format!("{pct:+.2}%")
}

// ---------------------------------------------------------------------------
// held-out evaluation

/// Intended and realised percentages for one evaluated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordPoint {
    pub id: String,
    pub intended: [f64; 7],
    pub realized: [f64; 7],
    pub road_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmDetail {
    pub report: MetricReport,
    /// Regression of realised on intended percent per listed class.
    pub consistency: BTreeMap<String, LinearFit>,
    pub points: Vec<RecordPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: String,
    pub provenance: Provenance,
    pub without_mask: ArmDetail,
    pub with_mask: ArmDetail,
    /// Percent change from the unmasked to the masked arm per metric.
    pub deltas: BTreeMap<String, f64>,
}

/// Scores generated images against their source records.
pub fn evaluate_arm(
    arm: &str,
    models: &Models,
    generated: &[RgbImage],
    records: &[&CorpusItem],
) -> Result<ArmDetail, HarnessError> {
    if generated.len() != records.len() || generated.is_empty() {
        return Err(HarnessError::Invalid(format!("{} images for {} records", generated.len(), records.len())));
    }
    let refs: Vec<RgbImage> = records.iter().map(|r| r.record.image.clone()).collect();
    let fid = models.features.fid(generated, &refs)?;
    let perceptual = models.features.mean_perceptual_distance(generated, &refs)?;
    let mut ssim = 0.0;
    for (g, r) in generated.iter().zip(&refs) {
        ssim += metrics::ssim(g, r)?;
    }
    ssim /= generated.len() as f64;

    let realized = realize(models, generated)?;
    let mut miou = 0.0;
    let mut per_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut points = Vec::with_capacity(records.len());
    for ((seg, p), rec) in realized.iter().zip(records) {
        let gt = &rec.record.seg_map;
        miou += metrics::miou(seg, gt, &Class::ALL)?;
        let present = gt.class_counts();
        for c in SELECTED_CLASSES {
            if present[c as usize] > 0 {
                per_class.entry(c.name()).or_default().push(metrics::iou(seg, gt, c)?.expect("present"));
            }
        }
        let road_iou = (present[Class::Road as usize] > 0).then(|| metrics::iou(seg, gt, Class::Road)).transpose()?.flatten();
        points.push(RecordPoint {
            id: rec.id.clone(),
            intended: rec.record.proportions.as_array(),
            realized: *p,
            road_iou,
        });
    }
    miou /= records.len() as f64;
    let classwise_iou = per_class.into_iter().map(|(k, v)| (k.to_string(), metrics::mean(&v))).collect();

    let mut consistency = BTreeMap::new();
    for c in Class::LISTED {
        let x: Vec<f64> = points.iter().map(|p| p.intended[c as usize]).collect();
        let y: Vec<f64> = points.iter().map(|p| p.realized[c as usize]).collect();
        if let Ok(fit) = consistency_fit(&x, &y) {
            consistency.insert(c.name().to_string(), fit);
        }
    }
    Ok(ArmDetail {
        report: MetricReport {
            arm: arm.to_string(),
            n_samples: generated.len(),
            fid,
            perceptual_distance: perceptual,
            ssim,
            miou,
            classwise_iou,
        },
        consistency,
        points,
    })
}

/// Percent changes between two arms for every scalar metric.
pub fn arm_deltas(from: &MetricReport, to: &MetricReport) -> BTreeMap<String, f64> {
    let mut d = BTreeMap::new();
    d.insert("fid".into(), percent_change(from.fid, to.fid));
    d.insert("perceptual_distance".into(), percent_change(from.perceptual_distance, to.perceptual_distance));
    d.insert("ssim".into(), percent_change(from.ssim, to.ssim));
    d.insert("miou".into(), percent_change(from.miou, to.miou));
    for (k, v) in &from.classwise_iou {
        if let Some(w) = to.classwise_iou.get(k) {
            d.insert(format!("iou_{k}"), percent_change(*v, *w));
        }
    }
    d
}

/// Generates every test record from its own prompt, once without and once
/// with its road mask, and scores both arms.
pub fn run_baseline_eval(
    models: &Models,
    corpus: &[CorpusItem],
    test: &[&CorpusItem],
    seed: u64,
    batch: usize,
) -> Result<BaselineReport, HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::Invalid("test split is empty".into()));
    }
    let reqs = |mask: bool| -> Vec<GenRequest> {
        test.iter()
            .map(|r| GenRequest {
                spec: r.record.condition(),
                mask: mask.then(|| r.record.road_mask.clone()),
                seed: seeds::derive(seed, &[seeds::key(&r.id)]),
            })
            .collect()
    };
    log::info!("baseline: generating {} records without mask", test.len());
    let plain = models.generate(&reqs(false), batch)?;
    log::info!("baseline: generating {} records with mask", test.len());
    let masked = models.generate(&reqs(true), batch)?;
    let without_mask = evaluate_arm("w/o mask", models, &plain, test)?;
    let with_mask = evaluate_arm("w/ mask", models, &masked, test)?;
    let deltas = arm_deltas(&without_mask.report, &with_mask.report);
    Ok(BaselineReport {
        name: "baseline".into(),
        provenance: Provenance::new(models, corpus, seed),
        without_mask,
        with_mask,
        deltas,
    })
}

// ---------------------------------------------------------------------------
// text sweeps

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPlan {
    Tree,
    Sky,
    TreeSky,
    TreeBuilding,
    TreeRoad,
}

impl SweepPlan {
    /// Varied classes with the direction of change.
    pub fn moves(self) -> Vec<(Class, f64)> {
        match self {
            SweepPlan::Tree => vec![(Class::Tree, 1.0)],
            SweepPlan::Sky => vec![(Class::Sky, 1.0)],
            SweepPlan::TreeSky => vec![(Class::Tree, 1.0), (Class::Sky, -1.0)],
            SweepPlan::TreeBuilding => vec![(Class::Tree, 1.0), (Class::Building, -1.0)],
            SweepPlan::TreeRoad => vec![(Class::Tree, 1.0), (Class::Road, -1.0)],
        }
    }

    /// Preferred starting percents for each plan.
    fn anchors(self) -> Vec<(Class, f64)> {
        match self {
            SweepPlan::Tree => vec![(Class::Tree, 9.23)],
            SweepPlan::Sky => vec![(Class::Sky, 10.0)],
            SweepPlan::TreeSky => vec![(Class::Tree, 9.32), (Class::Sky, 15.15)],
            SweepPlan::TreeBuilding => vec![(Class::Tree, 9.32), (Class::Building, 25.0)],
            SweepPlan::TreeRoad => vec![(Class::Tree, 9.32), (Class::Road, 25.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub plan: SweepPlan,
    pub steps: usize,
    pub step_pp: f64,
    pub n_per_step: usize,
    pub seed: u64,
    /// Base record id; chosen from the test split when absent.
    #[serde(default)]
    pub record: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub index: usize,
    pub targets: BTreeMap<String, f64>,
    pub realized: BTreeMap<String, Vec<f64>>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub sample_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub plan: SweepPlan,
    pub base_record: String,
    pub elements: Vec<String>,
    pub steps: Vec<SweepStep>,
    /// Rank correlation between step targets and step mean realised percent.
    pub spearman_step_means: BTreeMap<String, Option<f64>>,
    /// Rank correlation over every individual sample.
    pub spearman_samples: BTreeMap<String, Option<f64>>,
    /// Mean realised percent at the last step minus the first, in pp.
    pub shift_pp: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

/// Sum of listed percents plus pixel headroom for objects.
fn listed_sum(spec: &ConditionSpec) -> f64 {
    spec.proportions.sum()
}

/// Checks that every step stays in `[0, 100]` and leaves room for the
/// unlisted class.
fn sweep_feasible(spec: &ConditionSpec, moves: &[(Class, f64)], span: f64) -> bool {
    let mut growth = 0.0;
    for &(c, dir) in moves {
        let end = spec.proportions.get(c) + dir * span;
        if !(0.0..=100.0).contains(&end) {
            return false;
        }
        growth += dir * span;
    }
    listed_sum(spec) + growth.max(0.0) <= 100.0 - OTHER_HEADROOM
}

fn find_record<'a>(test: &[&'a CorpusItem], id: &str) -> Result<&'a CorpusItem, HarnessError> {
    test.iter().copied().find(|r| r.id == id).ok_or_else(|| HarnessError::MissingRecord(id.to_string()))
}

/// Test record closest to the plan's anchor percents among those for
/// which the whole sweep is feasible.
pub fn pick_sweep_base<'a>(test: &[&'a CorpusItem], cfg: &SweepConfig) -> Result<&'a CorpusItem, HarnessError> {
    let span = cfg.step_pp * cfg.steps.saturating_sub(1) as f64;
    let moves = cfg.plan.moves();
    if let Some(id) = &cfg.record {
        let r = find_record(test, id)?;
        if !sweep_feasible(&r.record.condition(), &moves, span) {
            return Err(HarnessError::Infeasible(format!("record {id} cannot span {span} pp")));
        }
        return Ok(r);
    }
    let anchors = cfg.plan.anchors();
    test.iter()
        .copied()
        .filter(|r| sweep_feasible(&r.record.condition(), &moves, span))
        .min_by(|a, b| {
            let d = |r: &CorpusItem| -> f64 {
                let p = r.record.condition().proportions;
                anchors.iter().map(|&(c, v)| (p.get(c) - v).powi(2)).sum()
            };
            d(a).total_cmp(&d(b)).then_with(|| a.id.cmp(&b.id))
        })
        .ok_or_else(|| HarnessError::Infeasible(format!("{:?} sweep spanning {span} pp", cfg.plan)))
}

/// Targets for each step of a sweep starting at `base`.
pub fn sweep_targets(base: &ConditionSpec, cfg: &SweepConfig) -> Result<Vec<ConditionSpec>, HarnessError> {
    let moves = cfg.plan.moves();
    (0..cfg.steps)
        .map(|k| {
            let deltas: Vec<(&str, f64)> = moves.iter().map(|&(c, dir)| (c.name(), dir * cfg.step_pp * k as f64)).collect();
            Ok(perturb_targets(base, deltas)?)
        })
        .collect()
}

pub fn run_text_sweep(
    models: &Models,
    corpus: &[CorpusItem],
    test: &[&CorpusItem],
    cfg: &SweepConfig,
    batch: usize,
) -> Result<SweepReport, HarnessError> {
    if cfg.steps < 1 {
        return Err(HarnessError::Invalid("a sweep needs at least one step".into()));
    }
    if cfg.n_per_step < MIN_PER_STEP {
        return Err(HarnessError::Invalid(format!("n_per_step must be at least {MIN_PER_STEP}")));
    }
    if !cfg.step_pp.is_finite() || cfg.step_pp < 0.0 {
        return Err(HarnessError::Invalid("step_pp must be finite and non-negative".into()));
    }
    let base = pick_sweep_base(test, cfg)?;
    let specs = sweep_targets(&base.record.condition(), cfg)?;
    let n = cfg.n_per_step;
    let reqs: Vec<GenRequest> = specs
        .iter()
        .flat_map(|s| (0..n).map(move |i| GenRequest { spec: *s, mask: None, seed: sample_seed(cfg.seed, i as u64) }))
        .collect();
    log::info!("sweep {:?}: {} steps x {n} samples from {}", cfg.plan, cfg.steps, base.id);
    let realized = realize(models, &models.generate(&reqs, batch)?)?;

    let elements: Vec<Class> = cfg.plan.moves().iter().map(|m| m.0).collect();
    let name = format!("{:?}", cfg.plan).to_lowercase();
    let mut steps = Vec::with_capacity(cfg.steps);
    for (k, spec) in specs.iter().enumerate() {
        let chunk = &realized[k * n..(k + 1) * n];
        let mut step = SweepStep {
            index: k,
            targets: BTreeMap::new(),
            realized: BTreeMap::new(),
            mean: BTreeMap::new(),
            std: BTreeMap::new(),
            sample_ids: (0..n).map(|i| format!("{name}_s{k}_n{i}")).collect(),
        };
        for &c in &elements {
            let vals: Vec<f64> = chunk.iter().map(|(_, p)| p[c as usize]).collect();
            step.targets.insert(c.name().into(), spec.proportions.get(c));
            step.mean.insert(c.name().into(), metrics::mean(&vals));
            step.std.insert(c.name().into(), metrics::std_dev(&vals));
            step.realized.insert(c.name().into(), vals);
        }
        steps.push(step);
    }
    let mut spearman_step_means = BTreeMap::new();
    let mut spearman_samples = BTreeMap::new();
    let mut shift_pp = BTreeMap::new();
    for &c in &elements {
        let key = c.name();
        let t: Vec<f64> = steps.iter().map(|s| s.targets[key]).collect();
        let m: Vec<f64> = steps.iter().map(|s| s.mean[key]).collect();
        let ts: Vec<f64> = steps.iter().flat_map(|s| std::iter::repeat_n(s.targets[key], n)).collect();
        let ms: Vec<f64> = steps.iter().flat_map(|s| s.realized[key].iter().copied()).collect();
        spearman_step_means.insert(key.to_string(), metrics::spearman(&t, &m));
        spearman_samples.insert(key.to_string(), metrics::spearman(&ts, &ms));
        shift_pp.insert(key.to_string(), m[m.len() - 1] - m[0]);
    }
    Ok(SweepReport {
        name,
        plan: cfg.plan,
        base_record: base.id.clone(),
        elements: elements.iter().map(|c| c.name().to_string()).collect(),
        steps,
        spearman_step_means,
        spearman_samples,
        shift_pp,
        provenance: Provenance::new(models, corpus, cfg.seed),
    })
}

// ---------------------------------------------------------------------------
// mask variation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOutcome {
    pub style: CityStyle,
    pub mask_record: String,
    pub seed_index: usize,
    pub mask_coverage: f64,
    pub realized_road: f64,
    /// Road IoU against the mask used for generation.
    pub own_iou: f64,
    /// Mean road IoU against the other masks.
    pub cross_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVariationReport {
    pub name: String,
    pub base_record: String,
    pub outcomes: Vec<MaskOutcome>,
    /// Fraction of outputs whose own-mask IoU beats their cross-mask IoU.
    pub own_beats_cross: f64,
    pub provenance: Provenance,
}

/// Generates the fixed prompt (in both city styles) under each mask.
pub fn run_mask_variation(
    models: &Models,
    corpus: &[CorpusItem],
    prompt: &ConditionSpec,
    masks: &[(String, RoadMask)],
    n_seeds: usize,
    seed: u64,
    batch: usize,
) -> Result<MaskVariationReport, HarnessError> {
    if masks.len() < 2 {
        return Err(HarnessError::Invalid("mask variation needs at least two masks".into()));
    }
    let res = models.resolution();
    if let Some((id, m)) = masks.iter().find(|(_, m)| m.width != res || m.height != res) {
        return Err(HarnessError::Invalid(format!("mask {id} is {}x{}, model works at {res}x{res}", m.width, m.height)));
    }
    let mut keys = Vec::new();
    let mut reqs = Vec::new();
    for style in CityStyle::ALL {
        let spec = ConditionSpec { style, ..*prompt };
        for (mi, (_, mask)) in masks.iter().enumerate() {
            for s in 0..n_seeds.max(1) {
                keys.push((style, mi, s));
                reqs.push(GenRequest { spec, mask: Some(mask.clone()), seed: sample_seed(seed, s as u64) });
            }
        }
    }
    let realized = realize(models, &models.generate(&reqs, batch)?)?;
    let mut outcomes = Vec::with_capacity(keys.len());
    for ((style, mi, s), (seg, p)) in keys.into_iter().zip(&realized) {
        let own = mask_iou(seg, &masks[mi].1)?;
        let mut cross = Vec::new();
        for (j, (_, m)) in masks.iter().enumerate() {
            if j != mi {
                cross.push(mask_iou(seg, m)?);
            }
        }
        outcomes.push(MaskOutcome {
            style,
            mask_record: masks[mi].0.clone(),
            seed_index: s,
            mask_coverage: 100.0 * masks[mi].1.coverage(),
            realized_road: p[Class::Road as usize],
            own_iou: own,
            cross_iou: metrics::mean(&cross),
        });
    }
    let wins = outcomes.iter().filter(|o| o.own_iou > o.cross_iou).count();
    Ok(MaskVariationReport {
        name: "mask_variation".into(),
        base_record: String::new(),
        own_beats_cross: wins as f64 / outcomes.len().max(1) as f64,
        outcomes,
        provenance: Provenance::new(models, corpus, seed),
    })
}

/// `k` test masks spread over the range of road coverage.
pub fn pick_masks(test: &[&CorpusItem], k: usize) -> Vec<(String, RoadMask)> {
    let mut sorted: Vec<&CorpusItem> = test.to_vec();
    sorted.sort_by(|a, b| a.record.road_mask.coverage().total_cmp(&b.record.road_mask.coverage()).then(a.id.cmp(&b.id)));
    if sorted.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(sorted.len());
    (0..k)
        .map(|i| {
            let idx = if k == 1 { sorted.len() / 2 } else { (i * (sorted.len() - 1)) / (k - 1) };
            (sorted[idx].id.clone(), sorted[idx].record.road_mask.clone())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// text/mask conflict

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictArm {
    /// Realised road percent per target, one entry per seed.
    pub realized: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Coefficient of variation of the per-target mean realised road percent.
    pub cov: f64,
    /// Coefficient of variation over every individual sample.
    pub cov_samples: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub name: String,
    pub road_targets: Vec<f64>,
    pub mask_record: String,
    pub mask_coverage: f64,
    pub with_mask: ConflictArm,
    pub without_mask: ConflictArm,
    /// Realised road stays put under the mask while the text alone moves it.
    pub imagery_dominates: bool,
    pub provenance: Provenance,
}

impl ConflictArm {
    fn from_realized(realized: Vec<Vec<f64>>) -> Self {
        let means: Vec<f64> = realized.iter().map(|v| metrics::mean(v)).collect();
        let stds = realized.iter().map(|v| metrics::std_dev(v)).collect();
        let all: Vec<f64> = realized.iter().flatten().copied().collect();
        let cov = if means.len() < 2 { 0.0 } else { metrics::coeff_of_variation(&means) };
        Self { cov, cov_samples: metrics::coeff_of_variation(&all), realized, means, stds }
    }
}

/// CoV threshold under the mask and the required ratio to the unmasked arm.
pub const CONFLICT_MAX_COV: f64 = 0.15;
pub const CONFLICT_MIN_RATIO: f64 = 2.0;

/// Test record whose road share sits nearest the middle of the target grid
/// and whose other classes leave room for the largest target.
pub fn pick_conflict_base<'a>(test: &[&'a CorpusItem], targets: &[f64]) -> Result<&'a CorpusItem, HarnessError> {
    let max = targets.iter().copied().fold(0.0, f64::max);
    let mid = metrics::mean(targets);
    test.iter()
        .copied()
        .filter(|r| {
            let p = r.record.condition().proportions;
            p.sum() - p.road + max <= 100.0 - OTHER_HEADROOM
        })
        .min_by(|a, b| {
            let d = |r: &CorpusItem| (r.record.proportions.road - mid).abs();
            d(a).total_cmp(&d(b)).then_with(|| a.id.cmp(&b.id))
        })
        .ok_or_else(|| HarnessError::Infeasible(format!("road targets up to {max}%")))
}

pub fn run_conflict(
    models: &Models,
    corpus: &[CorpusItem],
    base: &CorpusItem,
    road_targets: &[f64],
    n_per_target: usize,
    seed: u64,
    batch: usize,
) -> Result<ConflictReport, HarnessError> {
    if road_targets.is_empty() || road_targets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::Invalid("road targets must be non-empty and strictly increasing".into()));
    }
    if n_per_target == 0 {
        return Err(HarnessError::Invalid("n_per_target must be positive".into()));
    }
    let mask = &base.record.road_mask;
    let res = models.resolution();
    if mask.width != res || mask.height != res {
        return Err(HarnessError::Invalid(format!("mask {}x{} vs model {res}x{res}", mask.width, mask.height)));
    }
    let spec0 = base.record.condition();
    let mut arms = Vec::new();
    for with_mask in [true, false] {
        let mut reqs = Vec::new();
        for &t in road_targets {
            let mut spec = spec0;
            spec.proportions.road = t;
            spec.validate()?;
            for i in 0..n_per_target {
                reqs.push(GenRequest { spec, mask: with_mask.then(|| mask.clone()), seed: sample_seed(seed, i as u64) });
            }
        }
        log::info!("conflict: {} generations, mask {}", reqs.len(), with_mask);
        let realized = realize(models, &models.generate(&reqs, batch)?)?;
        let per_target: Vec<Vec<f64>> =
            realized.chunks(n_per_target).map(|c| c.iter().map(|(_, p)| p[Class::Road as usize]).collect()).collect();
        arms.push(ConflictArm::from_realized(per_target));
    }
    let without_mask = arms.pop().expect("two arms");
    let with_mask = arms.pop().expect("two arms");
    let imagery_dominates =
        with_mask.cov <= CONFLICT_MAX_COV && without_mask.cov >= CONFLICT_MIN_RATIO * with_mask.cov;
    Ok(ConflictReport {
        name: "conflict".into(),
        road_targets: road_targets.to_vec(),
        mask_record: base.id.clone(),
        mask_coverage: 100.0 * mask.coverage(),
        with_mask,
        without_mask,
        imagery_dominates,
        provenance: Provenance::new(models, corpus, seed),
    })
}

// ---------------------------------------------------------------------------
// reports

/// Anything the harness can write to disk.
pub trait Report: Serialize {
    fn name(&self) -> &str;
    /// CSV header and rows.
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>);
    /// Named PNG plots.
    fn plots(&self) -> Vec<(String, RgbImage)>;
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

impl Report for BaselineReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header: Vec<String> =
            ["arm", "n_samples", "fid", "perceptual_distance", "ssim", "miou"].map(String::from).to_vec();
        header.extend(SELECTED_CLASSES.iter().map(|c| format!("iou_{}", c.name())));
        let row = |a: &ArmDetail| {
            let r = &a.report;
            let mut v = vec![r.arm.clone(), r.n_samples.to_string(), f(r.fid), f(r.perceptual_distance), f(r.ssim), f(r.miou)];
            v.extend(SELECTED_CLASSES.iter().map(|c| r.classwise_iou.get(c.name()).map_or(String::new(), |x| f(*x))));
            v
        };
        let mut delta = vec!["change".to_string(), String::new()];
        for k in ["fid", "perceptual_distance", "ssim", "miou"] {
            delta.push(self.deltas.get(k).map_or(String::new(), |d| format_change(*d)));
        }
        for c in SELECTED_CLASSES {
            delta.push(self.deltas.get(&format!("iou_{}", c.name())).map_or(String::new(), |d| format_change(*d)));
        }
        (header, vec![row(&self.without_mask), row(&self.with_mask), delta])
    }

    fn plots(&self) -> Vec<(String, RgbImage)> {
        let mut out = Vec::new();
        for (tag, arm) in [("without_mask", &self.without_mask), ("with_mask", &self.with_mask)] {
            let panels: Vec<(&str, Vec<(f64, f64)>)> = Class::LISTED
                .iter()
                .map(|&c| (c.name(), arm.points.iter().map(|p| (p.intended[c as usize], p.realized[c as usize])).collect()))
                .collect();
            out.push((format!("consistency_{tag}"), plot::scatter_panels(&panels)));
            let dens: Vec<(&str, Vec<Vec<f64>>)> = Class::LISTED
                .iter()
                .map(|&c| {
                    let i: Vec<f64> = arm.points.iter().map(|p| p.intended[c as usize]).collect();
                    let r: Vec<f64> = arm.points.iter().map(|p| p.realized[c as usize]).collect();
                    (c.name(), vec![i, r])
                })
                .collect();
            out.push((format!("density_{tag}"), plot::density_panels(&dens)));
        }
        out
    }
}

impl Report for SweepReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["step", "element", "target", "mean", "std", "n"].map(String::from).to_vec();
        let mut rows = Vec::new();
        for s in &self.steps {
            for e in &self.elements {
                rows.push(vec![
                    s.index.to_string(),
                    e.clone(),
                    f(s.targets[e]),
                    f(s.mean[e]),
                    f(s.std[e]),
                    s.realized[e].len().to_string(),
                ]);
            }
        }
        (header, rows)
    }

    fn plots(&self) -> Vec<(String, RgbImage)> {
        let dens: Vec<(&str, Vec<Vec<f64>>)> = self
            .elements
            .iter()
            .map(|e| (e.as_str(), self.steps.iter().map(|s| s.realized[e].clone()).collect()))
            .collect();
        let scatter: Vec<(&str, Vec<(f64, f64)>)> = self
            .elements
            .iter()
            .map(|e| {
                let pts = self.steps.iter().flat_map(|s| s.realized[e].iter().map(move |v| (s.targets[e], *v))).collect();
                (e.as_str(), pts)
            })
            .collect();
        vec![("density".into(), plot::density_panels(&dens)), ("scatter".into(), plot::scatter_panels(&scatter))]
    }
}

impl Report for MaskVariationReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["style", "mask_record", "seed_index", "mask_coverage", "realized_road", "own_iou", "cross_iou"]
            .map(String::from)
            .to_vec();
        let rows = self
            .outcomes
            .iter()
            .map(|o| {
                vec![
                    o.style.city().to_string(),
                    o.mask_record.clone(),
                    o.seed_index.to_string(),
                    f(o.mask_coverage),
                    f(o.realized_road),
                    f(o.own_iou),
                    f(o.cross_iou),
                ]
            })
            .collect();
        (header, rows)
    }

    fn plots(&self) -> Vec<(String, RgbImage)> {
        let panels: Vec<(&str, Vec<(f64, f64)>)> = CityStyle::ALL
            .iter()
            .map(|&s| {
                let pts = self.outcomes.iter().filter(|o| o.style == s).map(|o| (o.mask_coverage, o.realized_road)).collect();
                (s.city(), pts)
            })
            .collect();
        vec![("road_vs_mask".into(), plot::scatter_panels(&panels))]
    }
}

impl Report for ConflictReport {
    fn name(&self) -> &str {
        &self.name
    }

    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["arm", "road_target", "mean_realized", "std_realized", "n"].map(String::from).to_vec();
        let mut rows = Vec::new();
        for (arm, a) in [("w/ mask", &self.with_mask), ("w/o mask", &self.without_mask)] {
            for (i, t) in self.road_targets.iter().enumerate() {
                rows.push(vec![arm.into(), f(*t), f(a.means[i]), f(a.stds[i]), a.realized[i].len().to_string()]);
            }
        }
        (header, rows)
    }

    fn plots(&self) -> Vec<(String, RgbImage)> {
        let arm = |a: &ConflictArm| -> Vec<(f64, f64)> {
            self.road_targets.iter().zip(&a.realized).flat_map(|(t, v)| v.iter().map(move |r| (*t, *r))).collect()
        };
        let panels = vec![("w/ mask", arm(&self.with_mask)), ("w/o mask", arm(&self.without_mask))];
        let dens = vec![
            ("w/ mask", self.with_mask.realized.clone()),
            ("w/o mask", self.without_mask.realized.clone()),
        ];
        vec![("scatter".into(), plot::scatter_panels(&panels)), ("density".into(), plot::density_panels(&dens))]
    }
}

/// Writes `report.json`, `report.csv` and one PNG per plot into `dir`.
/// Returns the written paths in a fixed order.
pub fn emit_report<R: Report>(report: &R, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("reports serialise");
    fs::write(&json, text).map_err(io_err(&json))?;
    written.push(json);

    let csv_path = dir.join("report.csv");
    let (header, rows) = report.table();
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    written.push(csv_path);

    for (name, img) in report.plots() {
        let p = dir.join(format!("{name}.png"));
        img.save(&p).map_err(|e| HarnessError::Io { path: p.clone(), source: std::io::Error::other(e) })?;
        written.push(p);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// plan files

/// Experiment selection and parameters from a plan file:
///
/// ```toml
/// name = "conflict"
/// seed = 42
/// batch = 16
///
/// [experiment]
/// kind = "conflict"
/// road_targets = [5.71, 15.71, 25.71, 35.71]
/// n_per_target = 8
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub experiment: Experiment,
}

fn default_batch() -> usize {
    16
}

fn default_n() -> usize {
    MIN_PER_STEP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Baseline {
        /// Evaluate only the first `limit` test records.
        #[serde(default)]
        limit: Option<usize>,
    },
    TextSweep {
        plan: SweepPlan,
        steps: usize,
        step_pp: f64,
        #[serde(default = "default_n")]
        n_per_step: usize,
        #[serde(default)]
        record: Option<String>,
    },
    MaskVariation {
        #[serde(default = "default_masks")]
        n_masks: usize,
        #[serde(default = "default_one")]
        n_seeds: usize,
        #[serde(default)]
        record: Option<String>,
    },
    Conflict {
        road_targets: Vec<f64>,
        #[serde(default = "default_n")]
        n_per_target: usize,
        #[serde(default)]
        record: Option<String>,
    },
}

fn default_masks() -> usize {
    4
}

fn default_one() -> usize {
    1
}

impl ExperimentPlan {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Plan(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}

/// Result of running a plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExperimentOutput {
    Baseline(BaselineReport),
    Sweep(SweepReport),
    MaskVariation(MaskVariationReport),
    Conflict(ConflictReport),
}

impl ExperimentOutput {
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        match self {
            ExperimentOutput::Baseline(r) => emit_report(r, dir),
            ExperimentOutput::Sweep(r) => emit_report(r, dir),
            ExperimentOutput::MaskVariation(r) => emit_report(r, dir),
            ExperimentOutput::Conflict(r) => emit_report(r, dir),
        }
    }
}

pub fn run_plan(plan: &ExperimentPlan, models: &Models, corpus: &[CorpusItem]) -> Result<ExperimentOutput, HarnessError> {
    let test: Vec<&CorpusItem> = corpus.iter().filter(|c| c.split == crate::corpus::Split::Test).collect();
    let batch = plan.batch.max(1);
    Ok(match &plan.experiment {
        Experiment::Baseline { limit } => {
            let take = limit.unwrap_or(test.len()).min(test.len());
            ExperimentOutput::Baseline(run_baseline_eval(models, corpus, &test[..take], plan.seed, batch)?)
        }
        Experiment::TextSweep { plan: p, steps, step_pp, n_per_step, record } => {
            let cfg = SweepConfig {
                plan: *p,
                steps: *steps,
                step_pp: *step_pp,
                n_per_step: *n_per_step,
                seed: plan.seed,
                record: record.clone(),
            };
            let mut r = run_text_sweep(models, corpus, &test, &cfg, batch)?;
            r.name = plan.name.clone();
            ExperimentOutput::Sweep(r)
        }
        Experiment::MaskVariation { n_masks, n_seeds, record } => {
            let base = match record {
                Some(id) => find_record(&test, id)?,
                None => *test.first().ok_or_else(|| HarnessError::Invalid("test split is empty".into()))?,
            };
            let masks = pick_masks(&test, *n_masks);
            let mut r = run_mask_variation(models, corpus, &base.record.condition(), &masks, *n_seeds, plan.seed, batch)?;
            r.name = plan.name.clone();
            r.base_record = base.id.clone();
            ExperimentOutput::MaskVariation(r)
        }
        Experiment::Conflict { road_targets, n_per_target, record } => {
            let base = match record {
                Some(id) => find_record(&test, id)?,
                None => pick_conflict_base(&test, road_targets)?,
            };
            let mut r = run_conflict(models, corpus, base, road_targets, *n_per_target, plan.seed, batch)?;
            r.name = plan.name.clone();
            ExperimentOutput::Conflict(r)
        }
    })
}
