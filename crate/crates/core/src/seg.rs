//! Closed-loop evaluator: a small per-pixel classifier over the extended
//! label set, and connected-component object counting.

use std::collections::VecDeque;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddpm::{images_to_tensor, TrainLog};
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamSet, Real, Tensor, UNet, UNetConfig};
use crate::seeds;
use crate::taxonomy::{label, Class, LabelMap, ObjectCounts, Palette};

pub const SEGMENTER_KIND: &str = "segmenter";
pub const DEFAULT_MIN_AREA: usize = 6;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("image {w}x{h} unsupported: side must be a positive multiple of {multiple}")]
    Resolution { w: u32, h: u32, multiple: usize },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("segmenter training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error("segmenter palette {found} does not match corpus palette {expected}")]
    Palette { expected: String, found: String },
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub widths: [usize; 3],
    pub patch: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64], patch: 2 }
    }
}

impl SegmenterConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig { in_channels: 3, out_channels: label::COUNT, widths: self.widths, patch: self.patch, embedding: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Upper bound of the per-sample Gaussian noise std added to inputs
    /// (in `[-1, 1]` units) so the evaluator tolerates sampler noise.
    pub noise_aug: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, lr: 2e-3, seed: 0, noise_aug: 0.15 }
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    pub net: UNet,
    pub params: ParamSet<f32>,
    pub palette_hash: String,
}

/// One labelled training image.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Segmenter {
    pub fn init(cfg: SegmenterConfig, seed: u64) -> Self {
        let (net, params) = UNet::build::<f32>(&cfg.unet(), seed);
        Self { cfg, net, params, palette_hash: Palette::standard().hash() }
    }

    fn check(&self, img: &RgbImage) -> Result<(), SegError> {
        let m = self.cfg.unet().size_multiple();
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 || !(w as usize).is_multiple_of(m) || !(h as usize).is_multiple_of(m) {
            return Err(SegError::Resolution { w, h, multiple: m });
        }
        Ok(())
    }

    /// Raw per-pixel scores `[labels, N, H, W]`.
    pub fn logits(&self, images: &[&RgbImage]) -> Result<Tensor<f32>, SegError> {
        for img in images {
            self.check(img)?;
        }
        Ok(self.net.forward(&self.params, &images_to_tensor(images), &[], None))
    }

    pub fn segment(&self, img: &RgbImage) -> Result<LabelMap, SegError> {
        Ok(self.segment_batch(&[img])?.remove(0))
    }

    pub fn segment_batch(&self, images: &[&RgbImage]) -> Result<Vec<LabelMap>, SegError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        Ok(argmax_maps(&self.logits(images)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            SEGMENTER_KIND,
            self.net.arch_hash(&self.params),
            serde_json::to_value(&self.cfg).expect("config serialises"),
            self.params.clone(),
        );
        ck.header.refs.insert("palette".into(), self.palette_hash.clone());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, SegError> {
        ck.expect_kind(SEGMENTER_KIND)?;
        let cfg: SegmenterConfig =
            serde_json::from_value(ck.header.config.clone()).map_err(|e| SegError::Incompatible(e.to_string()))?;
        let expected = Palette::standard().hash();
        let found = ck.header.refs.get("palette").cloned().unwrap_or_default();
        if found != expected {
            return Err(SegError::Palette { expected, found });
        }
        let net = UNet::layout(&cfg.unet());
        if net.arch_hash(&ck.params) != ck.header.arch_hash {
            return Err(SegError::Incompatible("architecture hash differs from config".into()));
        }
        Ok(Self { cfg, net, params: ck.params, palette_hash: found })
    }
}

/// Per-pixel argmax over the label axis; ties go to the lower id.
pub fn argmax_maps<T: Real>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let plane = logits.h * logits.w;
    (0..logits.n)
        .map(|b| {
            let ids = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    let mut best_v = logits.data[b * plane + i];
                    for k in 1..logits.c {
                        let v = logits.data[(k * logits.n + b) * plane + i];
                        if v > best_v {
                            best = k;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(logits.w, logits.h, ids)
        })
        .collect()
}

/// Mean softmax cross-entropy over pixels and its gradient.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u8]) -> (f64, Tensor<T>) {
    let (k, n, plane) = (logits.c, logits.n, logits.h * logits.w);
    assert_eq!(targets.len(), n * plane, "one target per pixel");
    let count = T::lit((n * plane) as f64);
    let mut grad = logits.with_data(vec![T::zero(); logits.len()]);
    let mut loss = 0.0;
    let mut probs = vec![T::zero(); k];
    for b in 0..n {
        for i in 0..plane {
            let at = |c: usize| (c * n + b) * plane + i;
            let m = (0..k).map(|c| logits.data[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                probs[c] = (logits.data[at(c)] - m).exp();
                z += probs[c];
            }
            let y = targets[b * plane + i] as usize;
            loss += (z.ln() + m - logits.data[at(y)]).as_f64();
            for c in 0..k {
                let p = probs[c] / z;
                let t = if c == y { T::one() } else { T::zero() };
                grad.data[at(c)] = (p - t) / count;
            }
        }
    }
    (loss / (n * plane) as f64, grad)
}

pub fn seg_loss_and_grads<T: Real>(net: &UNet, ps: &ParamSet<T>, x: &Tensor<T>, targets: &[u8]) -> (f64, ParamSet<T>) {
    let (f, ec) = net.encode(ps, x, &[], None);
    let (logits, dc) = net.decode(ps, &f);
    let (loss, dout) = cross_entropy(&logits, targets);
    let mut grads = ps.zeros_like();
    let g = net.decode_backward(ps, &dc, &f, &dout, Some(&mut grads));
    net.encode_backward(ps, &ec, g, Some(&mut grads), false);
    (loss, grads)
}

pub fn train_segmenter<E>(
    model: &mut Segmenter,
    samples: &[SegSample],
    cfg: &SegTrainConfig,
    mut on_epoch: E,
) -> Result<TrainLog, SegError>
where
    E: FnMut(usize, f64, &Segmenter),
{
    if samples.is_empty() {
        return Err(SegError::EmptyTrainSet);
    }
    for s in samples {
        model.check(&s.image)?;
    }
    let start = Instant::now();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut sorted: Vec<&SegSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order = sorted.clone();
        order.shuffle(&mut seeds::rng(cfg.seed, &[0x5e6, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
            let mut x = images_to_tensor(&images);
            let n = chunk.len();
            let plane = x.h * x.w;
            for (b, s) in chunk.iter().enumerate() {
                let mut rng = seeds::rng(cfg.seed, &[0xa06, epoch as u64, seeds::key(&s.id)]);
                let sigma = rng.random_range(0.0..=cfg.noise_aug) as f32;
                for c in 0..3 {
                    for v in &mut x.data[(c * n + b) * plane..(c * n + b + 1) * plane] {
                        *v += sigma * rng.sample::<f32, _>(StandardNormal);
                    }
                }
            }
            let targets: Vec<u8> = chunk.iter().flat_map(|s| s.labels.ids.iter().copied()).collect();
            let (loss, grads) = seg_loss_and_grads(&model.net, &model.params, &x, &targets);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(SegError::Divergence { epoch, step });
            }
            opt.step(&mut model.params, &grads);
            sum += loss * n as f64;
            count += n;
            log.steps += 1;
        }
        let mean = sum / count as f64;
        log::info!("segmenter epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        log.epoch_losses.push(mean);
        on_epoch(epoch, mean, model);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Dataset-level IoU per base class, accumulated over all pixel pairs.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    inter: [usize; 7],
    union: [usize; 7],
    correct: usize,
    total: usize,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) {
        assert_eq!(pred.len(), gt.len(), "map sizes");
        for i in 0..pred.len() {
            let (p, g) = (pred.class_at(i) as usize, gt.class_at(i) as usize);
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
                self.correct += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
            self.total += 1;
        }
    }

    pub fn class_iou(&self, c: Class) -> Option<f64> {
        let u = self.union[c as usize];
        (u > 0).then(|| self.inter[c as usize] as f64 / u as f64)
    }

    /// Mean over classes that occur in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let vals: Vec<f64> = Class::ALL.iter().filter_map(|&c| self.class_iou(c)).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

pub fn evaluate_segmenter(model: &Segmenter, samples: &[SegSample], batch: usize) -> Result<IouAccumulator, SegError> {
    let mut acc = IouAccumulator::default();
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        for (pred, s) in model.segment_batch(&images)?.iter().zip(chunk) {
            acc.add(pred, &s.labels);
        }
    }
    Ok(acc)
}

/// Counts 4-connected blobs of each object label with at least `min_area`
/// pixels. Persons are counted on the person class.
pub fn count_objects(map: &LabelMap, min_area: usize) -> ObjectCounts {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; map.len()];
    let mut counts = ObjectCounts::default();
    let mut queue = VecDeque::new();
    for start in 0..map.len() {
        let id = map.ids[start];
        if seen[start] || !matches!(id, label::CAR | label::BICYCLE | label::BUS | 5) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && map.ids[j] == id {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area >= min_area {
            match id {
                label::CAR => counts.cars += 1,
                label::BICYCLE => counts.bicycles += 1,
                label::BUS => counts.buses += 1,
                _ => counts.persons += 1,
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_examples() {
        let empty = LabelMap::filled(16, 16, Class::Road);
        assert_eq!(count_objects(&empty, DEFAULT_MIN_AREA), ObjectCounts::default());

        let mut ids = vec![0u8; 16 * 16];
        for y in 0..2 {
            for x in 0..5 {
                ids[y * 16 + x] = label::CAR;
                ids[(y + 8) * 16 + x + 6] = label::CAR;
            }
        }
        let two = LabelMap::new(16, 16, ids.clone());
        assert_eq!(count_objects(&two, DEFAULT_MIN_AREA).cars, 2);
        // diagonal contact does not join blobs under 4-connectivity
        let mut small = vec![0u8; 16 * 16];
        for i in 0..4 {
            small[i] = 5;
        }
        assert_eq!(count_objects(&LabelMap::new(16, 16, small), 6).persons, 0);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::<f64>::from_vec(3, 1, 1, 2, vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.05]);
        let targets = [2u8, 0];
        let (_, g) = cross_entropy(&logits, &targets);
        for i in 0..6 {
            let mut p = logits.clone();
            p.data[i] += 1e-6;
            let mut m = logits.clone();
            m.data[i] -= 1e-6;
            let num = (cross_entropy(&p, &targets).0 - cross_entropy(&m, &targets).0) / 2e-6;
            assert!((num - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let logits = Tensor::<f32>::from_vec(3, 1, 2, 2, (0..12).map(|i| ((i * 7) % 5) as f32 - 2.0).collect());
        assert_eq!(argmax_maps(&logits), argmax_maps(&logits.scale(2.0)));
    }
}
