//! Small corpus-trained feature network shared by `fid` and
//! `perceptual_distance`.
//!
//! Four 3×3 convolutions (the last three with stride 2) followed by global
//! average pooling. Two heads sit on the pooled vector: a style logit and a
//! seven-way class-proportion regressor. The pooled vector is the embedding
//! used for Fréchet distances; the four activation maps are the layers
//! compared by the perceptual distance.

use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddpm::{images_to_tensor, TrainLog};
use crate::metrics::{self, MetricError};
use crate::nn::{silu, silu_grad, Adam, AdamConfig, Checkpoint, Conv2d, Linear, ParamSet, ParamSetBuilder, Real, Tensor};
use crate::seeds;
use crate::taxonomy::{CityStyle, LabelMap, Proportions};

pub const FEATURES_KIND: &str = "features";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    Shape((u32, u32), (u32, u32)),
    #[error("image {0}x{1} too small for the feature network (needs at least 16x16)")]
    TooSmall(u32, u32),
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("feature network training diverged at epoch {0}")]
    Divergence(usize),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub widths: [usize; 4],
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 64] }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub cfg: FeatureConfig,
    convs: Vec<Conv2d>,
    style_head: Linear,
    prop_head: Linear,
    pub params: ParamSet<f32>,
}

struct Trace<T> {
    /// Input of each conv.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each conv.
    pre: Vec<Tensor<T>>,
    pooled: Tensor<T>,
}

/// One labelled image for feature-network training.
#[derive(Clone, Debug)]
pub struct FeatureSample {
    pub id: String,
    pub image: RgbImage,
    pub style: CityStyle,
    pub proportions: Proportions,
}

impl FeatureSample {
    pub fn new(id: &str, image: RgbImage, style: CityStyle, labels: &LabelMap) -> Self {
        let counts = labels.class_counts();
        Self { id: id.to_string(), image, style, proportions: Proportions::from_counts_2dp(&counts) }
    }
}

impl FeatureNet {
    fn build<T: Real>(cfg: &FeatureConfig, seed: u64) -> (Vec<Conv2d>, Linear, Linear, ParamSet<T>) {
        let mut b = ParamSetBuilder::<T>::new(seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut b, &format!("feat.conv{i}"), cin, w, 3, if i == 0 { 1 } else { 2 }));
            cin = w;
        }
        let style_head = Linear::new(&mut b, "feat.style", cin, 1);
        let prop_head = Linear::new(&mut b, "feat.props", cin, 7);
        (convs, style_head, prop_head, b.finish())
    }

    pub fn init(cfg: FeatureConfig, seed: u64) -> Self {
        let (convs, style_head, prop_head, params) = Self::build::<f32>(&cfg, seed);
        Self { cfg, convs, style_head, prop_head, params }
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.widths[3]
    }

    fn arch_hash(&self) -> String {
        self.params.arch_hash(&serde_json::to_string(&self.cfg).expect("config serialises"))
    }

    fn run<T: Real>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Trace<T> {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x.clone();
        for conv in &self.convs {
            let y = conv.forward(ps, &h);
            inputs.push(h);
            h = silu(&y);
            pre.push(y);
        }
        let plane = h.h * h.w;
        let pooled: Vec<T> = h
            .data
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() / T::lit(plane as f64))
            .collect();
        Trace { inputs, pre, pooled: Tensor::vectors(h.c, h.n, pooled) }
    }

    fn check(images: &[&RgbImage]) -> Result<(), FeatureError> {
        for img in images {
            let (w, h) = img.dimensions();
            if w < 16 || h < 16 {
                return Err(FeatureError::TooSmall(w, h));
            }
        }
        Ok(())
    }

    /// Pooled embedding per image.
    pub fn embed(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>, FeatureError> {
        Self::check(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let tr = self.run(&self.params, &images_to_tensor(chunk));
            let (d, n) = (tr.pooled.c, tr.pooled.n);
            for b in 0..n {
                out.push((0..d).map(|k| tr.pooled.data[k * n + b] as f64).collect());
            }
        }
        Ok(out)
    }

    /// Style probability (Dense = 1) and predicted proportions in percent.
    pub fn predict(&self, img: &RgbImage) -> Result<(f64, [f64; 7]), FeatureError> {
        Self::check(&[img])?;
        let tr = self.run(&self.params, &images_to_tensor(&[img]));
        let logit = self.style_head.forward(&self.params, &tr.pooled).data[0] as f64;
        let props = self.prop_head.forward(&self.params, &tr.pooled);
        let mut p = [0.0; 7];
        for (k, v) in p.iter_mut().enumerate() {
            *v = props.data[k] as f64 * 100.0;
        }
        Ok((1.0 / (1.0 + (-logit).exp()), p))
    }

    /// Mean over the four layers of the spatially averaged squared
    /// difference between channel-normalised activations.
    pub fn perceptual_distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, FeatureError> {
        if a.dimensions() != b.dimensions() {
            return Err(FeatureError::Shape(a.dimensions(), b.dimensions()));
        }
        Self::check(&[a])?;
        let tr = self.run(&self.params, &images_to_tensor(&[a, b]));
        let mut total = 0.0;
        for pre in &tr.pre {
            let act = silu(pre);
            let plane = act.h * act.w;
            let mut layer = 0.0;
            for i in 0..plane {
                let at = |c: usize, s: usize| act.data[(c * 2 + s) * plane + i] as f64;
                let norm = |s: usize| (0..act.c).map(|c| at(c, s).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let (na, nb) = (norm(0), norm(1));
                layer += (0..act.c).map(|c| (at(c, 0) / na - at(c, 1) / nb).powi(2)).sum::<f64>();
            }
            total += layer / plane as f64;
        }
        Ok(total / tr.pre.len() as f64)
    }

    /// Mean pairwise perceptual distance over aligned pairs.
    pub fn mean_perceptual_distance(&self, a: &[RgbImage], b: &[RgbImage]) -> Result<f64, FeatureError> {
        if a.is_empty() || a.len() != b.len() {
            return Err(MetricError::Shape(format!("{} vs {} images", a.len(), b.len())).into());
        }
        let mut sum = 0.0;
        for (x, y) in a.iter().zip(b) {
            sum += self.perceptual_distance(x, y)?;
        }
        Ok(sum / a.len() as f64)
    }

    pub fn fid(&self, a: &[RgbImage], b: &[RgbImage]) -> Result<f64, FeatureError> {
        let fa = self.embed(&a.iter().collect::<Vec<_>>())?;
        let fb = self.embed(&b.iter().collect::<Vec<_>>())?;
        Ok(metrics::fid(&fa, &fb)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            FEATURES_KIND,
            self.arch_hash(),
            serde_json::to_value(&self.cfg).expect("config serialises"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, FeatureError> {
        ck.expect_kind(FEATURES_KIND)?;
        let cfg: FeatureConfig =
            serde_json::from_value(ck.header.config.clone()).map_err(|e| FeatureError::Incompatible(e.to_string()))?;
        let (convs, style_head, prop_head, _) = Self::build::<f32>(&cfg, 0);
        let net = Self { cfg, convs, style_head, prop_head, params: ck.params };
        if net.arch_hash() != ck.header.arch_hash {
            return Err(FeatureError::Incompatible("architecture hash differs from config".into()));
        }
        Ok(net)
    }

    /// Style cross-entropy plus proportion MSE (fractions) and gradients.
    fn loss_and_grads<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        styles: &[f64],
        props: &[[f64; 7]],
    ) -> (f64, ParamSet<T>) {
        let n = x.n;
        let tr = self.run(ps, x);
        let logits = self.style_head.forward(ps, &tr.pooled);
        let pred = self.prop_head.forward(ps, &tr.pooled);
        let mut loss = 0.0;
        let mut d_logit = logits.with_data(vec![T::zero(); n]);
        let mut d_pred = pred.with_data(vec![T::zero(); 7 * n]);
        for b in 0..n {
            let z = logits.data[b].as_f64();
            let y = styles[b];
            // numerically stable binary cross-entropy
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            d_logit.data[b] = T::lit((1.0 / (1.0 + (-z).exp()) - y) / n as f64);
            for k in 0..7 {
                let diff = pred.data[k * n + b].as_f64() - props[b][k];
                loss += diff * diff;
                d_pred.data[k * n + b] = T::lit(2.0 * diff / n as f64);
            }
        }
        let mut grads = ps.zeros_like();
        let mut dp = self.style_head.backward(ps, &tr.pooled, &d_logit, Some(&mut grads), true).expect("dx");
        dp.add_assign(&self.prop_head.backward(ps, &tr.pooled, &d_pred, Some(&mut grads), true).expect("dx"));
        let last = tr.pre.last().expect("layers");
        let plane = last.h * last.w;
        let inv = T::lit(1.0 / plane as f64);
        let mut dh = last.with_data(dp.data.iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect());
        for i in (0..self.convs.len()).rev() {
            let dy = silu_grad(&tr.pre[i], &dh);
            match self.convs[i].backward(ps, &tr.inputs[i], &dy, Some(&mut grads), i > 0) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
        (loss / n as f64, grads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

pub fn train_feature_net(
    net: &mut FeatureNet,
    samples: &[FeatureSample],
    cfg: &FeatureTrainConfig,
) -> Result<TrainLog, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptyTrainSet);
    }
    FeatureNet::check(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let start = Instant::now();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &net.params);
    let mut sorted: Vec<&FeatureSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order = sorted.clone();
        order.shuffle(&mut seeds::rng(cfg.seed, &[0xfea7, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
            let styles: Vec<f64> = chunk.iter().map(|s| f64::from(s.style == CityStyle::Dense)).collect();
            let props: Vec<[f64; 7]> = chunk.iter().map(|s| s.proportions.as_array().map(|v| v / 100.0)).collect();
            let (loss, grads) = net.loss_and_grads(&net.params, &images_to_tensor(&images), &styles, &props);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(FeatureError::Divergence(epoch));
            }
            opt.step(&mut net.params, &grads);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
            log.steps += 1;
        }
        log::info!("feature net epoch {}/{}: loss {:.4}", epoch + 1, cfg.epochs, sum / count as f64);
        log.epoch_losses.push(sum / count as f64);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn img(seed: u8) -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x as u8 * 13) ^ seed, (y as u8 * 7).wrapping_add(seed), seed]))
    }

    #[test]
    fn perceptual_distance_basics() {
        let net = FeatureNet::init(FeatureConfig::default(), 3);
        let (a, b) = (img(10), img(200));
        assert!(net.perceptual_distance(&a, &a).unwrap().abs() < 1e-12);
        let ab = net.perceptual_distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert!((ab - net.perceptual_distance(&b, &a).unwrap()).abs() < 1e-9);
        assert!(net.perceptual_distance(&a, &RgbImage::new(32, 32)).is_err());
    }

    #[test]
    fn embedding_dimension_and_fid_zero_on_same_set() {
        let net = FeatureNet::init(FeatureConfig::default(), 3);
        let set: Vec<RgbImage> = (0..5).map(|s| img(s * 40)).collect();
        let e = net.embed(&set.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(e.len(), 5);
        assert_eq!(e[0].len(), net.embedding_dim());
        assert!(net.fid(&set, &set).unwrap().abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = FeatureConfig { widths: [3, 4, 4, 5] };
        let (convs, style_head, prop_head, ps) = FeatureNet::build::<f64>(&cfg, 9);
        let net = FeatureNet { cfg, convs, style_head, prop_head, params: ps.cast::<f32>() };
        let x = Tensor::<f64>::from_vec(3, 2, 8, 8, (0..384).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());
        let styles = [1.0, 0.0];
        let props = [[0.2, 0.1, 0.3, 0.1, 0.1, 0.0, 0.2], [0.5, 0.0, 0.0, 0.4, 0.05, 0.05, 0.0]];
        let (_, g) = net.loss_and_grads(&ps, &x, &styles, &props);
        let total = ps.num_scalars();
        for probe in 0..20 {
            let (id, k) = ps.locate((probe * 7919) % total);
            let mut p = ps.clone();
            p.get_mut(id)[k] += 1e-6;
            let mut m = ps.clone();
            m.get_mut(id)[k] -= 1e-6;
            let num = (net.loss_and_grads(&p, &x, &styles, &props).0 - net.loss_and_grads(&m, &x, &styles, &props).0) / 2e-6;
            let ana = g.get(id)[k];
            assert!((num - ana).abs() <= 1e-6 + 1e-4 * num.abs().max(ana.abs()), "{probe}: {num} vs {ana}");
        }
    }
}
