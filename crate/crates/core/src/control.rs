//! Mask-conditioned control branch attached to a frozen denoiser.
//!
//! The branch is a trainable copy `Θc` of the base encoder. It sees the
//! noisy image plus a zero-initialised 1×1 convolution of the road mask
//! (`Θz1`), and each of its four feature maps (three skip levels and the
//! bottleneck) passes through its own zero-initialised 1×1 convolution
//! (`Θz2`) before being added to the matching base encoder feature that
//! feeds the frozen decoder:
//!
//! ```text
//! y = F(x; Θ) + Z(F(x + Z(c; Θz1); Θc); Θz2)
//! ```
//!
//! With all zero convolutions at zero the output equals the base model
//! bit for bit.

use image::RgbImage;
use thiserror::Error;

use crate::conditioning::ConditionVector;
use crate::ddpm::{
    ancestral_sample, conditions_to_tensor, make_schedule, mse_and_grad, run_training, tensor_to_images, Batch,
    Denoiser, DiffusionError, NoiseSchedule, TrainConfig, TrainLog, TrainSample,
};
use crate::nn::{Checkpoint, Conv2d, EncGrads, EncOut, ParamSet, ParamSetBuilder, Real, Tensor, UNet};
use crate::taxonomy::RoadMask;

pub const CONTROL_KIND: &str = "control";

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("base denoiser weights are frozen and cannot be updated")]
    FrozenBackbone,
    #[error("base weights changed during control training: {before} -> {after}")]
    BackboneModified { before: String, after: String },
    #[error("control checkpoint expects base {expected}, got {found}")]
    BaseMismatch { expected: String, found: String },
    #[error("mask is {mw}x{mh} but the model works at {res}x{res}")]
    MaskResolution { mw: usize, mh: usize, res: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
}

/// Read-only wrapper around the base model. Updates are refused.
#[derive(Clone, Debug)]
pub struct Frozen<T>(T);

impl<T> Frozen<T> {
    pub fn new(inner: T) -> Self {
        Self(inner)
    }

    pub fn get(&self) -> &T {
        &self.0
    }

    pub fn try_update(&mut self, _f: impl FnOnce(&mut T)) -> Result<(), ControlError> {
        Err(ControlError::FrozenBackbone)
    }
}

/// Parameter layout of the branch: the copied encoder first (same order as
/// the base encoder, so the base network's parameter ids address it), then
/// the zero convolutions.
#[derive(Clone, Debug)]
pub struct ControlLayout {
    pub n_copy: usize,
    pub zero_in: Conv2d,
    pub zero_s1: Conv2d,
    pub zero_s2: Conv2d,
    pub zero_s3: Conv2d,
    pub zero_mid: Conv2d,
}

impl ControlLayout {
    /// Builds the branch parameters from base parameters of any precision.
    pub fn build<T: Real>(net: &UNet, base: &ParamSet<T>) -> (Self, ParamSet<T>) {
        let mut b = ParamSetBuilder::<T>::new(0);
        for p in &base.params[..net.n_encoder_params] {
            b.push(&format!("ctrl.{}", p.name), &p.shape, p.data.clone());
        }
        let [w1, w2, w3] = net.cfg.widths;
        let zero_in = Conv2d::zero(&mut b, "zero.in", 1, net.cfg.in_channels);
        let zero_s1 = Conv2d::zero(&mut b, "zero.s1", w1, w1);
        let zero_s2 = Conv2d::zero(&mut b, "zero.s2", w2, w2);
        let zero_s3 = Conv2d::zero(&mut b, "zero.s3", w3, w3);
        let zero_mid = Conv2d::zero(&mut b, "zero.mid", w3, w3);
        (Self { n_copy: net.n_encoder_params, zero_in, zero_s1, zero_s2, zero_s3, zero_mid }, b.finish())
    }

    /// Index ranges for the parameter groups `Θc`, `Θz1`, `Θz2`.
    pub fn groups(&self) -> [(&'static str, std::ops::Range<usize>); 3] {
        let z1 = self.zero_in.weight.0;
        let z2 = self.zero_s1.weight.0;
        [("copy", 0..self.n_copy), ("zero_in", z1..z2), ("zero_out", z2..z2 + 8)]
    }
}

/// Everything the backward pass needs from a controlled forward pass.
pub struct ControlTrace<T> {
    ctrl_f: EncOut<T>,
    ctrl_cache: crate::nn::EncCache<T>,
    mixed: EncOut<T>,
    dec_cache: crate::nn::DecCache<T>,
}

/// Controlled noise prediction. Returns the prediction and a trace for
/// backpropagation.
pub fn controlled_forward<T: Real>(
    net: &UNet,
    base: &ParamSet<T>,
    layout: &ControlLayout,
    ctrl: &ParamSet<T>,
    z_t: &Tensor<T>,
    steps: &[usize],
    cond: &Tensor<T>,
    mask: &Tensor<T>,
) -> (Tensor<T>, ControlTrace<T>) {
    let (base_f, _) = net.encode(base, z_t, steps, Some(cond));
    let hint = layout.zero_in.forward(ctrl, mask);
    let ctrl_in = z_t.add(&hint);
    let (ctrl_f, ctrl_cache) = net.encode(ctrl, &ctrl_in, steps, Some(cond));
    let mixed = EncOut {
        emb: base_f.emb.clone(),
        s1: base_f.s1.add(&layout.zero_s1.forward(ctrl, &ctrl_f.s1)),
        s2: base_f.s2.add(&layout.zero_s2.forward(ctrl, &ctrl_f.s2)),
        s3: base_f.s3.add(&layout.zero_s3.forward(ctrl, &ctrl_f.s3)),
        mid: base_f.mid.add(&layout.zero_mid.forward(ctrl, &ctrl_f.mid)),
    };
    let (out, dec_cache) = net.decode(base, &mixed);
    (out, ControlTrace { ctrl_f, ctrl_cache, mixed, dec_cache })
}

/// Backward pass. Gradients reach only the branch parameters; the base
/// decoder and encoder are traversed with their weights held fixed.
pub fn controlled_backward<T: Real>(
    net: &UNet,
    base: &ParamSet<T>,
    layout: &ControlLayout,
    ctrl: &ParamSet<T>,
    trace: &ControlTrace<T>,
    mask: &Tensor<T>,
    dout: &Tensor<T>,
) -> ParamSet<T> {
    let mut grads = ctrl.zeros_like();
    let g = net.decode_backward(base, &trace.dec_cache, &trace.mixed, dout, None);
    let f = &trace.ctrl_f;
    let mut pass = |conv: &Conv2d, x: &Tensor<T>, dy: &Tensor<T>| {
        conv.backward(ctrl, x, dy, Some(&mut grads), true).expect("dx")
    };
    let cg = EncGrads {
        emb: None,
        s1: pass(&layout.zero_s1, &f.s1, &g.s1),
        s2: pass(&layout.zero_s2, &f.s2, &g.s2),
        s3: pass(&layout.zero_s3, &f.s3, &g.s3),
        mid: pass(&layout.zero_mid, &f.mid, &g.mid),
    };
    let d_in = net.encode_backward(ctrl, &trace.ctrl_cache, cg, Some(&mut grads), true).expect("dx");
    layout.zero_in.backward(ctrl, mask, &d_in, Some(&mut grads), false);
    grads
}

/// Noise-prediction loss of the controlled model and its branch gradients.
pub fn control_loss_and_grads<T: Real>(
    net: &UNet,
    base: &ParamSet<T>,
    layout: &ControlLayout,
    ctrl: &ParamSet<T>,
    batch: &Batch<T>,
) -> (f64, ParamSet<T>) {
    let mask = batch.mask.as_ref().expect("control training needs masks");
    let (pred, trace) = controlled_forward(net, base, layout, ctrl, &batch.z_t, &batch.steps, &batch.cond, mask);
    let (loss, dout) = mse_and_grad(&pred, &batch.eps);
    (loss, controlled_backward(net, base, layout, ctrl, &trace, mask, &dout))
}

/// A base denoiser with an attached control branch.
#[derive(Clone, Debug)]
pub struct ControlNet {
    pub base: Frozen<Denoiser>,
    pub layout: ControlLayout,
    pub params: ParamSet<f32>,
}

impl ControlNet {
    pub fn init(base: Denoiser) -> Self {
        let (layout, params) = ControlLayout::build(&base.net, &base.params);
        Self { base: Frozen::new(base), layout, params }
    }

    pub fn base_hash(&self) -> String {
        self.base.get().weights_hash()
    }

    pub fn resolution(&self) -> usize {
        self.base.get().cfg.resolution
    }

    pub fn controlled_predict(&self, z_t: &Tensor<f32>, steps: &[usize], cond: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
        let b = self.base.get();
        controlled_forward(&b.net, &b.params, &self.layout, &self.params, z_t, steps, cond, mask).0
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let b = self.base.get();
        let mut ck = Checkpoint::new(
            CONTROL_KIND,
            self.params.arch_hash(&b.cfg.unet().describe()),
            serde_json::to_value(&b.cfg).expect("config serialises"),
            self.params.clone(),
        );
        ck.header.schedule = Some(serde_json::to_value(&b.schedule).expect("schedule serialises"));
        ck.header.refs.insert("base".into(), self.base_hash());
        ck
    }

    /// Attaches branch weights from a checkpoint to the base they were trained on.
    pub fn from_checkpoint(base: Denoiser, ck: Checkpoint) -> Result<Self, ControlError> {
        ck.expect_kind(CONTROL_KIND)?;
        let expected = ck.header.refs.get("base").cloned().unwrap_or_default();
        let found = base.weights_hash();
        if expected != found {
            return Err(ControlError::BaseMismatch { expected, found });
        }
        let mut me = Self::init(base);
        if ck.params.len() != me.params.len()
            || ck.params.params.iter().zip(&me.params.params).any(|(a, b)| a.shape != b.shape)
        {
            return Err(DiffusionError::Incompatible("control branch layout differs".into()).into());
        }
        me.params = ck.params;
        Ok(me)
    }
}

pub fn mask_to_tensor(masks: &[&RoadMask], resolution: usize) -> Result<Tensor<f32>, ControlError> {
    let n = masks.len();
    let plane = resolution * resolution;
    let mut t = Tensor::zeros(1, n, resolution, resolution);
    for (b, m) in masks.iter().enumerate() {
        if m.width != resolution || m.height != resolution {
            return Err(ControlError::MaskResolution { mw: m.width, mh: m.height, res: resolution });
        }
        for i in 0..plane {
            t.data[b * plane + i] = f32::from(m.bits[i] != 0);
        }
    }
    Ok(t)
}

/// Trains only the branch; the base weights hash is checked before and after.
pub fn train_controlnet<E>(
    model: &mut ControlNet,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    on_epoch: E,
) -> Result<TrainLog, ControlError>
where
    E: FnMut(usize, f64, &ParamSet<f32>) -> Result<(), DiffusionError>,
{
    let before = model.base_hash();
    let base = model.base.get().clone();
    let sched = make_schedule(&base.schedule)?;
    let layout = model.layout.clone();
    let log = run_training(
        samples,
        base.cfg.resolution,
        &sched,
        cfg,
        &mut model.params,
        |ps, batch| control_loss_and_grads(&base.net, &base.params, &layout, ps, batch),
        on_epoch,
    )?;
    let after = model.base_hash();
    if before != after {
        return Err(ControlError::BackboneModified { before, after });
    }
    Ok(log)
}

/// Samples with the road mask applied through the control branch.
pub fn sample_controlled(
    model: &ControlNet,
    conds: &[ConditionVector],
    masks: &[&RoadMask],
    seeds_per_image: &[u64],
    sched: &NoiseSchedule,
    batch: usize,
) -> Result<Vec<RgbImage>, ControlError> {
    let base = model.base.get();
    if sched.steps() != base.schedule.steps {
        return Err(DiffusionError::StepMismatch { given: sched.steps(), trained: base.schedule.steps }.into());
    }
    if conds.len() != seeds_per_image.len() || conds.len() != masks.len() {
        return Err(DiffusionError::Shape("one seed and one mask per condition".into()).into());
    }
    let res = base.cfg.resolution;
    let bs = batch.max(1);
    let mut out = Vec::with_capacity(conds.len());
    for start in (0..conds.len()).step_by(bs) {
        let end = (start + bs).min(conds.len());
        let cond = conditions_to_tensor(&conds[start..end]);
        let mask = mask_to_tensor(&masks[start..end], res)?;
        let (z, _) = ancestral_sample(sched, res, &seeds_per_image[start..end], |z, t| {
            model.controlled_predict(z, t, &cond, &mask)
        });
        out.extend(tensor_to_images(&z));
    }
    Ok(out)
}
