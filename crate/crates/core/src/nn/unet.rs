use serde::{Deserialize, Serialize};

use super::layers::{
    depth_to_space, silu, silu_grad, sinusoidal_embedding, space_to_depth, upsample2x,
    upsample2x_backward, Conv2d, Linear, ResBlock, ResCache,
};
use super::params::{ParamSet, ParamSetBuilder};
use super::tensor::{Real, Tensor};

/// Shape of a three-level encoder–decoder with additive skips.
///
/// The input is folded `patch × patch` into channels first (`patch = 1`
/// disables this), so a 64×64 image with `patch = 2` is processed on a
/// 32×32 grid at the first level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: [usize; 3],
    pub patch: usize,
    /// `(time_dim, emb_dim, cond_dim)` when the network is conditioned.
    pub embedding: Option<(usize, usize, usize)>,
}

impl UNetConfig {
    pub fn describe(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Input spatial size must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.patch * 4
    }
}

#[derive(Clone, Debug)]
struct EmbLayers {
    time1: Linear,
    time2: Linear,
    cond: Linear,
    time_dim: usize,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    emb: Option<EmbLayers>,
    conv_in: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    down2: Conv2d,
    enc3: ResBlock,
    mid: ResBlock,
    dec3: ResBlock,
    up2: Conv2d,
    dec2: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    conv_out: Conv2d,
    /// Encoder parameters occupy indices `0..n_encoder_params`.
    pub n_encoder_params: usize,
}

/// Encoder outputs consumed by the decoder.
#[derive(Clone, Debug)]
pub struct EncOut<T> {
    pub emb: Option<Tensor<T>>,
    pub s1: Tensor<T>,
    pub s2: Tensor<T>,
    pub s3: Tensor<T>,
    pub mid: Tensor<T>,
}

/// Gradients with respect to [`EncOut`].
#[derive(Clone, Debug)]
pub struct EncGrads<T> {
    pub emb: Option<Tensor<T>>,
    pub s1: Tensor<T>,
    pub s2: Tensor<T>,
    pub s3: Tensor<T>,
    pub mid: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncCache<T> {
    te: Option<Tensor<T>>,
    t1: Option<Tensor<T>>,
    e_pre: Option<Tensor<T>>,
    cond: Option<Tensor<T>>,
    xp: Tensor<T>,
    emb: Option<Tensor<T>>,
    c_enc1: ResCache<T>,
    s1: Tensor<T>,
    c_enc2: ResCache<T>,
    s2: Tensor<T>,
    c_enc3: ResCache<T>,
    c_mid: ResCache<T>,
}

#[derive(Clone, Debug)]
pub struct DecCache<T> {
    c_dec3: ResCache<T>,
    up_h3: Tensor<T>,
    c_dec2: ResCache<T>,
    up_h2: Tensor<T>,
    c_dec1: ResCache<T>,
    h1: Tensor<T>,
    a_out: Tensor<T>,
}

impl UNet {
    pub fn build<T: Real>(cfg: &UNetConfig, seed: u64) -> (Self, ParamSet<T>) {
        let mut b = ParamSetBuilder::<T>::new(seed);
        let [c1, c2, c3] = cfg.widths;
        let pc = cfg.in_channels * cfg.patch * cfg.patch;
        let emb = cfg.embedding.map(|(td, ed, cd)| EmbLayers {
            time1: Linear::new(&mut b, "enc.time1", td, ed),
            time2: Linear::new(&mut b, "enc.time2", ed, ed),
            cond: Linear::new(&mut b, "enc.cond", cd, ed),
            time_dim: td,
        });
        let ed = cfg.embedding.map(|(_, e, _)| e);
        let conv_in = Conv2d::new(&mut b, "enc.conv_in", pc, c1, 3, 1);
        let enc1 = ResBlock::new(&mut b, "enc.block1", c1, ed);
        let down1 = Conv2d::new(&mut b, "enc.down1", c1, c2, 3, 2);
        let enc2 = ResBlock::new(&mut b, "enc.block2", c2, ed);
        let down2 = Conv2d::new(&mut b, "enc.down2", c2, c3, 3, 2);
        let enc3 = ResBlock::new(&mut b, "enc.block3", c3, ed);
        let mid = ResBlock::new(&mut b, "enc.mid", c3, ed);
        let n_encoder_params = b.len();
        let dec3 = ResBlock::new(&mut b, "dec.block3", c3, ed);
        let up2 = Conv2d::new(&mut b, "dec.up2", c3, c2, 3, 1);
        let dec2 = ResBlock::new(&mut b, "dec.block2", c2, ed);
        let up1 = Conv2d::new(&mut b, "dec.up1", c2, c1, 3, 1);
        let dec1 = ResBlock::new(&mut b, "dec.block1", c1, ed);
        let conv_out = Conv2d::new(&mut b, "dec.conv_out", c1, cfg.out_channels * cfg.patch * cfg.patch, 3, 1);
        let net = Self {
            cfg: cfg.clone(),
            emb,
            conv_in,
            enc1,
            down1,
            enc2,
            down2,
            enc3,
            mid,
            dec3,
            up2,
            dec2,
            up1,
            dec1,
            conv_out,
            n_encoder_params,
        };
        (net, b.finish())
    }

    /// Layout only; parameter values are discarded.
    pub fn layout(cfg: &UNetConfig) -> Self {
        Self::build::<f32>(cfg, 0).0
    }

    pub fn arch_hash<T: Real>(&self, ps: &ParamSet<T>) -> String {
        ps.arch_hash(&self.cfg.describe())
    }

    pub fn encode<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        steps: &[usize],
        cond: Option<&Tensor<T>>,
    ) -> (EncOut<T>, EncCache<T>) {
        assert_eq!(x.c, self.cfg.in_channels, "input channels");
        let m = self.cfg.size_multiple();
        assert!(x.h.is_multiple_of(m) && x.w.is_multiple_of(m), "input size must be a multiple of {m}");
        let (te, t1, e_pre, emb) = match &self.emb {
            Some(layers) => {
                assert_eq!(steps.len(), x.n, "one timestep per sample");
                let cond = cond.expect("conditioned network needs a condition");
                let te = sinusoidal_embedding::<T>(steps, layers.time_dim);
                let t1 = layers.time1.forward(ps, &te);
                let mut e_pre = layers.time2.forward(ps, &silu(&t1));
                e_pre.add_assign(&layers.cond.forward(ps, cond));
                let emb = silu(&e_pre);
                (Some(te), Some(t1), Some(e_pre), Some(emb))
            }
            None => (None, None, None, None),
        };
        let xp = space_to_depth(x, self.cfg.patch);
        let h0 = self.conv_in.forward(ps, &xp);
        let e = emb.as_ref();
        let (s1, c_enc1) = self.enc1.forward(ps, &h0, e);
        let d1 = self.down1.forward(ps, &s1);
        let (s2, c_enc2) = self.enc2.forward(ps, &d1, e);
        let d2 = self.down2.forward(ps, &s2);
        let (s3, c_enc3) = self.enc3.forward(ps, &d2, e);
        let (mid, c_mid) = self.mid.forward(ps, &s3, e);
        let out = EncOut { emb: emb.clone(), s1: s1.clone(), s2: s2.clone(), s3, mid };
        let cache = EncCache {
            te,
            t1,
            e_pre,
            cond: cond.cloned(),
            xp,
            emb,
            c_enc1,
            s1,
            c_enc2,
            s2,
            c_enc3,
            c_mid,
        };
        (out, cache)
    }

    pub fn decode<T: Real>(&self, ps: &ParamSet<T>, f: &EncOut<T>) -> (Tensor<T>, DecCache<T>) {
        let e = f.emb.as_ref();
        let h = f.mid.add(&f.s3);
        let (h3, c_dec3) = self.dec3.forward(ps, &h, e);
        let up_h3 = upsample2x(&h3);
        let mut h = self.up2.forward(ps, &up_h3);
        h.add_assign(&f.s2);
        let (h2, c_dec2) = self.dec2.forward(ps, &h, e);
        let up_h2 = upsample2x(&h2);
        let mut h = self.up1.forward(ps, &up_h2);
        h.add_assign(&f.s1);
        let (h1, c_dec1) = self.dec1.forward(ps, &h, e);
        let a_out = silu(&h1);
        let o = self.conv_out.forward(ps, &a_out);
        let out = depth_to_space(&o, self.cfg.patch);
        (out, DecCache { c_dec3, up_h3, c_dec2, up_h2, c_dec1, h1, a_out })
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        steps: &[usize],
        cond: Option<&Tensor<T>>,
    ) -> Tensor<T> {
        let (f, _) = self.encode(ps, x, steps, cond);
        self.decode(ps, &f).0
    }

    /// Backward through the decoder. With `grads = None` the decoder weights
    /// receive nothing; gradients still flow to the encoder features.
    pub fn decode_backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        cache: &DecCache<T>,
        f: &EncOut<T>,
        dout: &Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> EncGrads<T> {
        let e = f.emb.as_ref();
        let mut d_emb = f.emb.as_ref().map(|t| Tensor::zeros(t.c, t.n, 1, 1));
        let d_o = space_to_depth(dout, self.cfg.patch);
        let da = self
            .conv_out
            .backward(ps, &cache.a_out, &d_o, grads.as_deref_mut(), true)
            .expect("dx");
        let dh1 = silu_grad(&cache.h1, &da);
        let d_in1 = self.dec1.backward(ps, &cache.c_dec1, &dh1, e, d_emb.as_mut(), grads.as_deref_mut());
        let d_up2 = self.up1.backward(ps, &cache.up_h2, &d_in1, grads.as_deref_mut(), true).expect("dx");
        let dh2 = upsample2x_backward(&d_up2);
        let d_in2 = self.dec2.backward(ps, &cache.c_dec2, &dh2, e, d_emb.as_mut(), grads.as_deref_mut());
        let d_up3 = self.up2.backward(ps, &cache.up_h3, &d_in2, grads.as_deref_mut(), true).expect("dx");
        let dh3 = upsample2x_backward(&d_up3);
        let d_in3 = self.dec3.backward(ps, &cache.c_dec3, &dh3, e, d_emb.as_mut(), grads);
        EncGrads { emb: d_emb, s1: d_in1, s2: d_in2, s3: d_in3.clone(), mid: d_in3 }
    }

    /// Backward through the encoder; returns the input gradient when `need_dx`.
    pub fn encode_backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        cache: &EncCache<T>,
        g: EncGrads<T>,
        mut grads: Option<&mut ParamSet<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let e = cache.emb.as_ref();
        let mut d_emb = g.emb.or_else(|| cache.emb.as_ref().map(|t| Tensor::zeros(t.c, t.n, 1, 1)));
        let mut d_s3 = g.s3;
        d_s3.add_assign(&self.mid.backward(ps, &cache.c_mid, &g.mid, e, d_emb.as_mut(), grads.as_deref_mut()));
        let dd2 = self.enc3.backward(ps, &cache.c_enc3, &d_s3, e, d_emb.as_mut(), grads.as_deref_mut());
        let mut d_s2 = g.s2;
        d_s2.add_assign(&self.down2.backward(ps, &cache.s2, &dd2, grads.as_deref_mut(), true).expect("dx"));
        let dd1 = self.enc2.backward(ps, &cache.c_enc2, &d_s2, e, d_emb.as_mut(), grads.as_deref_mut());
        let mut d_s1 = g.s1;
        d_s1.add_assign(&self.down1.backward(ps, &cache.s1, &dd1, grads.as_deref_mut(), true).expect("dx"));
        let dh0 = self.enc1.backward(ps, &cache.c_enc1, &d_s1, e, d_emb.as_mut(), grads.as_deref_mut());
        let dxp = self.conv_in.backward(ps, &cache.xp, &dh0, grads.as_deref_mut(), need_dx);

        if let (Some(layers), Some(d_emb)) = (&self.emb, d_emb) {
            let e_pre = cache.e_pre.as_ref().expect("cached");
            let t1 = cache.t1.as_ref().expect("cached");
            let d_pre = silu_grad(e_pre, &d_emb);
            layers.cond.backward(ps, cache.cond.as_ref().expect("cached"), &d_pre, grads.as_deref_mut(), false);
            let da = layers
                .time2
                .backward(ps, &silu(t1), &d_pre, grads.as_deref_mut(), true)
                .expect("dx");
            let dt1 = silu_grad(t1, &da);
            layers.time1.backward(ps, cache.te.as_ref().expect("cached"), &dt1, grads, false);
        }
        dxp.map(|d| depth_to_space(&d, self.cfg.patch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> UNetConfig {
        UNetConfig { in_channels: 3, out_channels: 3, widths: [4, 6, 8], patch: 2, embedding: Some((8, 8, 5)) }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = small_cfg();
        let (net, ps) = UNet::build::<f32>(&cfg, 1);
        let x = Tensor::zeros(3, 2, 16, 16);
        let cond = Tensor::zeros(5, 2, 1, 1);
        let y = net.forward(&ps, &x, &[1, 2], Some(&cond));
        assert_eq!(y.shape(), [3, 2, 16, 16]);
        assert!(ps.params[..net.n_encoder_params].iter().all(|p| p.name.starts_with("enc.")));
        assert!(ps.params[net.n_encoder_params..].iter().all(|p| p.name.starts_with("dec.")));
    }

    /// Loss `0.5·Σ y²`, full backward vs central differences in f64.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_cfg();
        let (net, ps) = UNet::build::<f64>(&cfg, 7);
        let n = 2;
        let x = Tensor::from_vec(3, n, 8, 8, (0..3 * n * 64).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect());
        let cond = Tensor::vectors(5, n, (0..5 * n).map(|i| i as f64 * 0.1).collect());
        let steps = [3usize, 11];
        let loss = |ps: &ParamSet<f64>| -> f64 {
            net.forward(ps, &x, &steps, Some(&cond)).data.iter().map(|v| 0.5 * v * v).sum()
        };
        let (f, ec) = net.encode(&ps, &x, &steps, Some(&cond));
        let (y, dc) = net.decode(&ps, &f);
        let mut grads = ps.zeros_like();
        let g = net.decode_backward(&ps, &dc, &f, &y, Some(&mut grads));
        net.encode_backward(&ps, &ec, g, Some(&mut grads), false);

        let total = ps.num_scalars();
        for k in 0..40 {
            let (pid, off) = ps.locate((k * 7919) % total);
            let mut plus = ps.clone();
            plus.get_mut(pid)[off] += 1e-5;
            let mut minus = ps.clone();
            minus.get_mut(pid)[off] -= 1e-5;
            let numeric = (loss(&plus) - loss(&minus)) / 2e-5;
            let analytic = grads.get(pid)[off];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{} [{off}]: analytic {analytic} numeric {numeric}",
                ps.params[pid.0].name
            );
        }
    }
}
