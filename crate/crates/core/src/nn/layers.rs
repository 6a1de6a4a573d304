use super::params::{ParamId, ParamSet, ParamSetBuilder};
use super::tensor::{Real, Tensor};

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x · σ(x)`
pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// `dy ⊙ silu'(x)`
pub fn silu_grad<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert!(x.same_shape(dy));
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    x.with_data(data)
}

/// Sinusoidal timestep features, `[dim, N]`.
pub fn sinusoidal_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let n = steps.len();
    let mut out = Tensor::zeros(dim, n, 1, 1);
    for (b, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.data[i * n + b] = T::lit(arg.sin());
            out.data[(i + half) * n + b] = T::lit(arg.cos());
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, x.n, h2, w2);
    for cb in 0..x.c * x.n {
        let src = &x.data[cb * x.h * x.w..(cb + 1) * x.h * x.w];
        let dst = &mut out.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor::zeros(dy.c, dy.n, h, w);
    for cb in 0..dy.c * dy.n {
        let src = &dy.data[cb * dy.h * dy.w..(cb + 1) * dy.h * dy.w];
        let dst = &mut out.data[cb * h * w..(cb + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}

/// `[C, N, H, W] → [C·p², N, H/p, W/p]`; channel `c·p² + dy·p + dx`.
pub fn space_to_depth<T: Real>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    if p == 1 {
        return x.clone();
    }
    assert!(x.h.is_multiple_of(p) && x.w.is_multiple_of(p), "spatial size not divisible by patch");
    let (h, w) = (x.h / p, x.w / p);
    let mut out = Tensor::zeros(x.c * p * p, x.n, h, w);
    for c in 0..x.c {
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let oc = c * p * p + (y % p) * p + xx % p;
                    let o = out.idx(oc, b, y / p, xx / p);
                    out.data[o] = x.data[x.idx(c, b, y, xx)];
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Real>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    if p == 1 {
        return x.clone();
    }
    assert!(x.c.is_multiple_of(p * p));
    let c_out = x.c / (p * p);
    let mut out = Tensor::zeros(c_out, x.n, x.h * p, x.w * p);
    for c in 0..c_out {
        for b in 0..x.n {
            for y in 0..out.h {
                for xx in 0..out.w {
                    let ic = c * p * p + (y % p) * p + xx % p;
                    let o = out.idx(c, b, y, xx);
                    out.data[o] = x.data[x.idx(ic, b, y / p, xx / p)];
                }
            }
        }
    }
    out
}

/// Square convolution with kernel 1 or 3, stride 1 or 2, zero padding `k/2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        b: &mut ParamSetBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = b.uniform(&format!("{name}.weight"), &[cout, cin, k, k], fan_in);
        let bias = b.uniform(&format!("{name}.bias"), &[cout], fan_in);
        Self { weight, bias, cin, cout, k, stride }
    }

    /// All-zero weights and bias.
    pub fn zero<T: Real>(b: &mut ParamSetBuilder<T>, name: &str, cin: usize, cout: usize) -> Self {
        let weight = b.zeros(&format!("{name}.weight"), &[cout, cin, 1, 1]);
        let bias = b.zeros(&format!("{name}.bias"), &[cout]);
        Self { weight, bias, cin, cout, k: 1, stride: 1 }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        ((h + 2 * pad - self.k) / self.stride + 1, (w + 2 * pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> Vec<T> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let npix = x.n * ho * wo;
        let k = self.k;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        let mut col = vec![T::zero(); self.cin * k * k * npix];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * npix..(row + 1) * npix];
                    for b in 0..x.n {
                        let src = &x.data[(ci * x.n + b) * x.h * x.w..(ci * x.n + b + 1) * x.h * x.w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let drow = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], n: usize, h: usize, w: usize) -> Tensor<T> {
        let (ho, wo) = self.out_hw(h, w);
        let npix = n * ho * wo;
        let k = self.k;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        let mut dx = Tensor::zeros(self.cin, n, h, w);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * npix..(row + 1) * npix];
                    for b in 0..n {
                        let dst = &mut dx.data[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &g) in srow.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let npix = x.n * ho * wo;
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(self.cout, x.n, ho, wo);
        let owned;
        let col: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x);
            &owned
        };
        T::gemm(self.cout, kk, npix, ps.get(self.weight), false, col, false, T::zero(), &mut out.data);
        let bias = ps.get(self.bias);
        for (co, &bv) in bias.iter().enumerate() {
            out.data[co * npix..(co + 1) * npix].iter_mut().for_each(|v| *v += bv);
        }
        out
    }

    /// Backward pass for input `x` and upstream gradient `dy`.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let npix = dy.n * dy.h * dy.w;
        let kk = self.cin * self.k * self.k;
        let owned;
        let col: Option<&[T]> = match (grads.is_some(), self.is_pointwise()) {
            (false, _) => None,
            (true, true) => Some(&x.data),
            (true, false) => {
                owned = self.im2col(x);
                Some(&owned)
            }
        };
        if let (Some(g), Some(col)) = (grads, col) {
            T::gemm(self.cout, npix, kk, &dy.data, false, col, true, T::one(), g.get_mut(self.weight));
            let gb = g.get_mut(self.bias);
            for (co, gv) in gb.iter_mut().enumerate() {
                *gv += dy.data[co * npix..(co + 1) * npix].iter().copied().sum::<T>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![T::zero(); kk * npix];
        T::gemm(kk, self.cout, npix, ps.get(self.weight), true, &dy.data, false, T::zero(), &mut dcol);
        if self.is_pointwise() {
            return Some(x.with_data(dcol));
        }
        Some(self.col2im(&dcol, x.n, x.h, x.w))
    }
}

/// Dense layer over `[in, N]` column vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamSetBuilder<T>, name: &str, din: usize, dout: usize) -> Self {
        let weight = b.uniform(&format!("{name}.weight"), &[dout, din], din);
        let bias = b.uniform(&format!("{name}.bias"), &[dout], din);
        Self { weight, bias, din, dout }
    }

    pub fn forward<T: Real>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.din, "linear input width");
        let n = x.n;
        let mut out = Tensor::zeros(self.dout, n, 1, 1);
        T::gemm(self.dout, self.din, n, ps.get(self.weight), false, &x.data, false, T::zero(), &mut out.data);
        for (o, &bv) in ps.get(self.bias).iter().enumerate() {
            out.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bv);
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = x.n;
        if let Some(g) = grads {
            T::gemm(self.dout, n, self.din, &dy.data, false, &x.data, true, T::one(), g.get_mut(self.weight));
            for (o, gv) in g.get_mut(self.bias).iter_mut().enumerate() {
                *gv += dy.data[o * n..(o + 1) * n].iter().copied().sum::<T>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(self.din, n, 1, 1);
        T::gemm(self.din, self.dout, n, ps.get(self.weight), true, &dy.data, false, T::zero(), &mut dx.data);
        Some(dx)
    }
}

/// Pre-activation residual block: `x + conv2(silu(film(conv1(silu(x)))))`.
///
/// When `film` is present the embedding modulates the hidden features as
/// `h · (1 + scale) + shift`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub film: Option<Linear>,
    pub channels: usize,
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ResCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    h1: Tensor<T>,
    film_out: Option<Tensor<T>>,
    h2: Tensor<T>,
    a2: Tensor<T>,
}

impl ResBlock {
    pub fn new<T: Real>(b: &mut ParamSetBuilder<T>, name: &str, channels: usize, emb_dim: Option<usize>) -> Self {
        let conv1 = Conv2d::new(b, &format!("{name}.conv1"), channels, channels, 3, 1);
        let film = emb_dim.map(|e| Linear::new(b, &format!("{name}.film"), e, 2 * channels));
        let conv2 = Conv2d::new(b, &format!("{name}.conv2"), channels, channels, 3, 1);
        Self { conv1, conv2, film, channels }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        emb: Option<&Tensor<T>>,
    ) -> (Tensor<T>, ResCache<T>) {
        let a1 = silu(x);
        let h1 = self.conv1.forward(ps, &a1);
        let (h2, film_out) = match (&self.film, emb) {
            (Some(film), Some(e)) => {
                let fo = film.forward(ps, e);
                let mut h2 = h1.clone();
                let plane = h1.plane();
                let (c, n) = (h1.c, h1.n);
                for ci in 0..c {
                    for b in 0..n {
                        let scale = T::one() + fo.data[ci * n + b];
                        let shift = fo.data[(c + ci) * n + b];
                        let base = (ci * n + b) * plane;
                        h2.data[base..base + plane].iter_mut().for_each(|v| *v = *v * scale + shift);
                    }
                }
                (h2, Some(fo))
            }
            (None, _) => (h1.clone(), None),
            (Some(_), None) => panic!("resblock with modulation needs an embedding"),
        };
        let a2 = silu(&h2);
        let h3 = self.conv2.forward(ps, &a2);
        let out = x.add(&h3);
        (out, ResCache { x: x.clone(), a1, h1, film_out, h2, a2 })
    }

    /// Returns `dx`; embedding gradients are accumulated into `d_emb`.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamSet<T>,
        cache: &ResCache<T>,
        dout: &Tensor<T>,
        emb: Option<&Tensor<T>>,
        d_emb: Option<&mut Tensor<T>>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let da2 = self
            .conv2
            .backward(ps, &cache.a2, dout, grads.as_deref_mut(), true)
            .expect("dx requested");
        let dh2 = silu_grad(&cache.h2, &da2);
        let dh1 = match (&self.film, &cache.film_out) {
            (Some(film), Some(fo)) => {
                let (c, n, plane) = (dh2.c, dh2.n, dh2.plane());
                let mut dh1 = dh2.clone();
                let mut dfo = Tensor::zeros(2 * c, n, 1, 1);
                for ci in 0..c {
                    for b in 0..n {
                        let base = (ci * n + b) * plane;
                        let g = &dh2.data[base..base + plane];
                        let h = &cache.h1.data[base..base + plane];
                        let mut ds = T::zero();
                        let mut dsh = T::zero();
                        for (&gv, &hv) in g.iter().zip(h) {
                            ds += gv * hv;
                            dsh += gv;
                        }
                        dfo.data[ci * n + b] = ds;
                        dfo.data[(c + ci) * n + b] = dsh;
                        let scale = T::one() + fo.data[ci * n + b];
                        dh1.data[base..base + plane].iter_mut().for_each(|v| *v *= scale);
                    }
                }
                let e = emb.expect("embedding");
                let need = d_emb.is_some();
                if let Some(de) = film.backward(ps, e, &dfo, grads.as_deref_mut(), need) {
                    d_emb.expect("checked").add_assign(&de);
                }
                dh1
            }
            _ => dh2,
        };
        let da1 = self
            .conv1
            .backward(ps, &cache.a1, &dh1, grads, true)
            .expect("dx requested");
        let mut dx = silu_grad(&cache.x, &da1);
        dx.add_assign(dout);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], bias: &[f64], cout: usize, k: usize, s: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let ho = (x.h + 2 * (k / 2) - k) / s + 1;
        let wo = (x.w + 2 * (k / 2) - k) / s + 1;
        let mut out = Tensor::zeros(cout, x.n, ho, wo);
        for co in 0..cout {
            for b in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s) as isize + ky as isize - pad;
                                    let ix = (ox * s) as isize + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += w[((co * x.c + ci) * k + ky) * k + kx]
                                            * x.data[x.idx(ci, b, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        let o = out.idx(co, b, oy, ox);
                        out.data[o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let mut b = ParamSetBuilder::<f64>::new(3);
            let conv = Conv2d::new(&mut b, "c", 2, 3, k, s);
            let ps = b.finish();
            let x = Tensor::from_vec(2, 2, 6, 6, (0..144).map(|i| ((i * 7) % 11) as f64 - 5.0).collect());
            let got = conv.forward(&ps, &x);
            let want = naive_conv(&x, ps.get(conv.weight), ps.get(conv.bias), 3, k, s);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::<f32>::from_vec(3, 2, 4, 4, (0..96).map(|i| i as f32).collect());
        assert_eq!(depth_to_space(&space_to_depth(&x, 2), 2), x);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), y> == <x, up^T(y)>
        let x = Tensor::<f64>::from_vec(2, 1, 2, 3, (0..12).map(|i| i as f64 * 0.3).collect());
        let y = Tensor::<f64>::from_vec(2, 1, 4, 6, (0..48).map(|i| (i as f64).cos()).collect());
        let lhs: f64 = upsample2x(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2x_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_has_unit_pairs() {
        let e = sinusoidal_embedding::<f64>(&[0, 17, 399], 16);
        for b in 0..3 {
            for i in 0..8 {
                let s = e.data[i * 3 + b];
                let c = e.data[(i + 8) * 3 + b];
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}
