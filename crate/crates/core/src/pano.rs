//! Equirectangular panorama to perspective crops.
//!
//! Angles follow the ingestion convention: `pitch` 90° looks at the
//! horizon, so the camera elevation is `90 - pitch`. World axes are
//! X east, Y up, Z north; heading 0 looks north and increases clockwise
//! seen from above.
//!
//! A panorama pixel column `u` of width `W` sits at longitude
//! `360·(u + 0.5)/W - 180`; row `v` of height `H` at latitude
//! `90 - 180·(v + 0.5)/H`.
//!
//! [`explode_panorama`] renders four 120° views whose native width is a
//! third of the panorama width and whose height is half that, so each
//! left/right half is square. The vertical field of view of a view is
//! therefore `2·atan(tan(60°)/2) ≈ 81.8°`, and each square half spans 60°
//! horizontally before it is resized to 640×640.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

pub const EXPLODE_HEADINGS: [u32; 4] = [0, 90, 180, 270];
pub const EXPLODE_FOV: f64 = 120.0;
pub const HORIZONTAL_PITCH: f64 = 90.0;
pub const CROP_SIZE: u32 = 640;

#[derive(Debug, Error)]
pub enum PanoError {
    #[error("panorama must be 2:1, got {width}x{height}")]
    Dimensions { width: u32, height: u32 },
    #[error("horizontal field of view {0} must lie strictly between 0 and 180 degrees")]
    Fov(f64),
    #[error("output size must be at least 1x1")]
    OutputSize,
    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub heading: f64,
    pub pitch: f64,
    pub h_fov: f64,
    pub out_width: u32,
    pub out_height: u32,
}

impl CameraView {
    pub fn validate(&self) -> Result<(), PanoError> {
        if !(self.h_fov > 0.0 && self.h_fov < 180.0) {
            return Err(PanoError::Fov(self.h_fov));
        }
        if self.out_width == 0 || self.out_height == 0 {
            return Err(PanoError::OutputSize);
        }
        Ok(())
    }

    /// Half-width of the image plane at unit focal distance.
    pub fn half_extent(&self) -> f64 {
        (self.h_fov.to_radians() / 2.0).tan()
    }

    fn basis(&self) -> [[f64; 3]; 3] {
        let th = self.heading.to_radians();
        let e = (90.0 - self.pitch).to_radians();
        let f = [e.cos() * th.sin(), e.sin(), e.cos() * th.cos()];
        let r = [th.cos(), 0.0, -th.sin()];
        let u = [-e.sin() * th.sin(), e.cos(), -e.sin() * th.cos()];
        [f, r, u]
    }

    /// (longitude, latitude) in degrees seen by output pixel centre `(i, j)`.
    pub fn pixel_ray(&self, i: f64, j: f64) -> (f64, f64) {
        let t = self.half_extent();
        let (w, h) = (self.out_width as f64, self.out_height as f64);
        let x = (2.0 * (i + 0.5) / w - 1.0) * t;
        let y = (1.0 - 2.0 * (j + 0.5) / h) * t * h / w;
        let [f, r, u] = self.basis();
        let d: [f64; 3] = std::array::from_fn(|k| f[k] + x * r[k] + y * u[k]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let lon = d[0].atan2(d[2]).to_degrees();
        let lat = (d[1] / n).clamp(-1.0, 1.0).asin().to_degrees();
        (lon, lat)
    }

    /// Inverse of [`pixel_ray`](Self::pixel_ray): output pixel coordinates
    /// of a direction, or `None` when it lies behind the camera.
    pub fn ray_pixel(&self, lon: f64, lat: f64) -> Option<(f64, f64)> {
        let (lo, la) = (lon.to_radians(), lat.to_radians());
        let d = [la.cos() * lo.sin(), la.sin(), la.cos() * lo.cos()];
        let [f, r, u] = self.basis();
        let dot = |a: [f64; 3]| a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        let df = dot(f);
        if df <= 1e-12 {
            return None;
        }
        let (x, y) = (dot(r) / df, dot(u) / df);
        let t = self.half_extent();
        let (w, h) = (self.out_width as f64, self.out_height as f64);
        let i = (x / t + 1.0) * w / 2.0 - 0.5;
        let j = (1.0 - y * w / (t * h)) * h / 2.0 - 0.5;
        Some((i, j))
    }
}

/// Pano pixel coordinates (continuous, pixel centres at integers).
pub fn lonlat_to_pano(lon: f64, lat: f64, width: u32, height: u32) -> (f64, f64) {
    ((lon + 180.0) / 360.0 * width as f64 - 0.5, (90.0 - lat) / 180.0 * height as f64 - 0.5)
}

fn check_pano(pano: &RgbImage) -> Result<(), PanoError> {
    let (w, h) = pano.dimensions();
    if h == 0 || w != 2 * h {
        return Err(PanoError::Dimensions { width: w, height: h });
    }
    Ok(())
}

/// Bilinear sample wrapping in longitude and clamping in latitude.
pub fn sample_bilinear(pano: &RgbImage, u: f64, v: f64) -> [f64; 3] {
    let (w, h) = (pano.width() as i64, pano.height() as i64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as i64, v0 as i64);
    let px = |x: i64, y: i64| pano.get_pixel(x.rem_euclid(w) as u32, y.clamp(0, h - 1) as u32).0;
    let mut out = [0.0; 3];
    for (dx, dy, wgt) in [(0, 0, (1.0 - fu) * (1.0 - fv)), (1, 0, fu * (1.0 - fv)), (0, 1, (1.0 - fu) * fv), (1, 1, fu * fv)] {
        if wgt == 0.0 {
            continue;
        }
        let p = px(u0 + dx, v0 + dy);
        for c in 0..3 {
            out[c] += wgt * p[c] as f64;
        }
    }
    out
}

fn to_rgb(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

pub fn project_perspective(pano: &RgbImage, cam: &CameraView) -> Result<RgbImage, PanoError> {
    check_pano(pano)?;
    cam.validate()?;
    let mut out = RgbImage::new(cam.out_width, cam.out_height);
    for j in 0..cam.out_height {
        for i in 0..cam.out_width {
            let (lon, lat) = cam.pixel_ray(i as f64, j as f64);
            let (u, v) = lonlat_to_pano(lon, lat, pano.width(), pano.height());
            out.put_pixel(i, j, to_rgb(sample_bilinear(pano, u, v)));
        }
    }
    Ok(out)
}

/// Separable resize: area averaging along axes that shrink, bilinear along
/// axes that grow.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(f64::from)).collect();
    let horiz = resample_axis(&src, w, h, width as usize, true);
    let both = resample_axis(&horiz, width as usize, h, height as usize, false);
    let mut out = RgbImage::new(width, height);
    for (i, p) in out.pixels_mut().enumerate() {
        *p = to_rgb(both[i]);
    }
    out
}

/// Per-output-sample (source index, weight) lists for one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            if n_out <= n_in {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut ws = Vec::new();
                let mut k = a.floor() as usize;
                while (k as f64) < b && k < n_in {
                    let cover = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
                    if cover > 0.0 {
                        ws.push((k, cover / scale));
                    }
                    k += 1;
                }
                ws
            } else {
                let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let k = c.floor() as usize;
                let f = c - k as f64;
                if k + 1 < n_in && f > 0.0 {
                    vec![(k, 1.0 - f), (k + 1, f)]
                } else {
                    vec![(k, 1.0)]
                }
            }
        })
        .collect()
}

fn resample_axis(src: &[[f64; 3]], w: usize, h: usize, n_out: usize, horizontal: bool) -> Vec<[f64; 3]> {
    let (n_in, lines) = if horizontal { (w, h) } else { (h, w) };
    let weights = axis_weights(n_in, n_out);
    let (ow, oh) = if horizontal { (n_out, h) } else { (w, n_out) };
    let mut out = vec![[0.0; 3]; ow * oh];
    for line in 0..lines {
        for (o, ws) in weights.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(k, wt) in ws {
                let s = if horizontal { src[line * w + k] } else { src[k * w + line] };
                for c in 0..3 {
                    acc[c] += wt * s[c];
                }
            }
            let idx = if horizontal { line * ow + o } else { o * ow + line };
            out[idx] = acc;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Left,
    Right,
}

impl Half {
    pub fn name(self) -> &'static str {
        match self {
            Half::Left => "left",
            Half::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub heading: u32,
    pub half: Half,
    pub image: RgbImage,
}

impl Crop {
    pub fn file_name(&self, pano_id: &str) -> String {
        format!("{pano_id}_{}_{}.png", self.heading, self.half.name())
    }
}

/// Native (pre-resize) view size for a panorama of the given width.
pub fn native_view_size(pano_width: u32) -> (u32, u32) {
    let mut w = ((pano_width as f64) / 3.0).round() as u32;
    w = w.max(2) & !1; // even, so halves are equal
    (w, w / 2)
}

/// Eight crops, heading-major then left/right, each resized to `size`×`size`.
pub fn explode_panorama_sized(pano: &RgbImage, size: u32) -> Result<Vec<Crop>, PanoError> {
    check_pano(pano)?;
    if size == 0 {
        return Err(PanoError::OutputSize);
    }
    let (vw, vh) = native_view_size(pano.width());
    let mut crops = Vec::with_capacity(8);
    for heading in EXPLODE_HEADINGS {
        let cam = CameraView { heading: heading as f64, pitch: HORIZONTAL_PITCH, h_fov: EXPLODE_FOV, out_width: vw, out_height: vh };
        let view = project_perspective(pano, &cam)?;
        for (half, x0) in [(Half::Left, 0), (Half::Right, vw / 2)] {
            let part = image::imageops::crop_imm(&view, x0, 0, vw / 2, vh).to_image();
            crops.push(Crop { heading, half, image: resize(&part, size, size) });
        }
    }
    Ok(crops)
}

pub fn explode_panorama(pano: &RgbImage) -> Result<Vec<Crop>, PanoError> {
    explode_panorama_sized(pano, CROP_SIZE)
}

pub fn load_panorama(path: &Path) -> Result<RgbImage, PanoError> {
    let img = image::open(path)
        .map_err(|e| PanoError::Image { path: path.display().to_string(), message: e.to_string() })?
        .to_rgb8();
    check_pano(&img)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(heading: f64, w: u32, h: u32) -> CameraView {
        CameraView { heading, pitch: 90.0, h_fov: 120.0, out_width: w, out_height: h }
    }

    #[test]
    fn centre_pixel_looks_at_heading() {
        let c = cam(0.0, 65, 33);
        let (lon, lat) = c.pixel_ray(32.0, 16.0);
        assert!(lon.abs() < 1e-9 && lat.abs() < 1e-9);
        let (lon, lat) = cam(90.0, 65, 33).pixel_ray(32.0, 16.0);
        assert!((lon - 90.0).abs() < 1e-9 && lat.abs() < 1e-9);
    }

    #[test]
    fn half_extent_for_120() {
        assert!((cam(0.0, 8, 8).half_extent() - 3f64.sqrt()).abs() < 1e-12);
        // the edge of the image plane is 60 degrees off axis
        let c = cam(0.0, 1000, 500);
        let (lon, _) = c.pixel_ray(-0.5, 249.5);
        assert!((lon + 60.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pano = RgbImage::new(30, 20);
        assert!(matches!(project_perspective(&pano, &cam(0.0, 4, 4)), Err(PanoError::Dimensions { .. })));
        let pano = RgbImage::new(40, 20);
        let mut c = cam(0.0, 4, 4);
        c.h_fov = 180.0;
        assert!(matches!(project_perspective(&pano, &c), Err(PanoError::Fov(_))));
    }

    #[test]
    fn ray_round_trip() {
        let c = CameraView { heading: 37.0, pitch: 80.0, h_fov: 100.0, out_width: 64, out_height: 40 };
        for j in 0..40 {
            for i in 0..64 {
                let (lon, lat) = c.pixel_ray(i as f64, j as f64);
                let (pi, pj) = c.ray_pixel(lon, lat).unwrap();
                assert!((pi - i as f64).hypot(pj - j as f64) < 1e-6);
            }
        }
    }

    #[test]
    fn resize_preserves_constant_and_mean() {
        let img = RgbImage::from_pixel(7, 5, Rgb([10, 20, 30]));
        assert!(resize(&img, 3, 11).pixels().all(|p| p.0 == [10, 20, 30]));
        let img = RgbImage::from_fn(8, 8, |x, _| Rgb([if x < 4 { 0 } else { 200 }; 3]));
        let small = resize(&img, 4, 4);
        assert_eq!(small.get_pixel(0, 0).0, [0; 3]);
        assert_eq!(small.get_pixel(3, 0).0, [200; 3]);
    }
}
