//! Minimal raster plots for reports: intended-vs-realised scatter panels
//! and per-step density curves. No text is rendered; axis ranges are fixed
//! and documented on the callers.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

pub const PANEL: u32 = 200;
const MARGIN: u32 = 10;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Distinct colours for series, cycled.
pub const SERIES: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

struct Frame {
    x0: f32,
    y0: f32,
    size: f32,
}

impl Frame {
    fn at(col: u32, row: u32) -> Self {
        let cell = PANEL + 2 * MARGIN;
        Self { x0: (col * cell + MARGIN) as f32, y0: (row * cell + MARGIN) as f32, size: PANEL as f32 }
    }

    /// Maps unit coordinates (origin bottom-left) to pixels.
    fn px(&self, u: f64, v: f64) -> (f32, f32) {
        let u = u.clamp(0.0, 1.0) as f32;
        let v = v.clamp(0.0, 1.0) as f32;
        (self.x0 + u * self.size, self.y0 + (1.0 - v) * self.size)
    }

    fn draw_axes(&self, img: &mut RgbImage) {
        for k in 1..4 {
            let f = k as f64 / 4.0;
            draw_line_segment_mut(img, self.px(f, 0.0), self.px(f, 1.0), GRID);
            draw_line_segment_mut(img, self.px(0.0, f), self.px(1.0, f), GRID);
        }
        let r = Rect::at(self.x0 as i32, self.y0 as i32).of_size(PANEL + 1, PANEL + 1);
        draw_hollow_rect_mut(img, r, AXIS);
    }
}

fn canvas(cols: u32, rows: u32) -> RgbImage {
    let cell = PANEL + 2 * MARGIN;
    RgbImage::from_pixel(cols.max(1) * cell, rows.max(1) * cell, BG)
}

/// One panel per entry; both axes span `[0, 100]` percent and the diagonal
/// marks perfect agreement.
pub fn scatter_panels(panels: &[(&str, Vec<(f64, f64)>)]) -> RgbImage {
    let cols = (panels.len() as u32).min(4);
    let rows = (panels.len() as u32).div_ceil(4);
    let mut img = canvas(cols, rows);
    for (i, (_, points)) in panels.iter().enumerate() {
        let f = Frame::at(i as u32 % 4, i as u32 / 4);
        f.draw_axes(&mut img);
        draw_line_segment_mut(&mut img, f.px(0.0, 0.0), f.px(1.0, 1.0), Rgb([200, 60, 60]));
        for &(x, y) in points {
            let (px, py) = f.px(x / 100.0, y / 100.0);
            draw_filled_circle_mut(&mut img, (px as i32, py as i32), 2, SERIES[0]);
        }
    }
    img
}

/// Gaussian kernel density of `values` on `[0, 100]`, Silverman bandwidth
/// with a 1 pp floor.
pub fn density(values: &[f64], grid: usize) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; grid];
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let h = (1.06 * sd * n.powf(-0.2)).max(1.0);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..grid)
        .map(|k| {
            let x = 100.0 * k as f64 / (grid - 1) as f64;
            norm * values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>()
        })
        .collect()
}

/// One panel per element; each series is a density curve over `[0, 100]`
/// with the vertical axis scaled to the tallest curve in the panel.
pub fn density_panels(panels: &[(&str, Vec<Vec<f64>>)]) -> RgbImage {
    const GRID_N: usize = 101;
    let cols = (panels.len() as u32).min(4);
    let rows = (panels.len() as u32).div_ceil(4);
    let mut img = canvas(cols, rows);
    for (i, (_, series)) in panels.iter().enumerate() {
        let f = Frame::at(i as u32 % 4, i as u32 / 4);
        f.draw_axes(&mut img);
        let curves: Vec<Vec<f64>> = series.iter().map(|s| density(s, GRID_N)).collect();
        let top = curves.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
        for (s, curve) in curves.iter().enumerate() {
            let colour = SERIES[s % SERIES.len()];
            for k in 1..GRID_N {
                let a = f.px((k - 1) as f64 / (GRID_N - 1) as f64, curve[k - 1] / top);
                let b = f.px(k as f64 / (GRID_N - 1) as f64, curve[k] / top);
                draw_line_segment_mut(&mut img, a, b, colour);
            }
        }
    }
    img
}
