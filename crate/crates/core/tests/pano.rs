use image::{Rgb, RgbImage};

use streetscape::pano::{explode_panorama_sized, lonlat_to_pano, project_perspective, CameraView, PanoError};

fn view(heading: f64, w: u32, h: u32) -> CameraView {
    CameraView { heading, pitch: 90.0, h_fov: 120.0, out_width: w, out_height: h }
}

#[test]
fn half_width_for_120_degrees() {
    let v = view(0.0, 64, 32);
    assert!((v.half_extent() - 60f64.to_radians().tan()).abs() < 1e-12);
    assert!((v.half_extent() - 1.7321).abs() < 1e-4);
}

#[test]
fn red_column_lands_at_centre() {
    let (w, h) = (720u32, 360u32);
    // column whose centre is longitude 90
    let (u, _) = lonlat_to_pano(90.0, 0.0, w, h);
    let col = u.round() as u32;
    let pano = RgbImage::from_fn(w, h, |x, _| if x == col { Rgb([255, 0, 0]) } else { Rgb([0, 0, 0]) });
    let out = project_perspective(&pano, &view(90.0, 101, 51)).unwrap();
    let row = 25;
    let reddest = (0..out.width()).max_by_key(|&x| out.get_pixel(x, row)[0]).unwrap();
    assert!((reddest as i64 - 50).abs() <= 1, "red at column {reddest}");
}

#[test]
fn constant_pano_gives_constant_crops() {
    let pano = RgbImage::from_pixel(400, 200, Rgb([12, 200, 77]));
    let crops = explode_panorama_sized(&pano, 48).unwrap();
    assert_eq!(crops.len(), 8);
    for c in &crops {
        assert!(c.image.pixels().all(|p| *p == Rgb([12, 200, 77])));
    }
}

#[test]
fn order_is_heading_major_then_halves() {
    let pano = RgbImage::from_pixel(400, 200, Rgb([1, 2, 3]));
    let names: Vec<String> = explode_panorama_sized(&pano, 16).unwrap().iter().map(|c| c.file_name("p")).collect();
    assert_eq!(
        names,
        ["p_0_left.png", "p_0_right.png", "p_90_left.png", "p_90_right.png", "p_180_left.png", "p_180_right.png", "p_270_left.png", "p_270_right.png"]
    );
}

#[test]
fn bad_inputs_are_rejected() {
    let square = RgbImage::new(100, 100);
    assert!(matches!(project_perspective(&square, &view(0.0, 8, 8)), Err(PanoError::Dimensions { .. })));
    let pano = RgbImage::new(200, 100);
    let wide = CameraView { h_fov: 180.0, ..view(0.0, 8, 8) };
    assert!(project_perspective(&pano, &wide).is_err());
}

#[test]
fn view_is_continuous_across_the_seam() {
    // a smooth pano wrapped at 0/360 degrees: looking at heading 180 sees the seam
    let (w, h) = (360u32, 180u32);
    let pano = RgbImage::from_fn(w, h, |x, _| {
        let lon = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
        Rgb([(127.5 + 120.0 * lon.cos()) as u8, 0, 0])
    });
    let out = project_perspective(&pano, &view(180.0, 64, 32)).unwrap();
    for x in 1..out.width() {
        let (a, b) = (out.get_pixel(x - 1, 16)[0] as i32, out.get_pixel(x, 16)[0] as i32);
        assert!((a - b).abs() <= 12, "jump at column {x}: {a} -> {b}");
    }
}
