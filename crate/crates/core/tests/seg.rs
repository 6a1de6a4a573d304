use image::{Rgb, RgbImage};

use streetscape::seg::{count_objects, evaluate_segmenter, train_segmenter, SegSample, SegTrainConfig, Segmenter, SegmenterConfig};
use streetscape::taxonomy::{Class, LabelMap, Palette};

fn split_scene(id: usize, sky_rows: u32) -> SegSample {
    let (w, h) = (16u32, 16u32);
    let palette = Palette::standard();
    let sky = palette.entries[Class::Sky as usize].rgb;
    let road = palette.entries[Class::Road as usize].rgb;
    let image = RgbImage::from_fn(w, h, |_, y| if y < sky_rows { Rgb(sky) } else { Rgb(road) });
    let ids = (0..h).flat_map(|y| (0..w).map(move |_| if y < sky_rows { Class::Sky.id() } else { Class::Road.id() })).collect();
    SegSample { id: format!("s{id}"), image, labels: LabelMap::new(w as usize, h as usize, ids) }
}

fn cfg() -> SegmenterConfig {
    SegmenterConfig { widths: [4, 8, 8], patch: 2 }
}

#[test]
fn untrained_segmenter_is_near_chance() {
    let model = Segmenter::init(cfg(), 3);
    let data: Vec<SegSample> = (0..8).map(|i| split_scene(i, 4 + i as u32)).collect();
    let acc = evaluate_segmenter(&model, &data, 4).unwrap();
    assert!(acc.pixel_accuracy() < 0.9);
}

#[test]
fn short_training_learns_two_colour_scenes() {
    let mut model = Segmenter::init(cfg(), 3);
    let data: Vec<SegSample> = (0..16).map(|i| split_scene(i, 2 + (i % 12) as u32)).collect();
    let tc = SegTrainConfig { epochs: 40, batch_size: 8, lr: 1e-2, seed: 1, noise_aug: 0.0 };
    let log = train_segmenter(&mut model, &data, &tc, |_, _, _| {}).unwrap();
    assert!(log.epoch_losses.last() < log.epoch_losses.first());
    let acc = evaluate_segmenter(&model, &data, 8).unwrap();
    assert!(acc.pixel_accuracy() >= 0.95, "accuracy {}", acc.pixel_accuracy());
}

#[test]
fn wrong_sizes_are_rejected() {
    let model = Segmenter::init(cfg(), 3);
    assert!(model.segment(&RgbImage::new(15, 16)).is_err());
}

#[test]
fn blobs_below_min_area_are_not_counted() {
    let mut ids = vec![Class::Road.id(); 100];
    // one 3x3 person blob and one single pixel
    for y in 1..4 {
        for x in 1..4 {
            ids[y * 10 + x] = Class::Person.id();
        }
    }
    ids[88] = Class::Person.id();
    let map = LabelMap::new(10, 10, ids);
    assert_eq!(count_objects(&map, 6).persons, 1);
    assert_eq!(count_objects(&map, 1).persons, 2);
}
