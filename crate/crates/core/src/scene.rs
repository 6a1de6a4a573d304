//! Procedural streetscapes with exact class budgets.
//!
//! The renderer is constructive: every listed class is given a pixel budget
//! `round(pct · A / 100)` and claims exactly that many free pixels, lowest
//! score first. Score fields encode the layout (road wedge toward a
//! vanishing point, sidewalks flanking it, trees near the horizon, building
//! blocks above it, sky from the top) so targets are met to within a pixel
//! while the scene stays spatially coherent. Whatever is left is `other`.
//!
//! Vehicles and persons are placed as disjoint blobs separated by at least
//! one pixel so connected-component counting recovers the requested counts.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{build_prompt, ConditionSpec};
use crate::corpus::{assign_splits, Split};
use crate::seeds;
use crate::taxonomy::{label, CityStyle, Class, ClassPercents, LabelMap, ObjectCounts, Proportions, RoadMask};

pub const DEFAULT_RESOLUTION: usize = 64;
/// Smallest blob (in pixels at 64×64) that object counting treats as an object.
pub const MIN_OBJECT_AREA_64: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub style: CityStyle,
    pub targets: ClassPercents,
    pub counts: ObjectCounts,
    pub resolution: usize,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
    #[error("infeasible layout for {class}: {reason}")]
    Infeasible { class: String, reason: String },
}

fn infeasible(class: &str, reason: impl Into<String>) -> SceneError {
    SceneError::Infeasible { class: class.to_string(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub style: CityStyle,
    pub image: RgbImage,
    /// Extended label ids (vehicle sub-labels kept distinct).
    pub seg_map: LabelMap,
    pub road_mask: RoadMask,
    pub counts: ObjectCounts,
    pub prompt: String,
    pub proportions: Proportions,
}

impl SceneRecord {
    pub fn condition(&self) -> ConditionSpec {
        ConditionSpec { style: self.style, proportions: self.proportions.listed(), counts: self.counts }
    }
}

/// Minimum countable object area at a given resolution.
pub fn min_object_area(resolution: usize) -> usize {
    let s = resolution as f64 / 64.0;
    ((MIN_OBJECT_AREA_64 as f64 * s * s).round() as usize).max(2)
}

/// Vehicle footprint (width, height) in pixels.
pub fn vehicle_dims(kind: u8, resolution: usize) -> (usize, usize) {
    let s = resolution as f64 / 64.0;
    let (w, h) = match kind {
        label::CAR => (5.0, 3.0),
        label::BUS => (9.0, 4.0),
        label::BICYCLE => (3.0, 2.0),
        _ => panic!("not a vehicle label: {kind}"),
    };
    (((w * s).round() as usize).max(1), ((h * s).round() as usize).max(1))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let r = self.resolution;
        if r < 32 || !r.is_multiple_of(8) {
            return Err(SceneError::Invalid(format!("resolution {r} must be >= 32 and a multiple of 8")));
        }
        for c in Class::LISTED {
            let v = self.targets.get(c);
            if !v.is_finite() || !(0.0..=100.0).contains(&v) {
                return Err(SceneError::Invalid(format!("{} percent {v} outside [0, 100]", c.name())));
            }
        }
        let sum = self.targets.sum();
        if sum > 100.0 + 1e-9 {
            return Err(SceneError::Invalid(format!("listed percents sum to {sum:.2} > 100")));
        }
        Ok(())
    }
}

struct Canvas {
    r: usize,
    ids: Vec<u8>,
    claimed: Vec<bool>,
    /// Object pixels (vehicles and persons), used for the separation margin.
    object: Vec<bool>,
}

impl Canvas {
    fn new(r: usize) -> Self {
        Self { r, ids: vec![Class::Other.id(); r * r], claimed: vec![false; r * r], object: vec![false; r * r] }
    }

    fn set(&mut self, i: usize, id: u8, object: bool) {
        self.ids[i] = id;
        self.claimed[i] = true;
        self.object[i] |= object;
    }

    /// Claims `k` free pixels in ascending score order (ties by index).
    fn claim(&mut self, k: usize, id: u8, score: impl Fn(usize, usize) -> f32) {
        if k == 0 {
            return;
        }
        let r = self.r;
        let mut free: Vec<(f32, usize)> =
            (0..r * r).filter(|&i| !self.claimed[i]).map(|i| (score(i % r, i / r), i)).collect();
        assert!(free.len() >= k, "budget exceeds free pixels");
        free.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &free[..k] {
            self.set(i, id, false);
        }
    }

    /// True when no object pixel lies within one pixel (8-neighbourhood) of
    /// the rectangle and every rectangle pixel is free.
    fn rect_fits(&self, x0: usize, y0: usize, w: usize, h: usize) -> bool {
        let r = self.r;
        if x0 + w > r || y0 + h > r {
            return false;
        }
        for y in y0.saturating_sub(1)..(y0 + h + 1).min(r) {
            for x in x0.saturating_sub(1)..(x0 + w + 1).min(r) {
                let i = y * r + x;
                let inside = x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
                if self.object[i] || (inside && self.claimed[i]) {
                    return false;
                }
            }
        }
        true
    }

    fn near_object(&self, x: usize, y: usize) -> bool {
        let r = self.r;
        for yy in y.saturating_sub(1)..(y + 2).min(r) {
            for xx in x.saturating_sub(1)..(x + 2).min(r) {
                if self.object[yy * r + xx] {
                    return true;
                }
            }
        }
        false
    }
}

/// Picks uniformly among the `k` best-scored candidates.
fn pick_best<T: Copy>(mut cands: Vec<(f32, T)>, k: usize, rng: &mut ChaCha8Rng) -> Option<T> {
    if cands.is_empty() {
        return None;
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let top = k.min(cands.len());
    Some(cands[rng.random_range(0..top)].1)
}

struct Layout {
    r: usize,
    hz: usize,
    vx: f32,
    bx: f32,
}

impl Layout {
    fn centre(&self, y: usize) -> f32 {
        let span = (self.r - self.hz).max(1) as f32;
        self.vx + (self.bx - self.vx) * (y as f32 - self.hz as f32) / span
    }

    /// Lateral distance from the road axis normalised by perspective depth.
    fn road_score(&self, x: usize, y: usize) -> f32 {
        if y >= self.hz {
            (x as f32 + 0.5 - self.centre(y)).abs() / (y - self.hz + 1) as f32
        } else {
            1000.0 + ((self.hz - y) * self.r) as f32 + (x as f32 + 0.5 - self.vx).abs()
        }
    }
}

/// Distance (4-neighbour steps) from every pixel to the nearest pixel with `id`.
fn distance_to(ids: &[u8], r: usize, id: u8) -> Vec<u32> {
    let mut dist = vec![u32::MAX; r * r];
    let mut queue = std::collections::VecDeque::new();
    for (i, &v) in ids.iter().enumerate() {
        if v == id {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % r, i / r);
        let mut visit = |j: usize| {
            if dist[j] == u32::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < r {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - r);
        }
        if y + 1 < r {
            visit(i + r);
        }
    }
    dist
}

struct Block {
    x0: usize,
    x1: usize,
    height: f32,
    tone: usize,
}

pub fn synth_scene(spec: &SceneSpec) -> Result<SceneRecord, SceneError> {
    spec.validate()?;
    let r = spec.resolution;
    let area = r * r;
    let mut rng = seeds::rng(spec.seed, &[]);

    let mut budget = [0usize; 6];
    for (i, c) in Class::LISTED.iter().enumerate() {
        budget[i] = (spec.targets.get(*c) * area as f64 / 100.0).round() as usize;
    }
    while budget.iter().sum::<usize>() > area {
        let imax = (0..6).max_by_key(|&i| budget[i]).expect("six classes");
        budget[imax] -= 1;
    }
    let [k_road, k_side, k_build, k_sky, k_tree, k_person] = budget;
    let k_other = area - budget.iter().sum::<usize>();

    let counts = spec.counts;
    let vehicle_area = |kind: u8| {
        let (w, h) = vehicle_dims(kind, r);
        w * h
    };
    let mut used = 0usize;
    for (kind, n, name) in [
        (label::BUS, counts.buses, "bus"),
        (label::CAR, counts.cars, "car"),
        (label::BICYCLE, counts.bicycles, "bicycle"),
    ] {
        used += n as usize * vehicle_area(kind);
        if used > k_other {
            return Err(infeasible(
                name,
                format!("vehicles need {used} px but only {k_other} px remain outside the listed classes"),
            ));
        }
    }
    let min_area = min_object_area(r);
    if counts.persons == 0 && k_person > 0 {
        return Err(infeasible("person", "person pixels requested with a person count of 0"));
    }
    if counts.persons > 0 && k_person < counts.persons as usize * min_area {
        return Err(infeasible(
            "person",
            format!("{k_person} px cannot hold {} persons of at least {min_area} px", counts.persons),
        ));
    }

    // Horizon splits the frame between the upper classes and the ground.
    let upper = (k_sky + k_build) as f32 + 0.5 * k_tree as f32;
    let ground = (area as f32 - upper).max(0.0);
    let hz = if upper + ground > 0.0 { ((upper / (upper + ground)) * r as f32).round() as usize } else { r / 2 };
    let lay = Layout {
        r,
        hz: hz.min(r),
        vx: rng.random_range(0.3..0.7) * r as f32,
        bx: rng.random_range(0.15..0.85) * r as f32,
    };
    let mut cv = Canvas::new(r);

    // Buses and cars sit on the road axis.
    for (kind, n, name) in [(label::BUS, counts.buses, "bus"), (label::CAR, counts.cars, "car")] {
        let (w, h) = vehicle_dims(kind, r);
        for _ in 0..n {
            let mut cands = Vec::new();
            for y0 in 0..=r - h {
                for x0 in 0..=r - w {
                    if cv.rect_fits(x0, y0, w, h) {
                        let s = lay.road_score(x0 + w / 2, y0 + h / 2);
                        cands.push((s + rng.random::<f32>() * 0.05, (x0, y0)));
                    }
                }
            }
            let (x0, y0) = pick_best(cands, 12, &mut rng).ok_or_else(|| infeasible(name, "no free placement"))?;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    cv.set(y * r + x, kind, true);
                }
            }
        }
    }

    cv.claim(k_road, Class::Road.id(), |x, y| lay.road_score(x, y));

    // Persons and bicycles line the road edges.
    let road_dist = distance_to(&cv.ids, r, Class::Road.id());
    let edge_score = |x: usize, y: usize| {
        let d = road_dist[y * r + x];
        let d = if d == u32::MAX { r as f32 + lay.road_score(x, y).min(1000.0) } else { d as f32 };
        d + if y < lay.hz { r as f32 } else { 0.0 }
    };
    let (bw, bh) = vehicle_dims(label::BICYCLE, r);
    for _ in 0..counts.bicycles {
        let mut cands = Vec::new();
        for y0 in 0..=r - bh {
            for x0 in 0..=r - bw {
                if cv.rect_fits(x0, y0, bw, bh) {
                    cands.push((edge_score(x0 + bw / 2, y0 + bh / 2) + rng.random::<f32>() * 0.5, (x0, y0)));
                }
            }
        }
        let (x0, y0) = pick_best(cands, 12, &mut rng).ok_or_else(|| infeasible("bicycle", "no free placement"))?;
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                cv.set(y * r + x, label::BICYCLE, true);
            }
        }
    }

    let n_person = counts.persons as usize;
    for p in 0..n_person {
        let size = k_person / n_person + usize::from(p < k_person % n_person);
        place_person(&mut cv, size, &edge_score, &mut rng)?;
    }

    cv.claim(k_side, Class::Sidewalk.id(), |x, y| lay.road_score(x, y));

    // Trees: a few crowns near the horizon toward the sides.
    let n_trees = rng.random_range(2..=6);
    let crowns: Vec<(f32, f32, f32)> = (0..n_trees)
        .map(|_| {
            let side = if rng.random::<bool>() { rng.random_range(0.0..0.3) } else { rng.random_range(0.7..1.0) };
            let y = lay.hz as f32 + rng.random_range(-0.18..0.12) * r as f32;
            (side * r as f32, y, rng.random_range(0.08..0.2) * r as f32)
        })
        .collect();
    let jitter: Vec<f32> = (0..area).map(|_| rng.random::<f32>()).collect();
    cv.claim(k_tree, Class::Tree.id(), |x, y| {
        let d = crowns
            .iter()
            .map(|&(cx, cy, cr)| ((x as f32 + 0.5 - cx).hypot(y as f32 + 0.5 - cy)) / cr)
            .fold(f32::INFINITY, f32::min);
        d + 0.15 * jitter[y * r + x]
    });

    // Buildings: column blocks standing on the horizon.
    let s = r as f32 / 64.0;
    let (lo, hi) = match spec.style {
        CityStyle::Dense => (0.55, 1.0),
        CityStyle::Sprawl => (0.2, 0.5),
    };
    let mut blocks = Vec::new();
    let mut x0 = 0;
    while x0 < r {
        let w = ((rng.random_range(4..=12) as f32 * s).round() as usize).max(2);
        let x1 = (x0 + w).min(r);
        let xc = (x0 + x1) as f32 / 2.0;
        let near_vp = 0.6 + 0.4 * ((xc - lay.vx).abs() / (r as f32 / 2.0)).min(1.0);
        let height = (lay.hz as f32 * rng.random_range(lo..hi) * near_vp).max(1.0);
        blocks.push(Block { x0, x1, height, tone: rng.random_range(0..3) });
        x0 = x1;
    }
    let mut block_of = vec![0usize; r];
    for (bi, b) in blocks.iter().enumerate() {
        block_of[b.x0..b.x1].iter_mut().for_each(|v| *v = bi);
    }
    cv.claim(k_build, Class::Building.id(), |x, y| {
        if y < lay.hz {
            (lay.hz - y) as f32 / blocks[block_of[x]].height
        } else {
            2.0 + (y - lay.hz) as f32
        }
    });

    cv.claim(k_sky, Class::Sky.id(), |x, y| (y * r + x) as f32);

    let seg_map = LabelMap::new(r, r, cv.ids);
    let image = paint(&seg_map, spec.style, &blocks, &block_of, &mut rng);
    let proportions = Proportions::from_counts_2dp(&seg_map.class_counts());
    let condition = ConditionSpec { style: spec.style, proportions: proportions.listed(), counts };
    Ok(SceneRecord {
        style: spec.style,
        image,
        road_mask: seg_map.road_mask(),
        seg_map,
        counts,
        prompt: build_prompt(&condition),
        proportions,
    })
}

/// Grows one compact, upright person blob of exactly `size` pixels.
fn place_person(
    cv: &mut Canvas,
    size: usize,
    edge_score: &impl Fn(usize, usize) -> f32,
    rng: &mut ChaCha8Rng,
) -> Result<(), SceneError> {
    let r = cv.r;
    let mut seeds_tried = 0;
    let mut cands: Vec<(f32, usize)> = (0..r * r)
        .filter(|&i| !cv.claimed[i] && !cv.near_object(i % r, i / r))
        .map(|i| (edge_score(i % r, i / r) + rng.random::<f32>() * 0.5, i))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    while seeds_tried < 40 && !cands.is_empty() {
        let pick = rng.random_range(0..cands.len().min(12));
        let seed = cands.remove(pick).1;
        seeds_tried += 1;
        let (sx, sy) = ((seed % r) as i64, (seed / r) as i64);
        let mut blob = vec![seed];
        let mut in_blob = vec![false; r * r];
        in_blob[seed] = true;
        while blob.len() < size {
            let mut best: Option<(i64, usize)> = None;
            for &b in &blob {
                let (x, y) = (b % r, b / r);
                let mut consider = |nx: usize, ny: usize| {
                    let j = ny * r + nx;
                    if in_blob[j] || cv.claimed[j] || cv.near_object(nx, ny) {
                        return;
                    }
                    // taller than wide
                    let d = 2 * (nx as i64 - sx).abs() + (ny as i64 - sy).abs();
                    if best.is_none_or(|(bd, bj)| (d, j) < (bd, bj)) {
                        best = Some((d, j));
                    }
                };
                if x > 0 {
                    consider(x - 1, y);
                }
                if x + 1 < r {
                    consider(x + 1, y);
                }
                if y > 0 {
                    consider(x, y - 1);
                }
                if y + 1 < r {
                    consider(x, y + 1);
                }
            }
            match best {
                Some((_, j)) => {
                    in_blob[j] = true;
                    blob.push(j);
                }
                None => break,
            }
        }
        if blob.len() == size {
            for &i in &blob {
                cv.set(i, Class::Person.id(), true);
            }
            return Ok(());
        }
    }
    Err(infeasible("person", format!("could not grow a {size} px person blob")))
}

const DENSE_TONES: [[u8; 3]; 3] = [[150, 72, 56], [112, 112, 120], [84, 80, 92]];
const SPRAWL_TONES: [[u8; 3]; 3] = [[214, 196, 160], [226, 214, 190], [196, 170, 130]];

fn paint(map: &LabelMap, style: CityStyle, blocks: &[Block], block_of: &[usize], rng: &mut ChaCha8Rng) -> RgbImage {
    let r = map.width;
    let mut img = RgbImage::new(r as u32, r as u32);
    for y in 0..r {
        for x in 0..r {
            let base: [f32; 3] = match map.get(x, y) {
                0 => [88.0, 88.0, 92.0],
                1 => [168.0, 164.0, 158.0],
                2 => {
                    let b = &blocks[block_of[x]];
                    let (tone, window) = match style {
                        CityStyle::Dense => (DENSE_TONES[b.tone], x % 3 == 1 && y % 3 == 1),
                        CityStyle::Sprawl => (SPRAWL_TONES[b.tone], x % 4 == 1 && y % 4 == 2),
                    };
                    let k = if window { 0.6 } else { 1.0 };
                    tone.map(|c| c as f32 * k)
                }
                3 => {
                    let t = y as f32 / r as f32;
                    [96.0 + 90.0 * t, 150.0 + 62.0 * t, 224.0 + 14.0 * t]
                }
                4 => {
                    let v = ((x * 7 + y * 13) % 5) as f32 * 7.0 - 14.0;
                    [46.0 + v * 0.5, 112.0 + v, 44.0 + v * 0.5]
                }
                5 => [204.0, 52.0, 150.0],
                label::CAR => [36.0, 72.0, 196.0],
                label::BUS => [232.0, 184.0, 32.0],
                label::BICYCLE => [40.0, 196.0, 210.0],
                _ => [128.0, 112.0, 84.0],
            };
            let px = base.map(|c| (c + rng.random_range(-5.0..5.0)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Style-conditional scene sampler used for corpus synthesis.
pub fn sample_scene_spec(style: CityStyle, resolution: usize, rng: &mut ChaCha8Rng) -> SceneSpec {
    // road, sidewalk, building, sky, tree
    let means: [f64; 5] = match style {
        CityStyle::Dense => [20.0, 9.0, 34.0, 14.0, 7.0],
        CityStyle::Sprawl => [24.0, 5.0, 11.0, 28.0, 17.0],
    };
    let (max_cars, max_persons, max_bikes, p_bus) = match style {
        CityStyle::Dense => (4, 4, 2, 0.3),
        CityStyle::Sprawl => (3, 2, 1, 0.1),
    };
    let counts = ObjectCounts {
        cars: rng.random_range(0..=max_cars),
        persons: rng.random_range(0..=max_persons),
        bicycles: rng.random_range(0..=max_bikes),
        buses: u32::from(rng.random_bool(p_bus)),
    };
    let area = (resolution * resolution) as f64;
    let s2 = area / 4096.0;
    let person_px: f64 = (0..counts.persons).map(|_| (rng.random_range(8..=16) as f64 * s2).round()).sum();
    let vehicle_px: usize = [(label::CAR, counts.cars), (label::BUS, counts.buses), (label::BICYCLE, counts.bicycles)]
        .iter()
        .map(|&(k, n)| {
            let (w, h) = vehicle_dims(k, resolution);
            w * h * n as usize
        })
        .sum();
    let sigma: f64 = 0.35;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut listed: Vec<f64> =
        means.iter().map(|m| m * (sigma * normal.sample(rng) - sigma * sigma / 2.0).exp()).collect();
    let person_pct = 100.0 * person_px / area;
    let cap = 100.0 - 6.0 - person_pct - 100.0 * vehicle_px as f64 / area;
    let sum: f64 = listed.iter().sum();
    if sum > cap {
        listed.iter_mut().for_each(|v| *v *= cap / sum);
    }
    let q = |v: f64| (v * 100.0).floor() / 100.0;
    SceneSpec {
        style,
        targets: ClassPercents::from_array([
            q(listed[0]),
            q(listed[1]),
            q(listed[2]),
            q(listed[3]),
            q(listed[4]),
            q(person_pct),
        ]),
        counts,
        resolution,
        seed: rng.random(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    /// Probability that a record is dense (Chicago-like).
    pub style_mix: f64,
    pub seed: u64,
    pub resolution: usize,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n: 2000, style_mix: 0.5, seed: 0, resolution: DEFAULT_RESOLUTION, test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub split: Split,
    pub record: SceneRecord,
}

const MAX_RESAMPLES: u64 = 20;

pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusItem>, SceneError> {
    if cfg.n == 0 {
        return Err(SceneError::Invalid("corpus size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.style_mix) {
        return Err(SceneError::Invalid(format!("style_mix {} outside [0, 1]", cfg.style_mix)));
    }
    let mut items = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = seeds::rng(cfg.seed, &[i as u64]);
        let style = if rng.random::<f64>() < cfg.style_mix { CityStyle::Dense } else { CityStyle::Sprawl };
        let mut last_err = None;
        let mut record = None;
        for _ in 0..MAX_RESAMPLES {
            let spec = sample_scene_spec(style, cfg.resolution, &mut rng);
            match synth_scene(&spec) {
                Ok(rec) => {
                    record = Some(rec);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let record = match record {
            Some(r) => r,
            None => return Err(last_err.expect("at least one attempt")),
        };
        items.push(CorpusItem { id: format!("s{i:06}"), split: Split::Train, record });
    }
    let keys: Vec<(String, CityStyle)> = items.iter().map(|it| (it.id.clone(), it.record.style)).collect();
    let splits = assign_splits(&keys, cfg.test_fraction, cfg.seed)
        .map_err(|e| SceneError::Invalid(e.to_string()))?;
    for (item, split) in items.iter_mut().zip(splits) {
        item.split = split;
    }
    Ok(items)
}
