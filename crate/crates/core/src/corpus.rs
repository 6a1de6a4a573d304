//! On-disk corpus: `manifest.jsonl`, `palette.json`, `corpus.json` and the
//! PNG rasters they point at.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.jsonl      one record per line, keys in the order
//!                     id, image_path, seg_path, mask_path, prompt,
//!                     proportions, counts, style, split
//! palette.json        {"entries":[{"id":0,"name":"road","rgb":[128,64,128]},...]}
//! corpus.json         {"created_with":"<hash of generator config>"}
//! images/<id>.png     8-bit RGB
//! seg/<id>.png        8-bit indexed colour; index = label id, PLTE = palette
//! masks/<id>.png      1-bit greyscale; 1 = road
//! ```
//!
//! Paths inside the manifest are relative to the manifest's directory.
//! A manifest line looks like:
//!
//! ```text
//! {"id":"s000000","image_path":"images/s000000.png","seg_path":"seg/s000000.png",
//!  "mask_path":"masks/s000000.png","prompt":"The image is captured from ...",
//!  "proportions":{"road":19.87,"sidewalk":8.01,...,"other":7.3},
//!  "counts":{"cars":2,"persons":1,"bicycles":0,"buses":0},"style":"dense","split":"train"}
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{CorpusItem, SceneRecord};
use crate::seeds;
use crate::taxonomy::{CityStyle, LabelMap, ObjectCounts, Palette, Proportions, RoadMask};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PALETTE_FILE: &str = "palette.json";
pub const META_FILE: &str = "corpus.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing file: {0}")]
    Missing(String),
    #[error("malformed manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("palette mismatch: {0}")]
    PaletteMismatch(String),
    #[error("bad png {path}: {message}")]
    Png { path: String, message: String },
    #[error("corpus too small to stratify: {0}")]
    TooSmall(String),
    #[error("test fraction {0} outside (0, 1)")]
    Fraction(f64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Field order here is the on-disk key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub seg_path: String,
    pub mask_path: String,
    pub prompt: String,
    pub proportions: Proportions,
    pub counts: ObjectCounts,
    pub style: CityStyle,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    created_with: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory the relative record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub palette: Palette,
    pub created_with: String,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load(&self, rec: &ManifestRecord) -> Result<LoadedRecord, CorpusError> {
        let image = read_rgb_png(&self.resolve(&rec.image_path))?;
        let seg = read_seg_png(&self.resolve(&rec.seg_path), &self.palette)?;
        let mask = read_mask_png(&self.resolve(&rec.mask_path))?;
        Ok(LoadedRecord { image, seg, mask })
    }

    /// Loads every record back into memory.
    pub fn load_items(&self) -> Result<Vec<CorpusItem>, CorpusError> {
        self.records
            .iter()
            .map(|rec| {
                let LoadedRecord { image, seg, mask } = self.load(rec)?;
                let record = SceneRecord {
                    style: rec.style,
                    image,
                    seg_map: seg,
                    road_mask: mask,
                    counts: rec.counts,
                    prompt: rec.prompt.clone(),
                    proportions: rec.proportions,
                };
                Ok(CorpusItem { id: rec.id.clone(), split: rec.split, record })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRecord {
    pub image: RgbImage,
    pub seg: LabelMap,
    pub mask: RoadMask,
}

/// Writes `manifest.jsonl`, `palette.json` and `corpus.json` into `dir`.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for rec in &manifest.records {
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    let palette_path = dir.join(PALETTE_FILE);
    fs::write(&palette_path, serde_json::to_vec_pretty(&manifest.palette).expect("palette serialises"))
        .map_err(io_err(&palette_path))?;
    let meta_path = dir.join(META_FILE);
    let meta = CorpusMeta { created_with: manifest.created_with.clone() };
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serialises")).map_err(io_err(&meta_path))
}

/// Reads a manifest from a corpus directory or a path to `manifest.jsonl`.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, CorpusError> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    if !file.exists() {
        return Err(CorpusError::Missing(file.display().to_string()));
    }
    let palette_path = dir.join(PALETTE_FILE);
    if !palette_path.exists() {
        return Err(CorpusError::Missing(palette_path.display().to_string()));
    }
    let palette: Palette = serde_json::from_slice(&fs::read(&palette_path).map_err(io_err(&palette_path))?)
        .map_err(|e| CorpusError::PaletteMismatch(format!("unreadable palette.json: {e}")))?;
    let meta_path = dir.join(META_FILE);
    let created_with = if meta_path.exists() {
        let meta: CorpusMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)
            .map_err(|e| CorpusError::Malformed { line: 0, message: format!("corpus.json: {e}") })?;
        meta.created_with
    } else {
        String::new()
    };

    let reader = BufReader::new(File::open(&file).map_err(io_err(&file))?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&file))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId(rec.id));
        }
        for p in [&rec.image_path, &rec.seg_path, &rec.mask_path] {
            let full = dir.join(p);
            if !full.exists() {
                return Err(CorpusError::Missing(full.display().to_string()));
            }
        }
        records.push(rec);
    }
    Ok(DatasetManifest { root: dir, records, palette, created_with })
}

/// Writes generated scenes as a corpus directory and returns its manifest.
pub fn write_corpus(items: &[CorpusItem], dir: &Path, created_with: &str) -> Result<DatasetManifest, CorpusError> {
    let palette = Palette::standard();
    for sub in ["images", "seg", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let rec = ManifestRecord {
            id: item.id.clone(),
            image_path: format!("images/{}.png", item.id),
            seg_path: format!("seg/{}.png", item.id),
            mask_path: format!("masks/{}.png", item.id),
            prompt: item.record.prompt.clone(),
            proportions: item.record.proportions,
            counts: item.record.counts,
            style: item.record.style,
            split: item.split,
        };
        write_rgb_png(&dir.join(&rec.image_path), &item.record.image)?;
        write_seg_png(&dir.join(&rec.seg_path), &item.record.seg_map, &palette)?;
        write_mask_png(&dir.join(&rec.mask_path), &item.record.road_mask)?;
        records.push(rec);
    }
    let manifest = DatasetManifest { root: dir.to_path_buf(), records, palette, created_with: created_with.to_string() };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

/// Stratified, seeded train/test assignment. Within each style the ids are
/// sorted before shuffling so the result does not depend on input order.
pub fn assign_splits(keys: &[(String, CityStyle)], test_fraction: f64, seed: u64) -> Result<Vec<Split>, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::Fraction(test_fraction));
    }
    let n = keys.len();
    let groups: Vec<(CityStyle, Vec<usize>)> = CityStyle::ALL
        .iter()
        .map(|&s| (s, (0..n).filter(|&i| keys[i].1 == s).collect::<Vec<_>>()))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    // every style present gets at least one test record
    let total_test = ((n as f64 * test_fraction).round() as usize).max(groups.len());
    // largest remainder allocation of the test budget across styles
    let exact: Vec<f64> = groups.iter().map(|(_, g)| total_test as f64 * g.len() as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total_test - alloc.iter().sum::<usize>();
    for &g in order.iter().take(short) {
        alloc[g] += 1;
    }
    while let Some(empty) = alloc.iter().position(|&m| m == 0) {
        let donor = (0..alloc.len()).max_by_key(|&g| alloc[g]).expect("non-empty");
        alloc[donor] -= 1;
        alloc[empty] += 1;
    }
    let mut splits = vec![Split::Train; n];
    for ((style, idx), m) in groups.iter().zip(alloc) {
        if m == 0 || m >= idx.len() {
            return Err(CorpusError::TooSmall(format!(
                "style {} has {} records and would get {m} test records",
                style.name(),
                idx.len()
            )));
        }
        let mut idx = idx.clone();
        idx.sort_by(|&a, &b| keys[a].0.cmp(&keys[b].0));
        let mut rng = seeds::rng(seed, &[0x5eed_5711, *style as u64]);
        idx.shuffle(&mut rng);
        for &i in &idx[..m] {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

pub fn split_corpus(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest, CorpusError> {
    let keys: Vec<(String, CityStyle)> = manifest.records.iter().map(|r| (r.id.clone(), r.style)).collect();
    let splits = assign_splits(&keys, test_fraction, seed)?;
    let mut out = manifest.clone();
    for (rec, split) in out.records.iter_mut().zip(splits) {
        rec.split = split;
    }
    Ok(out)
}

fn png_err(path: &str, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Png { path: path.to_string(), message: e.to_string() }
}

fn ensure_parent(path: &Path) -> Result<(), CorpusError> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::Missing(path.display().to_string()));
    }
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    ensure_parent(path)?;
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    file.write_all(bytes).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).expect("in-memory png encoding");
    out
}

/// Decodes any PNG to 8-bit RGB. `label` names the source in errors.
pub fn decode_rgb_png(bytes: &[u8], label: &str) -> Result<RgbImage, CorpusError> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| png_err(label, e))?.to_rgb8())
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), CorpusError> {
    write_bytes(path, &encode_rgb_png(img))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, CorpusError> {
    decode_rgb_png(&read_bytes(path)?, &path.display().to_string())
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, plte: Option<Vec<u8>>, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = plte {
        enc.set_palette(p);
    }
    let mut w = enc.write_header().expect("in-memory png header");
    w.write_image_data(data).expect("in-memory png data");
    w.finish().expect("in-memory png finish");
    out
}

pub fn encode_seg_png(map: &LabelMap, palette: &Palette) -> Result<Vec<u8>, CorpusError> {
    let max_id = palette.entries.iter().map(|e| e.id).max().unwrap_or(0) as usize;
    let mut plte = vec![0u8; 3 * (max_id + 1)];
    for e in &palette.entries {
        plte[3 * e.id as usize..3 * e.id as usize + 3].copy_from_slice(&e.rgb);
    }
    if let Some(bad) = map.ids.iter().find(|&&i| !palette.covers(i)) {
        return Err(CorpusError::PaletteMismatch(format!("label id {bad} has no palette entry")));
    }
    Ok(encode_png(map.width, map.height, png::ColorType::Indexed, png::BitDepth::Eight, Some(plte), &map.ids))
}

pub fn write_seg_png(path: &Path, map: &LabelMap, palette: &Palette) -> Result<(), CorpusError> {
    write_bytes(path, &encode_seg_png(map, palette)?)
}

fn decode_raw(bytes: &[u8], label: &str) -> Result<(png::OutputInfo, Vec<u8>, Option<Vec<u8>>), CorpusError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(label, e))?;
    let plte = reader.info().palette.as_ref().map(|p| p.to_vec());
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| png_err(label, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(label, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf, plte))
}

pub fn decode_seg_png(bytes: &[u8], palette: &Palette, label: &str) -> Result<LabelMap, CorpusError> {
    let (info, buf, plte) = decode_raw(bytes, label)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(label, "segmentation maps must be 8-bit indexed"));
    }
    let plte = plte.ok_or_else(|| png_err(label, "missing PLTE chunk"))?;
    for e in &palette.entries {
        let at = 3 * e.id as usize;
        if plte.get(at..at + 3) != Some(&e.rgb[..]) {
            return Err(CorpusError::PaletteMismatch(format!("{label}: colour for id {} differs", e.id)));
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let ids: Vec<u8> = (0..h).flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().copied()).collect();
    if let Some(bad) = ids.iter().find(|&&i| !palette.covers(i)) {
        return Err(CorpusError::PaletteMismatch(format!("{label}: label id {bad} not in palette")));
    }
    Ok(LabelMap::new(w, h, ids))
}

pub fn read_seg_png(path: &Path, palette: &Palette) -> Result<LabelMap, CorpusError> {
    decode_seg_png(&read_bytes(path)?, palette, &path.display().to_string())
}

pub fn encode_mask_png(mask: &RoadMask) -> Vec<u8> {
    let stride = mask.width.div_ceil(8);
    let mut packed = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] != 0 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One, None, &packed)
}

pub fn write_mask_png(path: &Path, mask: &RoadMask) -> Result<(), CorpusError> {
    write_bytes(path, &encode_mask_png(mask))
}

/// Strict decoder for corpus masks: 1-bit greyscale only.
pub fn decode_mask_png(bytes: &[u8], label: &str) -> Result<RoadMask, CorpusError> {
    let (info, buf, _) = decode_raw(bytes, label)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(png_err(label, "road masks must be 1-bit greyscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut bits = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            bits[y * w + x] = (buf[y * info.line_size + x / 8] >> (7 - x % 8)) & 1;
        }
    }
    Ok(RoadMask::new(w, h, bits))
}

/// Accepts any PNG; pixels with luminance above half scale are road.
pub fn decode_mask_png_lenient(bytes: &[u8], label: &str) -> Result<RoadMask, CorpusError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| png_err(label, e))?;
    let l = img.to_luma8();
    let bits = l.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
    Ok(RoadMask::new(l.width() as usize, l.height() as usize, bits))
}

pub fn read_mask_png(path: &Path) -> Result<RoadMask, CorpusError> {
    decode_mask_png(&read_bytes(path)?, &path.display().to_string())
}
