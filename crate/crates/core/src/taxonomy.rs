//! Shared vocabulary: semantic classes, object sub-labels, the palette,
//! label rasters and proportion/count records.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The seven semantic classes carried by every segmentation map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Road = 0,
    Sidewalk = 1,
    Building = 2,
    Sky = 3,
    Tree = 4,
    Person = 5,
    Other = 6,
}

impl Class {
    pub const ALL: [Class; 7] =
        [Class::Road, Class::Sidewalk, Class::Building, Class::Sky, Class::Tree, Class::Person, Class::Other];
    /// Classes named in prompts, in template order.
    pub const LISTED: [Class; 6] =
        [Class::Road, Class::Sidewalk, Class::Building, Class::Sky, Class::Tree, Class::Person];
    /// Classes reported individually in evaluation tables.
    pub const REPORTED: [Class; 4] = [Class::Tree, Class::Sky, Class::Building, Class::Road];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Class> {
        Class::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Road => "road",
            Class::Sidewalk => "sidewalk",
            Class::Building => "building",
            Class::Sky => "sky",
            Class::Tree => "tree",
            Class::Person => "person",
            Class::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Class> {
        Class::ALL.iter().copied().find(|c| c.name() == name)
    }
}

/// Extended label ids: the seven classes plus vehicle sub-labels that fold
/// into [`Class::Other`].
pub mod label {
    pub const CAR: u8 = 7;
    pub const BICYCLE: u8 = 8;
    pub const BUS: u8 = 9;
    pub const COUNT: usize = 10;
}

/// Maps an extended label id onto its semantic class.
pub fn base_class(id: u8) -> Class {
    Class::from_id(id).unwrap_or(Class::Other)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
    /// Semantic class this label folds into, for sub-labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn standard() -> Self {
        let e = |id: u8, name: &str, rgb: [u8; 3], parent: Option<&str>| PaletteEntry {
            id,
            name: name.to_string(),
            rgb,
            parent: parent.map(str::to_string),
        };
        Self {
            entries: vec![
                e(0, "road", [128, 64, 128], None),
                e(1, "sidewalk", [244, 35, 232], None),
                e(2, "building", [70, 70, 70], None),
                e(3, "sky", [70, 130, 180], None),
                e(4, "tree", [107, 142, 35], None),
                e(5, "person", [220, 20, 60], None),
                e(6, "other", [152, 152, 152], None),
                e(label::CAR, "car", [0, 0, 142], Some("other")),
                e(label::BICYCLE, "bicycle", [119, 11, 32], Some("other")),
                e(label::BUS, "bus", [0, 60, 100], Some("other")),
            ],
        }
    }

    pub fn covers(&self, id: u8) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("palette serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Square-or-rectangular raster of extended label ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Self {
        assert_eq!(ids.len(), width * height, "label map size");
        Self { width, height, ids }
    }

    pub fn filled(width: usize, height: usize, class: Class) -> Self {
        Self::new(width, height, vec![class.id(); width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// The seven-class view (vehicle sub-labels folded into `other`).
    pub fn base(&self) -> LabelMap {
        LabelMap::new(self.width, self.height, self.ids.iter().map(|&i| base_class(i).id()).collect())
    }

    pub fn class_at(&self, i: usize) -> Class {
        base_class(self.ids[i])
    }

    pub fn road_mask(&self) -> RoadMask {
        RoadMask {
            width: self.width,
            height: self.height,
            bits: self.ids.iter().map(|&i| u8::from(i == Class::Road.id())).collect(),
        }
    }

    /// Per-class pixel counts over the seven base classes.
    pub fn class_counts(&self) -> [usize; 7] {
        let mut counts = [0usize; 7];
        for &i in &self.ids {
            counts[base_class(i) as usize] += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Binary road raster: 1 where the pixel is road, 0 elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoadMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl RoadMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size");
        Self { width, height, bits }
    }

    pub fn coverage(&self) -> f64 {
        self.bits.iter().filter(|&&b| b != 0).count() as f64 / self.bits.len().max(1) as f64
    }
}

/// Percentages for the six prompt classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPercents {
    pub road: f64,
    pub sidewalk: f64,
    pub building: f64,
    pub sky: f64,
    pub tree: f64,
    pub person: f64,
}

impl ClassPercents {
    pub fn get(&self, c: Class) -> f64 {
        match c {
            Class::Road => self.road,
            Class::Sidewalk => self.sidewalk,
            Class::Building => self.building,
            Class::Sky => self.sky,
            Class::Tree => self.tree,
            Class::Person => self.person,
            Class::Other => (100.0 - self.sum()).max(0.0),
        }
    }

    /// Panics for [`Class::Other`], which is implied.
    pub fn set(&mut self, c: Class, v: f64) {
        match c {
            Class::Road => self.road = v,
            Class::Sidewalk => self.sidewalk = v,
            Class::Building => self.building = v,
            Class::Sky => self.sky = v,
            Class::Tree => self.tree = v,
            Class::Person => self.person = v,
            Class::Other => panic!("other is the residual class"),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.road, self.sidewalk, self.building, self.sky, self.tree, self.person]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { road: v[0], sidewalk: v[1], building: v[2], sky: v[3], tree: v[4], person: v[5] }
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// Realised class percentages over all seven classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub road: f64,
    pub sidewalk: f64,
    pub building: f64,
    pub sky: f64,
    pub tree: f64,
    pub person: f64,
    pub other: f64,
}

impl Proportions {
    pub fn from_array(v: [f64; 7]) -> Self {
        Self { road: v[0], sidewalk: v[1], building: v[2], sky: v[3], tree: v[4], person: v[5], other: v[6] }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.road, self.sidewalk, self.building, self.sky, self.tree, self.person, self.other]
    }

    pub fn get(&self, c: Class) -> f64 {
        self.as_array()[c as usize]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }

    pub fn listed(&self) -> ClassPercents {
        let a = self.as_array();
        ClassPercents::from_array([a[0], a[1], a[2], a[3], a[4], a[5]])
    }

    /// Percentages from per-class pixel counts, rounded to hundredths with
    /// largest-remainder apportionment so the seven values sum to exactly 100.00.
    pub fn from_counts_2dp(counts: &[usize; 7]) -> Self {
        let total: usize = counts.iter().sum();
        assert!(total > 0, "empty raster");
        // work in hundredths of a percent: 10_000 units
        let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * 10_000.0 / total as f64).collect();
        let mut units: Vec<i64> = exact.iter().map(|v| v.floor() as i64).collect();
        let short = 10_000 - units.iter().sum::<i64>();
        let mut order: Vec<usize> = (0..7).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        for &i in order.iter().take(short.max(0) as usize) {
            units[i] += 1;
        }
        let mut out = [0.0; 7];
        for i in 0..7 {
            out[i] = units[i] as f64 / 100.0;
        }
        Self::from_array(out)
    }
}

/// Object counts in prompt order: cars, persons, bicycles, buses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub cars: u32,
    pub persons: u32,
    pub bicycles: u32,
    pub buses: u32,
}

impl ObjectCounts {
    pub fn as_array(&self) -> [u32; 4] {
        [self.cars, self.persons, self.bicycles, self.buses]
    }

    pub fn from_array(v: [u32; 4]) -> Self {
        Self { cars: v[0], persons: v[1], bicycles: v[2], buses: v[3] }
    }
}

/// City context: `Dense` stands in for Chicago, `Sprawl` for Orlando.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CityStyle {
    Dense,
    Sprawl,
}

impl CityStyle {
    pub const ALL: [CityStyle; 2] = [CityStyle::Dense, CityStyle::Sprawl];

    pub fn city(self) -> &'static str {
        match self {
            CityStyle::Dense => "Chicago",
            CityStyle::Sprawl => "Orlando",
        }
    }

    pub fn from_city(city: &str) -> Option<CityStyle> {
        CityStyle::ALL.iter().copied().find(|s| s.city() == city)
    }

    pub fn name(self) -> &'static str {
        match self {
            CityStyle::Dense => "dense",
            CityStyle::Sprawl => "sprawl",
        }
    }

    pub fn from_name(s: &str) -> Option<CityStyle> {
        match s.to_ascii_lowercase().as_str() {
            "dense" | "chicago" => Some(CityStyle::Dense),
            "sprawl" | "orlando" => Some(CityStyle::Sprawl),
            _ => None,
        }
    }
}
