//! Synthetic bi-temporal change scenes with templated captions.
//!
//! Each scene is a textured-noise background with a few pre-existing
//! rectangular buildings. A change pair then adds buildings, removes
//! buildings, or adds a road inside one of nine grid cells; a no-change pair
//! keeps both images identical. Captions are five paraphrases of the same
//! fact, and some paraphrase pairs share their content words exactly, which
//! the bag-of-words similarity provider scores as cosine 1.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{SimilarityProvider, TextVector};
use crate::tensor::Mat;
use crate::vocab::Vocabulary;

pub const CAPTIONS_PER_ITEM: usize = 5;
pub const MIN_IMAGE_SIZE: usize = 32;

/// An `H x W x 3` image with channel values in `[0, 1]`, stored row-major
/// with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: alloc::vec![value; height * width * 3],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} bytes do not form a {height}x{width} RGB image",
                bytes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Quantises to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    /// Round-trips through 8-bit so in-memory data matches what a lossless
    /// 8-bit file would hold.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.height, self.width, &self.to_rgb8()).expect("same shape")
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    fn fill_rect(&mut self, rect: Rect, rgb: [f64; 3]) {
        for y in rect.y0..rect.y1.min(self.height) {
            for x in rect.x0..rect.x1.min(self.width) {
                self.set_pixel(y, x, rgb);
            }
        }
    }

    /// `(H*W) x 3` matrix view used by the encoder.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.height * self.width, 3, self.data.clone()).expect("shape")
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub pair_id: u64,
    pub before: Image,
    pub after: Image,
}

impl ImagePair {
    pub fn validate(&self) -> Result<()> {
        if self.before.height != self.after.height || self.before.width != self.after.width {
            return Err(Error::shape(format!(
                "pair {}: before is {}x{}, after is {}x{}",
                self.pair_id,
                self.before.height,
                self.before.width,
                self.after.height,
                self.after.width
            )));
        }
        let in_range = |img: &Image| img.data.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.before) || !in_range(&self.after) {
            return Err(Error::Validation(format!(
                "pair {}: pixel values outside [0, 1]",
                self.pair_id
            )));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            pair_id: self.pair_id,
            before: self.after.clone(),
            after: self.before.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    None,
    AddBuilding,
    AddRoad,
    RemoveBuilding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    TopLeft,
    Top,
    TopRight,
    Left,
    Center,
    Right,
    BottomLeft,
    Bottom,
    BottomRight,
}

impl Location {
    pub const ALL: [Location; 9] = [
        Location::TopLeft,
        Location::Top,
        Location::TopRight,
        Location::Left,
        Location::Center,
        Location::Right,
        Location::BottomLeft,
        Location::Bottom,
        Location::BottomRight,
    ];

    /// Locations a road can occupy: a full-width band through the top,
    /// middle or bottom row, or a full-height band through the left or
    /// right column.
    pub const ROAD: [Location; 5] = [
        Location::Top,
        Location::Center,
        Location::Bottom,
        Location::Left,
        Location::Right,
    ];

    pub fn cell(self) -> (usize, usize) {
        let i = self as usize;
        (i / 3, i % 3)
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Location::TopLeft => "top left",
            Location::Top => "top",
            Location::TopRight => "top right",
            Location::Left => "left",
            Location::Center => "center",
            Location::Right => "right",
            Location::BottomLeft => "bottom left",
            Location::Bottom => "bottom",
            Location::BottomRight => "bottom right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Drives the background, distractors and object placement.
    pub seed: u64,
    pub change_kind: ChangeKind,
    pub location: Location,
    /// Number of changed objects, `1..=3` (roads always use 1).
    pub object_count: u8,
    /// Drives which paraphrases are chosen and their order. Two specs with
    /// the same fact and caption seed get verbatim-identical captions.
    pub caption_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.object_count) {
            return Err(Error::config(format!(
                "object_count {} outside 1..=3",
                self.object_count
            )));
        }
        if self.change_kind == ChangeKind::AddRoad && !Location::ROAD.contains(&self.location) {
            return Err(Error::config(format!(
                "roads cannot be placed at {:?}",
                self.location
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub num_items: usize,
    pub seed: u64,
    pub no_change_fraction: f64,
    /// Fraction of change pairs that copy an earlier change pair's fact and
    /// caption choice, yielding verbatim-identical captions.
    pub duplicate_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub max_distractors: usize,
    pub noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_items: 1000,
            seed: 0,
            no_change_fraction: 0.5,
            duplicate_rate: 0.1,
            train_fraction: 0.8,
            val_fraction: 0.1,
            max_distractors: 2,
            noise: 0.04,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::config(format!(
                "image size {} below minimum {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} {v} outside [0, 1]")))
            }
        };
        frac("no_change_fraction", self.no_change_fraction)?;
        frac("duplicate_rate", self.duplicate_rate)?;
        frac("train_fraction", self.train_fraction)?;
        frac("val_fraction", self.val_fraction)?;
        if self.train_fraction + self.val_fraction > 1.0 {
            return Err(Error::config("train + val fractions exceed 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

const ROOF_COLORS: [[f64; 3]; 4] = [
    [0.78, 0.30, 0.25],
    [0.88, 0.87, 0.84],
    [0.30, 0.45, 0.75],
    [0.25, 0.24, 0.26],
];
const TERRAIN: [[f64; 3]; 3] = [[0.34, 0.46, 0.28], [0.52, 0.44, 0.32], [0.46, 0.46, 0.42]];
const ROAD_COLOR: [f64; 3] = [0.62, 0.62, 0.60];

fn band(index: usize, size: usize) -> (usize, usize) {
    (index * size / 3, (index + 1) * size / 3)
}

fn cell_rect(loc: Location, size: usize) -> Rect {
    let (r, c) = loc.cell();
    let (y0, y1) = band(r, size);
    let (x0, x1) = band(c, size);
    Rect { y0, x0, y1, x1 }
}

fn background(rng: &mut ChaCha8Rng, size: usize, noise: f64) -> Image {
    let base = TERRAIN[rng.random_range(0..TERRAIN.len())];
    let fy = rng.random_range(0.05..0.25);
    let fx = rng.random_range(0.05..0.25);
    let phase = rng.random_range(0.0..6.28);
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let wave = 0.04 * libm::sin(fy * y as f64 + fx * x as f64 + phase);
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = base[c] + wave + rng.random_range(-noise..=noise);
            }
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

/// Up to `count` non-overlapping building footprints inside a cell, one per
/// quadrant.
fn building_rects(rng: &mut ChaCha8Rng, cell: Rect, count: usize) -> Vec<Rect> {
    let h = cell.y1 - cell.y0;
    let w = cell.x1 - cell.x0;
    if count == 1 {
        let bh = rng.random_range(h * 2 / 5..=h * 3 / 5);
        let bw = rng.random_range(w * 2 / 5..=w * 3 / 5);
        let y0 = cell.y0 + rng.random_range(1..=h - bh - 1);
        let x0 = cell.x0 + rng.random_range(1..=w - bw - 1);
        return alloc::vec![Rect { y0, x0, y1: y0 + bh, x1: x0 + bw }];
    }
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let (qh, qw) = (h / 2, w / 2);
    quadrants[..count]
        .iter()
        .map(|&q| {
            let qy = cell.y0 + (q / 2) * qh;
            let qx = cell.x0 + (q % 2) * qw;
            let bh = rng.random_range((qh / 2).max(2)..=(qh * 3 / 4).max(2));
            let bw = rng.random_range((qw / 2).max(2)..=(qw * 3 / 4).max(2));
            let y0 = qy + rng.random_range(0..=qh.saturating_sub(bh));
            let x0 = qx + rng.random_range(0..=qw.saturating_sub(bw));
            Rect { y0, x0, y1: y0 + bh, x1: x0 + bw }
        })
        .collect()
}

fn road_rect(rng: &mut ChaCha8Rng, loc: Location, size: usize) -> Rect {
    let width = (size / 10).max(2);
    let horizontal = matches!(loc, Location::Top | Location::Center | Location::Bottom);
    let (r, c) = loc.cell();
    let (lo, hi) = band(if horizontal { r } else { c }, size);
    let start = rng.random_range(lo + 1..=hi - width - 1);
    if horizontal {
        Rect { y0: start, x0: 0, y1: start + width, x1: size }
    } else {
        Rect { y0: 0, x0: start, y1: size, x1: start + width }
    }
}

/// Renders the image pair and the five captions for a scene. The output is
/// a deterministic function of `(spec, config)`.
pub fn generate_scene(spec: &SceneSpec, config: &GeneratorConfig) -> Result<(ImagePair, Vec<String>)> {
    if config.image_size < MIN_IMAGE_SIZE {
        return Err(Error::config(format!(
            "image size {} below minimum {MIN_IMAGE_SIZE}",
            config.image_size
        )));
    }
    spec.validate()?;
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut base = background(&mut rng, size, config.noise);

    let change_cell = (spec.change_kind != ChangeKind::None).then_some(spec.location);
    let n_distractors = rng.random_range(0..=config.max_distractors);
    let mut free: Vec<Location> = Location::ALL
        .iter()
        .copied()
        .filter(|l| Some(*l) != change_cell)
        .filter(|l| {
            // keep distractors off the road band
            spec.change_kind != ChangeKind::AddRoad || {
                let (r, c) = l.cell();
                let (sr, sc) = spec.location.cell();
                match spec.location {
                    Location::Left | Location::Right => c != sc,
                    _ => r != sr,
                }
            }
        })
        .collect();
    free.shuffle(&mut rng);
    for loc in free.into_iter().take(n_distractors) {
        let color = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
        for r in building_rects(&mut rng, cell_rect(loc, size), 1) {
            base.fill_rect(r, color);
        }
    }

    let mut changed = base.clone();
    match spec.change_kind {
        ChangeKind::None => {}
        ChangeKind::AddBuilding | ChangeKind::RemoveBuilding => {
            let color = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
            let rects = building_rects(
                &mut rng,
                cell_rect(spec.location, size),
                spec.object_count as usize,
            );
            for r in rects {
                changed.fill_rect(r, color);
            }
        }
        ChangeKind::AddRoad => {
            let r = road_rect(&mut rng, spec.location, size);
            changed.fill_rect(r, ROAD_COLOR);
        }
    }
    let (before, after) = match spec.change_kind {
        ChangeKind::RemoveBuilding => (changed, base),
        _ => (base, changed),
    };
    let pair = ImagePair {
        pair_id: 0,
        before: before.quantized(),
        after: after.quantized(),
    };
    Ok((pair, captions_for(spec)))
}

struct Phrases {
    /// "a building" / "two buildings"
    np: String,
    /// "a new building" / "two new buildings"
    np_new: String,
    /// "the building" / "the two buildings"
    def: String,
    be: &'static str,
    has: &'static str,
    plural: bool,
}

fn phrases(noun: &str, count: u8) -> Phrases {
    let number = match count {
        2 => "two",
        3 => "three",
        _ => "",
    };
    if number.is_empty() {
        Phrases {
            np: format!("a {noun}"),
            np_new: format!("a new {noun}"),
            def: format!("the {noun}"),
            be: "is",
            has: "has",
            plural: false,
        }
    } else {
        Phrases {
            np: format!("{number} {noun}s"),
            np_new: format!("{number} new {noun}s"),
            def: format!("the {number} {noun}s"),
            be: "are",
            has: "have",
            plural: true,
        }
    }
}

/// The paraphrase family for a fact. Templates are listed so that some pairs
/// differ only in stopwords and word order.
pub fn caption_family(kind: ChangeKind, location: Location, count: u8) -> Vec<String> {
    let loc = location.phrase();
    match kind {
        ChangeKind::None => [
            "there is no change",
            "no change has occurred",
            "the scene is the same as before",
            "the scene remains the same",
            "nothing has changed in the scene",
            "in the scene nothing has changed",
            "there is no difference",
        ]
        .iter()
        .map(|s| String::from(*s))
        .collect(),
        ChangeKind::AddBuilding => {
            let p = phrases("building", count);
            let appear = if p.plural { "appear" } else { "appears" };
            let np_cap = p.np.clone();
            alloc::vec![
                format!("{np_cap} {appear} at the {loc}"),
                format!("at the {loc} {} {appear}", p.np),
                format!("{} {} built at the {loc}", p.np_new, p.be),
                format!("there {} {} at the {loc}", p.be, p.np_new),
                format!("the {loc} {} {}", p.has, p.np_new),
                format!("{} {} been constructed at the {loc}", p.np, p.has),
                format!("{} {} added to the {loc}", p.np, p.be),
            ]
        }
        ChangeKind::RemoveBuilding => {
            let p = phrases("building", count);
            let disappear = if p.plural { "disappear" } else { "disappears" };
            alloc::vec![
                format!("{} {} removed from the {loc}", p.np, p.be),
                format!("{} at the {loc} {} removed", p.def, p.be),
                format!("{} {disappear} at the {loc}", p.np),
                format!("at the {loc} {} {disappear}", p.np),
                format!("{} at the {loc} {} demolished", p.def, p.be),
                format!("{} at the {loc} {} been torn down", p.def, p.has),
                format!("the {loc} {} lost {}", p.has, p.np),
            ]
        }
        ChangeKind::AddRoad => alloc::vec![
            format!("a road is built at the {loc}"),
            format!("at the {loc} a road is built"),
            format!("a new road appears at the {loc}"),
            format!("there is a new road at the {loc}"),
            format!("the {loc} has a new road"),
            format!("a road has been constructed at the {loc}"),
            format!("a road is paved across the {loc}"),
        ],
    }
}

/// Five distinct paraphrases chosen and ordered by `spec.caption_seed`.
pub fn captions_for(spec: &SceneSpec) -> Vec<String> {
    let mut family = caption_family(spec.change_kind, spec.location, spec.object_count);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.caption_seed ^ 0x9e37_79b9_7f4a_7c15);
    family.shuffle(&mut rng);
    family.truncate(CAPTIONS_PER_ITEM);
    family
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One generated scene together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub pair: ImagePair,
    pub captions: Vec<String>,
    pub split: Split,
    /// Earlier pair whose fact and captions this pair copies verbatim.
    pub duplicate_of: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<SceneRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .filter(|r| r.split == split)
                .map(|r| PairItem {
                    pair_id: r.pair.pair_id,
                    pair: r.pair.clone(),
                    captions: r.captions.clone(),
                })
                .collect(),
        }
    }

    pub fn all(&self) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .map(|r| PairItem {
                    pair_id: r.pair.pair_id,
                    pair: r.pair.clone(),
                    captions: r.captions.clone(),
                })
                .collect(),
        }
    }

    /// Pairs of distinct pair ids that share at least one verbatim caption.
    pub fn duplicate_ledger(&self) -> BTreeSet<(u64, u64)> {
        let mut by_text: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
        for r in &self.items {
            for c in &r.captions {
                by_text.entry(c.as_str()).or_default().insert(r.pair.pair_id);
            }
        }
        let mut out = BTreeSet::new();
        for ids in by_text.values() {
            for &a in ids {
                for &b in ids {
                    if a < b {
                        out.insert((a, b));
                    }
                }
            }
        }
        out
    }
}

/// `n` change pairs with pairwise distinct facts, each labelled with a
/// single caption repeated five times. Used for memorization checks, where
/// a per-item caption must be deterministic.
pub fn memorization_set(n: usize, config: &GeneratorConfig) -> Result<Dataset> {
    let facts: Vec<(ChangeKind, Location)> = Location::ALL
        .iter()
        .map(|&l| (ChangeKind::AddBuilding, l))
        .chain(Location::ALL.iter().map(|&l| (ChangeKind::RemoveBuilding, l)))
        .chain(Location::ROAD.iter().map(|&l| (ChangeKind::AddRoad, l)))
        .collect();
    if n > facts.len() {
        return Err(Error::config(format!(
            "at most {} distinct facts are available, asked for {n}",
            facts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut items = Vec::with_capacity(n);
    for (i, &(change_kind, location)) in facts.iter().take(n).enumerate() {
        let spec = SceneSpec {
            seed: rng.random(),
            change_kind,
            location,
            object_count: 1,
            caption_seed: 0,
        };
        let (mut pair, _) = generate_scene(&spec, config)?;
        pair.pair_id = i as u64;
        let caption = caption_family(change_kind, location, 1).swap_remove(0);
        items.push(PairItem {
            pair_id: i as u64,
            pair,
            captions: alloc::vec![caption; CAPTIONS_PER_ITEM],
        });
    }
    Ok(Dataset { items })
}

/// Generates a full corpus: exact no-change share, duplicate injection and
/// an 80/10/10 style split, all driven by `config.seed`.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<Corpus> {
    config.validate()?;
    let n = config.num_items;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_none = libm::round(n as f64 * config.no_change_fraction) as usize;
    let mut is_none: Vec<bool> = (0..n).map(|i| i < n_none).collect();
    is_none.shuffle(&mut rng);

    let mut specs: Vec<(SceneSpec, Option<u64>)> = Vec::with_capacity(n);
    let mut change_idx: Vec<usize> = Vec::new();
    for (i, &none) in is_none.iter().enumerate() {
        let seed: u64 = rng.random();
        let caption_seed: u64 = rng.random();
        if none {
            specs.push((
                SceneSpec {
                    seed,
                    change_kind: ChangeKind::None,
                    location: Location::Center,
                    object_count: 1,
                    caption_seed,
                },
                None,
            ));
            continue;
        }
        let duplicate = !change_idx.is_empty() && rng.random_bool(config.duplicate_rate);
        if duplicate {
            let src = change_idx[rng.random_range(0..change_idx.len())];
            let (orig, _) = specs[src];
            specs.push((SceneSpec { seed, ..orig }, Some(src as u64)));
        } else {
            let change_kind = match rng.random_range(0..3) {
                0 => ChangeKind::AddBuilding,
                1 => ChangeKind::RemoveBuilding,
                _ => ChangeKind::AddRoad,
            };
            let (location, object_count) = if change_kind == ChangeKind::AddRoad {
                (Location::ROAD[rng.random_range(0..Location::ROAD.len())], 1)
            } else {
                (Location::ALL[rng.random_range(0..9)], rng.random_range(1..=3u8))
            };
            specs.push((
                SceneSpec {
                    seed,
                    change_kind,
                    location,
                    object_count,
                    caption_seed,
                },
                None,
            ));
        }
        change_idx.push(i);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = libm::round(n as f64 * config.train_fraction) as usize;
    let n_val = libm::round(n as f64 * config.val_fraction) as usize;
    let mut splits = alloc::vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut items = Vec::with_capacity(n);
    for (i, (spec, dup)) in specs.into_iter().enumerate() {
        let (mut pair, captions) = generate_scene(&spec, config)?;
        pair.pair_id = i as u64;
        items.push(SceneRecord {
            spec,
            pair,
            captions,
            split: splits[i],
            duplicate_of: dup,
        });
    }
    Ok(Corpus { items })
}

/// An image pair with its reference captions, the unit of training and
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub pair_id: u64,
    pub pair: ImagePair,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<PairItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            items: self.items.iter().take(n).cloned().collect(),
        }
    }

    pub fn all_captions(&self) -> Vec<&str> {
        self.items
            .iter()
            .flat_map(|i| i.captions.iter().map(String::as_str))
            .collect()
    }
}

/// A caption prepared for training: token ids, the label of its image pair
/// and its similarity vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub pair_label: u64,
    pub sim_embedding: TextVector,
}

impl CaptionRecord {
    pub fn new(
        text: &str,
        vocab: &Vocabulary,
        max_len: usize,
        pair_label: u64,
        provider: &mut dyn SimilarityProvider,
    ) -> Result<Self> {
        Ok(Self {
            text: String::from(text),
            token_ids: vocab.encode(text, max_len)?,
            pair_label,
            sim_embedding: provider.embed(text),
        })
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub pair_id: u64,
    pub before: String,
    pub after: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if item.captions.len() != CAPTIONS_PER_ITEM {
                return Err(Error::Validation(format!(
                    "pair {} has {} captions, expected {CAPTIONS_PER_ITEM}",
                    item.pair_id,
                    item.captions.len()
                )));
            }
            if !seen.insert(item.pair_id) {
                return Err(Error::Validation(format!(
                    "pair id {} appears more than once in the {} split",
                    item.pair_id,
                    self.split.name()
                )));
            }
        }
        Ok(())
    }
}

/// Per-anchor list of mined negative item indices (into the dataset).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HardNegativePlan {
    pub negatives: BTreeMap<usize, Vec<usize>>,
}

/// A batch member: dataset item index plus the caption drawn for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchMember {
    pub item: usize,
    pub caption: usize,
    /// False for members that were pulled in as mined hard negatives.
    pub anchor: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<BatchMember>,
}

impl Batch {
    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().filter(|m| m.anchor).map(|m| m.item)
    }
}

/// Splits one epoch into batches. Every item is an anchor exactly once; the
/// caption for each item is drawn uniformly from its references. With a
/// plan, each anchor's mined negatives join its batch and take the place of
/// random batch-mates, so such batches carry fewer anchors.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    plan: Option<&HardNegativePlan>,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::config(format!(
            "batch size {batch_size} < 2 leaves no in-batch negatives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch.wrapping_mul(0xa076_1d64_78bd_642f));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let captions: Vec<usize> = dataset
        .items
        .iter()
        .map(|it| rng.random_range(0..it.captions.len().max(1)))
        .collect();

    let mut batches = Vec::new();
    let mut current: Vec<BatchMember> = Vec::with_capacity(batch_size);
    for &idx in &order {
        let extras: Vec<usize> = plan
            .and_then(|p| p.negatives.get(&idx))
            .map(|v| v.iter().copied().filter(|&j| j != idx).collect())
            .unwrap_or_default();
        let present = |cur: &[BatchMember], j: usize| cur.iter().any(|m| m.item == j);
        let needed = 1 + extras.iter().filter(|&&j| !present(&current, j)).count();
        if !current.is_empty() && current.len() + needed > batch_size {
            batches.push(Batch {
                members: core::mem::take(&mut current),
            });
        }
        if let Some(m) = current.iter_mut().find(|m| m.item == idx) {
            m.anchor = true;
        } else {
            current.push(BatchMember {
                item: idx,
                caption: captions[idx],
                anchor: true,
            });
        }
        for j in extras {
            if !present(&current, j) {
                current.push(BatchMember {
                    item: j,
                    caption: captions[j],
                    anchor: false,
                });
            }
        }
    }
    if !current.is_empty() {
        batches.push(Batch { members: current });
    }
    Ok(batches)
}
