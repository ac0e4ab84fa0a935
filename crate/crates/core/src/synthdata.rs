//! Procedural GUI-like scenes, patch rendering, and the line-delimited corpus.
//!
//! A scene is a fine grid of cells. Every widget paints its cells with one
//! visual id that encodes its (kind, color, glyph) triple. Rendering pools
//! `cells_per_patch x cells_per_patch` blocks of cells into one patch token by
//! strict majority, falling back to a reserved MIXED token.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropRegion, PatchGrid};
use crate::toymodel::VisualTokens;

pub const CORPUS_FORMAT: &str = "aima-corpus/1";
pub const MANIFEST_FORMAT: &str = "aima-manifest/1";
pub const BACKGROUND: u32 = 0;
/// Number of row (and column) bands a query can name.
pub const BANDS: usize = 3;

/// Attribute inventory and the visual/text id layout derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub kinds: usize,
    pub colors: usize,
    pub glyphs: usize,
}

/// One query word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attr {
    Click,
    Kind(usize),
    Color(usize),
    Glyph(usize),
    RowBand(usize),
    ColBand(usize),
}

impl Vocabulary {
    pub const fn standard() -> Self {
        Self { kinds: 4, colors: 4, glyphs: 2 }
    }

    pub fn widget_id(&self, kind: usize, color: usize, glyph: usize) -> u32 {
        1 + ((kind * self.colors + color) * self.glyphs + glyph) as u32
    }

    pub fn mixed_id(&self) -> u32 {
        1 + (self.kinds * self.colors * self.glyphs) as u32
    }

    pub fn visual_size(&self) -> usize {
        self.mixed_id() as usize + 1
    }

    pub fn text_size(&self) -> usize {
        1 + self.kinds + self.colors + self.glyphs + 2 * BANDS
    }

    pub fn text_id(&self, attr: Attr) -> u32 {
        let k = self.kinds;
        let c = self.colors;
        let g = self.glyphs;
        (match attr {
            Attr::Click => 0,
            Attr::Kind(i) => 1 + i,
            Attr::Color(i) => 1 + k + i,
            Attr::Glyph(i) => 1 + k + c + i,
            Attr::RowBand(i) => 1 + k + c + g + i,
            Attr::ColBand(i) => 1 + k + c + g + BANDS + i,
        }) as u32
    }

    pub fn decode_text(&self, id: u32) -> Option<Attr> {
        let mut i = id as usize;
        if i == 0 {
            return Some(Attr::Click);
        }
        i -= 1;
        for (n, make) in [
            (self.kinds, Attr::Kind as fn(usize) -> Attr),
            (self.colors, Attr::Color),
            (self.glyphs, Attr::Glyph),
            (BANDS, Attr::RowBand),
            (BANDS, Attr::ColBand),
        ] {
            if i < n {
                return Some(make(i));
            }
            i -= n;
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    Easy,
    Hard,
}

impl DifficultyLevel {
    pub fn name(self) -> &'static str {
        match self {
            DifficultyLevel::Easy => "easy",
            DifficultyLevel::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(DifficultyLevel::Easy),
            "hard" => Ok(DifficultyLevel::Hard),
            other => Err(Error::Config(format!("unknown difficulty `{other}` (easy|hard)"))),
        }
    }

    pub fn config(self) -> Difficulty {
        match self {
            DifficultyLevel::Easy => Difficulty::easy(),
            DifficultyLevel::Hard => Difficulty::hard(),
        }
    }
}

/// Which (kind, color) pairs may be drawn as the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetPool {
    #[default]
    Any,
    /// Pairs for which [`is_holdout_pair`] is false.
    Common,
    /// Pairs for which [`is_holdout_pair`] is true.
    Holdout,
}

/// A quarter of the (kind, color) pairs, reserved for evaluation under a hard split.
pub fn is_holdout_pair(kind: usize, color: usize) -> bool {
    (kind + 2 * color) % 4 == 3
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Difficulty {
    pub level: DifficultyLevel,
    pub vocab: Vocabulary,
    pub fine_w: u32,
    pub fine_h: u32,
    pub cell_px: u32,
    pub cells_per_patch: u32,
    pub min_widgets: usize,
    pub max_widgets: usize,
    /// Widget side range in cells.
    pub min_side: u32,
    pub max_side: u32,
    /// Probability that a distractor copies the target's kind and color.
    pub share_prob: f64,
    /// Every widget has a distinct (kind, color) pair.
    pub unique_pairs: bool,
    pub pool: TargetPool,
}

impl Difficulty {
    pub fn easy() -> Self {
        Self {
            level: DifficultyLevel::Easy,
            vocab: Vocabulary::standard(),
            fine_w: 56,
            fine_h: 56,
            cell_px: 8,
            cells_per_patch: 4,
            min_widgets: 3,
            max_widgets: 6,
            min_side: 6,
            max_side: 14,
            share_prob: 0.0,
            unique_pairs: true,
            pool: TargetPool::Any,
        }
    }

    pub fn hard() -> Self {
        Self {
            level: DifficultyLevel::Hard,
            vocab: Vocabulary::standard(),
            fine_w: 112,
            fine_h: 112,
            cell_px: 8,
            cells_per_patch: 8,
            min_widgets: 6,
            max_widgets: 10,
            min_side: 4,
            max_side: 10,
            share_prob: 0.5,
            unique_pairs: false,
            pool: TargetPool::Any,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = &self.vocab;
        if v.kinds == 0 || v.colors == 0 || v.glyphs == 0 {
            return Err(Error::Config("attribute vocabularies must be non-empty".into()));
        }
        if self.fine_w == 0 || self.fine_h == 0 || self.cell_px == 0 || self.cells_per_patch == 0 {
            return Err(Error::Config("scene sizes must be positive".into()));
        }
        if self.min_widgets == 0 || self.min_widgets > self.max_widgets {
            return Err(Error::Config("need 1 <= min_widgets <= max_widgets".into()));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.fine_w.min(self.fine_h) {
            return Err(Error::Config("widget side range does not fit the scene".into()));
        }
        if self.unique_pairs && self.max_widgets > v.kinds * v.colors {
            return Err(Error::Config("more widgets than distinct (kind, color) pairs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Widget {
    pub kind: usize,
    pub color: usize,
    pub glyph: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub fine_w: u32,
    pub fine_h: u32,
    pub cell_px: u32,
    /// Default step-one granularity.
    pub cells_per_patch: u32,
    /// Row-major `fine_h x fine_w` visual ids.
    pub cells: Vec<u32>,
    pub widgets: Vec<Widget>,
    pub target: usize,
    pub query_tokens: Vec<u32>,
    pub gt_bbox: BBox,
}

impl Scene {
    pub fn width_px(&self) -> u32 {
        self.fine_w * self.cell_px
    }

    pub fn height_px(&self) -> u32 {
        self.fine_h * self.cell_px
    }

    pub fn cell(&self, x: u32, y: u32) -> u32 {
        self.cells[(y * self.fine_w + x) as usize]
    }

    /// Patch grid of the default full-screen render.
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.width_px(), self.height_px(), self.cells_per_patch * self.cell_px)
    }

    fn band(&self, v: f64, extent: u32) -> usize {
        ((v / extent as f64 * BANDS as f64).floor() as usize).min(BANDS - 1)
    }

    pub fn row_band(&self, w: &Widget) -> usize {
        self.band(w.bbox.center().y, self.height_px())
    }

    pub fn col_band(&self, w: &Widget) -> usize {
        self.band(w.bbox.center().x, self.width_px())
    }

    fn matches(&self, vocab: &Vocabulary, w: &Widget, query: &[u32]) -> bool {
        query.iter().all(|&t| match vocab.decode_text(t) {
            Some(Attr::Click) => true,
            Some(Attr::Kind(k)) => w.kind == k,
            Some(Attr::Color(c)) => w.color == c,
            Some(Attr::Glyph(g)) => w.glyph == g,
            Some(Attr::RowBand(b)) => self.row_band(w) == b,
            Some(Attr::ColBand(b)) => self.col_band(w) == b,
            None => false,
        })
    }

    /// Indices of every widget the query describes.
    pub fn referents(&self, vocab: &Vocabulary) -> Vec<usize> {
        (0..self.widgets.len()).filter(|&i| self.matches(vocab, &self.widgets[i], &self.query_tokens)).collect()
    }
}

/// How to turn a scene into patch tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub crop: Option<CropRegion>,
    /// Granularity before zoom; a crop renders at `cells_per_patch / zoom`.
    pub cells_per_patch: u32,
}

impl RenderSpec {
    pub fn full(cells_per_patch: u32) -> Self {
        Self { crop: None, cells_per_patch }
    }
}

/// Tokens plus the pixel frame they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub tokens: VisualTokens,
    /// Grid in the local frame (zoomed crop pixels, or global pixels without a crop).
    pub grid: PatchGrid,
    /// The cell-aligned crop actually rendered.
    pub crop: CropRegion,
}

/// Majority pooling over cell blocks with a MIXED fallback.
pub fn render(scene: &Scene, spec: &RenderSpec) -> Result<Rendered> {
    if spec.cells_per_patch == 0 {
        return Err(Error::domain("cells_per_patch must be positive"));
    }
    let vocab = Vocabulary::standard();
    let cp = scene.cell_px;
    let (x0, y0, w, h, zoom, cpp) = match spec.crop {
        None => (0, 0, scene.fine_w, scene.fine_h, 1.0, spec.cells_per_patch),
        Some(c) => {
            if !(c.zoom.is_finite() && c.zoom >= 1.0) {
                return Err(Error::domain(format!("zoom must be >= 1, got {}", c.zoom)));
            }
            if c.size_px == 0 || c.origin_x + c.size_px > scene.width_px() || c.origin_y + c.size_px > scene.height_px()
            {
                return Err(Error::domain(format!(
                    "crop at ({}, {}) of side {} lies outside the {}x{} scene",
                    c.origin_x,
                    c.origin_y,
                    c.size_px,
                    scene.width_px(),
                    scene.height_px()
                )));
            }
            let side = ((c.size_px as f64 / cp as f64).round() as u32).clamp(1, scene.fine_w.min(scene.fine_h));
            let ox = ((c.origin_x as f64 / cp as f64).round() as u32).min(scene.fine_w - side);
            let oy = ((c.origin_y as f64 / cp as f64).round() as u32).min(scene.fine_h - side);
            let cpp = ((spec.cells_per_patch as f64 / c.zoom).round() as u32).max(1);
            (ox, oy, side, side, c.zoom, cpp)
        }
    };
    let local_patch = cpp as f64 * cp as f64 * zoom;
    let local_w = w as f64 * cp as f64 * zoom;
    let local_h = h as f64 * cp as f64 * zoom;
    if [local_patch, local_w, local_h].iter().any(|v| (v - v.round()).abs() > 1e-9) {
        return Err(Error::domain(format!("zoom {zoom} does not map cells of {cp}px onto whole local pixels")));
    }
    let grid = PatchGrid::new(local_w.round() as u32, local_h.round() as u32, local_patch.round() as u32)?;
    let (cols, rows) = (w.div_ceil(cpp), h.div_ceil(cpp));
    debug_assert_eq!((cols as usize, rows as usize), (grid.cols(), grid.rows()));
    let mut ids = Vec::with_capacity((cols * rows) as usize);
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for pr in 0..rows {
        for pc in 0..cols {
            counts.clear();
            let ys = pr * cpp..((pr + 1) * cpp).min(h);
            let xs = pc * cpp..((pc + 1) * cpp).min(w);
            let total = ys.len() as u32 * xs.len() as u32;
            for y in ys {
                for x in xs.clone() {
                    *counts.entry(scene.cell(x0 + x, y0 + y)).or_default() += 1;
                }
            }
            let id = counts.iter().find(|(_, &n)| 2 * n > total).map_or(vocab.mixed_id(), |(&id, _)| id);
            ids.push(id);
        }
    }
    let crop = CropRegion { origin_x: x0 * cp, origin_y: y0 * cp, size_px: w.min(h) * cp, zoom };
    Ok(Rendered { tokens: VisualTokens::new(ids, rows as usize, cols as usize)?, grid, crop })
}

const MAX_ATTEMPTS: usize = 200;
const PLACE_TRIES: usize = 400;

/// Deterministic scene for `seed`.
pub fn gen_scene(seed: u64, difficulty: &Difficulty) -> Result<Scene> {
    difficulty.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match try_scene(&mut rng, seed, difficulty) {
            Ok(s) => return Ok(s),
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation { attempts: MAX_ATTEMPTS, reason: last })
}

fn pick_pair(rng: &mut ChaCha8Rng, v: &Vocabulary, pool: TargetPool) -> std::result::Result<(usize, usize), String> {
    let pairs: Vec<(usize, usize)> = (0..v.kinds)
        .flat_map(|k| (0..v.colors).map(move |c| (k, c)))
        .filter(|&(k, c)| match pool {
            TargetPool::Any => true,
            TargetPool::Common => !is_holdout_pair(k, c),
            TargetPool::Holdout => is_holdout_pair(k, c),
        })
        .collect();
    pairs.choose(rng).copied().ok_or_else(|| "target pool is empty".to_string())
}

fn try_scene(rng: &mut ChaCha8Rng, seed: u64, d: &Difficulty) -> std::result::Result<Scene, String> {
    let v = d.vocab;
    let n = rng.random_range(d.min_widgets..=d.max_widgets);

    // Attributes first; the target is widget 0 until the final shuffle.
    let (tk, tc) = pick_pair(rng, &v, d.pool)?;
    let mut attrs = vec![(tk, tc, rng.random_range(0..v.glyphs))];
    let mut used = vec![(tk, tc)];
    while attrs.len() < n {
        let (k, c) = if !d.unique_pairs && rng.random_bool(d.share_prob) {
            (tk, tc)
        } else {
            (rng.random_range(0..v.kinds), rng.random_range(0..v.colors))
        };
        if d.unique_pairs && used.contains(&(k, c)) {
            continue;
        }
        used.push((k, c));
        attrs.push((k, c, rng.random_range(0..v.glyphs)));
    }

    // Place non-overlapping rectangles with a one-cell gap.
    let mut rects: Vec<(u32, u32, u32, u32)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACE_TRIES {
            let w = rng.random_range(d.min_side..=d.max_side);
            let h = rng.random_range(d.min_side..=d.max_side);
            let x = rng.random_range(0..=d.fine_w - w);
            let y = rng.random_range(0..=d.fine_h - h);
            let clear = rects.iter().all(|&(ox, oy, ow, oh)| x > ox + ow || ox > x + w || y > oy + oh || oy > y + h);
            if clear {
                rects.push((x, y, w, h));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(format!("could not place {n} widgets"));
        }
    }

    let cp = d.cell_px as f64;
    let mut widgets: Vec<Widget> = attrs
        .iter()
        .zip(&rects)
        .map(|(&(kind, color, glyph), &(x, y, w, h))| Widget {
            kind,
            color,
            glyph,
            bbox: BBox::new(x as f64 * cp, y as f64 * cp, (x + w) as f64 * cp, (y + h) as f64 * cp),
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let target = order.iter().position(|&i| i == 0).expect("target present");
    widgets = order.iter().map(|&i| widgets[i]).collect();

    let mut cells = vec![BACKGROUND; (d.fine_w * d.fine_h) as usize];
    for w in &widgets {
        let id = v.widget_id(w.kind, w.color, w.glyph);
        let (x1, y1) = ((w.bbox.x1 / cp) as u32, (w.bbox.y1 / cp) as u32);
        let (x2, y2) = ((w.bbox.x2 / cp) as u32, (w.bbox.y2 / cp) as u32);
        for y in y1..y2 {
            for x in x1..x2 {
                cells[(y * d.fine_w + x) as usize] = id;
            }
        }
    }

    let mut scene = Scene {
        seed,
        fine_w: d.fine_w,
        fine_h: d.fine_h,
        cell_px: d.cell_px,
        cells_per_patch: d.cells_per_patch,
        cells,
        gt_bbox: widgets[target].bbox,
        widgets,
        target,
        query_tokens: Vec::new(),
    };

    // Shortest attribute list that singles out the target.
    let t = scene.widgets[target];
    let words = [Attr::Glyph(t.glyph), Attr::RowBand(scene.row_band(&t)), Attr::ColBand(scene.col_band(&t))];
    let mut extras: Vec<Vec<Attr>> = vec![vec![]];
    for size in 1..=words.len() {
        for mask in 0u32..(1 << words.len()) {
            if mask.count_ones() as usize == size {
                extras.push((0..words.len()).filter(|i| mask & (1 << i) != 0).map(|i| words[i]).collect());
            }
        }
    }
    for extra in extras {
        let mut q = vec![v.text_id(Attr::Click), v.text_id(Attr::Kind(t.kind)), v.text_id(Attr::Color(t.color))];
        q.extend(extra.iter().map(|&a| v.text_id(a)));
        scene.query_tokens = q;
        if scene.referents(&v) == [target] {
            return Ok(scene);
        }
    }
    Err("no attribute combination identifies the target".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Scene seeds of different splits live in disjoint ranges.
pub fn split_seed(base: u64, split: Split, i: u64) -> u64 {
    base.wrapping_add(split.index() << 40).wrapping_add(i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub difficulty: DifficultyLevel,
    pub scene: Scene,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub difficulty: DifficultyLevel,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Hold out a quarter of the target (kind, color) pairs from training.
    pub hard_split: bool,
}

impl DatasetSpec {
    pub fn new(count: usize, seed: u64, difficulty: DifficultyLevel) -> Self {
        Self { count, seed, difficulty, val_frac: 0.1, test_frac: 0.1, hard_split: false }
    }

    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.val_frac) || !ok(self.test_frac) || self.val_frac + self.test_frac > 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        let val = (self.count as f64 * self.val_frac).round() as usize;
        let test = ((self.count as f64 * self.test_frac).round() as usize).min(self.count - val);
        Ok([self.count - val - test, val, test])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub count: usize,
    pub seed_start: u64,
    pub seed_end: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub difficulty: DifficultyLevel,
    pub count: usize,
    pub hard_split: bool,
    pub splits: BTreeMap<String, SplitInfo>,
    /// Train vs val target (kind, color) histograms; absent without a val split.
    pub target_chi_square: Option<ChiSquare>,
}

/// Generate every split in memory.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Corpus, Manifest)> {
    let counts = spec.split_counts()?;
    let mut records = Vec::with_capacity(spec.count);
    let mut splits = BTreeMap::new();
    let mut next_id = 0u64;
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        let mut d = spec.difficulty.config();
        if spec.hard_split {
            d.pool = if *split == Split::Train { TargetPool::Common } else { TargetPool::Holdout };
        }
        let scenes: Vec<Scene> = (0..n as u64)
            .into_par_iter()
            .map(|i| gen_scene(split_seed(spec.seed, *split, i), &d))
            .collect::<Result<_>>()?;
        let mut hasher = Sha256::new();
        for scene in scenes {
            let rec = Record { id: next_id, split: *split, difficulty: spec.difficulty, scene };
            hasher.update(record_line(&rec).as_bytes());
            hasher.update(b"\n");
            records.push(rec);
            next_id += 1;
        }
        splits.insert(
            split.name().to_string(),
            SplitInfo {
                count: n,
                seed_start: split_seed(spec.seed, *split, 0),
                seed_end: split_seed(spec.seed, *split, n as u64),
                sha256: hex(&hasher.finalize()),
            },
        );
    }
    let corpus = Corpus { records };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: spec.seed,
        difficulty: spec.difficulty,
        count: spec.count,
        hard_split: spec.hard_split,
        splits,
        target_chi_square: target_chi_square(&corpus, Split::Train, Split::Val),
    };
    Ok((corpus, manifest))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pearson chi-square on the 2 x K table of target (kind, color) counts.
pub fn target_chi_square(corpus: &Corpus, a: Split, b: Split) -> Option<ChiSquare> {
    let hist = |s: Split| {
        let mut h: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for r in corpus.split(s) {
            let t = r.scene.widgets[r.scene.target];
            *h.entry((t.kind, t.color)).or_default() += 1.0;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (na, nb): (f64, f64) = (ha.values().sum(), hb.values().sum());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let mut keys: Vec<_> = ha.keys().chain(hb.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let n = na + nb;
    let mut stat = 0.0;
    for k in &keys {
        let oa = ha.get(k).copied().unwrap_or(0.0);
        let ob = hb.get(k).copied().unwrap_or(0.0);
        let col = oa + ob;
        for (o, rowsum) in [(oa, na), (ob, nb)] {
            let e = rowsum * col / n;
            stat += (o - e) * (o - e) / e;
        }
    }
    Some(ChiSquare { statistic: stat, dof: keys.len().saturating_sub(1) })
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    format: String,
    id: u64,
    split: Split,
    difficulty: DifficultyLevel,
    seed: u64,
    fine_w: u32,
    fine_h: u32,
    cell_px: u32,
    cells_per_patch: u32,
    /// `[id, run]` pairs over the row-major cell grid.
    cells_rle: Vec<[u32; 2]>,
    widgets: Vec<Widget>,
    target: usize,
    query_tokens: Vec<u32>,
    gt_bbox: BBox,
}

fn rle(cells: &[u32]) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for &c in cells {
        match out.last_mut() {
            Some([id, n]) if *id == c => *n += 1,
            _ => out.push([c, 1]),
        }
    }
    out
}

pub fn record_line(rec: &Record) -> String {
    let s = &rec.scene;
    let json = RecordJson {
        format: CORPUS_FORMAT.to_string(),
        id: rec.id,
        split: rec.split,
        difficulty: rec.difficulty,
        seed: s.seed,
        fine_w: s.fine_w,
        fine_h: s.fine_h,
        cell_px: s.cell_px,
        cells_per_patch: s.cells_per_patch,
        cells_rle: rle(&s.cells),
        widgets: s.widgets.clone(),
        target: s.target,
        query_tokens: s.query_tokens.clone(),
        gt_bbox: s.gt_bbox,
    };
    serde_json::to_string(&json).expect("records serialize")
}

pub fn parse_record(line: &str) -> Result<Record> {
    let j: RecordJson = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    if j.format != CORPUS_FORMAT {
        return Err(Error::Parse(format!("unsupported corpus format `{}`", j.format)));
    }
    let total = j.fine_w as usize * j.fine_h as usize;
    let mut cells = Vec::with_capacity(total);
    for [id, n] in j.cells_rle {
        if cells.len() + n as usize > total {
            return Err(Error::Parse("run-length cells exceed the grid".into()));
        }
        cells.extend(std::iter::repeat_n(id, n as usize));
    }
    if cells.len() != total {
        return Err(Error::Parse(format!("{} cells for a {}x{} grid", cells.len(), j.fine_w, j.fine_h)));
    }
    if j.target >= j.widgets.len() {
        return Err(Error::Parse(format!("target {} of {} widgets", j.target, j.widgets.len())));
    }
    if j.cell_px == 0 || j.cells_per_patch == 0 {
        return Err(Error::Parse("cell sizes must be positive".into()));
    }
    Ok(Record {
        id: j.id,
        split: j.split,
        difficulty: j.difficulty,
        scene: Scene {
            seed: j.seed,
            fine_w: j.fine_w,
            fine_h: j.fine_h,
            cell_px: j.cell_px,
            cells_per_patch: j.cells_per_patch,
            cells,
            widgets: j.widgets,
            target: j.target,
            query_tokens: j.query_tokens,
            gt_bbox: j.gt_bbox,
        },
    })
}

/// `data.jsonl` -> `data.manifest.json`.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("manifest.json")
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in &corpus.records {
        writeln!(w, "{}", record_line(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(rec);
    }
    Ok(Corpus { records })
}

/// Generate, then write the corpus and its sibling manifest.
pub fn write_dataset(spec: &DatasetSpec, path: &Path) -> Result<Manifest> {
    let (corpus, manifest) = gen_dataset(spec)?;
    write_corpus(&corpus, path)?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
