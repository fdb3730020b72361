//! Synthetic referring-grounding data: raster scenes of colored shapes, a
//! small referring-expression grammar with an exhaustive resolver, and a
//! deterministic on-disk dataset format.
//!
//! Every sample is a pure function of its seed. Images and masks are hard
//! rasters (no anti-aliasing), so the ground-truth mask is exact; every
//! expression is verified at generation time to resolve to exactly one
//! object.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::autodiff::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

use rand_core::RngCore;

/// Grammar/format version recorded in the manifest.
pub const DATA_VERSION: &str = "v1";

/// Fixed vocabulary; index is the token id, id 0 is padding.
pub const VOCAB: [&str; 16] = [
    "<pad>", "the", "small", "large", "red", "green", "blue", "yellow", "circle", "square",
    "triangle", "left", "right", "of", "above", "below",
];

/// Pad id.
pub const PAD: usize = 0;

/// Every expression is padded to this length — the longest phrase the
/// grammar can produce ("the <size> <color> <shape> left of the <color>
/// <shape>" = 9 words).
pub const PAD_LEN: usize = 9;

/// Smallest canvas the generator accepts: below this, two large objects
/// cannot be placed disjointly with comfortable margins.
pub const MIN_CANVAS: usize = 24;

fn word_id(word: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::Vocab(format!("unknown word '{word}'")))
}

// ---------------------------------------------------------------------------
// Scene domain
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjSize {
    Small,
    Large,
}

impl ObjSize {
    pub const ALL: [ObjSize; 2] = [ObjSize::Small, ObjSize::Large];

    pub fn word(self) -> &'static str {
        match self {
            ObjSize::Small => "small",
            ObjSize::Large => "large",
        }
    }

    /// Raster half-extent in pixels.
    pub fn radius(self) -> usize {
        match self {
            ObjSize::Small => 3,
            ObjSize::Large => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: ObjSize,
    /// Column of the center; column 0 is the left edge.
    pub cx: usize,
    /// Row of the center; row 0 is the top, so "above" means smaller `cy`.
    pub cy: usize,
}

impl SceneObject {
    /// Hard-raster membership test for the pixel at column `x`, row `y`.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        let r = self.size.radius() as i64;
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Upward-pointing isoceles wedge: one-pixel apex at the top row,
            // full 2r+1 base at the bottom row.
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    /// Square canvas extent.
    pub s: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Disjointness predicate used during placement. Any pixel covered by an
/// object lies within Chebyshev distance r of its center, hence within
/// Euclidean distance r·√2; requiring center distance beyond √2·(r₁+r₂)
/// therefore guarantees the rasters share no pixel (and comfortably implies
/// the weaker "distance > sum of radii").
fn well_separated(a: &SceneObject, b: &SceneObject) -> bool {
    let dx = a.cx as i64 - b.cx as i64;
    let dy = a.cy as i64 - b.cy as i64;
    let rsum = (a.size.radius() + b.size.radius()) as i64;
    dx * dx + dy * dy > 2 * rsum * rsum
}

// ---------------------------------------------------------------------------
// Grammar: phrases, rendering to tokens, parsing, resolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Does `a <relation> b` hold? Strict axis comparison of centers with a
    /// two-pixel margin; rows grow downward.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        match self {
            Relation::LeftOf => a.cx + 2 <= b.cx,
            Relation::RightOf => b.cx + 2 <= a.cx,
            Relation::Above => a.cy + 2 <= b.cy,
            Relation::Below => b.cy + 2 <= a.cy,
        }
    }
}

/// A parsed referring expression: optional size and color, a shape, and an
/// optional relational clause against an anchor description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phrase {
    pub size: Option<ObjSize>,
    pub color: Option<Color>,
    pub shape: ShapeKind,
    pub relation: Option<RelClause>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelClause {
    pub relation: Relation,
    pub anchor_color: Option<Color>,
    pub anchor_shape: ShapeKind,
}

impl Phrase {
    /// Surface form, always starting with "the".
    pub fn words(&self) -> Vec<&'static str> {
        let mut out = vec!["the"];
        if let Some(z) = self.size {
            out.push(z.word());
        }
        if let Some(c) = self.color {
            out.push(c.word());
        }
        out.push(self.shape.word());
        if let Some(rel) = &self.relation {
            out.extend_from_slice(rel.relation.words());
            out.push("the");
            if let Some(c) = rel.anchor_color {
                out.push(c.word());
            }
            out.push(rel.anchor_shape.word());
        }
        out
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    /// Token ids padded to [`PAD_LEN`].
    pub fn token_ids(&self) -> Result<Vec<usize>> {
        let words = self.words();
        if words.len() > PAD_LEN {
            return Err(Error::Data(format!(
                "phrase '{}' exceeds the pad length {PAD_LEN}",
                self.text()
            )));
        }
        let mut ids = Vec::with_capacity(PAD_LEN);
        for w in &words {
            ids.push(word_id(w)?);
        }
        ids.resize(PAD_LEN, PAD);
        Ok(ids)
    }
}

struct TokenCursor<'a> {
    words: &'a [&'static str],
    pos: usize,
}

impl<'a> TokenCursor<'a> {
    fn peek(&self) -> Option<&'static str> {
        self.words.get(self.pos).copied()
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }
}

fn parse_size(c: &mut TokenCursor) -> Option<ObjSize> {
    ObjSize::ALL.into_iter().find(|z| c.eat(z.word()))
}

fn parse_color(c: &mut TokenCursor) -> Option<Color> {
    Color::ALL.into_iter().find(|col| c.eat(col.word()))
}

fn parse_shape(c: &mut TokenCursor) -> Result<ShapeKind> {
    ShapeKind::ALL
        .into_iter()
        .find(|s| c.eat(s.word()))
        .ok_or_else(|| Error::Data(format!("expected a shape word, found {:?}", c.peek())))
}

fn parse_relation(c: &mut TokenCursor) -> Result<Option<Relation>> {
    for rel in Relation::ALL {
        let mark = c.pos;
        if rel.words().iter().all(|w| c.eat(w)) {
            return Ok(Some(rel));
        }
        c.pos = mark;
    }
    if c.peek().is_some() {
        return Err(Error::Data(format!(
            "expected a relation or end of phrase, found {:?}",
            c.peek()
        )));
    }
    Ok(None)
}

/// Parses a padded token-id sequence back into a [`Phrase`]. Trailing pad
/// ids are ignored; a pad in the middle is an error.
pub fn parse_tokens(ids: &[usize]) -> Result<Phrase> {
    let mut words: Vec<&'static str> = Vec::new();
    let mut seen_pad = false;
    for &id in ids {
        if id >= VOCAB.len() {
            return Err(Error::Vocab(format!("token id {id} out of range")));
        }
        if id == PAD {
            seen_pad = true;
            continue;
        }
        if seen_pad {
            return Err(Error::Data("padding inside the phrase".into()));
        }
        words.push(VOCAB[id]);
    }
    parse_words(&words)
}

/// Parses a word sequence against the grammar
/// `[the] <size>? <color>? <shape> [<relation> the <color>? <shape>]`.
pub fn parse_words(words: &[&'static str]) -> Result<Phrase> {
    let mut c = TokenCursor { words, pos: 0 };
    c.eat("the");
    let size = parse_size(&mut c);
    let color = parse_color(&mut c);
    let shape = parse_shape(&mut c)?;
    let relation = match parse_relation(&mut c)? {
        Some(rel) => {
            if !c.eat("the") {
                return Err(Error::Data(format!(
                    "expected 'the' after the relation, found {:?}",
                    c.peek()
                )));
            }
            let anchor_color = parse_color(&mut c);
            let anchor_shape = parse_shape(&mut c)?;
            Some(RelClause {
                relation: rel,
                anchor_color,
                anchor_shape,
            })
        }
        None => None,
    };
    if c.pos != words.len() {
        return Err(Error::Data(format!(
            "trailing words after the phrase: {:?}",
            &words[c.pos..]
        )));
    }
    Ok(Phrase {
        size,
        color,
        shape,
        relation,
    })
}

fn matches_attrs(
    o: &SceneObject,
    size: Option<ObjSize>,
    color: Option<Color>,
    shape: ShapeKind,
) -> bool {
    o.shape == shape && size.is_none_or(|z| o.size == z) && color.is_none_or(|c| o.color == c)
}

/// Exhaustive resolver: the indices of every object the phrase describes.
/// An object satisfies a relational phrase when some *other* object matches
/// the anchor description and stands in the stated relation to it.
pub fn resolve(scene: &Scene, phrase: &Phrase) -> Vec<usize> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| {
            if !matches_attrs(o, phrase.size, phrase.color, phrase.shape) {
                return false;
            }
            match &phrase.relation {
                None => true,
                Some(rel) => scene.objects.iter().enumerate().any(|(j, b)| {
                    j != *i
                        && matches_attrs(b, None, rel.anchor_color, rel.anchor_shape)
                        && rel.relation.holds(o, b)
                }),
            }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Emits the shortest phrase that uniquely picks out `target`, searching a
/// fixed ladder: "the <color> <shape>", then with the size added, then
/// relational clauses in ascending length. Relational anchors must
/// themselves be uniquely described. Errors when no phrase resolves to
/// exactly the target.
pub fn render_expression(scene: &Scene, target: usize) -> Result<Phrase> {
    let t = scene
        .objects
        .get(target)
        .ok_or_else(|| Error::Data(format!("target index {target} out of range")))?;
    let mains = [
        (None, Some(t.color)),
        (Some(t.size), Some(t.color)),
    ];
    // Attribute-only phrases, shortest first.
    for (size, color) in mains {
        let phrase = Phrase {
            size,
            color,
            shape: t.shape,
            relation: None,
        };
        if resolve(scene, &phrase) == [target] {
            return Ok(phrase);
        }
    }
    // Relational fallback: every (main, relation, anchor, anchor-description)
    // combination, ordered by total phrase length with deterministic
    // tie-breaking.
    let mut candidates: Vec<(usize, usize, Phrase)> = Vec::new();
    for (mi, (size, color)) in mains.into_iter().enumerate() {
        for (ri, rel) in Relation::ALL.into_iter().enumerate() {
            for (ai, anchor) in scene.objects.iter().enumerate() {
                if ai == target || !rel.holds(t, anchor) {
                    continue;
                }
                for anchor_color in [None, Some(anchor.color)] {
                    let anchor_unique = scene
                        .objects
                        .iter()
                        .filter(|o| matches_attrs(o, None, anchor_color, anchor.shape))
                        .count()
                        == 1;
                    if !anchor_unique {
                        continue;
                    }
                    let phrase = Phrase {
                        size,
                        color,
                        shape: t.shape,
                        relation: Some(RelClause {
                            relation: rel,
                            anchor_color,
                            anchor_shape: anchor.shape,
                        }),
                    };
                    let len = phrase.words().len();
                    let rank = ((mi * 8 + ri) * 8 + ai) * 2 + anchor_color.is_some() as usize;
                    candidates.push((len, rank, phrase));
                }
            }
        }
    }
    candidates.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    for (_, _, phrase) in candidates {
        if resolve(scene, &phrase) == [target] {
            return Ok(phrase);
        }
    }
    Err(Error::Data(format!(
        "no phrase uniquely resolves to object {target}"
    )))
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Derives an independent child seed, e.g. one per sample index.
pub fn fork_seed(seed: u64, k: u64) -> u64 {
    rng::substream(seed, k).next_u64()
}

const REJECTION_BUDGET: u64 = 1000;
const TARGET_STREAM: u64 = 1_000_000;

/// Indices of the objects that the grammar can uniquely describe.
pub fn describable_objects(scene: &Scene) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|i| render_expression(scene, *i).is_ok())
        .collect()
}

/// Deterministically generates a valid scene for the seed: 2–4 objects,
/// pairwise disjoint rasters fully inside the canvas, at least one object
/// uniquely describable. Rejection-samples whole scenes, bounded attempts.
pub fn generate_scene(s: usize, seed: u64) -> Result<Scene> {
    if s < MIN_CANVAS {
        return Err(Error::Config(format!(
            "canvas {s} is too small; need at least {MIN_CANVAS}"
        )));
    }
    for attempt in 0..REJECTION_BUDGET {
        let mut r = rng::substream(seed, attempt);
        if let Some(objects) = try_place(s, &mut r) {
            let scene = Scene {
                s,
                objects,
                seed,
            };
            if !describable_objects(&scene).is_empty() {
                return Ok(scene);
            }
        }
    }
    Err(Error::Data(format!(
        "scene rejection budget ({REJECTION_BUDGET}) exhausted for seed {seed}; re-seed"
    )))
}

fn try_place(s: usize, r: &mut Rng) -> Option<Vec<SceneObject>> {
    let count = 2 + rng::below(r, 3);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = ShapeKind::ALL[rng::below(r, 3)];
        let color = Color::ALL[rng::below(r, 4)];
        let size = ObjSize::ALL[rng::below(r, 2)];
        let radius = size.radius();
        let cx = rng::range_inclusive(r, radius, s - 1 - radius);
        let cy = rng::range_inclusive(r, radius, s - 1 - radius);
        let obj = SceneObject {
            shape,
            color,
            size,
            cx,
            cy,
        };
        if !objects.iter().all(|other| well_separated(&obj, other)) {
            return None;
        }
        objects.push(obj);
    }
    Some(objects)
}

/// Rasterizes the scene: interleaved RGB bytes (row-major) plus one binary
/// mask per object. Objects never overlap, so draw order is irrelevant.
pub fn render_scene(scene: &Scene) -> (Vec<u8>, Vec<Vec<u8>>) {
    let s = scene.s;
    let mut rgb = vec![0u8; 3 * s * s];
    let mut masks = vec![vec![0u8; s * s]; scene.objects.len()];
    for (oi, obj) in scene.objects.iter().enumerate() {
        let c = obj.color.rgb();
        let r = obj.size.radius();
        for y in obj.cy.saturating_sub(r)..=(obj.cy + r).min(s - 1) {
            for x in obj.cx.saturating_sub(r)..=(obj.cx + r).min(s - 1) {
                if obj.covers(x, y) {
                    let p = y * s + x;
                    rgb[3 * p..3 * p + 3].copy_from_slice(&c);
                    masks[oi][p] = 1;
                }
            }
        }
    }
    (rgb, masks)
}

/// One generated training/eval sample.
pub struct Sample {
    pub id: String,
    /// Planar `[3×S×S]`, values in {0, 1}.
    pub image: Tensor,
    /// Padded to [`PAD_LEN`].
    pub tokens: Vec<usize>,
    pub expression: String,
    /// Binary `[1×S×S]`.
    pub gt_mask: Tensor,
    pub target: usize,
}

fn image_tensor(s: usize, rgb: &[u8]) -> Tensor {
    let mut planar = vec![0.0f64; 3 * s * s];
    for p in 0..s * s {
        for ch in 0..3 {
            planar[ch * s * s + p] = rgb[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, s, s], planar).expect("image shape")
}

fn mask_tensor(s: usize, mask: &[u8]) -> Tensor {
    let data: Vec<f64> = mask.iter().map(|v| f64::from(*v > 0)).collect();
    Tensor::from_vec(&[1, s, s], data).expect("mask shape")
}

/// Generates the full sample for a seed: scene, deterministic target choice
/// among the describable objects, expression, raster, and ground truth.
pub fn generate_sample(s: usize, seed: u64, id: &str) -> Result<Sample> {
    let scene = generate_scene(s, seed)?;
    let eligible = describable_objects(&scene);
    let mut tr = rng::substream(seed, TARGET_STREAM);
    let target = eligible[rng::below(&mut tr, eligible.len())];
    let phrase = render_expression(&scene, target)?;
    let tokens = phrase.token_ids()?;
    let (rgb, masks) = render_scene(&scene);
    Ok(Sample {
        id: id.to_string(),
        image: image_tensor(s, &rgb),
        tokens,
        expression: phrase.text(),
        gt_mask: mask_tensor(s, &masks[target]),
        target,
    })
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub target: usize,
    pub expression: String,
    pub tokens: Vec<usize>,
    pub image_file: String,
    pub mask_file: String,
}

#[derive(Clone, Debug)]
pub struct DatasetMeta {
    pub version: String,
    pub n: usize,
    pub s: usize,
    pub seed: u64,
    pub pad: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub meta: DatasetMeta,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Assigns exactly ⌊n/10⌋ samples to the validation split: ids are ranked
/// by (FNV-1a hash, id) and the lowest tenth goes to validation. The split
/// is a pure function of the id set.
fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n_val = ids.len() / 10;
    let mut ranked: Vec<(u64, &String)> = ids.iter().map(|id| (fnv1a64(id.as_bytes()), id)).collect();
    ranked.sort();
    let val: Vec<&String> = ranked.iter().take(n_val).map(|(_, id)| *id).collect();
    ids.iter()
        .map(|id| {
            if val.contains(&id) {
                Split::Val
            } else {
                Split::Train
            }
        })
        .collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.tsv")
}

/// Generates `n` samples under `out_dir` and writes the manifest. Refuses
/// to touch a directory that already holds a manifest unless `force` is
/// set. Regeneration with the same `(n, s, seed)` is byte-identical.
pub fn generate_dataset(n: usize, s: usize, seed: u64, out_dir: &Path, force: bool) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let manifest_file = manifest_path(out_dir);
    if manifest_file.exists() && !force {
        return Err(Error::Data(format!(
            "{} already holds a dataset; pass force to overwrite",
            out_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let ids: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
    let splits = assign_splits(&ids);

    let mut entries = Vec::with_capacity(n);
    for (i, (id, split)) in ids.iter().zip(&splits).enumerate() {
        let sample = generate_sample(s, fork_seed(seed, i as u64), id)
            .map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        let image_file = format!("{id}_img.ppm");
        let mask_file = format!("{id}_mask.pgm");
        let rgb = interleave_bytes(s, &sample.image);
        crate::pgm::write_ppm(&out_dir.join(&image_file), s, s, &rgb)?;
        let mask_bytes: Vec<u8> = sample
            .gt_mask
            .data()
            .iter()
            .map(|v| if *v > 0.5 { 255 } else { 0 })
            .collect();
        crate::pgm::write_pgm(&out_dir.join(&mask_file), s, s, &mask_bytes)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            split: *split,
            target: sample.target,
            expression: sample.expression,
            tokens: sample.tokens,
            image_file,
            mask_file,
        });
    }

    let meta = DatasetMeta {
        version: DATA_VERSION.to_string(),
        n,
        s,
        seed,
        pad: PAD_LEN,
        vocab: VOCAB.len(),
    };
    let manifest = Manifest { meta, entries };
    fs::write(&manifest_file, render_manifest(&manifest)).map_err(|e| Error::io(&manifest_file, e))?;
    Ok(manifest)
}

fn interleave_bytes(s: usize, image: &Tensor) -> Vec<u8> {
    let data = image.data();
    let mut rgb = vec![0u8; 3 * s * s];
    for p in 0..s * s {
        for ch in 0..3 {
            rgb[3 * p + ch] = (data[ch * s * s + p] * 255.0).round() as u8;
        }
    }
    rgb
}

fn render_manifest(m: &Manifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("# m3att-dataset version={}\n", m.meta.version));
    out.push_str(&format!(
        "# n={} canvas={} seed={} pad={} vocab={}\n",
        m.meta.n, m.meta.s, m.meta.seed, m.meta.pad, m.meta.vocab
    ));
    out.push_str("# id\tsplit\ttarget\texpression\ttokens\timage\tmask\n");
    for e in &m.entries {
        let tokens: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.split.as_str(),
            e.target,
            e.expression,
            tokens.join(","),
            e.image_file,
            e.mask_file
        ));
    }
    out
}

/// Reads a manifest back. Meta key=value pairs are taken from the leading
/// comment lines.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |why: String| Error::Data(format!("{}: {why}", path.display()));

    let mut kv: Vec<(String, String)> = Vec::new();
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            for tok in rest.split_whitespace() {
                if let Some((k, v)) = tok.split_once('=') {
                    kv.push((k.to_string(), v.to_string()));
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields, got {}", ln + 1, fields.len())));
        }
        let split = match fields[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(bad(format!("line {}: unknown split '{other}'", ln + 1))),
        };
        let target: usize = fields[2]
            .parse()
            .map_err(|_| bad(format!("line {}: bad target index", ln + 1)))?;
        let tokens: Vec<usize> = fields[4]
            .split(',')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: bad token list", ln + 1)))?;
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            split,
            target,
            expression: fields[3].to_string(),
            tokens,
            image_file: fields[5].to_string(),
            mask_file: fields[6].to_string(),
        });
    }
    let get = |key: &str| -> Result<String> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(format!("missing meta key '{key}'")))
    };
    let parse_num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| bad(format!("meta key '{key}' is not a number")))
    };
    let meta = DatasetMeta {
        version: get("version")?,
        n: parse_num("n")?,
        s: parse_num("canvas")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| bad("meta key 'seed' is not a number".into()))?,
        pad: parse_num("pad")?,
        vocab: parse_num("vocab")?,
    };
    if meta.version != DATA_VERSION {
        return Err(bad(format!(
            "dataset version '{}' does not match this build's '{DATA_VERSION}'",
            meta.version
        )));
    }
    Ok(Manifest { meta, entries })
}

/// Loads one sample's image and mask from disk into tensors.
pub fn load_sample(dir: &Path, entry: &ManifestEntry, s: usize) -> Result<Sample> {
    let (w, h, rgb) = crate::pgm::read_ppm(&dir.join(&entry.image_file))?;
    if (w, h) != (s, s) {
        return Err(Error::Data(format!(
            "{}: expected {s}x{s}, got {w}x{h}",
            entry.image_file
        )));
    }
    let (mw, mh, mask) = crate::pgm::read_pgm(&dir.join(&entry.mask_file))?;
    if (mw, mh) != (s, s) {
        return Err(Error::Data(format!(
            "{}: expected {s}x{s}, got {mw}x{mh}",
            entry.mask_file
        )));
    }
    let mask01: Vec<u8> = mask.iter().map(|v| u8::from(*v > 127)).collect();
    Ok(Sample {
        id: entry.id.clone(),
        image: image_tensor(s, &rgb),
        tokens: entry.tokens.clone(),
        expression: entry.expression.clone(),
        gt_mask: mask_tensor(s, &mask01),
        target: entry.target,
    })
}
