//! Deterministic synthetic image-caption corpora and the five-way
//! member / non-member / shadow / public split.
//!
//! Each image is a 32x32 RGB render of one or two coloured shapes on a noisy
//! background. The caption is a template filled with the rendered
//! attributes. Three families (`C`, `F`, `I`) use disjoint word lists, shape
//! sets and palettes so that they are distributionally separable. Template
//! choice is random per sample, which a model can only get right on images
//! it has memorized.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::textsim::TokenSeq;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MIN_CORPUS_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    C,
    F,
    I,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::C, Family::F, Family::I];

    pub fn letter(self) -> char {
        match self {
            Family::C => 'C',
            Family::F => 'F',
            Family::I => 'I',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'C' => Some(Family::C),
            'F' => Some(Family::F),
            'I' => Some(Family::I),
            _ => None,
        }
    }

    pub fn lexicon(self) -> &'static Lexicon {
        match self {
            Family::C => &LEX_C,
            Family::F => &LEX_F,
            Family::I => &LEX_I,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next().and_then(Family::from_letter), chars.next()) {
            (Some(f), None) => Ok(f),
            _ => Err(Error::InvalidArgument(format!("unknown corpus family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Plus,
    Diamond,
    Ring,
    Bar,
    Column,
    Ellipse,
    Frame,
    Wedge,
    Dot,
}

impl ShapeKind {
    /// Whether the pixel at offset `(dx, dy)` from the centre is covered.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let d2 = dx * dx + dy * dy;
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) / 1.8,
            ShapeKind::Plus => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Ring => d2 <= r * r && d2 >= (0.55 * r).powi(2),
            ShapeKind::Bar => ax <= r && ay <= 0.4 * r,
            ShapeKind::Column => ax <= 0.4 * r && ay <= r,
            ShapeKind::Ellipse => (dx / r).powi(2) + (dy / (0.6 * r)).powi(2) <= 1.0,
            ShapeKind::Frame => {
                let m = ax.max(ay);
                m <= 0.85 * r && m >= 0.5 * r
            }
            ShapeKind::Wedge => d2 <= r * r && dy >= 0.0,
            ShapeKind::Dot => d2 <= (0.5 * r).powi(2),
        }
    }
}

/// Word lists, palettes and shapes of one corpus family.
#[derive(Debug)]
pub struct Lexicon {
    pub determiner: &'static str,
    pub preposition: &'static str,
    pub background_noun: &'static str,
    pub colors: [(&'static str, [u8; 3]); 4],
    pub shapes: [(&'static str, ShapeKind); 4],
    pub backgrounds: [(&'static str, [u8; 3]); 3],
    /// `[vertical-first, vertical-second, horizontal]`.
    pub relations: [&'static str; 3],
}

static LEX_C: Lexicon = Lexicon {
    determiner: "a",
    preposition: "on",
    background_noun: "background",
    colors: [
        ("red", [220, 40, 40]),
        ("green", [40, 180, 60]),
        ("blue", [40, 70, 220]),
        ("yellow", [230, 210, 40]),
    ],
    shapes: [
        ("circle", ShapeKind::Circle),
        ("square", ShapeKind::Square),
        ("triangle", ShapeKind::Triangle),
        ("cross", ShapeKind::Plus),
    ],
    backgrounds: [("gray", [128, 128, 128]), ("white", [235, 235, 235]), ("black", [20, 20, 20])],
    relations: ["above", "below", "beside"],
};

static LEX_F: Lexicon = Lexicon {
    determiner: "one",
    preposition: "against",
    background_noun: "backdrop",
    colors: [
        ("orange", [240, 140, 20]),
        ("purple", [140, 50, 170]),
        ("pink", [250, 150, 200]),
        ("brown", [120, 70, 30]),
    ],
    shapes: [
        ("diamond", ShapeKind::Diamond),
        ("ring", ShapeKind::Ring),
        ("bar", ShapeKind::Bar),
        ("column", ShapeKind::Column),
    ],
    backgrounds: [("navy", [20, 30, 90]), ("olive", [110, 120, 40]), ("teal", [20, 120, 120])],
    relations: ["over", "under", "near"],
};

static LEX_I: Lexicon = Lexicon {
    determiner: "the",
    preposition: "upon",
    background_noun: "canvas",
    colors: [
        ("cyan", [30, 220, 230]),
        ("magenta", [220, 30, 200]),
        ("lime", [160, 240, 60]),
        ("maroon", [120, 20, 40]),
    ],
    shapes: [
        ("ellipse", ShapeKind::Ellipse),
        ("frame", ShapeKind::Frame),
        ("wedge", ShapeKind::Wedge),
        ("dot", ShapeKind::Dot),
    ],
    backgrounds: [("beige", [225, 210, 170]), ("silver", [180, 180, 195]), ("charcoal", [55, 55, 60])],
    relations: ["atop", "beneath", "alongside"],
};

impl Lexicon {
    /// Every word a caption of this family can contain.
    pub fn vocabulary(&self) -> Vec<&'static str> {
        let mut words = vec![self.determiner, self.preposition, self.background_noun];
        words.extend(self.colors.iter().map(|c| c.0));
        words.extend(self.shapes.iter().map(|s| s.0));
        words.extend(self.backgrounds.iter().map(|b| b.0));
        words.extend(self.relations);
        words
    }
}

/// Corpus generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub family: Family,
    pub size: usize,
    pub seed: u64,
}

/// An image in CHW layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub id: String,
    pub image: ImageTensor,
    pub captions: Vec<TokenSeq>,
}

impl ImageTextPair {
    /// The caption used for training.
    pub fn caption(&self) -> &TokenSeq {
        &self.captions[0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetBundle {
    pub member: Vec<ImageTextPair>,
    pub nonmember: Vec<ImageTextPair>,
    pub shadow_member: Vec<ImageTextPair>,
    pub shadow_nonmember: Vec<ImageTextPair>,
    pub public: Vec<ImageTextPair>,
}

impl DatasetBundle {
    pub fn splits(&self) -> [(&'static str, &[ImageTextPair]); 5] {
        [
            ("member", &self.member),
            ("nonmember", &self.nonmember),
            ("shadow_member", &self.shadow_member),
            ("shadow_nonmember", &self.shadow_nonmember),
            ("public", &self.public),
        ]
    }

    /// True when no id appears in more than one split.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.splits()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .all(|p| seen.insert(p.id.as_str()))
    }
}

/// One placed shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub color: usize,
    pub shape: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Ground-truth render parameters of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub family: Family,
    pub background: usize,
    pub objects: Vec<PlacedShape>,
    pub template: usize,
}

impl Scene {
    /// Index into the lexicon's relations for a two-object scene.
    pub fn relation(&self) -> Option<usize> {
        let [a, b] = self.objects.as_slice() else {
            return None;
        };
        let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
        Some(if dy.abs() >= dx.abs() {
            if dy < 0.0 {
                0
            } else {
                1
            }
        } else {
            2
        })
    }

    pub fn caption_words(&self) -> Vec<&'static str> {
        let lex = self.family.lexicon();
        let obj = |o: &PlacedShape| [lex.colors[o.color].0, lex.shapes[o.shape].0];
        let bg = lex.backgrounds[self.background].0;
        let mut w = Vec::with_capacity(9);
        match (self.objects.as_slice(), self.template) {
            ([a], 0) => {
                w.push(lex.determiner);
                w.extend(obj(a));
                w.extend([lex.preposition, bg]);
            }
            ([a], _) => {
                w.push(lex.determiner);
                w.extend(obj(a));
                w.extend([lex.preposition, bg, lex.background_noun]);
            }
            ([a, b], 0) => {
                let rel = lex.relations[self.relation().expect("two objects")];
                w.push(lex.determiner);
                w.extend(obj(a));
                w.extend([rel, lex.determiner]);
                w.extend(obj(b));
                w.extend([lex.preposition, bg]);
            }
            ([a, b], _) => {
                let rel = lex.relations[self.relation().expect("two objects")];
                w.extend(obj(a));
                w.push(rel);
                w.extend(obj(b));
                w.extend([lex.preposition, bg, lex.background_noun]);
            }
            _ => unreachable!("scenes hold one or two objects"),
        }
        w
    }

    pub fn render(&self, rng: &mut seed::Rng) -> ImageTensor {
        let lex = self.family.lexicon();
        let mut img = ImageTensor::zeros(IMAGE_SIZE, IMAGE_SIZE, CHANNELS);
        let bg = lex.backgrounds[self.background].1;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = bg;
                for o in &self.objects {
                    if lex.shapes[o.shape].1.covers(px - o.cx, py - o.cy, o.radius) {
                        rgb = lex.colors[o.color].1;
                    }
                }
                for (c, &base) in rgb.iter().enumerate() {
                    let noise: i32 = rng.random_range(-12..=12);
                    let v = (i32::from(base) + noise).clamp(0, 255);
                    img.set(y, x, c, v as f32 / 255.0);
                }
            }
        }
        img
    }
}

fn sample_scene(family: Family, rng: &mut seed::Rng) -> Scene {
    let n_objects = rng.random_range(1..=2);
    let mut objects: Vec<PlacedShape> = Vec::with_capacity(n_objects);
    while objects.len() < n_objects {
        let radius = rng.random_range(5.0..=7.5);
        let lo = radius;
        let hi = IMAGE_SIZE as f64 - radius;
        let cand = PlacedShape {
            color: rng.random_range(0..4),
            shape: rng.random_range(0..4),
            cx: rng.random_range(lo..hi),
            cy: rng.random_range(lo..hi),
            radius,
        };
        let clear = objects.iter().all(|o| {
            let d = ((o.cx - cand.cx).powi(2) + (o.cy - cand.cy).powi(2)).sqrt();
            d > o.radius + cand.radius + 2.0 && o.color != cand.color
        });
        if clear {
            objects.push(cand);
        }
    }
    Scene {
        family,
        background: rng.random_range(0..3),
        objects,
        template: rng.random_range(0..2),
    }
}

/// Generates `spec.size` pairs; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<ImageTextPair>> {
    Ok(generate_scenes(spec)?.into_iter().map(|(p, _)| p).collect())
}

/// Like [`generate_corpus`] but also returns each sample's render parameters.
pub fn generate_scenes(spec: &CorpusSpec) -> Result<Vec<(ImageTextPair, Scene)>> {
    if spec.size < MIN_CORPUS_SIZE {
        return Err(Error::SpecTooSmall {
            size: spec.size,
            min: MIN_CORPUS_SIZE,
        });
    }
    let mut rng = seed::rng(spec.seed, &format!("corpus-{}", spec.family));
    let prefix = spec.family.letter().to_ascii_lowercase();
    let mut out = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let scene = sample_scene(spec.family, &mut rng);
        let image = scene.render(&mut rng);
        let caption = TokenSeq::from_tokens(scene.caption_words()).expect("templates are non-empty");
        let pair = ImageTextPair {
            id: format!("{prefix}{}-{i:05}", spec.seed),
            image,
            captions: vec![caption],
        };
        out.push((pair, scene));
    }
    Ok(out)
}

/// Attributes recovered from a caption by reading it back through the
/// family lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCaption {
    /// `(color index, shape index)` in caption order.
    pub objects: Vec<(usize, usize)>,
    pub relation: Option<usize>,
    pub background: Option<usize>,
}

pub fn parse_caption(family: Family, caption: &TokenSeq) -> ParsedCaption {
    let lex = family.lexicon();
    let find = |w: &str, list: &[&str]| list.iter().position(|x| *x == w);
    let colors: Vec<&str> = lex.colors.iter().map(|c| c.0).collect();
    let shapes: Vec<&str> = lex.shapes.iter().map(|s| s.0).collect();
    let bgs: Vec<&str> = lex.backgrounds.iter().map(|b| b.0).collect();
    let mut parsed = ParsedCaption {
        objects: Vec::new(),
        relation: None,
        background: None,
    };
    let mut pending_color = None;
    for w in caption.tokens() {
        if let Some(c) = find(w, &colors) {
            pending_color = Some(c);
        } else if let Some(s) = find(w, &shapes) {
            if let Some(c) = pending_color.take() {
                parsed.objects.push((c, s));
            }
        } else if let Some(b) = find(w, &bgs) {
            parsed.background = Some(b);
        } else if let Some(r) = find(w, &lex.relations) {
            parsed.relation = Some(r);
        }
    }
    parsed
}

/// Random disjoint partition into the five splits. Everything left over
/// after the member and shadow splits goes to `public`.
pub fn split_corpus(corpus: &[ImageTextPair], n_member: usize, n_shadow: usize, seed: u64) -> Result<DatasetBundle> {
    let need = 2 * n_member + 2 * n_shadow;
    if corpus.len() < need {
        return Err(Error::InsufficientData {
            need,
            have: corpus.len(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seed::rng(seed, "split"));
    let mut take = {
        let mut it = order.into_iter();
        move |n: usize| -> Vec<ImageTextPair> { it.by_ref().take(n).map(|i| corpus[i].clone()).collect() }
    };
    let member = take(n_member);
    let nonmember = take(n_member);
    let shadow_member = take(n_shadow);
    let shadow_nonmember = take(n_shadow);
    let public = take(usize::MAX);
    Ok(DatasetBundle {
        member,
        nonmember,
        shadow_member,
        shadow_nonmember,
        public,
    })
}

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# mmi-corpus v1";
const IMAGE_DIR: &str = "images";

/// Writes `manifest.tsv` plus one 8-bit RGB PNG per image under `dir`.
///
/// Manifest layout: a `# mmi-corpus v1` header, one
/// `id<TAB>image-file<TAB>caption|caption...` line per pair, and a closing
/// `# end <count>` line. Pixel values are stored at 8-bit precision.
pub fn save_corpus(corpus: &[ImageTextPair], dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for pair in corpus {
        let file = format!("{IMAGE_DIR}/{}.png", pair.id);
        write_png(&pair.image, &dir.join(&file)).map_err(|reason| Error::format(&pair.id, reason))?;
        let captions: Vec<String> = pair.captions.iter().map(ToString::to_string).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", pair.id, file, captions.join("|")));
    }
    manifest.push_str(&format!("# end {}\n", corpus.len()));
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ImageTextPair>> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::format("<manifest>", format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(&path, e))?
        .ok_or_else(|| Error::format("<manifest>", "empty manifest"))?;
    if header.trim_end() != MANIFEST_HEADER {
        return Err(Error::format("<manifest>", format!("bad header `{header}`")));
    }
    let mut out: Vec<ImageTextPair> = Vec::new();
    let mut ended = false;
    for line in lines {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let last = || out.last().map_or("<manifest>".to_owned(), |p| p.id.clone());
        if ended {
            return Err(Error::format(last(), "data after end marker"));
        }
        if let Some(rest) = line.strip_prefix("# end ") {
            let count: usize = rest.trim().parse().map_err(|_| Error::format(last(), "bad end marker"))?;
            if count != out.len() {
                return Err(Error::format(last(), format!("end marker says {count} records, found {}", out.len())));
            }
            ended = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, file, captions] = fields.as_slice() else {
            let id = fields.first().copied().unwrap_or("<manifest>");
            return Err(Error::format(id, "expected 3 tab-separated fields"));
        };
        let captions = captions
            .split('|')
            .map(|c| TokenSeq::from_tokens(c.split(' ')))
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::format(*id, "empty caption"))?;
        let image = read_png(&dir.join(file)).map_err(|reason| Error::format(*id, reason))?;
        out.push(ImageTextPair {
            id: (*id).to_owned(),
            image,
            captions,
        });
    }
    if !ended {
        let id = out.last().map_or("<manifest>".to_owned(), |p| p.id.clone());
        return Err(Error::format(id, "truncated manifest (missing end marker)"));
    }
    Ok(out)
}

fn write_png(img: &ImageTensor, path: &Path) -> std::result::Result<(), String> {
    if img.channels != 3 {
        return Err(format!("only RGB images can be saved, got {} channels", img.channels));
    }
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (img.get(y as usize, x as usize, c) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| e.to_string())
}

fn read_png(path: &Path) -> std::result::Result<ImageTensor, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?.to_rgb8();
    let mut out = ImageTensor::zeros(img.height() as usize, img.width() as usize, 3);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(y as usize, x as usize, c, f32::from(px.0[c]) / 255.0);
        }
    }
    Ok(out)
}

const SPLITS_FILE: &str = "splits.tsv";

/// Persists split membership as `split<TAB>id` lines.
pub fn save_splits(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut text = String::from("split\tid\n");
    for (name, pairs) in bundle.splits() {
        for p in pairs {
            text.push_str(&format!("{name}\t{}\n", p.id));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuilds a bundle from a splits file and the corpus it indexes.
pub fn load_splits(corpus: &[ImageTextPair], path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let by_id: std::collections::HashMap<&str, &ImageTextPair> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut bundle = DatasetBundle::default();
    for line in text.lines().skip(1) {
        let (split, id) = line.split_once('\t').ok_or_else(|| Error::format("<splits>", format!("bad line `{line}`")))?;
        let pair = (*by_id.get(id).ok_or_else(|| Error::format(id, "id not found in corpus"))?).clone();
        match split {
            "member" => bundle.member.push(pair),
            "nonmember" => bundle.nonmember.push(pair),
            "shadow_member" => bundle.shadow_member.push(pair),
            "shadow_nonmember" => bundle.shadow_nonmember.push(pair),
            "public" => bundle.public.push(pair),
            other => return Err(Error::format(id, format!("unknown split `{other}`"))),
        }
    }
    Ok(bundle)
}

pub fn splits_file(dir: &Path) -> std::path::PathBuf {
    dir.join(SPLITS_FILE)
}
