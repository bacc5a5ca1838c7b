//! Synthetic saliency scenes, dataset manifests and loading.
//!
//! Every scene has a textured background, one salient object and up to three
//! small high-contrast distractors that are not part of the mask. Objects are
//! ellipses, star-shaped polygons or two-tone composites whose halves differ
//! in colour. Geometry and colour use integer arithmetic only, so a seed
//! produces the same bytes on every platform. Sample `i` of a seed depends
//! only on `(seed, i)`, never on how many samples are generated.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::STRIDE;
use crate::netpbm::{read_pgm, read_ppm, write_bytes, encode_pgm, encode_ppm};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "classkit-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MIN_FRACTION: f64 = 0.02;
pub const MAX_FRACTION: f64 = 0.7;
/// Masks read from disk are foreground where the byte is at least this.
pub const MASK_THRESHOLD: u8 = 128;

/// Unit vectors at multiples of 22.5°, scaled by 1000 and rounded.
const COS16: [i64; 16] = [1000, 924, 707, 383, 0, -383, -707, -924, -1000, -924, -707, -383, 0, 383, 707, 924];
const SIN16: [i64; 16] = [0, 383, 707, 924, 1000, 924, 707, 383, 0, -383, -707, -924, -1000, -924, -707, -383];
/// Minimum L1 distance (over RGB bytes) between an object or distractor
/// colour and the background mean.
const MIN_CONTRAST: i64 = 180;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    TwoTone,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Polygon => "polygon",
            ShapeKind::TwoTone => "two-tone",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "polygon" => Ok(ShapeKind::Polygon),
            "two-tone" => Ok(ShapeKind::TwoTone),
            _ => Err(Error::Format(format!("unknown shape kind {s:?}"))),
        }
    }
}

/// Generator parameters recorded for each scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub kind: ShapeKind,
    pub distractors: usize,
    /// L1 distance between the object colour and the background mean, in bytes.
    pub contrast: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    pub id: String,
    /// `3×H×W`, values `byte/255`.
    pub image: Tensor,
    /// `1×H×W`, values in `{0, 1}`.
    pub mask: Tensor,
    pub meta: Option<SampleMeta>,
}

impl SaliencySample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.numel() as f64
    }

    fn check(&self) -> Result<()> {
        let (i, m) = (self.image.shape(), self.mask.shape());
        if i.len() != 3 || i[0] != 3 || m.len() != 3 || m[0] != 1 || i[1..] != m[1..] {
            return Err(Error::dim(format!("image {i:?} and mask {m:?} do not pair")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}, expected train, val or test"))),
        }
    }
}

type Rgb = [i64; 3];

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: Rgb) {
        self.px[y * self.size + x] = c;
    }
}

fn color(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> Rgb {
    [0, 1, 2].map(|_| rng.gen_range(lo..=hi))
}

fn l1(a: Rgb, b: Rgb) -> i64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).sum()
}

/// A colour at least `MIN_CONTRAST` from `bg` and, when given, the paired
/// distance from another colour.
fn contrasting(rng: &mut ChaCha8Rng, bg: Rgb, other: Option<(Rgb, i64)>) -> Rgb {
    loop {
        let c = color(rng, 0, 255);
        if l1(c, bg) >= MIN_CONTRAST && other.map_or(true, |(o, d)| l1(c, o) >= d) {
            return c;
        }
    }
}

/// Pixel centre in milli-pixels.
fn centre(i: usize) -> i64 {
    i as i64 * 1000 + 500
}

enum Shape {
    Ellipse { cx: i64, cy: i64, rx: i64, ry: i64 },
    Polygon { pts: Vec<(i64, i64)> },
}

impl Shape {
    fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = (i128::from(x - cx), i128::from(y - cy));
                let (rx, ry) = (i128::from(rx), i128::from(ry));
                (dx * ry).pow(2) + (dy * rx).pow(2) <= (rx * ry).pow(2)
            }
            Shape::Polygon { ref pts } => {
                let mut inside = false;
                for (k, &(x1, y1)) in pts.iter().enumerate() {
                    let (x2, y2) = pts[(k + 1) % pts.len()];
                    if (y1 > y) != (y2 > y) {
                        // x < x1 + (y - y1)(x2 - x1)/(y2 - y1), kept in integers.
                        let lhs = i128::from(x - x1) * i128::from(y2 - y1);
                        let rhs = i128::from(y - y1) * i128::from(x2 - x1);
                        if (y2 > y1 && lhs < rhs) || (y2 < y1 && lhs > rhs) {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

fn object_shape(rng: &mut ChaCha8Rng, size: i64, polygon: bool) -> Shape {
    let cx = rng.gen_range(300 * size..=700 * size);
    let cy = rng.gen_range(300 * size..=700 * size);
    if !polygon {
        return Shape::Ellipse {
            cx,
            cy,
            rx: rng.gen_range(140 * size..=320 * size),
            ry: rng.gen_range(140 * size..=320 * size),
        };
    }
    // Star-shaped around the centre: sorted directions with no gap wider than
    // 135°, each at its own radius.
    let dirs = loop {
        let k = rng.gen_range(3..=8);
        let mut d: Vec<usize> = rand::seq::index::sample(rng, 16, k).into_vec();
        d.sort_unstable();
        let widest = (0..k).map(|j| (d[(j + 1) % k] + 16 - d[j]) % 16).max().unwrap_or(16);
        if widest <= 6 && widest > 0 {
            break d;
        }
    };
    let r = rng.gen_range(170 * size..=380 * size);
    let pts = dirs
        .iter()
        .map(|&j| {
            let rj = r * rng.gen_range(600..=1000) / 1000;
            (cx + COS16[j] * rj / 1000, cy + SIN16[j] * rj / 1000)
        })
        .collect();
    Shape::Polygon { pts }
}

fn shape_centre(shape: &Shape) -> (i64, i64) {
    match *shape {
        Shape::Ellipse { cx, cy, .. } => (cx, cy),
        Shape::Polygon { ref pts } => {
            let n = pts.len() as i64;
            (pts.iter().map(|p| p.0).sum::<i64>() / n, pts.iter().map(|p| p.1).sum::<i64>() / n)
        }
    }
}

/// Generates sample `index` of `seed` at `size×size`.
pub fn generate_sample(seed: u64, index: u64, size: usize) -> Result<SaliencySample> {
    if size < STRIDE || size % STRIDE != 0 {
        return Err(Error::Config(format!("size {size} must be a positive multiple of {STRIDE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as i64;

    // Background: a two-colour linear gradient, blocky texture and pixel noise.
    let c0 = color(&mut rng, 30, 225);
    let c1 = color(&mut rng, 30, 225);
    let dir = rng.gen_range(0..16);
    let cell = rng.gen_range(3..=8usize);
    let amp = rng.gen_range(6..=16i64);
    let cells = size.div_ceil(cell);
    let blocks: Vec<i64> = (0..cells * cells).map(|_| rng.gen_range(-amp..=amp)).collect();
    let mut canvas = Canvas {
        size,
        px: vec![[0; 3]; size * size],
    };
    for y in 0..size {
        for x in 0..size {
            let proj = (centre(x) - 500 * s) * COS16[dir] + (centre(y) - 500 * s) * SIN16[dir];
            let t = (proj / s / 1000 + 500).clamp(0, 1000);
            let b = blocks[(y / cell) * cells + x / cell];
            let c = [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * t / 1000 + b + rng.gen_range(-6..=6));
            canvas.put(x, y, c);
        }
    }
    let bg = [0, 1, 2].map(|k| (c0[k] + c1[k]) / 2);

    let kind = match rng.gen_range(0..10) {
        0..=2 => ShapeKind::Ellipse,
        3..=5 => ShapeKind::Polygon,
        _ => ShapeKind::TwoTone,
    };

    // Distractors first so the object occludes them.
    let distractors = rng.gen_range(0..=3usize);
    for _ in 0..distractors {
        let r = rng.gen_range(40 * s..=80 * s).max(2000);
        let cx = rng.gen_range(0..=1000 * s);
        let cy = rng.gen_range(0..=1000 * s);
        let square = rng.gen_bool(0.5);
        let c = contrasting(&mut rng, bg, None);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (centre(x) - cx, centre(y) - cy);
                let hit = if square { dx.abs() <= r && dy.abs() <= r } else { dx * dx + dy * dy <= r * r };
                if hit {
                    canvas.put(x, y, c);
                }
            }
        }
    }

    let (shape, inside) = loop {
        let polygon = match kind {
            ShapeKind::Ellipse => false,
            ShapeKind::Polygon => true,
            ShapeKind::TwoTone => rng.gen_bool(0.5),
        };
        let shape = object_shape(&mut rng, s, polygon);
        let inside: Vec<bool> = (0..size * size)
            .map(|i| shape.contains(centre(i % size), centre(i / size)))
            .collect();
        let frac = inside.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
            break (shape, inside);
        }
    };
    let first = contrasting(&mut rng, bg, None);
    let split = match kind {
        ShapeKind::TwoTone => Some((contrasting(&mut rng, bg, Some((first, 200))), rng.gen_range(0..16))),
        _ => None,
    };
    let (ox, oy) = shape_centre(&shape);
    for (i, &hit) in inside.iter().enumerate() {
        if !hit {
            continue;
        }
        let (x, y) = (i % size, i / size);
        let c = match split {
            Some((second, d)) if (centre(x) - ox) * SIN16[d] - (centre(y) - oy) * COS16[d] >= 0 => second,
            _ => first,
        };
        canvas.put(x, y, [0, 1, 2].map(|k| c[k] + rng.gen_range(-8..=8)));
    }

    let contrast = match split {
        Some((second, _)) => [0, 1, 2].map(|k| (first[k] + second[k]) / 2),
        None => first,
    };
    let n = size * size;
    let mut image = vec![0.0; 3 * n];
    for (i, c) in canvas.px.iter().enumerate() {
        for k in 0..3 {
            image[k * n + i] = c[k].clamp(0, 255) as f64 / 255.0;
        }
    }
    Ok(SaliencySample {
        id: format!("{index:05}"),
        image: Tensor::new(&[3, size, size], image)?,
        mask: Tensor::new(&[1, size, size], inside.iter().map(|&b| f64::from(u8::from(b))).collect())?,
        meta: Some(SampleMeta {
            kind,
            distractors,
            contrast: l1(contrast, bg) as u32,
        }),
    })
}

/// Samples `start..start + count` of `seed`.
pub fn generate(seed: u64, start: u64, count: usize, size: usize) -> Result<Vec<SaliencySample>> {
    if count == 0 {
        return Err(Error::Contract("count must be at least 1".into()));
    }
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| generate_sample(seed, i, size))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub meta: Option<SampleMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub split: Split,
    pub seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

fn parse_meta(text: &str) -> Result<(String, SampleMeta)> {
    let mut it = text.split_whitespace();
    let id = it.next().ok_or_else(|| Error::Format("meta line without an id".into()))?;
    let (mut kind, mut distractors, mut contrast) = (None, None, None);
    for kv in it {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("meta field {kv:?} is not key=value")))?;
        let bad = |_| Error::Format(format!("bad meta value {kv:?}"));
        match k {
            "kind" => kind = Some(v.parse()?),
            "distractors" => distractors = Some(v.parse().map_err(bad)?),
            "contrast" => contrast = Some(v.parse().map_err(bad)?),
            _ => return Err(Error::Format(format!("unknown meta field {k:?}"))),
        }
    }
    match (kind, distractors, contrast) {
        (Some(kind), Some(distractors), Some(contrast)) => Ok((
            id.to_string(),
            SampleMeta {
                kind,
                distractors,
                contrast,
            },
        )),
        _ => Err(Error::Format(format!("meta for {id} needs kind, distractors and contrast"))),
    }
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n# split {}\n", self.split);
        if let Some(seed) = self.seed {
            out += &format!("# seed {seed}\n");
        }
        for e in &self.entries {
            if let Some(m) = e.meta {
                out += &format!(
                    "# meta {} kind={} distractors={} contrast={}\n",
                    e.id, m.kind, m.distractors, m.contrast
                );
            }
        }
        for e in &self.entries {
            out += &format!("{}\t{}\t{}\n", e.id, e.image.display(), e.mask.display());
        }
        out
    }

    /// Parses manifest text; entry paths are taken relative to `root`.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').map(|l| {
            let at = offset;
            offset += l.len();
            (at, l.trim_end_matches(['\n', '\r']))
        });
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(Error::Format(format!("missing {MANIFEST_HEADER:?} header"))),
        }
        let at = |offset: usize, e: Error| Error::Parse {
            offset,
            message: e.to_string(),
        };
        let mut split = Split::Test;
        let mut seed = None;
        let mut metas = Vec::new();
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut seen = HashSet::new();
        for (pos, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                match key {
                    "split" => split = value.trim().parse().map_err(|e| at(pos, e))?,
                    "seed" => {
                        seed = Some(value.trim().parse().map_err(|_| Error::Parse {
                            offset: pos,
                            message: format!("bad seed {value:?}"),
                        })?)
                    }
                    "meta" => metas.push(parse_meta(value).map_err(|e| at(pos, e))?),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    offset: pos,
                    message: format!("expected id, image and mask separated by tabs, got {line:?}"),
                });
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(Error::Parse {
                    offset: pos,
                    message: format!("duplicate id {}", fields[0]),
                });
            }
            entries.push(ManifestEntry {
                id: fields[0].into(),
                image: fields[1].into(),
                mask: fields[2].into(),
                meta: None,
            });
        }
        for (id, meta) in metas {
            if let Some(e) = entries.iter_mut().find(|e| e.id == id) {
                e.meta = Some(meta);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            split,
            seed,
            entries,
        })
    }

    /// Reads a manifest file, or `manifest.txt` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &root)
    }
}

/// Writes every sample as `images/<id>.ppm` and `masks/<id>.pgm` under `dir`
/// plus `manifest.txt`, and returns the manifest.
pub fn write_dataset(dir: &Path, split: Split, seed: Option<u64>, samples: &[SaliencySample]) -> Result<Manifest> {
    let entries = samples
        .iter()
        .map(|s| {
            s.check().map_err(|e| Error::Sample {
                id: s.id.clone(),
                source: Box::new(e),
            })?;
            let image = PathBuf::from("images").join(format!("{}.ppm", s.id));
            let mask = PathBuf::from("masks").join(format!("{}.pgm", s.id));
            write_bytes(&dir.join(&image), &encode_ppm(&s.image)?)?;
            write_bytes(&dir.join(&mask), &encode_pgm(&s.mask)?)?;
            Ok(ManifestEntry {
                id: s.id.clone(),
                image,
                mask,
                meta: s.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: dir.to_path_buf(),
        split,
        seed,
        entries,
    };
    write_bytes(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Loads every entry in manifest order, binarizing masks at byte 128.
pub fn load_dataset(manifest: &Manifest) -> Result<Vec<SaliencySample>> {
    if manifest.entries.is_empty() {
        return Err(Error::Contract(format!("manifest in {} lists no samples", manifest.root.display())));
    }
    let cut = f64::from(MASK_THRESHOLD) / 255.0;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let load = || -> Result<SaliencySample> {
                let image = read_ppm(&manifest.root.join(&e.image))?;
                let mask = read_pgm(&manifest.root.join(&e.mask))?.map(|v| if v >= cut { 1.0 } else { 0.0 });
                let s = SaliencySample {
                    id: e.id.clone(),
                    image,
                    mask,
                    meta: e.meta,
                };
                s.check()?;
                Ok(s)
            };
            load().map_err(|source| Error::Sample {
                id: e.id.clone(),
                source: Box::new(source),
            })
        })
        .collect()
}
