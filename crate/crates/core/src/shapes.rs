//! Curved/jagged silhouette pairs from shared random point sets, legacy pair
//! ingestion, and side-by-side composites.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};
use crate::lexicon::ShapeClass;
use crate::raster::{coverage, signed_area2};
use crate::util::{write_atomic, write_json, write_png};

pub const DEFAULT_RESOLUTION: u32 = 336;
pub const GUTTER_FRACTION: f64 = 0.1;
pub const MANIFEST_FILE: &str = "stimuli.manifest.json";

/// Radius of the unit disk in image units, leaving room for spline overshoot.
const DISK_SCALE: f64 = 0.42;
const CURVE_SAMPLES_PER_SPAN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
    pub seed: u64,
    pub n: usize,
}

/// `n` points uniform in the unit disk, ordered by polar angle about their
/// centroid so the outline does not cross itself.
pub fn sample_points(seed: u64, n: usize) -> Result<PointSet> {
    if n < 3 {
        return Err(Error::Invalid(format!("a shape needs at least 3 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let theta = 2.0 * PI * rng.random::<f64>();
            [r * theta.cos(), r * theta.sin()]
        })
        .collect();
    let c = centroid(&points);
    points.sort_by(|a, b| polar_angle(a, c).total_cmp(&polar_angle(b, c)));
    Ok(PointSet { points, seed, n })
}

/// Point count for a seed, uniform over `min..=max`.
pub fn point_count_for_seed(seed: u64, min: usize, max: usize) -> Result<usize> {
    if min < 3 || max < min {
        return Err(Error::Invalid(format!("point range {min}..={max} must satisfy 3 <= min <= max")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(rng.random_range(min..=max))
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

pub fn polar_angle(p: &[f64; 2], c: [f64; 2]) -> f64 {
    (p[1] - c[1]).atan2(p[0] - c[0])
}

/// Closed polygon through the points, one vertex per point.
pub fn jagged_outline(ps: &PointSet) -> Vec<[f64; 2]> {
    ps.points.clone()
}

/// Cubic Bezier spans `(p1, c1, c2, p2)` of the closed centripetal
/// Catmull-Rom spline through the points.
pub fn curved_spans(ps: &PointSet) -> Vec<[[f64; 2]; 4]> {
    let p = &ps.points;
    let n = p.len();
    let knot = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).hypot(a[1] - b[1])).sqrt().max(1e-9);
    (0..n)
        .map(|i| {
            let p0 = p[(i + n - 1) % n];
            let p1 = p[i];
            let p2 = p[(i + 1) % n];
            let p3 = p[(i + 2) % n];
            let (d01, d12, d23) = (knot(p0, p1), knot(p1, p2), knot(p2, p3));
            let tangent = |a: [f64; 2], b: [f64; 2], c: [f64; 2], dab: f64, dbc: f64| -> [f64; 2] {
                let f = |k: usize| (b[k] - a[k]) / dab - (c[k] - a[k]) / (dab + dbc) + (c[k] - b[k]) / dbc;
                [f(0), f(1)]
            };
            let m1 = tangent(p0, p1, p2, d01, d12);
            let m2 = tangent(p1, p2, p3, d12, d23);
            let c1 = [p1[0] + m1[0] * d12 / 3.0, p1[1] + m1[1] * d12 / 3.0];
            let c2 = [p2[0] - m2[0] * d12 / 3.0, p2[1] - m2[1] * d12 / 3.0];
            [p1, c1, c2, p2]
        })
        .collect()
}

/// Densely sampled closed outline of the curved shape.
pub fn curved_outline(ps: &PointSet) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(ps.n * CURVE_SAMPLES_PER_SPAN);
    for [a, b, c, d] in curved_spans(ps) {
        for s in 0..CURVE_SAMPLES_PER_SPAN {
            let t = s as f64 / CURVE_SAMPLES_PER_SPAN as f64;
            let u = 1.0 - t;
            let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            out.push([
                w[0] * a[0] + w[1] * b[0] + w[2] * c[0] + w[3] * d[0],
                w[0] * a[1] + w[1] * b[1] + w[2] * c[1] + w[3] * d[1],
            ]);
        }
    }
    out
}

fn to_pixels(outline: &[[f64; 2]], resolution: u32) -> Vec<[f64; 2]> {
    let r = resolution as f64;
    outline.iter().map(|p| [(0.5 + DISK_SCALE * p[0]) * r, (0.5 - DISK_SCALE * p[1]) * r]).collect()
}

/// Black silhouette on white.
fn fill(outline: &[[f64; 2]], resolution: u32) -> RgbImage {
    let side = resolution as usize;
    let cov = coverage(&to_pixels(outline, resolution), side, side);
    RgbImage::from_fn(resolution, resolution, |x, y| {
        let v = (255.0 * (1.0 - cov[y as usize * side + x as usize])).round() as u8;
        Rgb([v, v, v])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSource {
    Generated,
    Kohler,
    Maurer,
    Westbury,
}

impl fmt::Display for ShapeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeSource::Generated => "generated",
            ShapeSource::Kohler => "kohler",
            ShapeSource::Maurer => "maurer",
            ShapeSource::Westbury => "westbury",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct ShapePair {
    pub pair_id: String,
    pub source: ShapeSource,
    pub curved_image: RgbImage,
    pub jagged_image: RgbImage,
    pub point_set: Option<PointSet>,
}

impl ShapePair {
    pub fn image(&self, class: ShapeClass) -> &RgbImage {
        match class {
            ShapeClass::Round => &self.curved_image,
            ShapeClass::Sharp => &self.jagged_image,
        }
    }

    /// Identifier of one of the two single-shape images.
    pub fn image_id(&self, class: ShapeClass) -> String {
        format!("{}/{}", self.pair_id, if class == ShapeClass::Round { "curved" } else { "jagged" })
    }
}

pub fn generated_pair_id(seed: u64) -> String {
    format!("gen-{seed:06}")
}

pub fn render_pair(ps: &PointSet, resolution: u32) -> Result<ShapePair> {
    if ps.points.len() < 3 || ps.points.len() != ps.n {
        return Err(Error::Invalid(format!("point set has {} points, declared {}", ps.points.len(), ps.n)));
    }
    let area = signed_area2(&ps.points).abs() / 2.0;
    if area < 1e-6 {
        return Err(Error::Degenerate(format!("seed {} encloses area {area:.2e}", ps.seed)));
    }
    Ok(ShapePair {
        pair_id: generated_pair_id(ps.seed),
        source: ShapeSource::Generated,
        curved_image: fill(&curved_outline(ps), resolution),
        jagged_image: fill(&jagged_outline(ps), resolution),
        point_set: Some(ps.clone()),
    })
}

/// SVG documents `(curved, jagged)` for a generated point set.
pub fn pair_svg(ps: &PointSet, resolution: u32) -> (String, String) {
    let px = |p: [f64; 2]| to_pixels(&[p], resolution)[0];
    let fmt = |p: [f64; 2]| format!("{:.3},{:.3}", p[0], p[1]);
    let spans = curved_spans(ps);
    let mut curved = format!("M{}", fmt(px(spans[0][0])));
    for [_, c1, c2, p2] in &spans {
        curved.push_str(&format!(" C{} {} {}", fmt(px(*c1)), fmt(px(*c2)), fmt(px(*p2))));
    }
    curved.push_str(" Z");
    let jagged = ps
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}{}", if i == 0 { "M" } else { " L" }, fmt(px(*p))))
        .collect::<String>()
        + " Z";
    let doc = |d: &str| {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{r}\" height=\"{r}\" viewBox=\"0 0 {r} {r}\">\n\
             <rect width=\"{r}\" height=\"{r}\" fill=\"white\"/>\n<path d=\"{d}\" fill=\"black\"/>\n</svg>\n",
            r = resolution
        )
    };
    (doc(&curved), doc(&jagged))
}

#[derive(Debug, Clone, Deserialize)]
struct LegacyEntry {
    pair_id: String,
    source: ShapeSource,
    class: LegacyClass,
    path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LegacyClass {
    #[serde(alias = "round")]
    Curved,
    #[serde(alias = "sharp")]
    Jagged,
}

/// Reads the pairs listed in a legacy manifest. Paths are relative to the
/// manifest. Images are fitted onto a white square canvas of `resolution`.
pub fn load_legacy_pairs(manifest: &Path, resolution: u32) -> Result<Vec<ShapePair>> {
    let text = std::fs::read_to_string(manifest).map_err(crate::error::io_err(manifest))?;
    let entries: Vec<LegacyEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut grouped: BTreeMap<String, Vec<LegacyEntry>> = BTreeMap::new();
    for e in entries {
        if e.source == ShapeSource::Generated {
            return Err(Error::Config(format!("legacy pair `{}` has source `generated`", e.pair_id)));
        }
        grouped.entry(e.pair_id.clone()).or_default().push(e);
    }
    let mut pairs = Vec::with_capacity(grouped.len());
    for (pair_id, entries) in grouped {
        let curved: Vec<_> = entries.iter().filter(|e| e.class == LegacyClass::Curved).collect();
        let jagged: Vec<_> = entries.iter().filter(|e| e.class == LegacyClass::Jagged).collect();
        if curved.len() != 1 || jagged.len() != 1 {
            return Err(Error::Config(format!(
                "legacy pair `{pair_id}` needs one curved and one jagged image, found {} and {}",
                curved.len(),
                jagged.len()
            )));
        }
        if curved[0].source != jagged[0].source {
            return Err(Error::Config(format!("legacy pair `{pair_id}` mixes sources")));
        }
        let load =
            |e: &LegacyEntry| -> Result<RgbImage> { Ok(letterbox(&crate::util::read_rgb(&base.join(&e.path))?, resolution)) };
        pairs.push(ShapePair {
            pair_id,
            source: curved[0].source,
            curved_image: load(curved[0])?,
            jagged_image: load(jagged[0])?,
            point_set: None,
        });
    }
    Ok(pairs)
}

/// Scales to fit inside a white square, preserving aspect ratio.
pub fn letterbox(img: &RgbImage, resolution: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == resolution && h == resolution {
        return img.clone();
    }
    let scale = resolution as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, resolution);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, resolution);
    let resized = imageops::resize(img, nw, nh, imageops::FilterType::CatmullRom);
    let mut canvas = RgbImage::from_pixel(resolution, resolution, Rgb([255, 255, 255]));
    imageops::replace(&mut canvas, &resized, ((resolution - nw) / 2) as i64, ((resolution - nh) / 2) as i64);
    canvas
}

/// Generation parameters of a bank of new pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub seed_base: u64,
    pub pairs: usize,
    pub points_min: usize,
    pub points_max: usize,
    pub resolution: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { seed_base: 0, pairs: 8, points_min: 8, points_max: 12, resolution: DEFAULT_RESOLUTION }
    }
}

pub fn generate_pairs(params: &GenerationParams) -> Result<Vec<ShapePair>> {
    use rayon::prelude::*;
    (0..params.pairs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = params.seed_base + i;
            let n = point_count_for_seed(seed, params.points_min, params.points_max)?;
            render_pair(&sample_points(seed, n)?, params.resolution)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub source: ShapeSource,
    pub curved_path: String,
    pub jagged_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

/// Writes images (and optional SVGs) plus the manifest; returns the manifest.
pub fn write_bank(dir: &Path, pairs: &[ShapePair], svg: bool) -> Result<Vec<ManifestEntry>> {
    use rayon::prelude::*;
    let mut sorted: Vec<&ShapePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let entries = sorted
        .par_iter()
        .map(|p| {
            let sub = p.source.to_string();
            let curved_path = format!("{sub}/{}_curved.png", p.pair_id);
            let jagged_path = format!("{sub}/{}_jagged.png", p.pair_id);
            write_png(&dir.join(&curved_path), &p.curved_image)?;
            write_png(&dir.join(&jagged_path), &p.jagged_image)?;
            if let (true, Some(ps)) = (svg, &p.point_set) {
                let (c, j) = pair_svg(ps, p.curved_image.width());
                write_atomic(&dir.join(format!("{sub}/{}_curved.svg", p.pair_id)), c.as_bytes())?;
                write_atomic(&dir.join(format!("{sub}/{}_jagged.svg", p.pair_id)), j.as_bytes())?;
            }
            Ok(ManifestEntry {
                pair_id: p.pair_id.clone(),
                source: p.source,
                curved_path,
                jagged_path,
                seed: p.point_set.as_ref().map(|ps| ps.seed),
                n: p.point_set.as_ref().map(|ps| ps.n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Loads every pair listed in `dir/stimuli.manifest.json`.
pub fn load_bank(dir: &Path) -> Result<Vec<ShapePair>> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::MissingInputs(vec![manifest.display().to_string()]));
    }
    let entries: Vec<ManifestEntry> = read_json(&manifest)?;
    let mut pairs = entries
        .into_iter()
        .map(|e| {
            let point_set = match (e.seed, e.n) {
                (Some(seed), Some(n)) => Some(sample_points(seed, n)?),
                _ => None,
            };
            let curved_image = crate::util::read_rgb(&dir.join(&e.curved_path))?;
            let jagged_image = crate::util::read_rgb(&dir.join(&e.jagged_path))?;
            if curved_image.dimensions() != jagged_image.dimensions() {
                return Err(Error::Invalid(format!("pair `{}` images differ in size", e.pair_id)));
            }
            Ok(ShapePair { pair_id: e.pair_id, source: e.source, curved_image, jagged_image, point_set })
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    CurvedLeft,
    CurvedRight,
}

impl Arrangement {
    pub fn mirrored(self) -> Self {
        match self {
            Arrangement::CurvedLeft => Arrangement::CurvedRight,
            Arrangement::CurvedRight => Arrangement::CurvedLeft,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arrangement::CurvedLeft => "curved_left",
            Arrangement::CurvedRight => "curved_right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct CompositeImage {
    pub composite_id: String,
    pub pair_id: String,
    pub left_class: ShapeClass,
    pub right_class: ShapeClass,
    pub image: RgbImage,
    pub arrangement: Arrangement,
    /// Member of the balanced set rather than its mirror.
    pub primary: bool,
    pub half_width: u32,
    pub gutter: u32,
}

pub fn composite_id(pair_id: &str, arrangement: Arrangement) -> String {
    format!("{pair_id}:{}", arrangement.as_str())
}

pub fn gutter_width(half_width: u32) -> u32 {
    (half_width as f64 * GUTTER_FRACTION).round() as u32
}

impl CompositeImage {
    pub fn new(pair: &ShapePair, arrangement: Arrangement, primary: bool) -> Self {
        let (w, h) = pair.curved_image.dimensions();
        let gutter = gutter_width(w);
        let (left, right, left_class) = match arrangement {
            Arrangement::CurvedLeft => (&pair.curved_image, &pair.jagged_image, ShapeClass::Round),
            Arrangement::CurvedRight => (&pair.jagged_image, &pair.curved_image, ShapeClass::Sharp),
        };
        let mut image = RgbImage::from_pixel(2 * w + gutter, h, Rgb([255, 255, 255]));
        imageops::replace(&mut image, left, 0, 0);
        imageops::replace(&mut image, right, (w + gutter) as i64, 0);
        CompositeImage {
            composite_id: composite_id(&pair.pair_id, arrangement),
            pair_id: pair.pair_id.clone(),
            left_class,
            right_class: left_class.opposite(),
            image,
            arrangement,
            primary,
            half_width: w,
            gutter,
        }
    }

    /// The same pair with the shapes' positions exchanged.
    pub fn mirror(&self) -> Self {
        let (w, g) = (self.half_width, self.gutter);
        let mut image = RgbImage::from_pixel(self.image.width(), self.image.height(), Rgb([255, 255, 255]));
        let left = imageops::crop_imm(&self.image, 0, 0, w, self.image.height()).to_image();
        let right = imageops::crop_imm(&self.image, w + g, 0, w, self.image.height()).to_image();
        imageops::replace(&mut image, &right, 0, 0);
        imageops::replace(&mut image, &left, (w + g) as i64, 0);
        let arrangement = self.arrangement.mirrored();
        CompositeImage {
            composite_id: composite_id(&self.pair_id, arrangement),
            pair_id: self.pair_id.clone(),
            left_class: self.right_class,
            right_class: self.left_class,
            image,
            arrangement,
            primary: !self.primary,
            half_width: w,
            gutter: g,
        }
    }

    pub fn class_on(&self, side: Side) -> ShapeClass {
        match side {
            Side::Left => self.left_class,
            Side::Right => self.right_class,
        }
    }

    /// Column ranges `[left, gutter, right]`.
    pub fn regions(&self) -> [std::ops::Range<u32>; 3] {
        let (w, g) = (self.half_width, self.gutter);
        [0..w, w..w + g, w + g..2 * w + g]
    }
}

/// Primary composites alternate `curved_left` / `curved_right` over pairs
/// sorted by id, so the curved shape is on the left for `ceil(n/2)` pairs.
/// Each primary is followed by its mirror.
pub fn compose_pairs(pairs: &[ShapePair]) -> Vec<CompositeImage> {
    let mut sorted: Vec<&ShapePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    sorted
        .iter()
        .enumerate()
        .flat_map(|(i, pair)| {
            let arrangement = if i % 2 == 0 { Arrangement::CurvedLeft } else { Arrangement::CurvedRight };
            let primary = CompositeImage::new(pair, arrangement, true);
            let mirror = primary.mirror();
            [primary, mirror]
        })
        .collect()
}
