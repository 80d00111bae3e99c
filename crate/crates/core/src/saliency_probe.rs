//! Grad-CAM region preference on side-by-side composites.
//!
//! A map is computed on the target layer's native grid, rectified, and
//! bilinearly upsampled to the composite. The half receiving more total
//! saliency is the model's choice for the prompted label; the gutter between
//! the shapes counts for neither.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::lexicon::{render_prompt, Label, LabelPair, LabelSet, PromptTemplate, ShapeClass, WordType};
use crate::model_adapter::{FeatureKind, GradientCapture, ImageCapture, VisionLanguageModel};
use crate::shapes::{Arrangement, CompositeImage, Side};
use crate::store::{trial_key, ErrorRecord, JsonlStore, Keyed, SweepSummary};

pub const DECISIONS_FILE: &str = "region_decisions.jsonl";

/// Relative gap between the half sums below which they count as tied.
/// Sums of mirrored interpolation weights can differ in the last bits.
pub const TIE_RTOL: f64 = 1e-9;

/// Gradient batch size; bounds the memory held by per-label gradients.
const GRADIENT_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// Rectified map at composite resolution, `(height, width)`.
    pub grid: Array2<f32>,
    /// Rectified map on the target layer's spatial grid.
    pub coarse: Array2<f32>,
    pub model_id: String,
    pub composite_id: String,
    pub prompt_id: String,
    pub label_id: String,
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDecision {
    pub key: String,
    pub model_id: String,
    pub prompt_id: String,
    pub word_type: WordType,
    pub composite_id: String,
    pub pair_id: String,
    pub arrangement: Arrangement,
    pub primary: bool,
    pub label_id: String,
    pub label_text: String,
    pub label_class: ShapeClass,
    pub left_sum: f64,
    pub right_sum: f64,
    pub gutter_sum: f64,
    pub chosen_side: Side,
    pub chosen_class: ShapeClass,
    pub correct: bool,
    pub tie_flag: bool,
    pub all_zero: bool,
    /// Largest coarse cell whose centre lies in each half.
    pub left_peak: f64,
    pub right_peak: f64,
    /// Mean saliency over the shape's pixels in each half.
    pub left_mask_mean: f64,
    pub right_mask_mean: f64,
}

impl Keyed for RegionDecision {
    fn key(&self) -> &str {
        &self.key
    }
}

pub fn region_key(model_id: &str, prompt_id: &str, label_set_version: &str, composite_id: &str, label_id: &str) -> String {
    trial_key(&["region", model_id, prompt_id, label_set_version, composite_id, label_id])
}

/// Spatial size of the saliency grid for a capture.
pub fn coarse_shape(kind: FeatureKind, activations_shape: &[usize]) -> (usize, usize) {
    match kind {
        FeatureKind::Convolutional => (activations_shape[1], activations_shape[2]),
        FeatureKind::Attention { grid } => (grid, grid),
    }
}

/// Rectified saliency on the target layer's grid.
///
/// Convolutional: `relu(sum_c mean(G_c) * A_c)`. Attention: class-token row
/// of `mean_h relu(A_h * G_h)` over the patch tokens, as a `grid x grid` map.
pub fn coarse_map(g: &GradientCapture) -> Result<Array2<f32>> {
    let shape = g.activations.shape();
    if g.gradients.shape() != shape {
        return Err(Error::Invalid("gradient and activation shapes differ".into()));
    }
    match g.kind {
        FeatureKind::Convolutional => {
            let weights = g.gradients.mean_axis(Axis(1)).and_then(|m| m.mean_axis(Axis(1))).expect("non-empty map");
            let mut map = Array2::<f32>::zeros((shape[1], shape[2]));
            for (a, w) in g.activations.outer_iter().zip(weights.iter()) {
                map.scaled_add(*w, &a);
            }
            Ok(map.mapv(|v| v.max(0.0)))
        }
        FeatureKind::Attention { grid } => {
            if shape[1] != grid * grid + 1 || shape[2] != shape[1] {
                return Err(Error::Invalid(format!("attention shape {shape:?} does not match a {grid}x{grid} grid")));
            }
            let heads = shape[0] as f32;
            let mut row = vec![0.0f32; grid * grid];
            for h in 0..shape[0] {
                for (k, r) in row.iter_mut().enumerate() {
                    *r += (g.activations[[h, 0, k + 1]] * g.gradients[[h, 0, k + 1]]).max(0.0) / heads;
                }
            }
            Ok(Array2::from_shape_vec((grid, grid), row).expect("grid sized"))
        }
    }
}

/// `(output, input)` bilinear weights with half-pixel centres and edge
/// clamping, so that `upsampled = Ry . coarse . Rx^T`.
pub fn interpolation_matrix(output: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

pub fn upsample_bilinear(coarse: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let ry = interpolation_matrix(height, coarse.nrows());
    let rx = interpolation_matrix(width, coarse.ncols());
    ry.dot(&coarse.mapv(f64::from)).dot(&rx.t()).mapv(|v| v as f32)
}

fn saliency_from_gradient(
    g: &GradientCapture,
    composite: &CompositeImage,
    model_id: &str,
    prompt_id: &str,
    label_id: &str,
) -> Result<SaliencyMap> {
    let coarse = coarse_map(g)?;
    let grid = upsample_bilinear(&coarse, composite.image.height() as usize, composite.image.width() as usize);
    Ok(SaliencyMap {
        all_zero: coarse.iter().all(|v| *v == 0.0),
        grid,
        coarse,
        model_id: model_id.to_owned(),
        composite_id: composite.composite_id.clone(),
        prompt_id: prompt_id.to_owned(),
        label_id: label_id.to_owned(),
    })
}

/// Saliency of one rendered prompt on a composite.
pub fn compute_saliency(
    h: &dyn VisionLanguageModel,
    composite: &CompositeImage,
    prompt: &PromptTemplate,
    label: &Label,
) -> Result<SaliencyMap> {
    let text = h.embed_text(&[render_prompt(prompt, label)])?;
    let capture = h.capture(&composite.image)?;
    let g = h.gradients(&capture, text.view())?.remove(0);
    saliency_from_gradient(&g, composite, h.model_id(), &prompt.id, &label.source_id)
}

/// Pixels belonging to a shape: darker than mid grey.
pub fn shape_mask(image: &RgbImage) -> Array2<f64> {
    Array2::from_shape_fn((image.height() as usize, image.width() as usize), |(y, x)| {
        let p = image.get_pixel(x as u32, y as u32).0;
        if (p[0] as u32 + p[1] as u32 + p[2] as u32) < 3 * 128 {
            1.0
        } else {
            0.0
        }
    })
}

/// Coarse columns whose centres fall in each region.
fn cell_columns(composite: &CompositeImage, cols: usize) -> [Vec<usize>; 2] {
    let [left, _, right] = composite.regions();
    let width = composite.image.width() as f64;
    let mut out = [Vec::new(), Vec::new()];
    for j in 0..cols {
        let centre = (j as f64 + 0.5) * width / cols as f64;
        if centre < left.end as f64 {
            out[0].push(j);
        } else if centre >= right.start as f64 {
            out[1].push(j);
        }
    }
    out
}

fn peak(coarse: &Array2<f32>, columns: &[usize]) -> f64 {
    columns.iter().flat_map(|&j| coarse.column(j).to_vec()).fold(0.0f32, f32::max) as f64
}

/// Half statistics of one map, before the decision rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    pub left_sum: f64,
    pub right_sum: f64,
    pub gutter_sum: f64,
    pub left_peak: f64,
    pub right_peak: f64,
    pub left_mask_mean: f64,
    pub right_mask_mean: f64,
}

/// Sums over the three column regions of a composite and mask-weighted
/// sums, straight from a coarse map: the upsampling is linear, so each
/// statistic is a fixed weighting of the coarse cells.
#[derive(Debug, Clone)]
pub struct RegionWeights {
    coarse: (usize, usize),
    /// `(cells, 3)`: left, gutter and right weights per coarse cell.
    regions: Array2<f64>,
    /// `(cells, 2)`: shape-mask weights per coarse cell, each half.
    masks: Array2<f64>,
    mask_area: [f64; 2],
    columns: [Vec<usize>; 2],
}

impl RegionWeights {
    pub fn new(composite: &CompositeImage, coarse: (usize, usize)) -> Self {
        let (height, width) = (composite.image.height() as usize, composite.image.width() as usize);
        let ry = interpolation_matrix(height, coarse.0);
        let rx = interpolation_matrix(width, coarse.1);
        let row_total = ry.sum_axis(Axis(0));
        let mask = shape_mask(&composite.image);
        let cells = coarse.0 * coarse.1;
        let mut regions = Array2::zeros((cells, 3));
        let mut masks = Array2::zeros((cells, 2));
        let mut mask_area = [0.0; 2];
        let [left, gutter, right] = composite.regions();
        for (r, range) in [left.clone(), gutter, right.clone()].into_iter().enumerate() {
            let cols = rx.slice(s![range.start as usize..range.end as usize, ..]).sum_axis(Axis(0));
            for i in 0..coarse.0 {
                for j in 0..coarse.1 {
                    regions[[i * coarse.1 + j, r]] = row_total[i] * cols[j];
                }
            }
        }
        for (side, range) in [left, right].into_iter().enumerate() {
            let range = range.start as usize..range.end as usize;
            let m = mask.slice(s![.., range.clone()]);
            mask_area[side] = m.sum();
            let k = ry.t().dot(&m).dot(&rx.slice(s![range, ..]));
            for i in 0..coarse.0 {
                for j in 0..coarse.1 {
                    masks[[i * coarse.1 + j, side]] = k[[i, j]];
                }
            }
        }
        RegionWeights { coarse, regions, masks, mask_area, columns: cell_columns(composite, coarse.1) }
    }

    pub fn stats(&self, coarse: &Array2<f32>) -> Result<RegionStats> {
        if coarse.dim() != self.coarse {
            return Err(Error::Invalid(format!("map is {:?}, weights were built for {:?}", coarse.dim(), self.coarse)));
        }
        let flat: ndarray::Array1<f64> = coarse.iter().map(|v| *v as f64).collect();
        let sums = flat.dot(&self.regions);
        let masked = flat.dot(&self.masks);
        let mean = |side: usize| if self.mask_area[side] > 0.0 { masked[side] / self.mask_area[side] } else { 0.0 };
        Ok(RegionStats {
            left_sum: sums[0],
            gutter_sum: sums[1],
            right_sum: sums[2],
            left_peak: peak(coarse, &self.columns[0]),
            right_peak: peak(coarse, &self.columns[1]),
            left_mask_mean: mean(0),
            right_mask_mean: mean(1),
        })
    }
}

/// Statistics of a full-resolution map, summed pixel by pixel.
pub fn region_stats(map: &SaliencyMap, composite: &CompositeImage) -> Result<RegionStats> {
    let (height, width) = (composite.image.height() as usize, composite.image.width() as usize);
    if map.grid.dim() != (height, width) {
        return Err(Error::Invalid(format!(
            "map `{}` is {:?}, composite `{}` is {:?}",
            map.label_id,
            map.grid.dim(),
            composite.composite_id,
            (height, width)
        )));
    }
    let mask = shape_mask(&composite.image);
    let [left, gutter, right] = composite.regions();
    let sum =
        |r: std::ops::Range<u32>| map.grid.slice(s![.., r.start as usize..r.end as usize]).iter().map(|v| *v as f64).sum::<f64>();
    let mask_mean = |r: std::ops::Range<u32>| {
        let cols = r.start as usize..r.end as usize;
        let m = mask.slice(s![.., cols.clone()]);
        let area = m.sum();
        if area == 0.0 {
            return 0.0;
        }
        m.iter().zip(map.grid.slice(s![.., cols]).iter()).map(|(m, v)| m * *v as f64).sum::<f64>() / area
    };
    let columns = cell_columns(composite, map.coarse.ncols());
    Ok(RegionStats {
        left_sum: sum(left.clone()),
        right_sum: sum(right.clone()),
        gutter_sum: sum(gutter),
        left_peak: peak(&map.coarse, &columns[0]),
        right_peak: peak(&map.coarse, &columns[1]),
        left_mask_mean: mask_mean(left),
        right_mask_mean: mask_mean(right),
    })
}

/// Larger half wins; ties (within [`TIE_RTOL`]) choose left and are flagged.
pub fn choose_side(left_sum: f64, right_sum: f64) -> (Side, bool) {
    let tie = (left_sum - right_sum).abs() <= TIE_RTOL * (left_sum + right_sum).abs();
    if tie || left_sum > right_sum {
        (Side::Left, tie)
    } else {
        (Side::Right, false)
    }
}

/// Context of a decision besides the map itself.
#[derive(Debug, Clone, Copy)]
pub struct DecisionSubject<'a> {
    pub model_id: &'a str,
    pub prompt_id: &'a str,
    pub label_set_version: &'a str,
    pub label: &'a Label,
}

pub fn decision_from_stats(stats: RegionStats, composite: &CompositeImage, subject: DecisionSubject<'_>) -> RegionDecision {
    let (chosen_side, tie_flag) = choose_side(stats.left_sum, stats.right_sum);
    let chosen_class = composite.class_on(chosen_side);
    let label = subject.label;
    RegionDecision {
        key: region_key(
            subject.model_id,
            subject.prompt_id,
            subject.label_set_version,
            &composite.composite_id,
            &label.source_id,
        ),
        model_id: subject.model_id.to_owned(),
        prompt_id: subject.prompt_id.to_owned(),
        word_type: label.word_type,
        composite_id: composite.composite_id.clone(),
        pair_id: composite.pair_id.clone(),
        arrangement: composite.arrangement,
        primary: composite.primary,
        label_id: label.source_id.clone(),
        label_text: label.text.clone(),
        label_class: label.shape_class,
        left_sum: stats.left_sum,
        right_sum: stats.right_sum,
        gutter_sum: stats.gutter_sum,
        chosen_side,
        chosen_class,
        correct: chosen_class == label.shape_class,
        tie_flag,
        all_zero: stats.left_sum == 0.0 && stats.right_sum == 0.0 && stats.gutter_sum == 0.0,
        left_peak: stats.left_peak,
        right_peak: stats.right_peak,
        left_mask_mean: stats.left_mask_mean,
        right_mask_mean: stats.right_mask_mean,
    }
}

/// Decision for a full-resolution map; `label_set_version` only enters the key.
pub fn decide_region(
    map: &SaliencyMap,
    composite: &CompositeImage,
    label: &Label,
    label_set_version: &str,
) -> Result<RegionDecision> {
    if map.composite_id != composite.composite_id || map.label_id != label.source_id {
        return Err(Error::Invalid(format!(
            "map for `{}` / `{}` used with `{}` / `{}`",
            map.composite_id, map.label_id, composite.composite_id, label.source_id
        )));
    }
    let stats = region_stats(map, composite)?;
    let subject = DecisionSubject { model_id: &map.model_id, prompt_id: &map.prompt_id, label_set_version, label };
    Ok(decision_from_stats(stats, composite, subject))
}

/// Both labels of a pair sent to their own shape on one composite.
pub fn score_label_pair(a: &RegionDecision, b: &RegionDecision) -> Result<bool> {
    if a.composite_id != b.composite_id || a.model_id != b.model_id || a.prompt_id != b.prompt_id {
        return Err(Error::Invalid(format!("decisions `{}` and `{}` are not on the same trial", a.key, b.key)));
    }
    if a.label_class == b.label_class {
        return Err(Error::Invalid(format!("labels `{}` and `{}` are both {}", a.label_text, b.label_text, a.label_class)));
    }
    Ok(a.correct && b.correct)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCongruence {
    pub model_id: String,
    pub prompt_id: String,
    pub pair_id: String,
    pub composite_id: String,
    pub label_pair: String,
    pub congruent: bool,
}

/// Label-pair congruence on the primary composites.
pub fn pair_congruence(decisions: &[RegionDecision], label_pairs: &[LabelPair]) -> Result<Vec<PairCongruence>> {
    let mut index: HashMap<(&str, &str, &str, &str), &RegionDecision> = HashMap::new();
    let mut trials: BTreeMap<(&str, &str, &str), &str> = BTreeMap::new();
    for d in decisions.iter().filter(|d| d.primary) {
        index.insert((&d.model_id, &d.prompt_id, &d.composite_id, &d.label_id), d);
        trials.insert((&d.model_id, &d.prompt_id, &d.composite_id), &d.pair_id);
    }
    let mut out = Vec::new();
    for ((model, prompt, composite), pair_id) in trials {
        for lp in label_pairs {
            let round = index.get(&(model, prompt, composite, lp.round_label.source_id.as_str()));
            let sharp = index.get(&(model, prompt, composite, lp.sharp_label.source_id.as_str()));
            if let (Some(r), Some(k)) = (round, sharp) {
                out.push(PairCongruence {
                    model_id: model.to_owned(),
                    prompt_id: prompt.to_owned(),
                    pair_id: pair_id.to_owned(),
                    composite_id: composite.to_owned(),
                    label_pair: lp.pair_name.clone(),
                    congruent: score_label_pair(r, k)?,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub model_id: String,
    pub prompt_id: String,
    pub word_type: WordType,
    pub pair_id: String,
    pub label_id: String,
    pub consistent: bool,
    /// One of the two decisions was a tie; excluded from ratios.
    pub tie: bool,
}

/// Whether each label picks the same shape in both arrangements of a pair.
pub fn consistency_pairs(decisions: &[RegionDecision]) -> Result<Vec<ConsistencyPair>> {
    type Key<'a> = (&'a str, &'a str, &'a str, &'a str);
    let mut groups: BTreeMap<Key, [Option<&RegionDecision>; 2]> = BTreeMap::new();
    for d in decisions {
        let slot = match d.arrangement {
            Arrangement::CurvedLeft => 0,
            Arrangement::CurvedRight => 1,
        };
        groups.entry((&d.model_id, &d.prompt_id, &d.pair_id, &d.label_id)).or_default()[slot] = Some(d);
    }
    groups
        .into_iter()
        .map(|((model, prompt, pair, label), slots)| match slots {
            [Some(a), Some(b)] => Ok(ConsistencyPair {
                model_id: model.to_owned(),
                prompt_id: prompt.to_owned(),
                word_type: a.word_type,
                pair_id: pair.to_owned(),
                label_id: label.to_owned(),
                consistent: a.chosen_class == b.chosen_class,
                tie: a.tie_flag || b.tie_flag,
            }),
            _ => Err(Error::Invalid(format!("`{label}` on pair `{pair}` ({model}, {prompt}) lacks its mirror arrangement"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaveMaps {
    #[default]
    None,
    Overlays,
    /// Compressed arrays and overlays.
    Full,
}

impl std::str::FromStr for SaveMaps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SaveMaps::None),
            "overlays" => Ok(SaveMaps::Overlays),
            "full" => Ok(SaveMaps::Full),
            other => Err(Error::Config(format!("unknown --save-maps value `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SaliencyOptions {
    pub save_maps: SaveMaps,
    /// Root of `{model}/{prompt}/{composite}/{label}.npz|png`.
    pub maps_dir: PathBuf,
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

pub fn map_path(root: &Path, map: &SaliencyMap, extension: &str) -> PathBuf {
    root.join(file_stem(&map.model_id))
        .join(file_stem(&map.prompt_id))
        .join(file_stem(&map.composite_id))
        .join(format!("{}.{extension}", file_stem(&map.label_id)))
}

/// Composite with the map blended in red, normalised to its maximum.
pub fn overlay(map: &SaliencyMap, composite: &CompositeImage) -> RgbImage {
    let max = map.grid.iter().copied().fold(0.0f32, f32::max);
    RgbImage::from_fn(composite.image.width(), composite.image.height(), |x, y| {
        let base = composite.image.get_pixel(x, y).0;
        let heat = if max > 0.0 { map.grid[[y as usize, x as usize]] / max } else { 0.0 };
        let mix = |c: u8, target: f32| (c as f32 * (1.0 - 0.6 * heat) + target * 0.6 * heat).round() as u8;
        Rgb([mix(base[0], 255.0), mix(base[1], 0.0), mix(base[2], 0.0)])
    })
}

pub fn save_map(root: &Path, map: &SaliencyMap, composite: &CompositeImage, mode: SaveMaps) -> Result<()> {
    if mode == SaveMaps::None {
        return Ok(());
    }
    crate::util::write_png(&map_path(root, map, "png"), &overlay(map, composite))?;
    if mode == SaveMaps::Full {
        let path = map_path(root, map, "npz");
        let dir = path.parent().expect("nested path");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        let mut npz = ndarray_npy::NpzWriter::new_compressed(tmp.reopen().map_err(io_err(&path))?);
        npz.add_array("map", &map.grid).map_err(|e| Error::Npz(e.to_string()))?;
        npz.add_array("coarse", &map.coarse).map_err(|e| Error::Npz(e.to_string()))?;
        npz.finish().map_err(|e| Error::Npz(e.to_string()))?;
        tmp.persist(&path).map_err(|e| Error::Io { path: path.clone(), source: e.error })?;
    }
    Ok(())
}

/// Region-decision store under `results_dir`.
pub fn open_decisions(results_dir: &Path) -> Result<JsonlStore<RegionDecision>> {
    JsonlStore::open(&results_dir.join(DECISIONS_FILE))
}

struct Pending<'a> {
    prompt: &'a PromptTemplate,
    set: &'a LabelSet,
    version: String,
    labels: Vec<&'a Label>,
}

/// Full sweep of one model over prompts, label sets and composites.
/// Each composite is captured once; gradients for all pending labels of a
/// prompt are taken in batches.
pub fn run_experiment2(
    h: &dyn VisionLanguageModel,
    prompts: &[PromptTemplate],
    label_sets: &[&LabelSet],
    composites: &[CompositeImage],
    store: &JsonlStore<RegionDecision>,
    options: &SaliencyOptions,
) -> Result<SweepSummary> {
    let model_id = h.model_id();
    let cells: Vec<(&PromptTemplate, &LabelSet, String)> =
        prompts.iter().flat_map(|p| label_sets.iter().map(move |s| (p, *s, s.version()))).collect();
    let texts: Vec<std::result::Result<Array2<f32>, String>> = cells
        .par_iter()
        .map(|(p, s, v)| {
            let any = composites.iter().any(|c| {
                s.labels.iter().any(|l| !store.contains(&region_key(model_id, &p.id, v, &c.composite_id, &l.source_id)))
            });
            if !any {
                return Err(String::new());
            }
            h.embed_text(&s.labels.iter().map(|l| render_prompt(p, l)).collect::<Vec<_>>()).map_err(|e| e.to_string())
        })
        .collect();

    let parts = composites
        .par_iter()
        .map(|composite| -> Result<SweepSummary> {
            let mut part = SweepSummary::default();
            let pending: Vec<(usize, Pending)> = cells
                .iter()
                .enumerate()
                .map(|(i, (prompt, set, version))| {
                    let labels: Vec<&Label> = set
                        .labels
                        .iter()
                        .filter(|l| {
                            !store.contains(&region_key(model_id, &prompt.id, version, &composite.composite_id, &l.source_id))
                        })
                        .collect();
                    part.skipped += set.len() - labels.len();
                    (i, Pending { prompt, set, version: version.clone(), labels })
                })
                .filter(|(_, p)| !p.labels.is_empty())
                .collect();
            if pending.is_empty() {
                return Ok(part);
            }
            let fail = |p: &Pending, labels: &[&Label], error: String, part: &mut SweepSummary| -> Result<()> {
                for l in labels {
                    store.append_error(&ErrorRecord {
                        key: region_key(model_id, &p.prompt.id, &p.version, &composite.composite_id, &l.source_id),
                        model_id: model_id.to_owned(),
                        trial: format!("{} / {} / {} / {}", p.prompt.id, p.set.word_type, composite.composite_id, l.text),
                        error: error.clone(),
                    })?;
                    part.failed += 1;
                }
                Ok(())
            };
            let capture = match h.capture(&composite.image) {
                Ok(c) => c,
                Err(e) => {
                    for (_, p) in &pending {
                        fail(p, &p.labels, e.to_string(), &mut part)?;
                    }
                    return Ok(part);
                }
            };
            let weights = RegionWeights::new(composite, coarse_shape(capture.kind, capture.activations.shape()));
            for (i, p) in &pending {
                let all = match &texts[*i] {
                    Ok(t) => t,
                    Err(e) => {
                        fail(p, &p.labels, e.clone(), &mut part)?;
                        continue;
                    }
                };
                for chunk in p.labels.chunks(GRADIENT_CHUNK) {
                    match decide_chunk(h, &capture, &weights, composite, p, chunk, all, options) {
                        Ok(decisions) => {
                            for d in decisions {
                                store.append(&d)?;
                                part.computed += 1;
                            }
                        }
                        Err(e) if e.is_environment() => return Err(e),
                        Err(e) => fail(p, chunk, e.to_string(), &mut part)?,
                    }
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;
    store.flush()?;
    Ok(parts.into_iter().fold(SweepSummary::default(), SweepSummary::merge))
}

#[allow(clippy::too_many_arguments)]
fn decide_chunk(
    h: &dyn VisionLanguageModel,
    capture: &ImageCapture,
    weights: &RegionWeights,
    composite: &CompositeImage,
    p: &Pending,
    labels: &[&Label],
    texts: &Array2<f32>,
    options: &SaliencyOptions,
) -> Result<Vec<RegionDecision>> {
    let rows: Vec<usize> = labels
        .iter()
        .map(|l| p.set.labels.iter().position(|x| x.source_id == l.source_id).expect("label from its set"))
        .collect();
    let selected = texts.select(Axis(0), &rows);
    let grads = h.gradients(capture, selected.view())?;
    let model_id = h.model_id();
    grads
        .iter()
        .zip(labels)
        .map(|(g, label)| {
            let coarse = coarse_map(g)?;
            let subject = DecisionSubject { model_id, prompt_id: &p.prompt.id, label_set_version: &p.version, label };
            let decision = decision_from_stats(weights.stats(&coarse)?, composite, subject);
            if options.save_maps != SaveMaps::None {
                let map = saliency_from_gradient(g, composite, model_id, &p.prompt.id, &label.source_id)?;
                save_map(&options.maps_dir, &map, composite, options.save_maps)?;
            }
            Ok(decision)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{default_prompts, original_labels};
    use crate::model_adapter::ToyModel;
    use crate::shapes::{compose_pairs, generate_pairs, GenerationParams};

    fn composites() -> Vec<CompositeImage> {
        let pairs = generate_pairs(&GenerationParams { pairs: 2, resolution: 40, ..Default::default() }).unwrap();
        compose_pairs(&pairs)
    }

    fn map_for(c: &CompositeImage, grid: Array2<f32>) -> SaliencyMap {
        SaliencyMap {
            coarse: Array2::zeros((1, 1)),
            all_zero: grid.iter().all(|v| *v == 0.0),
            grid,
            model_id: "m".into(),
            composite_id: c.composite_id.clone(),
            prompt_id: "p01".into(),
            label_id: original_labels()[0].source_id.clone(),
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (o, i) in [(336, 7), (10, 3), (5, 5), (7, 1)] {
            let m = interpolation_matrix(o, i);
            for row in m.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(interpolation_matrix(4, 4), Array2::<f64>::eye(4));
    }

    #[test]
    fn left_mass_chooses_left_and_uniform_ties() {
        let c = &composites()[0];
        let (h, w) = (c.image.height() as usize, c.image.width() as usize);
        let label = &original_labels()[0];
        let left = Array2::from_shape_fn((h, w), |(_, x)| if x < 5 { 1.0 } else { 0.0 });
        let d = decide_region(&map_for(c, left), c, label, "v").unwrap();
        assert_eq!((d.chosen_side, d.tie_flag), (Side::Left, false));
        let d = decide_region(&map_for(c, Array2::from_elem((h, w), 0.3)), c, label, "v").unwrap();
        assert_eq!((d.chosen_side, d.tie_flag), (Side::Left, true));
        let d = decide_region(&map_for(c, Array2::zeros((h, w))), c, label, "v").unwrap();
        assert!(d.tie_flag && d.all_zero);
    }

    #[test]
    fn mirrored_map_keeps_the_class() {
        let cs = composites();
        let (c, m) = (&cs[0], &cs[1]);
        let (h, w) = (c.image.height() as usize, c.image.width() as usize);
        let grid = Array2::from_shape_fn((h, w), |(y, x)| ((x * 7 + y * 3) % 11) as f32 * if x < w / 3 { 2.0 } else { 1.0 });
        let mirrored = grid.slice(s![.., ..;-1]).to_owned();
        let label = &original_labels()[0];
        let a = decide_region(&map_for(c, grid), c, label, "v").unwrap();
        let b = decide_region(&map_for(m, mirrored), m, label, "v").unwrap();
        assert_ne!(a.chosen_side, b.chosen_side);
        assert_eq!(a.chosen_class, b.chosen_class);
    }

    #[test]
    fn toy_map_matches_closed_form() {
        let toy = ToyModel::new(5);
        let c = &composites()[0];
        let label = &original_labels()[0];
        let prompt = &default_prompts()[0];
        let map = compute_saliency(&toy, c, prompt, label).unwrap();
        let act = toy.activations(&toy.input(&c.image).unwrap());
        let g = toy.gradients(&toy.capture(&c.image).unwrap(), toy.embed_text(&[prompt.render(label)]).unwrap().view()).unwrap();
        let w = g[0].gradients.mean().unwrap();
        let want = act.index_axis(Axis(0), 0).mapv(|a| (w * a).max(0.0));
        assert!(map.coarse.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(map.grid.dim(), (c.image.height() as usize, c.image.width() as usize));
    }

    #[test]
    fn weighted_sums_match_pixel_sums() {
        let c = &composites()[1];
        let coarse = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 5 + j * 3) % 7) as f32);
        let weights = RegionWeights::new(c, (5, 6));
        let mut map = map_for(c, upsample_bilinear(&coarse, c.image.height() as usize, c.image.width() as usize));
        map.coarse = coarse.clone();
        let fast = weights.stats(&coarse).unwrap();
        let slow = region_stats(&map, c).unwrap();
        for (a, b) in [
            (fast.left_sum, slow.left_sum),
            (fast.right_sum, slow.right_sum),
            (fast.gutter_sum, slow.gutter_sum),
            (fast.left_mask_mean, slow.left_mask_mean),
            (fast.right_mask_mean, slow.right_mask_mean),
        ] {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(fast.left_peak, slow.left_peak);
    }

    #[test]
    fn missing_mirror_is_an_error() {
        let toy = ToyModel::new(5);
        let cs = composites();
        let dir = tempfile::tempdir().unwrap();
        let store = open_decisions(dir.path()).unwrap();
        let set = LabelSet::new(WordType::Original, original_labels()).unwrap();
        let prompts = &default_prompts()[..1];
        let summary = run_experiment2(&toy, prompts, &[&set], &cs, &store, &SaliencyOptions::default()).unwrap();
        assert_eq!(summary.computed, cs.len() * 4);
        let decisions = store.contents().unwrap().records;
        assert_eq!(consistency_pairs(&decisions).unwrap().len(), 2 * 4);
        let primaries: Vec<_> = decisions.iter().filter(|d| d.primary).cloned().collect();
        assert!(consistency_pairs(&primaries).is_err());
        let again = run_experiment2(&toy, prompts, &[&set], &cs, &store, &SaliencyOptions::default()).unwrap();
        assert_eq!((again.computed, again.skipped), (0, cs.len() * 4));
    }
}
