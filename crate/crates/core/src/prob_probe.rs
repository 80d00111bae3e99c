//! Label-probability probe: argmax label per image, pair congruence under
//! the both-images-correct rule.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use base64::Engine;
use image::RgbImage;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{render_prompt, Label, LabelSet, PromptTemplate, ShapeClass, WordType};
use crate::model_adapter::{probabilities_from_embeddings, VisionLanguageModel};
use crate::shapes::ShapePair;
use crate::store::{trial_key, ErrorRecord, JsonlStore, Keyed, SweepSummary};

pub const TRIALS_FILE: &str = "prob_trials.jsonl";
pub const OUTCOMES_FILE: &str = "pair_outcomes.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTrial {
    pub key: String,
    pub model_id: String,
    pub prompt_id: String,
    pub word_type: WordType,
    pub label_set_version: String,
    pub image_id: String,
    pub pair_id: String,
    pub image_class: ShapeClass,
    pub winner_label: String,
    pub winner_class: ShapeClass,
    pub winner_prob: f64,
    /// Several labels shared the maximum; the lexicographically first won.
    pub tie: bool,
    /// Base64 little-endian f16 probabilities in label-set order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_probs: Option<String>,
}

impl Keyed for ProbTrial {
    fn key(&self) -> &str {
        &self.key
    }
}

impl ProbTrial {
    pub fn probabilities(&self) -> Option<Vec<f32>> {
        decode_probs(self.all_probs.as_deref()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub key: String,
    pub model_id: String,
    pub prompt_id: String,
    pub word_type: WordType,
    pub pair_id: String,
    #[serde(rename = "match")]
    pub matched: bool,
}

impl Keyed for PairOutcome {
    fn key(&self) -> &str {
        &self.key
    }
}

pub fn encode_probs(probs: &[f64]) -> String {
    let bytes: Vec<u8> = probs.iter().flat_map(|p| half::f16::from_f64(*p).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_probs(text: &str) -> Option<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(text).ok()?;
    if bytes.len() % 2 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(2).map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32()).collect())
}

pub fn prob_trial_key(model_id: &str, prompt_id: &str, label_set: &LabelSet, image_id: &str) -> String {
    trial_key(&["prob", model_id, prompt_id, &label_set.version(), image_id])
}

pub fn pair_outcome_key(model_id: &str, prompt_id: &str, label_set_version: &str, pair_id: &str) -> String {
    trial_key(&["pair", model_id, prompt_id, label_set_version, pair_id])
}

/// Index of the most probable label; exact ties go to the smallest label
/// text. Returns `(index, tie)`.
pub fn argmax_label(probs: &[f64], labels: &[Label]) -> (usize, bool) {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<usize> = None;
    let mut count = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p == max {
            count += 1;
            if best.is_none_or(|b| labels[i].text < labels[b].text) {
                best = Some(i);
            }
        }
    }
    (best.expect("at least one label"), count > 1)
}

/// What a trial is about, apart from the model output.
#[derive(Debug, Clone)]
pub struct TrialSubject<'a> {
    pub model_id: &'a str,
    pub prompt: &'a PromptTemplate,
    pub label_set: &'a LabelSet,
    pub pair_id: &'a str,
    pub image_id: &'a str,
    pub image_class: ShapeClass,
}

/// Builds a trial from precomputed unit embeddings.
pub fn decide_trial(
    subject: &TrialSubject<'_>,
    image_embedding: ArrayView1<f32>,
    text_embeddings: ArrayView2<f32>,
    logit_scale: f64,
    keep_probs: bool,
) -> ProbTrial {
    let probs = probabilities_from_embeddings(image_embedding, text_embeddings, logit_scale);
    let labels = &subject.label_set.labels;
    let (winner, tie) = argmax_label(&probs, labels);
    ProbTrial {
        key: prob_trial_key(subject.model_id, &subject.prompt.id, subject.label_set, subject.image_id),
        model_id: subject.model_id.to_owned(),
        prompt_id: subject.prompt.id.clone(),
        word_type: subject.label_set.word_type,
        label_set_version: subject.label_set.version(),
        image_id: subject.image_id.to_owned(),
        pair_id: subject.pair_id.to_owned(),
        image_class: subject.image_class,
        winner_label: labels[winner].text.clone(),
        winner_class: labels[winner].shape_class,
        winner_prob: probs[winner],
        tie,
        all_probs: keep_probs.then(|| encode_probs(&probs)),
    }
}

fn rendered(template: &PromptTemplate, label_set: &LabelSet) -> Vec<String> {
    label_set.labels.iter().map(|l| render_prompt(template, l)).collect()
}

/// One image against every label of `label_set` rendered into `template`.
pub fn run_prob_trial(
    h: &dyn VisionLanguageModel,
    pair: &ShapePair,
    image_class: ShapeClass,
    label_set: &LabelSet,
    template: &PromptTemplate,
) -> Result<ProbTrial> {
    let texts = h.embed_text(&rendered(template, label_set))?;
    let image = h.embed_image(std::slice::from_ref(pair.image(image_class)))?;
    let image_id = pair.image_id(image_class);
    let subject = TrialSubject {
        model_id: h.model_id(),
        prompt: template,
        label_set,
        pair_id: &pair.pair_id,
        image_id: &image_id,
        image_class,
    };
    Ok(decide_trial(&subject, image.row(0), texts.view(), h.logit_scale(), true))
}

/// Conjunction rule: round winner on the curved image and sharp winner on
/// the jagged one.
pub fn score_pair(curved: &ProbTrial, jagged: &ProbTrial) -> Result<PairOutcome> {
    let same = curved.model_id == jagged.model_id
        && curved.prompt_id == jagged.prompt_id
        && curved.word_type == jagged.word_type
        && curved.label_set_version == jagged.label_set_version
        && curved.pair_id == jagged.pair_id;
    if !same {
        return Err(Error::Invalid(format!("trials `{}` and `{}` belong to different pairs", curved.key, jagged.key)));
    }
    if curved.image_class != ShapeClass::Round || jagged.image_class != ShapeClass::Sharp {
        return Err(Error::Invalid(format!("pair `{}` needs a curved and a jagged trial", curved.pair_id)));
    }
    Ok(PairOutcome {
        key: pair_outcome_key(&curved.model_id, &curved.prompt_id, &curved.label_set_version, &curved.pair_id),
        model_id: curved.model_id.clone(),
        prompt_id: curved.prompt_id.clone(),
        word_type: curved.word_type,
        pair_id: curved.pair_id.clone(),
        matched: curved.winner_class == ShapeClass::Round && jagged.winner_class == ShapeClass::Sharp,
    })
}

/// Result stores of the probability probe under `results_dir`.
pub struct ProbStores {
    pub trials: JsonlStore<ProbTrial>,
    pub outcomes: JsonlStore<PairOutcome>,
}

impl ProbStores {
    pub fn open(results_dir: &Path) -> Result<Self> {
        Ok(ProbStores {
            trials: JsonlStore::open(&results_dir.join(TRIALS_FILE))?,
            outcomes: JsonlStore::open(&results_dir.join(OUTCOMES_FILE))?,
        })
    }

    pub fn paths(results_dir: &Path) -> [PathBuf; 2] {
        [results_dir.join(TRIALS_FILE), results_dir.join(OUTCOMES_FILE)]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProbOptions {
    /// Keep the full probability vector in every trial record.
    pub keep_probs: bool,
}

struct Image<'a> {
    pair: &'a ShapePair,
    class: ShapeClass,
    id: String,
}

/// Full sweep of one model over prompts, label sets and image pairs.
/// Trials already in the store are skipped; failures become error records.
pub fn run_experiment1(
    h: &dyn VisionLanguageModel,
    prompts: &[PromptTemplate],
    label_sets: &[&LabelSet],
    pairs: &[ShapePair],
    stores: &ProbStores,
    options: ProbOptions,
) -> Result<SweepSummary> {
    let model_id = h.model_id();
    let images: Vec<Image> = pairs
        .iter()
        .flat_map(|p| [ShapeClass::Round, ShapeClass::Sharp].map(|c| Image { pair: p, class: c, id: p.image_id(c) }))
        .collect();
    let cells: Vec<(&PromptTemplate, &LabelSet)> = prompts.iter().flat_map(|p| label_sets.iter().map(move |s| (p, *s))).collect();

    let pending =
        |p: &PromptTemplate, s: &LabelSet, img: &Image| !stores.trials.contains(&prob_trial_key(model_id, &p.id, s, &img.id));
    let any_pending = cells.iter().any(|(p, s)| images.iter().any(|img| pending(p, s, img)));
    let mut summary = SweepSummary::default();

    if any_pending {
        let image_rows: Vec<std::result::Result<ndarray::Array1<f32>, String>> = images
            .par_iter()
            .map(|img| {
                h.embed_image(std::slice::from_ref(img.pair.image(img.class)))
                    .map(|m| m.row(0).to_owned())
                    .map_err(|e| e.to_string())
            })
            .collect();
        let parts = cells
            .par_iter()
            .map(|(prompt, set)| -> Result<SweepSummary> {
                let mut part = SweepSummary::default();
                let todo: Vec<usize> = (0..images.len()).filter(|&i| pending(prompt, set, &images[i])).collect();
                part.skipped += images.len() - todo.len();
                if todo.is_empty() {
                    return Ok(part);
                }
                let texts: std::result::Result<Array2<f32>, String> =
                    h.embed_text(&rendered(prompt, set)).map_err(|e| e.to_string());
                for i in todo {
                    let img = &images[i];
                    let subject = TrialSubject {
                        model_id,
                        prompt,
                        label_set: set,
                        pair_id: &img.pair.pair_id,
                        image_id: &img.id,
                        image_class: img.class,
                    };
                    match (&texts, &image_rows[i]) {
                        (Ok(t), Ok(row)) => {
                            let trial = decide_trial(&subject, row.view(), t.view(), h.logit_scale(), options.keep_probs);
                            stores.trials.append(&trial)?;
                            part.computed += 1;
                        }
                        (Err(e), _) | (_, Err(e)) => {
                            stores.trials.append_error(&ErrorRecord {
                                key: prob_trial_key(model_id, &prompt.id, set, &img.id),
                                model_id: model_id.to_owned(),
                                trial: format!("{} / {} / {}", prompt.id, set.word_type, img.id),
                                error: e.clone(),
                            })?;
                            part.failed += 1;
                        }
                    }
                }
                Ok(part)
            })
            .collect::<Result<Vec<_>>>()?;
        summary = parts.into_iter().fold(summary, SweepSummary::merge);
    } else {
        summary.skipped = cells.len() * images.len();
    }
    stores.trials.flush()?;
    summary.outcomes = write_outcomes(stores, model_id)?;
    stores.outcomes.flush()?;
    Ok(summary)
}

/// Scores every pair whose two trials are stored and whose outcome is not.
fn write_outcomes(stores: &ProbStores, model_id: &str) -> Result<usize> {
    let trials = stores.trials.contents()?.records;
    let mut by_image: HashMap<(&str, &str, &str, &str, ShapeClass), &ProbTrial> = HashMap::new();
    for t in trials.iter().filter(|t| t.model_id == model_id) {
        by_image.insert((&t.prompt_id, &t.label_set_version, &t.pair_id, &t.model_id, t.image_class), t);
    }
    let mut written = 0;
    for t in trials.iter().filter(|t| t.model_id == model_id && t.image_class == ShapeClass::Round) {
        let key = pair_outcome_key(model_id, &t.prompt_id, &t.label_set_version, &t.pair_id);
        if stores.outcomes.contains(&key) {
            continue;
        }
        if let Some(j) = by_image.get(&(&t.prompt_id, &t.label_set_version, &t.pair_id, &t.model_id, ShapeClass::Sharp)) {
            if stores.outcomes.append(&score_pair(t, j)?)? {
                written += 1;
            }
        }
    }
    Ok(written)
}

pub const SEPARABILITY_FILE: &str = "separability.jsonl";

/// Fewest points per class for a separability score to be recorded.
pub const MIN_PER_CLASS: usize = 4;

/// Linear separability of round vs sharp label prompts or curved vs
/// jagged images in one model's joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityRecord {
    pub key: String,
    pub model_id: String,
    /// `text:{word_type}` or `image`.
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    pub points: usize,
    pub score: f64,
}

impl Keyed for SeparabilityRecord {
    fn key(&self) -> &str {
        &self.key
    }
}

fn class_index(c: ShapeClass) -> usize {
    match c {
        ShapeClass::Round => 0,
        ShapeClass::Sharp => 1,
    }
}

/// Scores text embeddings of every label set with at least
/// [`MIN_PER_CLASS`] labels per class (rendered into `prompt`), and the
/// image embeddings of all pairs when there are enough of them.
pub fn run_separability(
    h: &dyn VisionLanguageModel,
    prompt: &PromptTemplate,
    label_sets: &[&LabelSet],
    pairs: &[ShapePair],
    store: &JsonlStore<SeparabilityRecord>,
) -> Result<SweepSummary> {
    let model_id = h.model_id();
    let mut summary = SweepSummary::default();
    for set in label_sets {
        let per_class = [ShapeClass::Round, ShapeClass::Sharp].map(|c| set.labels.iter().filter(|l| l.shape_class == c).count());
        if per_class.iter().any(|n| *n < MIN_PER_CLASS) {
            continue;
        }
        let subject = format!("text:{}", set.word_type);
        let key = trial_key(&["separability", model_id, &subject, &prompt.id, &set.version()]);
        if store.contains(&key) {
            summary.skipped += 1;
            continue;
        }
        let classes: Vec<usize> = set.labels.iter().map(|l| class_index(l.shape_class)).collect();
        let scored = h.embed_text(&rendered(prompt, set)).and_then(|e| crate::metrics::separability_score(e.view(), &classes));
        record(store, &mut summary, key, model_id, subject, Some(prompt.id.clone()), classes.len(), scored)?;
    }
    if pairs.len() >= MIN_PER_CLASS {
        let ids: Vec<String> = pairs.iter().flat_map(|p| [ShapeClass::Round, ShapeClass::Sharp].map(|c| p.image_id(c))).collect();
        let mut parts: Vec<&str> = vec!["separability", model_id, "image"];
        parts.extend(ids.iter().map(String::as_str));
        let key = trial_key(&parts);
        if store.contains(&key) {
            summary.skipped += 1;
        } else {
            let images: Vec<RgbImage> = pairs.iter().flat_map(|p| [p.curved_image.clone(), p.jagged_image.clone()]).collect();
            let classes: Vec<usize> = (0..images.len()).map(|i| i % 2).collect();
            let scored = h.embed_image(&images).and_then(|e| crate::metrics::separability_score(e.view(), &classes));
            record(store, &mut summary, key, model_id, "image".into(), None, classes.len(), scored)?;
        }
    }
    store.flush()?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn record(
    store: &JsonlStore<SeparabilityRecord>,
    summary: &mut SweepSummary,
    key: String,
    model_id: &str,
    subject: String,
    prompt_id: Option<String>,
    points: usize,
    scored: Result<f64>,
) -> Result<()> {
    match scored {
        Ok(score) => {
            store.append(&SeparabilityRecord { key, model_id: model_id.to_owned(), subject, prompt_id, points, score })?;
            summary.computed += 1;
        }
        Err(e) if e.is_environment() => return Err(e),
        Err(e) => {
            store.append_error(&ErrorRecord { key, model_id: model_id.to_owned(), trial: subject, error: e.to_string() })?;
            summary.failed += 1;
        }
    }
    Ok(())
}
