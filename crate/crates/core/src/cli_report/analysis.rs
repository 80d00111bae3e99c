use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lexicon::{gen_original_pairs, Lexicon, ShapeClass, WordType};
use crate::metrics::{
    consistency_ratio, estimate_for, per_image_uniqueness, stratified_bootstrap, uniqueness_ratio, GroupKey, ProportionEstimate,
    BOOTSTRAP_RESAMPLES,
};
use crate::prob_probe::{PairOutcome, ProbTrial, SeparabilityRecord, OUTCOMES_FILE, SEPARABILITY_FILE, TRIALS_FILE};
use crate::saliency_probe::{consistency_pairs, pair_congruence, RegionDecision, DECISIONS_FILE};
use crate::store::read_store;
use crate::util::write_atomic;

pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const UNIQUENESS_CSV: &str = "uniqueness.csv";
pub const CONSISTENCY_CSV: &str = "consistency.csv";
pub const SEPARABILITY_CSV: &str = "separability.csv";
pub const ANALYSIS_FILES: [&str; 4] = [ESTIMATES_CSV, UNIQUENESS_CSV, CONSISTENCY_CSV, SEPARABILITY_CSV];

/// Both images of a pair matched (chance 0.25).
pub const PROB_PAIRS: &str = "prob_pairs";
/// Both labels of a pair sent to their own shape (chance 0.25).
pub const GRADCAM_PAIRS: &str = "gradcam_pairs";
/// One label sent to its own shape (chance 0.5).
pub const GRADCAM_LABELS: &str = "gradcam_labels";

pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub experiment: String,
    pub model: String,
    pub word_type: String,
    pub prompt: String,
    pub category: String,
    pub successes: u64,
    pub trials: u64,
    pub posterior_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub chance: f64,
    pub significant: bool,
    /// Prompt-stratified bootstrap interval, pooled rows only.
    pub boot_low: Option<f64>,
    pub boot_high: Option<f64>,
}

impl EstimateRow {
    fn new(experiment: &str, e: ProportionEstimate) -> Self {
        let k = e.group_key;
        EstimateRow {
            experiment: experiment.to_owned(),
            model: k.model,
            word_type: k.word_type.map_or(ALL.into(), |w| w.to_string()),
            prompt: k.prompt.unwrap_or_else(|| ALL.into()),
            category: k.category.map_or(ALL.into(), |c| c.to_string()),
            successes: e.successes,
            trials: e.trials,
            posterior_mean: e.posterior_mean,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            chance: e.chance,
            significant: e.significant,
            boot_low: None,
            boot_high: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessRow {
    pub model: String,
    pub word_type: String,
    pub unique_labels: usize,
    pub label_set_size: usize,
    pub trials: usize,
    /// Distinct winners over all images and prompts per label-set size.
    pub ratio: Option<f64>,
    /// Mean per image of distinct winners across prompts.
    pub per_image_ratio: Option<f64>,
    /// `generated-only` when no legacy pairs were used.
    pub stimuli: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub model: String,
    pub word_type: String,
    pub consistent: u64,
    pub total: u64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityRow {
    pub model: String,
    pub subject: String,
    pub prompt: String,
    pub points: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub estimates: Vec<EstimateRow>,
    pub uniqueness: Vec<UniquenessRow>,
    pub consistency: Vec<ConsistencyRow>,
    pub separability: Vec<SeparabilityRow>,
    /// Failed trials still recorded in the stores.
    pub errors: usize,
    pub warnings: Vec<String>,
}

/// Result records of every experiment, as read from `results_dir`.
#[derive(Debug, Clone, Default)]
pub struct Results {
    pub trials: Vec<ProbTrial>,
    pub outcomes: Vec<PairOutcome>,
    pub decisions: Vec<RegionDecision>,
    pub separability: Vec<SeparabilityRecord>,
    pub errors: usize,
    pub malformed: usize,
}

pub fn store_files(results_dir: &Path) -> Vec<PathBuf> {
    [TRIALS_FILE, OUTCOMES_FILE, DECISIONS_FILE, SEPARABILITY_FILE].iter().map(|f| results_dir.join(f)).collect()
}

/// Hash over the contents of every store file (absent files hash as empty).
pub fn store_hash(results_dir: &Path) -> String {
    let joined: String = store_files(results_dir).iter().map(|p| crate::util::file_hash(p)).collect();
    crate::util::sha256_hex(joined.as_bytes())
}

pub fn load_results(results_dir: &Path) -> Result<Results> {
    let trials = read_store::<ProbTrial>(&results_dir.join(TRIALS_FILE))?;
    let outcomes = read_store::<PairOutcome>(&results_dir.join(OUTCOMES_FILE))?;
    let decisions = read_store::<RegionDecision>(&results_dir.join(DECISIONS_FILE))?;
    let separability = read_store::<SeparabilityRecord>(&results_dir.join(SEPARABILITY_FILE))?;
    Ok(Results {
        errors: trials.errors.len() + outcomes.errors.len() + decisions.errors.len() + separability.errors.len(),
        malformed: trials.malformed + outcomes.malformed + decisions.malformed + separability.malformed,
        trials: trials.records,
        outcomes: outcomes.records,
        decisions: decisions.records,
        separability: separability.records,
    })
}

fn pooled_row(experiment: &str, key: GroupKey, outcomes: &[(String, bool)], chance: f64, seed: u64) -> Result<EstimateRow> {
    let mut row = EstimateRow::new(experiment, estimate_for(key, outcomes.iter().map(|(_, o)| *o), chance)?);
    if !outcomes.is_empty() {
        let b = stratified_bootstrap(outcomes, BOOTSTRAP_RESAMPLES, seed)?;
        row.boot_low = Some(b.ci_low);
        row.boot_high = Some(b.ci_high);
    }
    Ok(row)
}

/// Prompt-tagged outcomes per model and word type.
type Cells = BTreeMap<(String, Option<WordType>), Vec<(String, bool)>>;

/// Pooled rows (with bootstrap) followed by per-prompt rows.
fn pair_rows(experiment: &str, cells: Cells, seed: u64) -> Result<Vec<EstimateRow>> {
    let mut rows = Vec::new();
    for ((model, word_type), outcomes) in &cells {
        rows.push(pooled_row(experiment, GroupKey::new(model, *word_type), outcomes, 0.25, seed)?);
        let mut by_prompt: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for (p, o) in outcomes {
            by_prompt.entry(p).or_default().push(*o);
        }
        for (prompt, os) in by_prompt {
            let key = GroupKey { prompt: Some(prompt.to_owned()), ..GroupKey::new(model, *word_type) };
            rows.push(EstimateRow::new(experiment, estimate_for(key, os, 0.25)?));
        }
    }
    Ok(rows)
}

/// Keeps decisions whose mirror arrangement is also present.
fn mirror_complete(decisions: &[RegionDecision]) -> (Vec<RegionDecision>, usize) {
    let mut seen: BTreeMap<(&str, &str, &str, &str), BTreeSet<&str>> = BTreeMap::new();
    for d in decisions {
        seen.entry((&d.model_id, &d.prompt_id, &d.pair_id, &d.label_id)).or_default().insert(d.arrangement.as_str());
    }
    let keep: Vec<RegionDecision> = decisions
        .iter()
        .filter(|d| seen[&(d.model_id.as_str(), d.prompt_id.as_str(), d.pair_id.as_str(), d.label_id.as_str())].len() == 2)
        .cloned()
        .collect();
    let dropped = decisions.len() - keep.len();
    (keep, dropped)
}

pub fn analyze(results: &Results, lexicon: &Lexicon, seed: u64) -> Result<Analysis> {
    let mut out = Analysis { errors: results.errors, ..Default::default() };
    if results.malformed > 0 {
        out.warnings.push(format!("{} unreadable store lines skipped", results.malformed));
    }

    let mut cells: Cells = BTreeMap::new();
    for o in &results.outcomes {
        cells.entry((o.model_id.clone(), Some(o.word_type))).or_default().push((o.prompt_id.clone(), o.matched));
    }
    out.estimates.extend(pair_rows(PROB_PAIRS, cells, seed)?);

    let congruence = pair_congruence(&results.decisions, &gen_original_pairs())?;
    let mut cells: Cells = BTreeMap::new();
    for c in &congruence {
        cells.entry((c.model_id.clone(), Some(WordType::Original))).or_default().push((c.prompt_id.clone(), c.congruent));
    }
    out.estimates.extend(pair_rows(GRADCAM_PAIRS, cells, seed)?);

    let mut labels: BTreeMap<(String, WordType, ShapeClass), Vec<(String, bool)>> = BTreeMap::new();
    for d in &results.decisions {
        labels.entry((d.model_id.clone(), d.word_type, d.label_class)).or_default().push((d.prompt_id.clone(), d.correct));
    }
    for ((model, word_type, class), outcomes) in &labels {
        let key = GroupKey { category: Some(*class), ..GroupKey::new(model, Some(*word_type)) };
        out.estimates.push(pooled_row(GRADCAM_LABELS, key, outcomes, 0.5, seed)?);
    }

    let legacy = results.trials.iter().any(|t| !t.pair_id.starts_with("gen-"));
    let stimuli = if legacy { "legacy+generated" } else { "generated-only" };
    let models: BTreeSet<&str> = results.trials.iter().map(|t| t.model_id.as_str()).collect();
    for model in models {
        let own: Vec<&ProbTrial> = results.trials.iter().filter(|t| t.model_id == model).collect();
        let images = own.iter().map(|t| &t.image_id).collect::<BTreeSet<_>>().len();
        let prompts = own.iter().map(|t| &t.prompt_id).collect::<BTreeSet<_>>().len();
        for word_type in WordType::ALL {
            let set = lexicon.get(word_type);
            let version = set.version();
            let trials: Vec<&ProbTrial> =
                own.iter().copied().filter(|t| t.word_type == word_type && t.label_set_version == version).collect();
            if trials.is_empty() {
                continue;
            }
            let unique = trials.iter().map(|t| &t.winner_label).collect::<BTreeSet<_>>().len();
            let (ratio, note) = match uniqueness_ratio(&trials, set.len(), images * prompts) {
                Ok(r) => (Some(r), String::new()),
                Err(e) => (None, e.to_string()),
            };
            out.uniqueness.push(UniquenessRow {
                model: model.to_owned(),
                word_type: word_type.to_string(),
                unique_labels: unique,
                label_set_size: set.len(),
                trials: trials.len(),
                ratio,
                per_image_ratio: per_image_uniqueness(&trials, set.len()).ok(),
                stimuli: stimuli.to_owned(),
                note,
            });
        }
    }

    let (complete, dropped) = mirror_complete(&results.decisions);
    if dropped > 0 {
        out.warnings.push(format!("{dropped} region decisions lack their mirror and are left out of consistency"));
    }
    let pairs = consistency_pairs(&complete)?;
    let models: BTreeSet<&str> = pairs.iter().map(|p| p.model_id.as_str()).collect();
    for model in models {
        let own: Vec<_> = pairs.iter().filter(|p| p.model_id == model).collect();
        let mut push = |word_type: String, r: crate::metrics::Ratio| {
            out.consistency.push(ConsistencyRow {
                model: model.to_owned(),
                word_type,
                consistent: r.count,
                total: r.total,
                ratio: r.ratio,
            })
        };
        push(ALL.into(), consistency_ratio(own.iter().copied()));
        for word_type in WordType::ALL {
            let subset: Vec<_> = own.iter().copied().filter(|p| p.word_type == word_type).collect();
            if !subset.is_empty() {
                push(word_type.to_string(), consistency_ratio(subset));
            }
        }
    }

    out.separability = results
        .separability
        .iter()
        .map(|r| SeparabilityRow {
            model: r.model_id.clone(),
            subject: r.subject.clone(),
            prompt: r.prompt_id.clone().unwrap_or_else(|| ALL.into()),
            points: r.points,
            score: r.score,
        })
        .collect();
    Ok(out)
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

const ESTIMATE_HEADER: [&str; 14] = [
    "experiment",
    "model",
    "word_type",
    "prompt",
    "category",
    "successes",
    "trials",
    "posterior_mean",
    "ci_low",
    "ci_high",
    "chance",
    "significant",
    "boot_low",
    "boot_high",
];
const UNIQUENESS_HEADER: [&str; 9] =
    ["model", "word_type", "unique_labels", "label_set_size", "trials", "ratio", "per_image_ratio", "stimuli", "note"];
const CONSISTENCY_HEADER: [&str; 5] = ["model", "word_type", "consistent", "total", "ratio"];
const SEPARABILITY_HEADER: [&str; 5] = ["model", "subject", "prompt", "points", "score"];

pub fn write_analysis(dir: &Path, a: &Analysis) -> Result<()> {
    write_atomic(&dir.join(ESTIMATES_CSV), &csv_bytes(&a.estimates, &ESTIMATE_HEADER)?)?;
    write_atomic(&dir.join(UNIQUENESS_CSV), &csv_bytes(&a.uniqueness, &UNIQUENESS_HEADER)?)?;
    write_atomic(&dir.join(CONSISTENCY_CSV), &csv_bytes(&a.consistency, &CONSISTENCY_HEADER)?)?;
    write_atomic(&dir.join(SEPARABILITY_CSV), &csv_bytes(&a.separability, &SEPARABILITY_HEADER)?)?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Reads the CSVs written by [`write_analysis`]; every missing file is named.
pub fn read_analysis(dir: &Path) -> Result<Analysis> {
    let missing: Vec<String> =
        ANALYSIS_FILES.iter().map(|f| dir.join(f)).filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(crate::Error::MissingInputs(missing));
    }
    Ok(Analysis {
        estimates: read_csv(&dir.join(ESTIMATES_CSV))?,
        uniqueness: read_csv(&dir.join(UNIQUENESS_CSV))?,
        consistency: read_csv(&dir.join(CONSISTENCY_CSV))?,
        separability: read_csv(&dir.join(SEPARABILITY_CSV))?,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_results_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let a = analyze(&Results::default(), &Lexicon::default_sets(), 0).unwrap();
        write_analysis(dir.path(), &a).unwrap();
        let back = read_analysis(dir.path()).unwrap();
        assert!(back.estimates.is_empty() && back.uniqueness.is_empty());
        let header = std::fs::read_to_string(dir.path().join(ESTIMATES_CSV)).unwrap();
        assert!(header.starts_with("experiment,model,word_type"));
    }

    #[test]
    fn missing_csvs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        match read_analysis(dir.path()) {
            Err(crate::Error::MissingInputs(m)) => assert_eq!(m.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Analysis::default();
        let mut cells = BTreeMap::new();
        cells.insert(("m".to_string(), Some(WordType::Adjective)), vec![("p01".to_string(), true), ("p02".to_string(), false)]);
        a.estimates = pair_rows(PROB_PAIRS, cells, 1).unwrap();
        a.consistency.push(ConsistencyRow { model: "m".into(), word_type: ALL.into(), consistent: 0, total: 0, ratio: None });
        write_analysis(dir.path(), &a).unwrap();
        let back = read_analysis(dir.path()).unwrap();
        assert_eq!(back.estimates, a.estimates);
        assert_eq!(back.consistency, a.consistency);
        assert_eq!(back.estimates.len(), 3);
        assert!(back.estimates[0].boot_low.is_some() && back.estimates[1].boot_low.is_none());
    }
}
