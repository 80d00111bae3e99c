use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::analysis::{analyze, load_results, read_analysis, store_hash, write_analysis};
use super::config::RunConfig;
use super::report::{write_report, Provenance};
use crate::error::{Error, Result};
use crate::lexicon::{LabelSet, Lexicon};
use crate::model_adapter::{load_model, VisionLanguageModel};
use crate::prob_probe::{run_experiment1, run_separability, ProbOptions, ProbStores, SEPARABILITY_FILE};
use crate::saliency_probe::{open_decisions, run_experiment2, SaliencyOptions, SaveMaps};
use crate::shapes::{compose_pairs, generate_pairs, load_bank, load_legacy_pairs, write_bank, MANIFEST_FILE};
use crate::store::{JsonlStore, SweepSummary};
use crate::util::{file_hash, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Completed, but some trials failed and were recorded as errors.
    Partial,
    Failed,
}

/// Outcome of one command, printed as text or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandReport {
    pub command: String,
    pub status: Status,
    pub message: String,
    pub details: serde_json::Value,
}

impl CommandReport {
    fn ok(command: &str, message: String, details: serde_json::Value) -> Self {
        CommandReport { command: command.into(), status: Status::Ok, message, details }
    }

    pub fn failed(command: &str, error: &Error) -> Self {
        CommandReport {
            command: command.into(),
            status: Status::Failed,
            message: error.to_string(),
            details: json!({ "environment": error.is_environment() }),
        }
    }

    /// 0 success, 1 partial trial failures, 2 anything that stopped the command.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => 0,
            Status::Partial => 1,
            Status::Failed => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StimuliOptions {
    pub svg: bool,
    pub require_legacy: bool,
}

pub fn generate_stimuli(cfg: &RunConfig, opts: StimuliOptions) -> Result<CommandReport> {
    cfg.validate()?;
    let mut pairs = generate_pairs(&cfg.generation())?;
    let mut legacy = 0;
    match &cfg.legacy_manifest {
        Some(m) if m.exists() => {
            let found = load_legacy_pairs(m, cfg.resolution)?;
            legacy = found.len();
            pairs.extend(found);
        }
        Some(m) if opts.require_legacy => return Err(Error::MissingInputs(vec![m.display().to_string()])),
        None if opts.require_legacy => return Err(Error::MissingInputs(vec!["legacy manifest (--legacy-manifest)".into()])),
        _ => {}
    }
    let entries = write_bank(&cfg.stimulus_dir, &pairs, opts.svg)?;
    let manifest = cfg.stimulus_dir.join(MANIFEST_FILE);
    Ok(CommandReport::ok(
        "generate-stimuli",
        format!("{} pairs ({legacy} legacy) written to {}", entries.len(), cfg.stimulus_dir.display()),
        json!({
            "pairs": entries.len(),
            "legacy_pairs": legacy,
            "manifest": manifest,
            "manifest_hash": file_hash(&manifest),
        }),
    ))
}

/// Writes the prompt table and every label set as JSON.
pub fn export_labels(cfg: &RunConfig, out: &Path) -> Result<CommandReport> {
    let lexicon = cfg.lexicon()?;
    let prompts = cfg.prompts()?;
    let sets: Vec<serde_json::Value> = crate::lexicon::WordType::ALL
        .iter()
        .map(|w| {
            let s = lexicon.get(*w);
            json!({ "word_type": w, "version": s.version(), "labels": s.labels })
        })
        .collect();
    write_json(out, &json!({ "prompts": prompts, "label_sets": sets }))?;
    let counts: serde_json::Map<String, serde_json::Value> =
        crate::lexicon::WordType::ALL.iter().map(|w| (w.to_string(), json!(lexicon.get(*w).len()))).collect();
    Ok(CommandReport::ok(
        "labels export",
        format!("labels written to {}", out.display()),
        json!({ "counts": counts, "path": out }),
    ))
}

fn selected_sets<'a>(cfg: &RunConfig, lexicon: &'a Lexicon) -> Vec<&'a LabelSet> {
    cfg.word_types.iter().map(|w| lexicon.get(*w)).collect()
}

/// Loads every configured model before any work starts.
fn load_models(cfg: &RunConfig) -> Result<Vec<Box<dyn VisionLanguageModel>>> {
    let weights = cfg.weight_source();
    cfg.models.iter().map(|k| load_model(*k, &weights, cfg.seed_base)).collect()
}

fn sweep_report(command: &str, per_model: Vec<(String, SweepSummary)>, extra: serde_json::Value) -> CommandReport {
    let total = per_model.iter().fold(SweepSummary::default(), |a, (_, s)| a.merge(*s));
    let status = if total.failed > 0 { Status::Partial } else { Status::Ok };
    let models: serde_json::Map<String, serde_json::Value> =
        per_model.into_iter().map(|(m, s)| (m, serde_json::to_value(s).expect("plain struct"))).collect();
    CommandReport {
        command: command.into(),
        status,
        message: format!("{} trials computed, {} already stored, {} failed", total.computed, total.skipped, total.failed),
        details: json!({ "models": models, "total": total, "extra": extra }),
    }
}

pub fn run_prob_probe(cfg: &RunConfig, opts: ProbOptions) -> Result<CommandReport> {
    cfg.validate()?;
    let prompts = cfg.prompts()?;
    let lexicon = cfg.lexicon()?;
    let pairs = load_bank(&cfg.stimulus_dir)?;
    let models = load_models(cfg)?;
    cfg.persist()?;
    let results = cfg.results_dir();
    let stores = ProbStores::open(&results)?;
    let separability = JsonlStore::open(&results.join(SEPARABILITY_FILE))?;
    let sets = selected_sets(cfg, &lexicon);
    let mut per_model = Vec::new();
    for m in &models {
        let mut s = run_experiment1(m.as_ref(), &prompts, &sets, &pairs, &stores, opts)?;
        let sep = run_separability(m.as_ref(), &prompts[0], &sets, &pairs, &separability)?;
        s.failed += sep.failed;
        per_model.push((m.model_id().to_owned(), s));
    }
    Ok(sweep_report("run-prob-probe", per_model, json!({ "results": results })))
}

pub fn run_gradcam_probe(cfg: &RunConfig, save_maps: SaveMaps) -> Result<CommandReport> {
    cfg.validate()?;
    let prompts = cfg.prompts()?;
    let lexicon = cfg.lexicon()?;
    let composites = compose_pairs(&load_bank(&cfg.stimulus_dir)?);
    let models = load_models(cfg)?;
    cfg.persist()?;
    let results = cfg.results_dir();
    let store = open_decisions(&results)?;
    let sets = selected_sets(cfg, &lexicon);
    let options = SaliencyOptions { save_maps, maps_dir: cfg.maps_dir() };
    let mut per_model = Vec::new();
    for m in &models {
        per_model.push((m.model_id().to_owned(), run_experiment2(m.as_ref(), &prompts, &sets, &composites, &store, &options)?));
    }
    Ok(sweep_report("run-gradcam-probe", per_model, json!({ "results": results, "composites": composites.len() })))
}

pub fn run_analyze(cfg: &RunConfig) -> Result<CommandReport> {
    let results = load_results(&cfg.results_dir())?;
    let analysis = analyze(&results, &cfg.lexicon()?, cfg.seed_base)?;
    write_analysis(&cfg.analysis_dir(), &analysis)?;
    Ok(CommandReport::ok(
        "analyze",
        format!(
            "{} estimates, {} uniqueness, {} consistency, {} separability rows written to {}",
            analysis.estimates.len(),
            analysis.uniqueness.len(),
            analysis.consistency.len(),
            analysis.separability.len(),
            cfg.analysis_dir().display()
        ),
        json!({ "errors_in_store": analysis.errors, "warnings": analysis.warnings }),
    ))
}

pub fn run_report(cfg: &RunConfig) -> Result<CommandReport> {
    cfg.validate()?;
    let analysis = read_analysis(&cfg.analysis_dir())?;
    let provenance = Provenance { config_hash: cfg.hash(), store_hash: store_hash(&cfg.results_dir()) };
    let files = write_report(&cfg.report_dir(), &analysis, &provenance, cfg.human_baseline)?;
    Ok(CommandReport::ok(
        "report",
        format!("{} files written to {}", files.len(), cfg.report_dir().display()),
        json!({ "files": files, "provenance": provenance }),
    ))
}
