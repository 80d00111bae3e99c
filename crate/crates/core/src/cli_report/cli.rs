use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::commands::{self, CommandReport, StimuliOptions};
use super::config::RunConfig;
use crate::error::Result;
use crate::lexicon::WordType;
use crate::model_adapter::ModelKind;
use crate::prob_probe::ProbOptions;

#[derive(Debug, Parser)]
#[command(name = "bkprobe", version, about = "Bouba-kiki probes for CLIP-style models")]
pub struct Cli {
    /// Print a JSON status object instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the stimulus bank and its manifest.
    GenerateStimuli {
        /// Stimulus directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed_base: Option<u64>,
        #[arg(long)]
        resolution: Option<u32>,
        #[arg(long)]
        legacy_manifest: Option<PathBuf>,
        /// Fail when legacy images are not available.
        #[arg(long)]
        require_legacy: bool,
        /// Also write vector outlines.
        #[arg(long)]
        svg: bool,
    },
    /// Label vocabularies.
    Labels {
        #[command(subcommand)]
        action: LabelsCommand,
    },
    /// Label-probability probe on single images.
    RunProbProbe {
        #[command(flatten)]
        run: RunArgs,
        /// Store the full probability vector of every trial.
        #[arg(long)]
        keep_probs: bool,
    },
    /// Grad-CAM region probe on side-by-side composites.
    RunGradcamProbe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "none", value_parser = ["none", "overlays", "full"])]
        save_maps: String,
    },
    /// Aggregate stored results into CSV tables.
    Analyze {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Figures and a markdown summary from the CSV tables.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        human_baseline: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LabelsCommand {
    /// Write prompts and label sets as JSON.
    Export {
        #[arg(long, default_value = "labels.json")]
        out: PathBuf,
        #[arg(long)]
        adjectives: Option<PathBuf>,
        #[arg(long)]
        alper_classes: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// resnet50, vit, tiny-resnet, tiny-vit, toy, or all; comma separated.
    #[arg(long)]
    pub model: Option<String>,
    /// original, adjective, nielsen, alper, or all; comma separated.
    #[arg(long)]
    pub word_type: Option<String>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub stimuli: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    /// Never download weights.
    #[arg(long)]
    pub offline: bool,
}

pub fn parse_models(s: &str) -> Result<Vec<ModelKind>> {
    if s == "all" {
        return Ok(ModelKind::PRETRAINED.to_vec());
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

pub fn parse_word_types(s: &str) -> Result<Vec<WordType>> {
    if s == "all" {
        return Ok(WordType::ALL.to_vec());
    }
    s.split(',').map(|w| w.trim().parse()).collect()
}

impl RunArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.model {
            cfg.models = parse_models(m)?;
        }
        if let Some(w) = &self.word_type {
            cfg.word_types = parse_word_types(w)?;
        }
        if let Some(p) = &self.prompts {
            cfg.prompt_file = Some(p.clone());
        }
        if let Some(s) = &self.stimuli {
            cfg.stimulus_dir = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed_base {
            cfg.seed_base = s;
        }
        cfg.offline |= self.offline;
        Ok(())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenerateStimuli { .. } => "generate-stimuli",
        Command::Labels { .. } => "labels export",
        Command::RunProbProbe { .. } => "run-prob-probe",
        Command::RunGradcamProbe { .. } => "run-gradcam-probe",
        Command::Analyze { .. } => "analyze",
        Command::Report { .. } => "report",
    }
}

pub fn execute(cli: &Cli) -> Result<CommandReport> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::GenerateStimuli { out, pairs, seed_base, resolution, legacy_manifest, require_legacy, svg } => {
            if let Some(o) = out {
                cfg.stimulus_dir = o.clone();
            }
            if let Some(p) = pairs {
                cfg.pairs = *p;
            }
            if let Some(s) = seed_base {
                cfg.seed_base = *s;
            }
            if let Some(r) = resolution {
                cfg.resolution = *r;
            }
            if legacy_manifest.is_some() {
                cfg.legacy_manifest = legacy_manifest.clone();
            }
            commands::generate_stimuli(&cfg, StimuliOptions { svg: *svg, require_legacy: *require_legacy })
        }
        Command::Labels { action: LabelsCommand::Export { out, adjectives, alper_classes } } => {
            if adjectives.is_some() {
                cfg.adjectives_file = adjectives.clone();
            }
            if alper_classes.is_some() {
                cfg.alper_classes_file = alper_classes.clone();
            }
            commands::export_labels(&cfg, out)
        }
        Command::RunProbProbe { run, keep_probs } => {
            run.apply(&mut cfg)?;
            commands::run_prob_probe(&cfg, ProbOptions { keep_probs: *keep_probs })
        }
        Command::RunGradcamProbe { run, save_maps } => {
            run.apply(&mut cfg)?;
            commands::run_gradcam_probe(&cfg, save_maps.parse()?)
        }
        Command::Analyze { out } => {
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            commands::run_analyze(&cfg)
        }
        Command::Report { out, human_baseline } => {
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            if human_baseline.is_some() {
                cfg.human_baseline = *human_baseline;
            }
            commands::run_report(&cfg)
        }
    }
}

/// Parses arguments, runs the command, prints its status and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let report = execute(&cli).unwrap_or_else(|e| CommandReport::failed(command_name(&cli.command), &e));
    if cli.json {
        println!("{}", serde_json::to_string(&report).expect("serializable report"));
    } else if report.exit_code() == 2 {
        eprintln!("error: {}: {}", report.command, report.message);
    } else {
        println!("{}: {}", report.command, report.message);
    }
    report.exit_code()
}
