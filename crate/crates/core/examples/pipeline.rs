//! The whole harness through the library entry points the CLI uses:
//! stimuli, both probes, analysis and the report, on weight-free models.
//!
//! ```text
//! cargo run --release --example pipeline -- [out_dir]
//! ```

use bkprobe::cli_report::commands::{
    generate_stimuli, run_analyze, run_gradcam_probe, run_prob_probe, run_report, StimuliOptions,
};
use bkprobe::cli_report::RunConfig;
use bkprobe::lexicon::WordType;
use bkprobe::model_adapter::ModelKind;
use bkprobe::prob_probe::ProbOptions;
use bkprobe::saliency_probe::SaveMaps;

fn main() -> bkprobe::Result<()> {
    let out =
        std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bkprobe-pipeline"));
    let cfg = RunConfig {
        models: vec![ModelKind::Toy, ModelKind::TinyResnet],
        word_types: vec![WordType::Original, WordType::Adjective],
        stimulus_dir: out.join("stimuli"),
        out_dir: out.clone(),
        pairs: 4,
        resolution: 96,
        human_baseline: Some(0.9),
        ..Default::default()
    };
    let reports = [
        generate_stimuli(&cfg, StimuliOptions::default())?,
        run_prob_probe(&cfg, ProbOptions::default())?,
        run_gradcam_probe(&cfg, SaveMaps::None)?,
        run_analyze(&cfg)?,
        run_report(&cfg)?,
    ];
    for r in &reports {
        println!("{:<18} {:?}  {}", r.command, r.status, r.message);
    }
    println!(
        "{}",
        std::fs::read_to_string(cfg.report_dir().join(bkprobe::cli_report::report::SUMMARY_FILE))
            .map_err(|e| bkprobe::Error::Io { path: out, source: e })?
    );
    Ok(())
}
