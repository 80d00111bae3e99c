//! Label-probability probe on the toy model: every image against every
//! label of a set, scored with the conjunction rule. Run it twice with the
//! same directory to see the sweep resume.
//!
//! ```text
//! cargo run --release --example prob_probe -- [results_dir]
//! ```

use bkprobe::lexicon::{default_prompts, Lexicon, WordType};
use bkprobe::metrics::{estimate_for, GroupKey};
use bkprobe::model_adapter::{load_model, ModelKind, WeightSource};
use bkprobe::prob_probe::{run_experiment1, ProbOptions, ProbStores};
use bkprobe::shapes::{generate_pairs, GenerationParams};

fn main() -> bkprobe::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bkprobe-prob"));
    let model = load_model(ModelKind::Toy, &WeightSource::from_env(), 0)?;
    let lexicon = Lexicon::default_sets();
    let sets = [lexicon.get(WordType::Original), lexicon.get(WordType::Adjective)];
    let prompts = &default_prompts()[..3];
    let pairs = generate_pairs(&GenerationParams { pairs: 6, resolution: 96, ..Default::default() })?;

    let stores = ProbStores::open(&dir)?;
    let summary = run_experiment1(model.as_ref(), prompts, &sets, &pairs, &stores, ProbOptions { keep_probs: true })?;
    println!("{summary:?}");

    let trials = stores.trials.contents()?.records;
    let t = &trials[0];
    println!(
        "{} on {}: winner {:?} p={:.3} of {} labels",
        t.prompt_id,
        t.image_id,
        t.winner_label,
        t.winner_prob,
        t.probabilities().map_or(0, |p| p.len())
    );

    let outcomes = stores.outcomes.contents()?.records;
    for wt in [WordType::Original, WordType::Adjective] {
        let hits = outcomes.iter().filter(|o| o.word_type == wt).map(|o| o.matched);
        let e = estimate_for(GroupKey::new(model.model_id(), Some(wt)), hits, 0.25)?;
        println!(
            "{wt:<10} {}/{} both correct, mean {:.3} [{:.3}, {:.3}]",
            e.successes, e.trials, e.posterior_mean, e.ci_low, e.ci_high
        );
    }
    Ok(())
}
