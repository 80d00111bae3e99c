//! Interval estimates used by the analysis: beta-binomial posteriors against
//! chance, the prompt-stratified bootstrap, and consistency ratios.
//!
//! ```text
//! cargo run --example statistics
//! ```

use bkprobe::lexicon::WordType;
use bkprobe::metrics::{consistency_ratio, proportion_estimate, stratified_bootstrap};
use bkprobe::saliency_probe::ConsistencyPair;

fn main() -> bkprobe::Result<()> {
    // 17 pairs x 10 prompts
    for hits in [30, 43, 60, 136] {
        let e = proportion_estimate(hits, 170, 0.25)?;
        println!(
            "{hits:>3}/170  mean {:.3}  95% [{:.3}, {:.3}]  above chance: {}",
            e.posterior_mean, e.ci_low, e.ci_high, e.significant
        );
    }

    let outcomes: Vec<(String, bool)> = (0..170).map(|i| (format!("p{}", i % 10), i % 3 == 0)).collect();
    let b = stratified_bootstrap(&outcomes, 2000, 1)?;
    println!("bootstrap mean {:.3} [{:.3}, {:.3}] over {} resamples", b.mean, b.ci_low, b.ci_high, b.resamples);

    let pairs: Vec<ConsistencyPair> = (0..20)
        .map(|i| ConsistencyPair {
            model_id: "m".into(),
            prompt_id: "p".into(),
            word_type: WordType::Original,
            pair_id: format!("gen-{i:06}"),
            label_id: "original:bouba".into(),
            consistent: i % 4 != 0,
            tie: i == 19,
        })
        .collect();
    let r = consistency_ratio(&pairs);
    println!("consistency {}/{} = {:.3} (ties excluded)", r.count, r.total, r.ratio.unwrap_or(f64::NAN));
    Ok(())
}
