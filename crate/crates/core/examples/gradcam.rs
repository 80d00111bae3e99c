//! Saliency of one prompt on a composite with a randomly initialised ResNet
//! tower, the region decision it implies, and an overlay image. Pass
//! `tiny-vit` to use the attention path instead.
//!
//! ```text
//! cargo run --release --example gradcam -- [tiny-resnet|tiny-vit] [out_dir]
//! ```

use bkprobe::lexicon::{default_prompts, Lexicon};
use bkprobe::model_adapter::{load_model, ModelKind, WeightSource};
use bkprobe::saliency_probe::{compute_saliency, decide_region, save_map, SaveMaps};
use bkprobe::shapes::{compose_pairs, generate_pairs, GenerationParams};

fn main() -> bkprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ModelKind = args.next().as_deref().unwrap_or("tiny-resnet").parse()?;
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bkprobe-gradcam"));
    let model = load_model(kind, &WeightSource::from_env(), 7)?;
    println!("{} target layer: {}", model.model_id(), model.target_layer_id());

    let pairs = generate_pairs(&GenerationParams { pairs: 1, resolution: 112, ..Default::default() })?;
    let composites = compose_pairs(&pairs);
    let lexicon = Lexicon::default_sets();
    let prompt = &default_prompts()[0];

    for composite in &composites {
        for label in &lexicon.original.labels {
            let map = compute_saliency(model.as_ref(), composite, prompt, label)?;
            let d = decide_region(&map, composite, label, &lexicon.original.version())?;
            println!(
                "{:<22} {:<6} coarse {:?}  left {:>9.4} right {:>9.4}  -> {:?} ({}){}",
                composite.composite_id,
                label.text,
                map.coarse.dim(),
                d.left_sum,
                d.right_sum,
                d.chosen_side,
                d.chosen_class,
                if d.tie_flag { " tie" } else { "" }
            );
            save_map(&out, &map, composite, SaveMaps::Full)?;
        }
    }
    println!("maps under {}", out.display());
    Ok(())
}
