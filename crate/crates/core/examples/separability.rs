//! Cross-validated linear separability of round vs sharp, first on
//! synthetic clouds and then on embeddings of a randomly initialised tower.
//!
//! ```text
//! cargo run --release --example separability
//! ```

use bkprobe::lexicon::{default_prompts, Lexicon, ShapeClass};
use bkprobe::metrics::separability_score;
use bkprobe::model_adapter::{load_model, ModelKind, WeightSource};
use bkprobe::shapes::{generate_pairs, GenerationParams};
use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> bkprobe::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let classes: Vec<usize> = (0..40).map(|i| i % 2).collect();
    for shift in [0.0f32, 0.5, 3.0] {
        let x = Array2::from_shape_fn((40, 16), |(i, j)| {
            noise.sample(&mut rng) as f32 + if j == 0 && classes[i] == 1 { shift } else { 0.0 }
        });
        println!("synthetic shift {shift:>3}: {:.3}", separability_score(x.view(), &classes)?);
    }

    let model = load_model(ModelKind::TinyVit, &WeightSource::from_env(), 0)?;
    let lexicon = Lexicon::default_sets();
    let prompt = &default_prompts()[0];
    let texts: Vec<String> = lexicon.adjective.labels.iter().map(|l| prompt.render(l)).collect();
    let label_classes: Vec<usize> =
        lexicon.adjective.labels.iter().map(|l| (l.shape_class == ShapeClass::Sharp) as usize).collect();
    let e = model.embed_text(&texts)?;
    println!("{} adjective prompts: {:.3}", model.model_id(), separability_score(e.view(), &label_classes)?);

    let pairs = generate_pairs(&GenerationParams { pairs: 8, resolution: 64, ..Default::default() })?;
    let images: Vec<_> = pairs.iter().flat_map(|p| [p.curved_image.clone(), p.jagged_image.clone()]).collect();
    let image_classes: Vec<usize> = (0..images.len()).map(|i| i % 2).collect();
    let e = model.embed_image(&images)?;
    println!("{} curved vs jagged images: {:.3}", model.model_id(), separability_score(e.view(), &image_classes)?);
    Ok(())
}
