//! Generates a small bank of curved/jagged minimal pairs, writes it to disk
//! and builds the left/right composites used by the saliency probe.
//!
//! ```text
//! cargo run --example stimuli -- [out_dir]
//! ```

use bkprobe::shapes::{compose_pairs, generate_pairs, load_bank, write_bank, GenerationParams};
use bkprobe::util::write_png;

fn main() -> bkprobe::Result<()> {
    let out =
        std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bkprobe-stimuli"));
    let params = GenerationParams { seed_base: 100, pairs: 5, resolution: 224, ..Default::default() };
    let pairs = generate_pairs(&params)?;
    let entries = write_bank(&out, &pairs, true)?;
    for e in &entries {
        println!("{}  {}  n={:?}", e.pair_id, e.source, e.n);
    }

    // reloading gives the same pixels
    let reloaded = load_bank(&out)?;
    assert!(reloaded.iter().zip(&pairs).all(|(a, b)| a.curved_image == b.curved_image));

    let composites = compose_pairs(&pairs);
    let curved_left = composites.iter().filter(|c| c.primary && c.left_class == bkprobe::lexicon::ShapeClass::Round).count();
    println!("{} composites, curved on the left in {curved_left} of {} primaries", composites.len(), pairs.len());
    write_png(&out.join("composite_example.png"), &composites[0].image)?;
    println!("wrote {}", out.display());
    Ok(())
}
