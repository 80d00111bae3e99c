//! Builds the four label vocabularies and shows how prompts are rendered.
//!
//! ```text
//! cargo run --example label_sets
//! ```

use std::collections::BTreeMap;

use bkprobe::lexicon::{default_prompts, gen_nielsen_syllables, Lexicon, ShapeClass, WordType};

fn main() {
    let lexicon = Lexicon::default_sets();
    for wt in WordType::ALL {
        let set = lexicon.get(wt);
        let round = set.labels.iter().filter(|l| l.shape_class == ShapeClass::Round).count();
        let sample: Vec<&str> = set.labels.iter().take(4).map(|l| l.text.as_str()).collect();
        println!(
            "{wt:<10} {:>4} labels ({round} round / {} sharp)  version {}  e.g. {}",
            set.len(),
            set.len() - round,
            set.version(),
            sample.join(", ")
        );
    }

    let mut per_category = BTreeMap::new();
    for s in gen_nielsen_syllables() {
        *per_category.entry(format!("{:?}", s.category.expect("nielsen syllables have a category"))).or_insert(0) += 1;
    }
    println!("syllables per category: {per_category:?}");

    let prompt = &default_prompts()[0];
    let label = &lexicon.nielsen.labels[0];
    println!("{} -> {:?}", prompt.template, prompt.render(label));
}
