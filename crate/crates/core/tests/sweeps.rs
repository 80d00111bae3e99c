//! Full-size sweeps on weight-free models: record counts, partial failures
//! and recovery from interrupted runs.

use std::sync::atomic::{AtomicBool, Ordering};

use bkprobe::cli_report::analysis::{analyze, load_results};
use bkprobe::lexicon::{default_prompts, LabelSet, Lexicon, WordType};
use bkprobe::model_adapter::{load_model, GradientCapture, ImageCapture, ModelKind, ToyModel, VisionLanguageModel, WeightSource};
use bkprobe::prob_probe::{run_experiment1, ProbOptions, ProbStores, TRIALS_FILE};
use bkprobe::saliency_probe::{open_decisions, run_experiment2, SaliencyOptions};
use bkprobe::shapes::{compose_pairs, generate_pairs, GenerationParams, ShapePair};
use bkprobe::{Error, Result};
use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2};

fn bank(pairs: usize) -> Vec<ShapePair> {
    generate_pairs(&GenerationParams { pairs, resolution: 40, ..Default::default() }).unwrap()
}

fn all_sets(lexicon: &Lexicon) -> Vec<&LabelSet> {
    WordType::ALL.iter().map(|w| lexicon.get(*w)).collect()
}

#[test]
fn two_models_ten_prompts_seventeen_pairs_four_word_types() {
    let dir = tempfile::tempdir().unwrap();
    let stores = ProbStores::open(dir.path()).unwrap();
    let lexicon = Lexicon::default_sets();
    let prompts = default_prompts();
    assert_eq!(prompts.len(), 10);
    let pairs = bank(17);
    for kind in [ModelKind::Toy, ModelKind::TinyResnet] {
        let m = load_model(kind, &WeightSource::from_env(), 0).unwrap();
        let s = run_experiment1(m.as_ref(), &prompts, &all_sets(&lexicon), &pairs, &stores, ProbOptions::default()).unwrap();
        assert_eq!((s.computed, s.failed, s.outcomes), (10 * 4 * 34, 0, 10 * 4 * 17));
    }
    let outcomes = stores.outcomes.contents().unwrap().records;
    assert_eq!(outcomes.len(), 1360);

    let analysis = analyze(&load_results(dir.path()).unwrap(), &lexicon, 0).unwrap();
    let unique: Vec<_> = analysis.uniqueness.iter().filter(|r| r.ratio.is_some()).collect();
    assert_eq!(unique.len(), 8);
    assert!(unique.iter().all(|r| r.stimuli == "generated-only" && r.trials == 340));
}

/// Toy model that fails on one image, and on every capture, until `healthy` is set.
struct Flaky {
    inner: ToyModel,
    broken_image: RgbImage,
    healthy: AtomicBool,
}

impl VisionLanguageModel for Flaky {
    fn model_id(&self) -> &str {
        "flaky"
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn target_layer_id(&self) -> String {
        self.inner.target_layer_id()
    }
    fn logit_scale(&self) -> f64 {
        self.inner.logit_scale()
    }
    fn embed_text(&self, prompts: &[String]) -> Result<Array2<f32>> {
        self.inner.embed_text(prompts)
    }
    fn embed_image(&self, images: &[RgbImage]) -> Result<Array2<f32>> {
        if !self.healthy.load(Ordering::SeqCst) && images.contains(&self.broken_image) {
            return Err(Error::Invalid("simulated failure".into()));
        }
        self.inner.embed_image(images)
    }
    fn capture(&self, image: &RgbImage) -> Result<ImageCapture> {
        if !self.healthy.load(Ordering::SeqCst) {
            return Err(Error::Invalid("simulated failure".into()));
        }
        self.inner.capture(image)
    }
    fn gradients(&self, capture: &ImageCapture, text_embeddings: ArrayView2<f32>) -> Result<Vec<GradientCapture>> {
        self.inner.gradients(capture, text_embeddings)
    }
    fn rescore(&self, capture: &ImageCapture, text_embedding: ArrayView1<f32>, activations: &Array3<f32>) -> Result<f64> {
        self.inner.rescore(capture, text_embedding, activations)
    }
}

#[test]
fn failed_trials_are_recorded_and_retried() {
    let dir = tempfile::tempdir().unwrap();
    let lexicon = Lexicon::default_sets();
    let sets = [lexicon.get(WordType::Original)];
    let prompts = &default_prompts()[..2];
    let pairs = bank(3);
    let model = Flaky { inner: ToyModel::new(0), broken_image: pairs[1].jagged_image.clone(), healthy: AtomicBool::new(false) };
    let failing = 1;

    let stores = ProbStores::open(dir.path()).unwrap();
    let s = run_experiment1(&model, prompts, &sets, &pairs, &stores, ProbOptions::default()).unwrap();
    assert_eq!(s.failed, failing * 2);
    assert_eq!(s.computed + s.failed, 12);
    assert_eq!(stores.trials.contents().unwrap().errors.len(), failing * 2);

    let decisions = open_decisions(dir.path()).unwrap();
    let composites = compose_pairs(&pairs);
    let s = run_experiment2(&model, prompts, &sets, &composites, &decisions, &SaliencyOptions::default()).unwrap();
    assert_eq!((s.computed, s.failed), (0, 2 * composites.len() * 4));

    model.healthy.store(true, Ordering::SeqCst);
    let s = run_experiment1(&model, prompts, &sets, &pairs, &stores, ProbOptions::default()).unwrap();
    assert_eq!((s.computed, s.failed, s.skipped), (failing * 2, 0, 12 - failing * 2));
    assert!(stores.trials.contents().unwrap().errors.is_empty());
    assert_eq!(stores.outcomes.contents().unwrap().records.len(), 6);
    let s = run_experiment2(&model, prompts, &sets, &composites, &decisions, &SaliencyOptions::default()).unwrap();
    assert_eq!((s.computed, s.failed), (2 * composites.len() * 4, 0));
}

#[test]
fn interrupted_store_resumes_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let lexicon = Lexicon::default_sets();
    let sets = [lexicon.get(WordType::Original), lexicon.get(WordType::Adjective)];
    let prompts = &default_prompts()[..3];
    let pairs = bank(2);
    let toy = ToyModel::new(4);
    {
        let stores = ProbStores::open(dir.path()).unwrap();
        run_experiment1(&toy, prompts, &sets, &pairs, &stores, ProbOptions::default()).unwrap();
    }
    let path = dir.path().join(TRIALS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // keep 10 full lines and half of the next one, as if killed mid-write
    let cut = lines[..10].join("\n") + "\n" + &lines[10][..lines[10].len() / 2];
    std::fs::write(&path, cut).unwrap();

    let stores = ProbStores::open(dir.path()).unwrap();
    let s = run_experiment1(&toy, prompts, &sets, &pairs, &stores, ProbOptions::default()).unwrap();
    assert_eq!((s.skipped, s.computed), (10, lines.len() - 10));
    let contents = stores.trials.contents().unwrap();
    assert_eq!(contents.records.len(), lines.len());
    assert_eq!(contents.malformed, 1);
}
