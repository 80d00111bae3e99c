//! Checkpoint-agnostic access to joint-space embeddings, label probabilities
//! and target-layer gradients.

use std::any::Any;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bkprobe_clip::preprocess::preprocess;
use bkprobe_clip::{ClipConfig, ClipModel, Real, VisualCapture};
use image::RgbImage;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Directory holding `{model_id}/open_clip_model.safetensors`.
pub const WEIGHTS_DIR_ENV: &str = "BKPROBE_WEIGHTS_DIR";
/// Any non-empty value other than `0` disables downloads.
pub const OFFLINE_ENV: &str = "BKPROBE_OFFLINE";
/// Alternative Hugging Face endpoint for downloads.
pub const HUB_ENDPOINT_ENV: &str = "BKPROBE_HUB_ENDPOINT";
pub const WEIGHTS_FILE: &str = "open_clip_model.safetensors";

/// What the gradients are taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureKind {
    /// `(channels, h, w)` feature map.
    Convolutional,
    /// `(heads, tokens, tokens)` attention probabilities; token 0 is the
    /// class token, the rest a `grid x grid` patch grid.
    Attention { grid: usize },
}

/// Score of one prompt against one image, with target-layer activations and
/// the gradient of the score with respect to them.
#[derive(Debug, Clone)]
pub struct GradientCapture {
    pub score: f64,
    pub activations: Array3<f32>,
    pub gradients: Array3<f32>,
    pub kind: FeatureKind,
}

/// Target-layer state of one image, reusable across prompts.
pub struct ImageCapture {
    pub activations: Array3<f32>,
    pub kind: FeatureKind,
    inner: Box<dyn Any + Send + Sync>,
}

impl fmt::Debug for ImageCapture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageCapture").field("shape", &self.activations.shape()).field("kind", &self.kind).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabels {
    pub label_ids: Vec<String>,
    pub probabilities: Vec<f64>,
}

pub trait VisionLanguageModel: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    /// State-dict name of the saliency target layer.
    fn target_layer_id(&self) -> String;
    /// Softmax temperature applied to cosine similarities.
    fn logit_scale(&self) -> f64;

    /// Unit-norm text embeddings, one row per prompt.
    fn embed_text(&self, prompts: &[String]) -> Result<Array2<f32>>;

    /// Unit-norm image embeddings, one row per image.
    fn embed_image(&self, images: &[RgbImage]) -> Result<Array2<f32>>;

    fn capture(&self, image: &RgbImage) -> Result<ImageCapture>;

    /// Cosine score and target-layer gradient for each text embedding row.
    fn gradients(&self, capture: &ImageCapture, text_embeddings: ArrayView2<f32>) -> Result<Vec<GradientCapture>>;

    /// Cosine score with the target-layer tensor replaced by `activations`.
    fn rescore(&self, capture: &ImageCapture, text_embedding: ArrayView1<f32>, activations: &Array3<f32>) -> Result<f64>;

    fn handle(&self) -> ModelHandle {
        ModelHandle {
            model_id: self.model_id().to_owned(),
            embed_dim: self.embed_dim(),
            target_layer_id: self.target_layer_id(),
            logit_scale: self.logit_scale(),
        }
    }
}

/// Serializable description of a loaded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub model_id: String,
    pub embed_dim: usize,
    pub target_layer_id: String,
    pub logit_scale: f64,
}

fn nonempty(prompts: &[String]) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Invalid("no prompts given".into()));
    }
    Ok(())
}

/// `softmax(logit_scale * cos)` of one unit image row against unit text rows.
pub fn probabilities_from_embeddings(image: ArrayView1<f32>, texts: ArrayView2<f32>, logit_scale: f64) -> Vec<f64> {
    let logits: Vec<f64> =
        texts.outer_iter().map(|t| logit_scale * t.iter().zip(image).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub fn label_probabilities(h: &dyn VisionLanguageModel, image: &RgbImage, prompts: &[String]) -> Result<ScoredLabels> {
    if prompts.len() < 2 {
        return Err(Error::Invalid("label probabilities need at least two prompts".into()));
    }
    let texts = h.embed_text(prompts)?;
    let img = h.embed_image(std::slice::from_ref(image))?;
    Ok(ScoredLabels {
        label_ids: prompts.to_vec(),
        probabilities: probabilities_from_embeddings(img.row(0), texts.view(), h.logit_scale()),
    })
}

pub fn score_with_gradients(h: &dyn VisionLanguageModel, image: &RgbImage, prompt: &str) -> Result<GradientCapture> {
    let text = h.embed_text(&[prompt.to_owned()])?;
    let capture = h.capture(image)?;
    let mut out = h.gradients(&capture, text.view())?;
    Ok(out.remove(0))
}

fn unit_rows(mut m: Array2<f32>) -> Array2<f32> {
    for mut row in m.outer_iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    m
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// CLIP checkpoint (ResNet or ViT tower) in scalar precision `F`.
pub struct ClipAdapter<F: Real> {
    id: String,
    model: ClipModel<F>,
}

impl<F: Real> ClipAdapter<F> {
    pub fn new(id: impl Into<String>, model: ClipModel<F>) -> Result<Self> {
        if model.tokenizer().is_none() {
            return Err(Error::Config("model has no tokenizer for its vocabulary".into()));
        }
        Ok(ClipAdapter { id: id.into(), model })
    }

    pub fn model(&self) -> &ClipModel<F> {
        &self.model
    }

    fn pixels(&self, image: &RgbImage) -> Result<Array3<F>> {
        Ok(preprocess::<F>(image, self.model.input_resolution())?)
    }

    fn inner<'a>(&self, capture: &'a ImageCapture) -> Result<&'a VisualCapture<F>> {
        capture
            .inner
            .downcast_ref::<VisualCapture<F>>()
            .ok_or_else(|| Error::Invalid("capture was produced by a different model".into()))
    }
}

impl<F: Real> VisionLanguageModel for ClipAdapter<F> {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_dim(&self) -> usize {
        self.model.embed_dim()
    }

    fn target_layer_id(&self) -> String {
        self.model.target_layer()
    }

    fn logit_scale(&self) -> f64 {
        self.model.logit_scale().to_f64().unwrap()
    }

    fn embed_text(&self, prompts: &[String]) -> Result<Array2<f32>> {
        nonempty(prompts)?;
        let rows =
            prompts.par_iter().map(|p| Ok(self.model.encode_text(p)?.mapv(F::as_f32))).collect::<Result<Vec<Array1<f32>>>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(unit_rows(ndarray::stack(Axis(0), &views).expect("equal widths")))
    }

    fn embed_image(&self, images: &[RgbImage]) -> Result<Array2<f32>> {
        if images.is_empty() {
            return Err(Error::Invalid("no images given".into()));
        }
        let rows = images
            .par_iter()
            .map(|img| Ok(self.model.encode_image(&self.pixels(img)?).mapv(F::as_f32)))
            .collect::<Result<Vec<Array1<f32>>>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(unit_rows(ndarray::stack(Axis(0), &views).expect("equal widths")))
    }

    fn capture(&self, image: &RgbImage) -> Result<ImageCapture> {
        let capture = self.model.capture(&self.pixels(image)?);
        let kind = match &capture {
            VisualCapture::ResNet(_) => FeatureKind::Convolutional,
            VisualCapture::Vit(c) => FeatureKind::Attention { grid: c.grid },
        };
        Ok(ImageCapture { activations: capture.activations().mapv(F::as_f32), kind, inner: Box::new(capture) })
    }

    fn gradients(&self, capture: &ImageCapture, text_embeddings: ArrayView2<f32>) -> Result<Vec<GradientCapture>> {
        let inner = self.inner(capture)?;
        let texts = text_embeddings.mapv(F::of_f32);
        Ok(self
            .model
            .target_gradients(inner, texts.view())
            .into_iter()
            .map(|g| GradientCapture {
                score: g.score.to_f64().unwrap(),
                activations: capture.activations.clone(),
                gradients: g.gradients.mapv(F::as_f32),
                kind: capture.kind,
            })
            .collect())
    }

    fn rescore(&self, capture: &ImageCapture, text_embedding: ArrayView1<f32>, activations: &Array3<f32>) -> Result<f64> {
        let inner = self.inner(capture)?;
        let e = self.model.tail(inner, &activations.mapv(F::of_f32))?.mapv(|v| v.to_f64().unwrap());
        Ok(cosine(e.view(), text_embedding.mapv(|v| v as f64).view()))
    }
}

/// Two-layer network with a single convolution channel, used where a
/// closed-form saliency oracle is needed and in weight-free pipelines.
///
/// Image: grayscale `side x side` (area downsampling), one 3x3 convolution
/// with ReLU as the target layer, then global average pooling and an affine
/// map into the joint space. Text: sum of pseudo-random word vectors.
pub struct ToyModel {
    id: String,
    side: usize,
    kernel: [[f32; 3]; 3],
    bias: f32,
    direction: Array1<f32>,
    offset: Array1<f32>,
    seed: u64,
    logit_scale: f64,
}

impl ToyModel {
    pub fn new(seed: u64) -> Self {
        let dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| -> f32 { rng.sample(StandardNormal) };
        let mut kernel = [[0.0; 3]; 3];
        for row in kernel.iter_mut() {
            for k in row.iter_mut() {
                *k = gauss(&mut rng) * 0.5;
            }
        }
        let direction = Array1::from_shape_fn(dim, |_| gauss(&mut rng));
        let offset = Array1::from_shape_fn(dim, |_| gauss(&mut rng) * 0.3);
        ToyModel { id: "toy".into(), side: 16, kernel, bias: 0.1, direction, offset, seed, logit_scale: 100.0 }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Grayscale input in `[0, 1]`, `side x side`, dark shapes high.
    pub fn input(&self, image: &RgbImage) -> Result<Array2<f32>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Invalid("empty image".into()));
        }
        let small = image::imageops::resize(image, self.side as u32, self.side as u32, image::imageops::FilterType::Triangle);
        Ok(Array2::from_shape_fn((self.side, self.side), |(y, x)| {
            let p = small.get_pixel(x as u32, y as u32).0;
            1.0 - (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0)
        }))
    }

    /// Target layer: `relu(conv3x3(input) + bias)`, zero padded, shape `(1, side, side)`.
    pub fn activations(&self, input: &Array2<f32>) -> Array3<f32> {
        let n = self.side as isize;
        Array3::from_shape_fn((1, self.side, self.side), |(_, y, x)| {
            let mut acc = self.bias;
            for (ky, row) in self.kernel.iter().enumerate() {
                for (kx, k) in row.iter().enumerate() {
                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if iy >= 0 && ix >= 0 && iy < n && ix < n {
                        acc += k * input[[iy as usize, ix as usize]];
                    }
                }
            }
            acc.max(0.0)
        })
    }

    /// Unnormalized joint-space embedding of a target-layer tensor.
    pub fn head(&self, activations: &Array3<f32>) -> Array1<f64> {
        let mean = activations.mean().unwrap_or(0.0) as f64;
        self.offset.mapv(|v| v as f64) + &self.direction.mapv(|v| v as f64 * mean)
    }

    fn word_vector(&self, word: &str) -> Array1<f32> {
        let digest = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(word.as_bytes()).finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        Array1::from_shape_fn(self.direction.len(), |_| rng.random::<f32>() * 2.0 - 1.0)
    }
}

struct ToyCapture;

impl VisionLanguageModel for ToyModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_dim(&self) -> usize {
        self.direction.len()
    }

    fn target_layer_id(&self) -> String {
        "conv".into()
    }

    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn embed_text(&self, prompts: &[String]) -> Result<Array2<f32>> {
        nonempty(prompts)?;
        let mut out = Array2::zeros((prompts.len(), self.embed_dim()));
        for (p, mut row) in prompts.iter().zip(out.outer_iter_mut()) {
            for word in p.to_lowercase().split_whitespace() {
                row += &self.word_vector(word);
            }
        }
        Ok(unit_rows(out))
    }

    fn embed_image(&self, images: &[RgbImage]) -> Result<Array2<f32>> {
        if images.is_empty() {
            return Err(Error::Invalid("no images given".into()));
        }
        let mut out = Array2::zeros((images.len(), self.embed_dim()));
        for (img, mut row) in images.iter().zip(out.outer_iter_mut()) {
            row.assign(&self.head(&self.activations(&self.input(img)?)).mapv(|v| v as f32));
        }
        Ok(unit_rows(out))
    }

    fn capture(&self, image: &RgbImage) -> Result<ImageCapture> {
        Ok(ImageCapture {
            activations: self.activations(&self.input(image)?),
            kind: FeatureKind::Convolutional,
            inner: Box::new(ToyCapture),
        })
    }

    fn gradients(&self, capture: &ImageCapture, text_embeddings: ArrayView2<f32>) -> Result<Vec<GradientCapture>> {
        let e = self.head(&capture.activations);
        let norm = e.dot(&e).sqrt();
        let cells = capture.activations.len() as f64;
        let dir = self.direction.mapv(|v| v as f64);
        Ok(text_embeddings
            .outer_iter()
            .map(|t| {
                let t = t.mapv(|v| v as f64);
                let t = &t / t.dot(&t).sqrt();
                let score = e.dot(&t) / norm;
                // d cos / d e, then through the mean pool
                let g_e = (&t - &(&e * (score / norm))) / norm;
                let per_cell = (g_e.dot(&dir) / cells) as f32;
                GradientCapture {
                    score,
                    activations: capture.activations.clone(),
                    gradients: Array3::from_elem(capture.activations.raw_dim(), per_cell),
                    kind: FeatureKind::Convolutional,
                }
            })
            .collect())
    }

    fn rescore(&self, _capture: &ImageCapture, text_embedding: ArrayView1<f32>, activations: &Array3<f32>) -> Result<f64> {
        let e = self.head(activations);
        Ok(cosine(e.view(), text_embedding.mapv(|v| v as f64).view()))
    }
}

/// Models the harness knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "resnet50")]
    Resnet50,
    #[serde(rename = "vit")]
    Vit,
    /// Randomly initialised small towers; exercise the pipeline without weights.
    #[serde(rename = "tiny-resnet")]
    TinyResnet,
    #[serde(rename = "tiny-vit")]
    TinyVit,
    #[serde(rename = "toy")]
    Toy,
}

impl ModelKind {
    pub const PRETRAINED: [ModelKind; 2] = [ModelKind::Resnet50, ModelKind::Vit];

    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Resnet50 => "resnet50",
            ModelKind::Vit => "vit",
            ModelKind::TinyResnet => "tiny-resnet",
            ModelKind::TinyVit => "tiny-vit",
            ModelKind::Toy => "toy",
        }
    }

    /// Hugging Face repository of the open_clip export of the OpenAI weights.
    pub fn hub_repo(self) -> Option<&'static str> {
        match self {
            ModelKind::Resnet50 => Some("timm/resnet50_clip.openai"),
            ModelKind::Vit => Some("timm/vit_base_patch32_clip_224.openai"),
            _ => None,
        }
    }

    pub fn needs_weights(self) -> bool {
        self.hub_repo().is_some()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Resnet50, ModelKind::Vit, ModelKind::TinyResnet, ModelKind::TinyVit, ModelKind::Toy]
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_owned()))
    }
}

/// Where checkpoints live and whether they may be fetched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSource {
    pub cache_dir: PathBuf,
    pub offline: bool,
}

impl WeightSource {
    /// `BKPROBE_WEIGHTS_DIR` (default `~/.cache/bkprobe`) and `BKPROBE_OFFLINE`.
    pub fn from_env() -> Self {
        let cache_dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| {
            let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            home.join(".cache").join("bkprobe")
        });
        let offline = std::env::var(OFFLINE_ENV).map(|v| !v.is_empty() && v != "0").unwrap_or(false);
        WeightSource { cache_dir, offline }
    }

    pub fn path_for(&self, kind: ModelKind) -> PathBuf {
        self.cache_dir.join(kind.id()).join(WEIGHTS_FILE)
    }

    /// Local checkpoint path, downloading it first when allowed.
    pub fn resolve(&self, kind: ModelKind) -> Result<PathBuf> {
        let path = self.path_for(kind);
        if path.exists() {
            return Ok(path);
        }
        if self.offline {
            return Err(Error::MissingWeights { model: kind.id().into(), path });
        }
        let repo = kind.hub_repo().ok_or_else(|| Error::UnknownModel(kind.id().into()))?;
        let endpoint = std::env::var(HUB_ENDPOINT_ENV).unwrap_or_else(|_| "https://huggingface.co".into());
        let url = format!("{}/{repo}/resolve/main/{WEIGHTS_FILE}", endpoint.trim_end_matches('/'));
        download(&url, &path).map_err(|reason| Error::Download { model: kind.id().into(), url, reason })?;
        Ok(path)
    }
}

fn download(url: &str, dest: &Path) -> std::result::Result<(), String> {
    let dir = dest.parent().expect("cache path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let response = ureq::get(url).call().map_err(|e| e.to_string())?;
    let mut reader = response.into_body().into_reader();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| e.to_string())?;
        if n == 0 {
            break;
        }
        std::io::Write::write_all(&mut tmp, &buf[..n]).map_err(|e| e.to_string())?;
    }
    tmp.persist(dest).map_err(|e| e.error.to_string())?;
    Ok(())
}

/// Builds a model. `seed` only affects the randomly initialised kinds.
pub fn load_model(kind: ModelKind, weights: &WeightSource, seed: u64) -> Result<Box<dyn VisionLanguageModel>> {
    Ok(match kind {
        ModelKind::Resnet50 | ModelKind::Vit => {
            let path = weights.resolve(kind)?;
            Box::new(ClipAdapter::new(kind.id(), ClipModel::<f32>::from_safetensors(&path)?)?)
        }
        ModelKind::TinyResnet => {
            Box::new(ClipAdapter::new(kind.id(), ClipModel::<f32>::random(&ClipConfig::tiny_resnet(), seed)?)?)
        }
        ModelKind::TinyVit => Box::new(ClipAdapter::new(kind.id(), ClipModel::<f32>::random(&ClipConfig::tiny_vit(), seed)?)?),
        ModelKind::Toy => Box::new(ToyModel::new(seed)),
    })
}
