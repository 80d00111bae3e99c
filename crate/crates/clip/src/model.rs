use std::path::Path;

use ndarray::{Array1, Array3, ArrayD, ArrayView2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{cosine_grad, normalized};
use crate::resnet::{ModifiedResNet, ResNetCapture};
use crate::text::TextTransformer;
use crate::tokenizer::Tokenizer;
use crate::vit::{VisionTransformer, VitCapture};
use crate::weights::WeightStore;
use crate::{ClipError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    ResNet,
    Vit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VisualConfig {
    ResNet { layers: [usize; 4], width: usize, image_size: usize },
    Vit { width: usize, layers: usize, patch_size: usize, image_size: usize },
}

/// Shape hyper-parameters, used to build randomly initialised towers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub visual: VisualConfig,
    pub text_width: usize,
    pub text_layers: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    /// Width of one attention head; head counts are `width / head_width`.
    pub head_width: usize,
}

impl ClipConfig {
    pub fn rn50() -> Self {
        Self {
            embed_dim: 1024,
            visual: VisualConfig::ResNet { layers: [3, 4, 6, 3], width: 64, image_size: 224 },
            text_width: 512,
            text_layers: 12,
            context_length: 77,
            vocab_size: 49408,
            head_width: 64,
        }
    }

    pub fn vit_b32() -> Self {
        Self {
            embed_dim: 512,
            visual: VisualConfig::Vit { width: 768, layers: 12, patch_size: 32, image_size: 224 },
            text_width: 512,
            text_layers: 12,
            context_length: 77,
            vocab_size: 49408,
            head_width: 64,
        }
    }

    /// Small ResNet tower with the full tokenizer vocabulary.
    pub fn tiny_resnet() -> Self {
        Self {
            embed_dim: 32,
            visual: VisualConfig::ResNet { layers: [1, 1, 1, 1], width: 8, image_size: 64 },
            text_width: 32,
            text_layers: 1,
            context_length: 77,
            vocab_size: 49408,
            head_width: 16,
        }
    }

    /// Small ViT tower with the full tokenizer vocabulary.
    pub fn tiny_vit() -> Self {
        Self {
            embed_dim: 32,
            visual: VisualConfig::Vit { width: 32, layers: 2, patch_size: 8, image_size: 32 },
            text_width: 32,
            text_layers: 1,
            context_length: 77,
            vocab_size: 49408,
            head_width: 16,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.visual {
            VisualConfig::ResNet { .. } => Architecture::ResNet,
            VisualConfig::Vit { .. } => Architecture::Vit,
        }
    }
}

#[derive(Debug, Clone)]
enum VisualTower<F> {
    ResNet(ModifiedResNet<F>),
    Vit(VisionTransformer<F>),
}

/// Target-layer state captured while embedding one image.
#[derive(Debug, Clone)]
pub enum VisualCapture<F> {
    ResNet(ResNetCapture<F>),
    Vit(VitCapture<F>),
}

impl<F: Real> VisualCapture<F> {
    /// Tensor the gradients are taken against: `(channels, h, w)` feature map
    /// for ResNet, `(heads, tokens, tokens)` attention probabilities for ViT.
    pub fn activations(&self) -> &Array3<F> {
        match self {
            VisualCapture::ResNet(c) => &c.activations,
            VisualCapture::Vit(c) => &c.attention,
        }
    }
}

/// Cosine score of one text against the image and its gradient at the target layer.
#[derive(Debug, Clone)]
pub struct TargetGradient<F> {
    pub score: F,
    pub gradients: Array3<F>,
}

#[derive(Debug, Clone)]
pub struct ClipModel<F> {
    visual: VisualTower<F>,
    text: TextTransformer<F>,
    log_logit_scale: F,
    tokenizer: Option<Tokenizer>,
}

impl<F: Real> ClipModel<F> {
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        Self::from_store(&WeightStore::from_safetensors_file(path)?, 64)
    }

    /// Builds the towers from an open_clip / OpenAI state dict. The vision
    /// architecture is inferred from which tensors are present.
    pub fn from_store(store: &WeightStore, head_width: usize) -> Result<Self> {
        let visual = if store.contains("visual.proj") {
            VisualTower::Vit(VisionTransformer::from_store(store, head_width)?)
        } else if store.contains("visual.attnpool.c_proj.weight") {
            VisualTower::ResNet(ModifiedResNet::from_store(store, head_width)?)
        } else {
            return Err(ClipError::Architecture("neither `visual.proj` nor `visual.attnpool` present".into()));
        };
        let text = TextTransformer::from_store(store, head_width)?;
        let log_logit_scale = store.scalar("logit_scale")?;
        let tokenizer = (text.vocab_size() == 49408).then(Tokenizer::bundled);
        let model = Self { visual, text, log_logit_scale, tokenizer };
        if model.visual_embed_dim() != model.text.embed_dim() {
            return Err(ClipError::Architecture(format!(
                "image embedding width {} differs from text embedding width {}",
                model.visual_embed_dim(),
                model.text.embed_dim()
            )));
        }
        Ok(model)
    }

    /// Randomly initialised towers of the given shape.
    pub fn random(config: &ClipConfig, seed: u64) -> Result<Self> {
        Self::from_store(&random_store(config, seed), config.head_width)
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = Some(tokenizer);
        self
    }

    pub fn architecture(&self) -> Architecture {
        match self.visual {
            VisualTower::ResNet(_) => Architecture::ResNet,
            VisualTower::Vit(_) => Architecture::Vit,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.embed_dim()
    }

    fn visual_embed_dim(&self) -> usize {
        match &self.visual {
            VisualTower::ResNet(r) => r.attnpool.c_proj.out_features(),
            VisualTower::Vit(v) => v.proj.ncols(),
        }
    }

    pub fn input_resolution(&self) -> usize {
        match &self.visual {
            VisualTower::ResNet(r) => r.input_resolution,
            VisualTower::Vit(v) => v.input_resolution(),
        }
    }

    pub fn context_length(&self) -> usize {
        self.text.context_length()
    }

    /// Learned softmax temperature (the exponentiated stored parameter).
    pub fn logit_scale(&self) -> F {
        self.log_logit_scale.exp()
    }

    /// Name of the layer whose activations saliency maps are built from.
    pub fn target_layer(&self) -> String {
        match &self.visual {
            VisualTower::ResNet(_) => "visual.layer4".into(),
            VisualTower::Vit(v) => format!("visual.transformer.resblocks.{}.attn", v.blocks.len() - 1),
        }
    }

    pub fn tokenizer(&self) -> Option<&Tokenizer> {
        self.tokenizer.as_ref()
    }

    /// Unnormalized text embedding of an already tokenized prompt.
    pub fn encode_ids(&self, ids: &[u32]) -> Result<Array1<F>> {
        self.text.encode(ids)
    }

    /// Unnormalized text embedding of a prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<Array1<F>> {
        let tokenizer = self.tokenizer.as_ref().ok_or(ClipError::NoTokenizer)?;
        let ids = tokenizer.tokenize(prompt, self.context_length())?;
        self.text.encode(&ids)
    }

    pub fn capture(&self, pixels: &Array3<F>) -> VisualCapture<F> {
        match &self.visual {
            VisualTower::ResNet(r) => VisualCapture::ResNet(r.capture(pixels)),
            VisualTower::Vit(v) => VisualCapture::Vit(v.capture(pixels)),
        }
    }

    /// Unnormalized image embedding of a preprocessed `(3, r, r)` tensor.
    pub fn encode_image(&self, pixels: &Array3<F>) -> Array1<F> {
        self.capture_embedding(&self.capture(pixels))
    }

    pub fn capture_embedding(&self, capture: &VisualCapture<F>) -> Array1<F> {
        match (&self.visual, capture) {
            (VisualTower::ResNet(r), VisualCapture::ResNet(c)) => r.embedding(c),
            (VisualTower::Vit(v), VisualCapture::Vit(c)) => v.embedding(c),
            _ => panic!("capture produced by a different architecture"),
        }
    }

    /// Image embedding with the target-layer tensor replaced by `activations`.
    pub fn tail(&self, capture: &VisualCapture<F>, activations: &Array3<F>) -> Result<Array1<F>> {
        match (&self.visual, capture) {
            (VisualTower::ResNet(r), VisualCapture::ResNet(c)) => r.tail(c, activations),
            (VisualTower::Vit(v), VisualCapture::Vit(c)) => v.tail(c, activations),
            _ => panic!("capture produced by a different architecture"),
        }
    }

    /// Cosine scores between the captured image and each row of
    /// `text_embeddings`, with gradients at the target layer.
    pub fn target_gradients(&self, capture: &VisualCapture<F>, text_embeddings: ArrayView2<F>) -> Vec<TargetGradient<F>> {
        let image = self.capture_embedding(capture);
        let mut scores = Vec::with_capacity(text_embeddings.nrows());
        let mut grads = ndarray::Array2::zeros(text_embeddings.raw_dim());
        for (t, mut g) in text_embeddings.outer_iter().zip(grads.outer_iter_mut()) {
            let (score, grad) = cosine_grad(image.view(), normalized(t).view());
            scores.push(score);
            g.assign(&grad);
        }
        let tensors = match (&self.visual, capture) {
            (VisualTower::ResNet(r), VisualCapture::ResNet(c)) => r.activation_grads(c, grads.view()),
            (VisualTower::Vit(v), VisualCapture::Vit(c)) => v.attention_grads(c, grads.view()),
            _ => panic!("capture produced by a different architecture"),
        };
        scores.into_iter().zip(tensors).map(|(score, gradients)| TargetGradient { score, gradients }).collect()
    }
}

fn random_store(config: &ClipConfig, seed: u64) -> WeightStore {
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: WeightStore::new() };
    let d = config.embed_dim;
    match config.visual {
        VisualConfig::ResNet { layers, width, image_size } => {
            init.conv("visual.conv1.weight", width / 2, 3, 3);
            init.bn("visual.bn1", width / 2);
            init.conv("visual.conv2.weight", width / 2, width / 2, 3);
            init.bn("visual.bn2", width / 2);
            init.conv("visual.conv3.weight", width, width / 2, 3);
            init.bn("visual.bn3", width);
            let mut inplanes = width;
            for (i, &blocks) in layers.iter().enumerate() {
                let planes = width << i;
                for b in 0..blocks {
                    let p = format!("visual.layer{}.{b}", i + 1);
                    init.conv(&format!("{p}.conv1.weight"), planes, inplanes, 1);
                    init.bn(&format!("{p}.bn1"), planes);
                    init.conv(&format!("{p}.conv2.weight"), planes, planes, 3);
                    init.bn(&format!("{p}.bn2"), planes);
                    init.conv(&format!("{p}.conv3.weight"), planes * 4, planes, 1);
                    init.bn(&format!("{p}.bn3"), planes * 4);
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    if stride > 1 || inplanes != planes * 4 {
                        init.conv(&format!("{p}.downsample.0.weight"), planes * 4, inplanes, 1);
                        init.bn(&format!("{p}.downsample.1"), planes * 4);
                    }
                    inplanes = planes * 4;
                }
            }
            let channels = width * 32;
            let side = image_size / 32;
            init.normal("visual.attnpool.positional_embedding", &[side * side + 1, channels], 0.1);
            for name in ["q_proj", "k_proj", "v_proj"] {
                init.linear(&format!("visual.attnpool.{name}"), channels, channels);
            }
            init.linear("visual.attnpool.c_proj", d, channels);
        }
        VisualConfig::Vit { width, layers, patch_size, image_size } => {
            let grid = image_size / patch_size;
            init.conv("visual.conv1.weight", width, 3, patch_size);
            init.normal("visual.class_embedding", &[width], 0.1);
            init.normal("visual.positional_embedding", &[grid * grid + 1, width], 0.1);
            init.layer_norm("visual.ln_pre", width);
            for l in 0..layers {
                init.block(&format!("visual.transformer.resblocks.{l}"), width);
            }
            init.layer_norm("visual.ln_post", width);
            init.normal("visual.proj", &[width, d], 1.0 / (width as f32).sqrt());
        }
    }
    let w = config.text_width;
    init.normal("token_embedding.weight", &[config.vocab_size, w], 0.1);
    init.normal("positional_embedding", &[config.context_length, w], 0.05);
    for l in 0..config.text_layers {
        init.block(&format!("transformer.resblocks.{l}"), w);
    }
    init.layer_norm("ln_final", w);
    init.normal("text_projection", &[w, d], 1.0 / (w as f32).sqrt());
    init.store.insert("logit_scale", ArrayD::from_elem(IxDyn(&[]), (1.0f32 / 0.07).ln()));
    init.store
}

struct Init {
    rng: ChaCha8Rng,
    store: WeightStore,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f32) {
        let dist = Normal::new(0.0f32, std).unwrap();
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    fn around_one(&mut self, name: &str, n: usize) {
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(0.8..1.2)).collect();
        self.store.insert(name, ArrayD::from_shape_vec(IxDyn(&[n]), data).unwrap());
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.normal(name, &[out, inp, k, k], (2.0 / (inp * k * k) as f32).sqrt());
    }

    fn bn(&mut self, prefix: &str, n: usize) {
        self.around_one(&format!("{prefix}.weight"), n);
        self.normal(&format!("{prefix}.bias"), &[n], 0.05);
        self.normal(&format!("{prefix}.running_mean"), &[n], 0.05);
        self.around_one(&format!("{prefix}.running_var"), n);
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) {
        self.normal(&format!("{prefix}.weight"), &[out, inp], 1.0 / (inp as f32).sqrt());
        self.normal(&format!("{prefix}.bias"), &[out], 0.05);
    }

    fn layer_norm(&mut self, prefix: &str, n: usize) {
        self.around_one(&format!("{prefix}.weight"), n);
        self.normal(&format!("{prefix}.bias"), &[n], 0.05);
    }

    fn block(&mut self, prefix: &str, width: usize) {
        self.layer_norm(&format!("{prefix}.ln_1"), width);
        self.normal(&format!("{prefix}.attn.in_proj_weight"), &[3 * width, width], 1.0 / (width as f32).sqrt());
        self.normal(&format!("{prefix}.attn.in_proj_bias"), &[3 * width], 0.05);
        self.linear(&format!("{prefix}.attn.out_proj"), width, width);
        self.layer_norm(&format!("{prefix}.ln_2"), width);
        self.linear(&format!("{prefix}.mlp.c_fc"), 4 * width, width);
        self.linear(&format!("{prefix}.mlp.c_proj"), width, 4 * width);
    }
}
