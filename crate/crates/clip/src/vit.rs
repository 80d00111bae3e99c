//! Vision transformer tower and the attention-probability gradient path.
//!
//! The saliency target is the attention-probability tensor of the last
//! residual block. Only the class-token row of that tensor reaches the image
//! embedding, so the tail below recomputes the class token from that row
//! alone and back-propagates cosine scores into it.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::ops::{quick_gelu, quick_gelu_grad, Conv2d, LayerNorm, LayerNormCache, ResidualBlock};
use crate::weights::WeightStore;
use crate::{ClipError, Real, Result};

#[derive(Debug, Clone)]
pub struct VisionTransformer<F> {
    pub conv1: Conv2d<F>,
    pub class_embedding: Array1<F>,
    pub positional_embedding: Array2<F>,
    pub ln_pre: LayerNorm<F>,
    pub blocks: Vec<ResidualBlock<F>>,
    pub ln_post: LayerNorm<F>,
    /// `(width, embed_dim)`.
    pub proj: Array2<F>,
    pub grid: usize,
}

/// Final-block state for one image.
#[derive(Debug, Clone)]
pub struct VitCapture<F> {
    /// Input of the final block, `(tokens, width)`.
    pub block_input: Array2<F>,
    /// Value projections of the final block.
    pub values: Array2<F>,
    /// Attention probabilities of the final block, `(heads, tokens, tokens)`.
    pub attention: Array3<F>,
    pub grid: usize,
}

struct TailCache<F> {
    ln2: LayerNormCache<F>,
    pre_gelu: Array1<F>,
    ln_post: LayerNormCache<F>,
}

impl<F: Real> VisionTransformer<F> {
    pub fn from_store(store: &WeightStore, head_width: usize) -> Result<Self> {
        let (weight, in_channels, patch) = store.conv_kernel::<F>("visual.conv1.weight")?;
        let conv1 = Conv2d { weight, in_channels, kernel: patch, stride: patch, padding: 0 };
        let positional_embedding = store.matrix::<F>("visual.positional_embedding")?;
        let grid = ((positional_embedding.nrows() - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != positional_embedding.nrows() {
            return Err(ClipError::Architecture("vision positional embedding is not a square grid".into()));
        }
        let width = conv1.out_channels();
        let heads = (width / head_width).max(1);
        let layers = store.count_indexed("visual.transformer.resblocks");
        if layers == 0 {
            return Err(ClipError::Architecture("vision transformer has no residual blocks".into()));
        }
        let blocks = (0..layers)
            .map(|i| store.residual_block(&format!("visual.transformer.resblocks.{i}"), heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv1,
            class_embedding: store.vector("visual.class_embedding")?,
            positional_embedding,
            ln_pre: store.layer_norm("visual.ln_pre")?,
            blocks,
            ln_post: store.layer_norm("visual.ln_post")?,
            proj: store.matrix("visual.proj")?,
            grid,
        })
    }

    pub fn input_resolution(&self) -> usize {
        self.grid * self.conv1.kernel
    }

    pub fn heads(&self) -> usize {
        self.blocks[0].attn.heads
    }

    /// Runs the tower on a preprocessed `(3, r, r)` image.
    pub fn capture(&self, pixels: &Array3<F>) -> VitCapture<F> {
        let patches = self.conv1.forward(pixels.view());
        let width = patches.dim().0;
        let tokens = self.grid * self.grid;
        let patches = patches.into_shape_with_order((width, tokens)).unwrap();
        let mut x = Array2::zeros((tokens + 1, width));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches.t());
        x += &self.positional_embedding;
        let mut x = self.ln_pre.forward(x.view());
        let (last, rest) = self.blocks.split_last().expect("at least one block");
        for block in rest {
            x = block.forward(x.view(), false);
        }
        let h = last.ln_1.forward(x.view());
        let (_, trace) = last.attn.forward_traced(h.view(), false);
        VitCapture { block_input: x, values: trace.v, attention: trace.probs, grid: self.grid }
    }

    /// Image embedding recomputed from a (possibly perturbed) attention tensor.
    pub fn tail(&self, capture: &VitCapture<F>, attention: &Array3<F>) -> Result<Array1<F>> {
        if attention.dim() != capture.attention.dim() {
            return Err(ClipError::ActivationShape {
                actual: attention.shape().to_vec(),
                expected: capture.attention.shape().to_vec(),
            });
        }
        Ok(self.tail_cached(capture, attention).0)
    }

    fn tail_cached(&self, capture: &VitCapture<F>, attention: &Array3<F>) -> (Array1<F>, TailCache<F>) {
        let block = self.blocks.last().unwrap();
        let heads = attention.dim().0;
        let width = capture.values.ncols();
        let dh = width / heads;
        let mut mixed = Array1::zeros(width);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let row = attention.slice(s![h, 0, ..]);
            let part: Array1<F> = capture.values.slice(s![.., cols.clone()]).t().dot(&row);
            mixed.slice_mut(s![cols]).assign(&part);
        }
        let x1 = &capture.block_input.row(0) + &block.attn.out_proj.forward_row(mixed.view());
        let (h2, ln2) = block.ln_2.forward_row(x1.view());
        let pre_gelu = block.mlp.c_fc.forward_row(h2.view());
        let act = pre_gelu.mapv(quick_gelu);
        let x2 = &x1 + &block.mlp.c_proj.forward_row(act.view());
        let (y, ln_post) = self.ln_post.forward_row(x2.view());
        (y.dot(&self.proj), TailCache { ln2, pre_gelu, ln_post })
    }

    pub fn embedding(&self, capture: &VitCapture<F>) -> Array1<F> {
        self.tail_cached(capture, &capture.attention).0
    }

    /// Gradients of several scalar scores with respect to the final-block
    /// attention probabilities, given `d score / d embedding` as rows of
    /// `embedding_grads`. Returned tensors have the attention shape.
    pub fn attention_grads(&self, capture: &VitCapture<F>, embedding_grads: ArrayView2<F>) -> Vec<Array3<F>> {
        let block = self.blocks.last().unwrap();
        let (_, cache) = self.tail_cached(capture, &capture.attention);
        let batch = embedding_grads.nrows();
        let heads = capture.attention.dim().0;
        let width = capture.values.ncols();
        let dh = width / heads;

        let g_y = embedding_grads.dot(&self.proj.t());
        let mut g_x2 = Array2::zeros((batch, width));
        for (src, mut dst) in g_y.outer_iter().zip(g_x2.outer_iter_mut()) {
            dst.assign(&self.ln_post.backward_row(&cache.ln_post, src));
        }
        let mut g_pre = g_x2.dot(&block.mlp.c_proj.weight);
        let slope = cache.pre_gelu.mapv(quick_gelu_grad);
        g_pre *= &slope;
        let g_h2 = g_pre.dot(&block.mlp.c_fc.weight);
        let mut g_x1 = g_x2;
        for (src, mut dst) in g_h2.outer_iter().zip(g_x1.outer_iter_mut()) {
            dst += &block.ln_2.backward_row(&cache.ln2, src);
        }
        let g_mixed = g_x1.dot(&block.attn.out_proj.weight);

        let tokens = capture.attention.dim().1;
        let mut grads = vec![Array3::zeros((heads, tokens, tokens)); batch];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let g_row = g_mixed.slice(s![.., cols.clone()]).dot(&capture.values.slice(s![.., cols]).t());
            for (grad, row) in grads.iter_mut().zip(g_row.axis_iter(Axis(0))) {
                grad.slice_mut(s![h, 0, ..]).assign(&row);
            }
        }
        grads
    }
}
