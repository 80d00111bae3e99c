//! Modified ResNet tower (three-conv stem, anti-aliased strides, attention
//! pooling) and the gradient path from the pooled embedding back to the last
//! convolutional stage.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::ops::{avg_pool, relu_in_place, softmax_in_place, BatchNorm, Conv2d, Linear};
use crate::weights::WeightStore;
use crate::{ClipError, Real, Result};

#[derive(Debug, Clone)]
pub struct Bottleneck<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm<F>,
    conv3: Conv2d<F>,
    bn3: BatchNorm<F>,
    stride: usize,
    downsample: Option<(Conv2d<F>, BatchNorm<F>)>,
}

impl<F: Real> Bottleneck<F> {
    fn from_store(store: &WeightStore, prefix: &str, stride: usize) -> Result<Self> {
        let downsample = if store.contains(&format!("{prefix}.downsample.0.weight")) {
            Some((
                store.conv(&format!("{prefix}.downsample.0.weight"), 1, 0)?,
                store.batch_norm(&format!("{prefix}.downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: store.conv(&format!("{prefix}.conv1.weight"), 1, 0)?,
            bn1: store.batch_norm(&format!("{prefix}.bn1"))?,
            conv2: store.conv(&format!("{prefix}.conv2.weight"), 1, 1)?,
            bn2: store.batch_norm(&format!("{prefix}.bn2"))?,
            conv3: store.conv(&format!("{prefix}.conv3.weight"), 1, 0)?,
            bn3: store.batch_norm(&format!("{prefix}.bn3"))?,
            stride,
            downsample,
        })
    }

    fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let mut out = self.conv1.forward(x.view());
        self.bn1.apply(&mut out);
        relu_in_place(&mut out);
        let mut out = self.conv2.forward(out.view());
        self.bn2.apply(&mut out);
        relu_in_place(&mut out);
        let out = avg_pool(out.view(), self.stride);
        let mut out = self.conv3.forward(out.view());
        self.bn3.apply(&mut out);
        match &self.downsample {
            Some((conv, bn)) => {
                let pooled = avg_pool(x.view(), self.stride);
                let mut identity = conv.forward(pooled.view());
                bn.apply(&mut identity);
                out += &identity;
            }
            None => out += x,
        }
        relu_in_place(&mut out);
        out
    }
}

/// Multi-head attention pooling over the final feature map.
#[derive(Debug, Clone)]
pub struct AttentionPool<F> {
    pub positional_embedding: Array2<F>,
    pub q_proj: Linear<F>,
    pub k_proj: Linear<F>,
    pub v_proj: Linear<F>,
    pub c_proj: Linear<F>,
    pub heads: usize,
}

/// Pooling state for one image, enough to evaluate and differentiate the
/// embedding with respect to the last-stage activations.
#[derive(Debug, Clone)]
pub struct ResNetCapture<F> {
    /// Last convolutional stage output, `(channels, h, w)`.
    pub activations: Array3<F>,
    /// Scaled query of the mean token.
    query: Array1<F>,
    keys: Array2<F>,
    values: Array2<F>,
    /// `(heads, tokens)`.
    probs: Array2<F>,
    mixed: Array1<F>,
}

impl<F: Real> AttentionPool<F> {
    fn head_dim(&self) -> usize {
        self.q_proj.out_features() / self.heads
    }

    fn capture(&self, activations: Array3<F>) -> ResNetCapture<F> {
        let (c, h, w) = activations.dim();
        let spatial = activations.view().into_shape_with_order((c, h * w)).unwrap();
        let mut tokens = Array2::zeros((h * w + 1, c));
        tokens.row_mut(0).assign(&spatial.mean_axis(Axis(1)).unwrap());
        tokens.slice_mut(s![1.., ..]).assign(&spatial.t());
        tokens += &self.positional_embedding;

        let dh = self.head_dim();
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let query = self.q_proj.forward_row(tokens.row(0)) * scale;
        let keys = self.k_proj.forward(tokens.view());
        let values = self.v_proj.forward(tokens.view());
        let mut probs = Array2::zeros((self.heads, tokens.nrows()));
        let mut mixed = Array1::zeros(c);
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            let mut p = keys.slice(s![.., cols.clone()]).dot(&query.slice(s![cols.clone()]));
            softmax_in_place(p.as_slice_mut().unwrap());
            mixed.slice_mut(s![cols.clone()]).assign(&p.dot(&values.slice(s![.., cols])));
            probs.row_mut(head).assign(&p);
        }
        ResNetCapture { activations, query, keys, values, probs, mixed }
    }
}

#[derive(Debug, Clone)]
pub struct ModifiedResNet<F> {
    stem: Vec<(Conv2d<F>, BatchNorm<F>)>,
    layers: Vec<Vec<Bottleneck<F>>>,
    pub attnpool: AttentionPool<F>,
    pub input_resolution: usize,
}

impl<F: Real> ModifiedResNet<F> {
    pub fn from_store(store: &WeightStore, head_width: usize) -> Result<Self> {
        let stem = vec![
            (store.conv("visual.conv1.weight", 2, 1)?, store.batch_norm("visual.bn1")?),
            (store.conv("visual.conv2.weight", 1, 1)?, store.batch_norm("visual.bn2")?),
            (store.conv("visual.conv3.weight", 1, 1)?, store.batch_norm("visual.bn3")?),
        ];
        let mut layers = Vec::with_capacity(4);
        for layer in 1..=4 {
            let prefix = format!("visual.layer{layer}");
            let blocks = store.count_indexed(&prefix);
            if blocks == 0 {
                return Err(ClipError::Architecture(format!("{prefix} has no blocks")));
            }
            let stride = if layer == 1 { 1 } else { 2 };
            layers.push(
                (0..blocks)
                    .map(|b| Bottleneck::from_store(store, &format!("{prefix}.{b}"), if b == 0 { stride } else { 1 }))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let positional_embedding = store.matrix::<F>("visual.attnpool.positional_embedding")?;
        let channels = positional_embedding.ncols();
        let side = ((positional_embedding.nrows() - 1) as f64).sqrt().round() as usize;
        if side * side + 1 != positional_embedding.nrows() {
            return Err(ClipError::Architecture("attention-pool positional embedding is not a square grid".into()));
        }
        let attnpool = AttentionPool {
            positional_embedding,
            q_proj: store.linear("visual.attnpool.q_proj", true)?,
            k_proj: store.linear("visual.attnpool.k_proj", true)?,
            v_proj: store.linear("visual.attnpool.v_proj", true)?,
            c_proj: store.linear("visual.attnpool.c_proj", true)?,
            heads: (channels / head_width).max(1),
        };
        Ok(Self { stem, layers, attnpool, input_resolution: side * 32 })
    }

    /// Output of the last bottleneck stage for a preprocessed `(3, r, r)` image.
    pub fn trunk(&self, pixels: &Array3<F>) -> Array3<F> {
        let mut x = pixels.clone();
        for (conv, bn) in &self.stem {
            x = conv.forward(x.view());
            bn.apply(&mut x);
            relu_in_place(&mut x);
        }
        let mut x = avg_pool(x.view(), 2);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x);
            }
        }
        x
    }

    pub fn capture(&self, pixels: &Array3<F>) -> ResNetCapture<F> {
        self.attnpool.capture(self.trunk(pixels))
    }

    pub fn embedding(&self, capture: &ResNetCapture<F>) -> Array1<F> {
        self.attnpool.c_proj.forward_row(capture.mixed.view())
    }

    /// Embedding recomputed from a (possibly perturbed) activation tensor.
    pub fn tail(&self, capture: &ResNetCapture<F>, activations: &Array3<F>) -> Result<Array1<F>> {
        if activations.dim() != capture.activations.dim() {
            return Err(ClipError::ActivationShape {
                actual: activations.shape().to_vec(),
                expected: capture.activations.shape().to_vec(),
            });
        }
        let fresh = self.attnpool.capture(activations.clone());
        Ok(self.embedding(&fresh))
    }

    /// Gradients of several scalar scores with respect to the last-stage
    /// activations, given `d score / d embedding` as rows of `embedding_grads`.
    ///
    /// Key and query gradients are rank-one per head, so the token gradient
    /// of every score is assembled from two small products instead of a full
    /// pass through the key/value projections.
    pub fn activation_grads(&self, capture: &ResNetCapture<F>, embedding_grads: ArrayView2<F>) -> Vec<Array3<F>> {
        let pool = &self.attnpool;
        let (c, h, w) = capture.activations.dim();
        let spatial = h * w;
        let tokens = spatial + 1;
        let heads = pool.heads;
        let dh = pool.head_dim();
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let batch = embedding_grads.nrows();

        let g_mixed = embedding_grads.dot(&pool.c_proj.weight);
        // per-head key direction: query_h @ Wk[h]
        let mut key_dirs = Array2::zeros((heads, c));
        let mut g_scores = Array3::zeros((batch, tokens, heads));
        let mut g_query = Array2::zeros((batch, c));
        let mut value_dirs = Array3::zeros((batch, heads, c));
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            let p = capture.probs.row(head);
            let keys = capture.keys.slice(s![.., cols.clone()]);
            let values = capture.values.slice(s![.., cols.clone()]);
            let g_out = g_mixed.slice(s![.., cols.clone()]);

            key_dirs
                .row_mut(head)
                .assign(&capture.query.slice(s![cols.clone()]).dot(&pool.k_proj.weight.slice(s![cols.clone(), ..])));

            let g_p = g_out.dot(&values.t());
            let mut g_s = g_p.clone();
            for (mut row, g_row) in g_s.outer_iter_mut().zip(g_p.outer_iter()) {
                let centre = g_row.dot(&p);
                row.zip_mut_with(&p, |g, &pi| *g = pi * (*g - centre));
            }
            g_query.slice_mut(s![.., cols.clone()]).assign(&(g_s.dot(&keys) * scale));
            g_scores.slice_mut(s![.., .., head]).assign(&g_s);
            value_dirs.slice_mut(s![.., head, ..]).assign(&g_out.dot(&pool.v_proj.weight.slice(s![cols, ..])));
        }
        let g_first = g_query.dot(&pool.q_proj.weight);
        let probs_t = capture.probs.t();
        let inv_spatial = F::one() / F::from_usize(spatial).unwrap();

        (0..batch)
            .map(|b| {
                let mut g_tokens = g_scores.index_axis(Axis(0), b).dot(&key_dirs);
                g_tokens += &probs_t.dot(&value_dirs.index_axis(Axis(0), b));
                let mut first = g_tokens.row(0).to_owned();
                first += &g_first.row(b);
                first *= inv_spatial;
                let mut grad = Array3::zeros((c, h, w));
                {
                    let mut flat = grad.view_mut().into_shape_with_order((c, spatial)).unwrap();
                    flat.assign(&g_tokens.slice(s![1.., ..]).t());
                    flat += &first.view().insert_axis(Axis(1));
                }
                grad
            })
            .collect()
    }
}
