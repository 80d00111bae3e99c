//! Layer primitives shared by the text and vision towers.
//!
//! Token sequences are `(tokens, width)` matrices; feature maps are
//! `(channels, height, width)` arrays for a single image.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};

use crate::Real;

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// `(out, in)`, PyTorch layout.
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn forward_row(&self, x: ArrayView1<F>) -> Array1<F> {
        let mut y = self.weight.dot(&x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub weight: Array1<F>,
    pub bias: Array1<F>,
    pub eps: F,
}

/// Normalized input and inverse standard deviation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    pub xhat: Array1<F>,
    pub inv_std: F,
}

impl<F: Real> LayerNorm<F> {
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.forward_row(row).0);
        }
        out
    }

    pub fn forward_row(&self, x: ArrayView1<F>) -> (Array1<F>, LayerNormCache<F>) {
        let n = F::from_usize(x.len()).unwrap();
        let mean = x.sum() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv_std = F::one() / (var + self.eps).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_std);
        let y = &xhat * &self.weight + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    /// Gradient with respect to the input row given the gradient of the output row.
    pub fn backward_row(&self, cache: &LayerNormCache<F>, grad_out: ArrayView1<F>) -> Array1<F> {
        let n = F::from_usize(grad_out.len()).unwrap();
        let g = &grad_out * &self.weight;
        let mean_g = g.sum() / n;
        let mean_gx = (&g * &cache.xhat).sum() / n;
        Zip::from(&g).and(&cache.xhat).map_collect(|&gi, &xi| cache.inv_std * (gi - mean_g - xi * mean_gx))
    }
}

pub fn quick_gelu<F: Real>(x: F) -> F {
    x * sigmoid(F::from_f64(1.702).unwrap() * x)
}

pub fn quick_gelu_grad<F: Real>(x: F) -> F {
    let a = F::from_f64(1.702).unwrap();
    let s = sigmoid(a * x);
    s + a * x * s * (F::one() - s)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Numerically stable softmax of every row.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.outer_iter_mut() {
        softmax_in_place(row.as_slice_mut().expect("rows are contiguous"));
    }
}

pub fn softmax_in_place<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub c_fc: Linear<F>,
    pub c_proj: Linear<F>,
}

impl<F: Real> Mlp<F> {
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let h = self.c_fc.forward(x).mapv(quick_gelu);
        self.c_proj.forward(h.view())
    }
}

/// Packed-projection self attention as used by `nn.MultiheadAttention`.
#[derive(Debug, Clone)]
pub struct SelfAttention<F> {
    /// `(3 * width, width)`: query, key, value rows stacked.
    pub in_proj: Linear<F>,
    pub out_proj: Linear<F>,
    pub heads: usize,
}

/// Projections and attention probabilities from one attention call.
#[derive(Debug, Clone)]
pub struct AttentionTrace<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// `(heads, tokens, tokens)`.
    pub probs: Array3<F>,
}

impl<F: Real> SelfAttention<F> {
    pub fn width(&self) -> usize {
        self.out_proj.out_features()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: ArrayView2<F>, causal: bool) -> Array2<F> {
        self.forward_traced(x, causal).0
    }

    pub fn forward_traced(&self, x: ArrayView2<F>, causal: bool) -> (Array2<F>, AttentionTrace<F>) {
        let width = self.width();
        let qkv = self.in_proj.forward(x);
        let q = qkv.slice(s![.., 0..width]).to_owned();
        let k = qkv.slice(s![.., width..2 * width]).to_owned();
        let v = qkv.slice(s![.., 2 * width..]).to_owned();
        let probs = attention_probs(q.view(), k.view(), self.heads, causal);
        let mixed = mix_values(probs.view(), v.view());
        let out = self.out_proj.forward(mixed.view());
        (out, AttentionTrace { q, k, v, probs })
    }
}

/// Scaled dot-product attention probabilities, `(heads, queries, keys)`.
pub fn attention_probs<F: Real>(q: ArrayView2<F>, k: ArrayView2<F>, heads: usize, causal: bool) -> Array3<F> {
    let (lq, width) = q.dim();
    let lk = k.nrows();
    let dh = width / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut probs = Array3::zeros((heads, lq, lk));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols]);
        let mut scores = qh.dot(&kh.t()) * scale;
        if causal {
            for i in 0..lq {
                for j in (i + 1)..lk {
                    scores[[i, j]] = F::neg_infinity();
                }
            }
        }
        softmax_rows(&mut scores);
        probs.index_axis_mut(Axis(0), h).assign(&scores);
    }
    probs
}

/// Per-head `probs @ v`, heads concatenated back into `(queries, width)`.
pub fn mix_values<F: Real>(probs: ArrayView3<F>, v: ArrayView2<F>) -> Array2<F> {
    let (heads, lq, _) = probs.dim();
    let width = v.ncols();
    let dh = width / heads;
    let mut out = Array2::zeros((lq, width));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mixed = probs.index_axis(Axis(0), h).dot(&v.slice(s![.., cols.clone()]));
        out.slice_mut(s![.., cols]).assign(&mixed);
    }
    out
}

/// Pre-norm transformer block (`x + attn(ln_1(x))`, then `x + mlp(ln_2(x))`).
#[derive(Debug, Clone)]
pub struct ResidualBlock<F> {
    pub ln_1: LayerNorm<F>,
    pub attn: SelfAttention<F>,
    pub ln_2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

impl<F: Real> ResidualBlock<F> {
    pub fn forward(&self, x: ArrayView2<F>, causal: bool) -> Array2<F> {
        let h = self.ln_1.forward(x);
        let x = &x + &self.attn.forward(h.view(), causal);
        let h = self.ln_2.forward(x.view());
        &x + &self.mlp.forward(h.view())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `(out, in * kh * kw)`.
    pub weight: Array2<F>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let k = self.kernel;
        let ho = (h + 2 * self.padding - k) / self.stride + 1;
        let wo = (w + 2 * self.padding - k) / self.stride + 1;
        let out = if k == 1 && self.stride == 1 && self.padding == 0 {
            let flat = x.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).unwrap();
            self.weight.dot(&flat)
        } else {
            let cols = self.im2col(x, ho, wo);
            self.weight.dot(&cols)
        };
        out.into_shape_with_order((self.out_channels(), ho, wo)).unwrap()
    }

    fn im2col(&self, x: ArrayView3<F>, ho: usize, wo: usize) -> Array2<F> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }
}

/// Inference-mode batch norm folded into a per-channel affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    pub fn from_stats(weight: Array1<F>, bias: Array1<F>, mean: Array1<F>, var: Array1<F>, eps: F) -> Self {
        let scale = Zip::from(&weight).and(&var).map_collect(|&w, &v| w / (v + eps).sqrt());
        let shift = &bias - &(&mean * &scale);
        Self { scale, shift }
    }

    pub fn apply(&self, x: &mut Array3<F>) {
        for ((mut plane, &a), &b) in x.outer_iter_mut().zip(&self.scale).zip(&self.shift) {
            plane.mapv_inplace(|v| v * a + b);
        }
    }
}

pub fn relu_in_place<F: Real>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| v.max(F::zero()));
}

/// `nn.AvgPool2d(k)` with stride `k`, no padding, floor mode.
pub fn avg_pool<F: Real>(x: ArrayView3<F>, k: usize) -> Array3<F> {
    if k == 1 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / k, w / k);
    let norm = F::one() / F::from_usize(k * k).unwrap();
    let mut out = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let window = x.slice(s![ci, oy * k..(oy + 1) * k, ox * k..(ox + 1) * k]);
                out[[ci, oy, ox]] = window.sum() * norm;
            }
        }
    }
    out
}

/// Euclidean norm of a vector.
pub fn l2_norm<F: Real>(v: ArrayView1<F>) -> F {
    v.dot(&v).sqrt()
}

pub fn normalized<F: Real>(v: ArrayView1<F>) -> Array1<F> {
    let n = l2_norm(v);
    v.mapv(|x| x / n)
}

/// Gradient of `cos(e, t)` with respect to `e`, given a unit-norm `t`.
pub fn cosine_grad<F: Real>(e: ArrayView1<F>, t_unit: ArrayView1<F>) -> (F, Array1<F>) {
    let norm = l2_norm(e);
    let e_unit = e.mapv(|x| x / norm);
    let cos = e_unit.dot(&t_unit);
    let grad = Zip::from(&t_unit).and(&e_unit).map_collect(|&t, &u| (t - cos * u) / norm);
    (cos, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let ln: LayerNorm<f64> = LayerNorm { weight: array![1.5, -0.5, 2.0, 0.7], bias: array![0.1, 0.0, -0.2, 0.3], eps: 1e-5 };
        let x = array![0.3, -1.2, 2.2, 0.05];
        let upstream = array![0.4, -0.3, 1.1, 0.9];
        let (_, cache) = ln.forward_row(x.view());
        let grad = ln.backward_row(&cache, upstream.view());
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = ln.forward_row(xp.view()).0.dot(&upstream);
            let fm = ln.forward_row(xm.view()).0.dot(&upstream);
            let fd: f64 = (fp - fm) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn quick_gelu_grad_matches_finite_differences() {
        for &x in &[-3.0f64, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (quick_gelu(x + h) - quick_gelu(x - h)) / (2.0 * h);
            assert!((fd - quick_gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 2 -> 1 channels, 3x3, stride 2, padding 1 on a 5x5 input
        let weight = Array2::from_shape_fn((1, 18), |(_, i)| (i as f64 * 0.37).sin());
        let conv = Conv2d { weight: weight.clone(), in_channels: 2, kernel: 3, stride: 2, padding: 1 };
        let x = Array3::from_shape_fn((2, 5, 5), |(c, y, xx)| ((c * 25 + y * 5 + xx) as f64 * 0.13).cos());
        let out = conv.forward(x.view());
        assert_eq!(out.dim(), (1, 3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                continue;
                            }
                            acc += weight[[0, (c * 3 + ky) * 3 + kx]] * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
                assert!((acc - out[[0, oy, ox]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let q = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64).sin());
        let probs: Array3<f64> = attention_probs(q.view(), q.view(), 2, true);
        for h in 0..2usize {
            for i in 0..4usize {
                let row = probs.slice(s![h, i, ..]);
                assert!((row.sum() - 1.0).abs() < 1e-12);
                for j in (i + 1)..4 {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_embedding() {
        let e: Array1<f64> = array![0.3, -2.0, 1.0];
        let t = normalized(array![1.0, 1.0, 0.5].view());
        let (_, g) = cosine_grad(e.view(), t.view());
        assert!(g.dot(&e).abs() < 1e-12);
    }
}
