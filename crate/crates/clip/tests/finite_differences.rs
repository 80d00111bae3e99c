//! Analytic target-layer gradients against central differences of the
//! recomputed embedding tail, on small random towers in double precision.

use bkprobe_clip::{ClipConfig, ClipModel};
use ndarray::{Array1, Array3, Axis};

fn pixels(res: usize, salt: f64) -> Array3<f64> {
    Array3::from_shape_fn((3, res, res), |(c, y, x)| ((c * 7919 + y * 131 + x) as f64 * 0.618 + salt).sin() * 1.5)
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

fn check(config: ClipConfig) {
    let model = ClipModel::<f64>::random(&config, 11).unwrap();
    let pixels = pixels(model.input_resolution(), 0.3);
    let capture = model.capture(&pixels);
    let texts = ndarray::stack(
        Axis(0),
        &[model.encode_text("a round object").unwrap().view(), model.encode_text("kiki").unwrap().view()],
    )
    .unwrap();
    let grads = model.target_gradients(&capture, texts.view());
    let base = capture.activations().clone();
    let h = 1e-6;

    for (t, grad) in texts.outer_iter().zip(&grads) {
        let t = t.to_owned();
        assert!((grad.score - cosine(&model.capture_embedding(&capture), &t)).abs() < 1e-12);
        let scale = grad.gradients.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0);
        // probe a spread of coordinates including the strongest one
        let strongest = grad.gradients.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let n = base.len();
        let picks = [0, n / 7, n / 3, n / 2, 2 * n / 3, n - 1, strongest];
        for &flat in &picks {
            let idx = unflatten(base.dim(), flat);
            let mut plus: Array3<f64> = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let fp = cosine(&model.tail(&capture, &plus).unwrap(), &t);
            let fm = cosine(&model.tail(&capture, &minus).unwrap(), &t);
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.gradients[idx];
            assert!((fd - an).abs() < 1e-6 * scale.max(1.0), "{idx:?}: fd {fd} vs analytic {an}");
        }
    }
}

fn unflatten((a, b, c): (usize, usize, usize), flat: usize) -> [usize; 3] {
    assert!(flat < a * b * c);
    [flat / (b * c), (flat / c) % b, flat % c]
}

#[test]
fn resnet_gradients_match_finite_differences() {
    check(ClipConfig::tiny_resnet());
}

#[test]
fn vit_gradients_match_finite_differences() {
    check(ClipConfig::tiny_vit());
}

#[test]
fn vit_gradients_only_touch_the_class_row() {
    let model = ClipModel::<f64>::random(&ClipConfig::tiny_vit(), 5).unwrap();
    let capture = model.capture(&pixels(model.input_resolution(), 1.0));
    let text = model.encode_text("bouba").unwrap().insert_axis(Axis(0));
    let g = &model.target_gradients(&capture, text.view())[0].gradients;
    for ((_, row, _), v) in g.indexed_iter() {
        if row != 0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn tail_of_unperturbed_capture_reproduces_embedding() {
    for config in [ClipConfig::tiny_resnet(), ClipConfig::tiny_vit()] {
        let model = ClipModel::<f64>::random(&config, 3).unwrap();
        let capture = model.capture(&pixels(model.input_resolution(), 2.0));
        let tail = model.tail(&capture, capture.activations()).unwrap();
        let direct = model.capture_embedding(&capture);
        assert!((&tail - &direct).iter().all(|v| v.abs() < 1e-12));
    }
}
