//! Tower outputs and target-layer gradients against reference values
//! exported from open_clip with torch autograd (see `fixtures/gen_fixtures.py`).

use std::path::PathBuf;

use bkprobe_clip::{Architecture, ClipModel, WeightStore};
use ndarray::{Array1, Array2, Array3, ArrayD};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

struct Expected(WeightStore);

impl Expected {
    fn load(stem: &str) -> Self {
        Expected(WeightStore::from_safetensors_file(&fixture(&format!("{stem}_expected.safetensors"))).unwrap())
    }
    fn tensor(&self, name: &str) -> ArrayD<f64> {
        self.0.get(name).unwrap().mapv(f64::from)
    }
    fn rank3(&self, name: &str) -> Array3<f64> {
        self.tensor(name).into_dimensionality().unwrap()
    }
    fn ids(&self) -> Vec<Vec<u32>> {
        let ids: Array2<f64> = self.tensor("ids").into_dimensionality().unwrap();
        ids.outer_iter().map(|r| r.iter().map(|&v| v as u32).collect()).collect()
    }
}

fn model<F: bkprobe_clip::Real>(stem: &str) -> ClipModel<F> {
    let store = WeightStore::from_safetensors_file(&fixture(&format!("{stem}.safetensors"))).unwrap();
    ClipModel::from_store(&store, 64).unwrap()
}

fn max_rel_err(actual: impl IntoIterator<Item = f64>, expected: &ArrayD<f64>) -> f64 {
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    actual.into_iter().zip(expected.iter()).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max) / scale
}

fn check<F: bkprobe_clip::Real>(stem: &str, arch: Architecture, tol: f64) {
    let m = model::<F>(stem);
    let e = Expected::load(stem);
    assert_eq!(m.architecture(), arch);

    for (i, ids) in e.ids().iter().enumerate() {
        let text: Array1<F> = m.encode_ids(ids).unwrap();
        let want = e.tensor("text_embeddings").index_axis_move(ndarray::Axis(0), i);
        let err = max_rel_err(text.iter().map(|v| v.as_f32() as f64), &want);
        assert!(err < tol, "{stem} text {i}: rel err {err}");
    }

    let pixels = e.rank3("pixels").mapv(|v| F::of_f32(v as f32));
    let capture = m.capture(&pixels);
    let image = m.capture_embedding(&capture);
    let err = max_rel_err(image.iter().map(|v| v.as_f32() as f64), &e.tensor("image_embedding"));
    assert!(err < tol, "{stem} image: rel err {err}");

    let err = max_rel_err(capture.activations().iter().map(|v| v.as_f32() as f64), &e.tensor("target"));
    assert!(err < tol, "{stem} target activations: rel err {err}");

    let text = m.encode_ids(&e.ids()[0]).unwrap().insert_axis(ndarray::Axis(0));
    let grads = m.target_gradients(&capture, text.view());
    let score = grads[0].score.as_f32() as f64;
    let want_score = e.tensor("score").iter().next().copied().unwrap();
    assert!((score - want_score).abs() < tol, "{stem} score {score} vs {want_score}");
    let err = max_rel_err(grads[0].gradients.iter().map(|v| v.as_f32() as f64), &e.tensor("target_grad"));
    assert!(err < tol * 10.0, "{stem} gradients: rel err {err}");
}

#[test]
fn resnet_matches_reference_in_f64() {
    check::<f64>("tiny_resnet", Architecture::ResNet, 1e-5);
}

#[test]
fn resnet_matches_reference_in_f32() {
    check::<f32>("tiny_resnet", Architecture::ResNet, 1e-3);
}

#[test]
fn vit_matches_reference_in_f64() {
    check::<f64>("tiny_vit", Architecture::Vit, 1e-5);
}

#[test]
fn vit_matches_reference_in_f32() {
    check::<f32>("tiny_vit", Architecture::Vit, 1e-3);
}

#[test]
fn target_layer_names_follow_state_dict() {
    assert_eq!(model::<f32>("tiny_resnet").target_layer(), "visual.layer4");
    assert_eq!(model::<f32>("tiny_vit").target_layer(), "visual.transformer.resblocks.1.attn");
}
