//! Preprocessing checked against values produced by an independent
//! implementation (PIL bilinear resize in float mode, then numpy
//! normalisation) for the checked-in `tests/data/golden_rgb.png`.

use std::path::Path;

use cxr_core::backbone::{preprocess, PreprocessConfig};

fn golden() -> (image::DynamicImage, serde_json::Value) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let img = image::open(dir.join("golden_rgb.png")).unwrap();
    let json = serde_json::from_str(&std::fs::read_to_string(dir.join("golden_rgb.json")).unwrap()).unwrap();
    (img, json)
}

#[test]
fn channel_means_match_reference() {
    let (img, g) = golden();
    let t = preprocess(&img, &PreprocessConfig::default());
    assert_eq!(t.shape(), [1, 3, 224, 224]);
    for c in 0..3 {
        let mean = t.channel(c).iter().map(|&v| v as f64).sum::<f64>() / (224.0 * 224.0);
        let want = g["channel_means"][c].as_f64().unwrap();
        assert!((mean - want).abs() < 1e-5, "channel {c}: {mean} vs {want}");
    }
}

#[test]
fn pixel_samples_match_reference() {
    let (img, g) = golden();
    let t = preprocess(&img, &PreprocessConfig::default());
    for s in g["samples"].as_array().unwrap() {
        let (c, y, x) = (s["c"].as_u64().unwrap() as usize, s["y"].as_u64().unwrap() as usize, s["x"].as_u64().unwrap() as usize);
        let got = t.channel(c)[y * 224 + x] as f64;
        let want = s["value"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-5, "c{c} ({y},{x}): {got} vs {want}");
    }
}
