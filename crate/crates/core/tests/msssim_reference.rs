//! MS-SSIM against values computed by TensorFlow's `ssim_multiscale`
//! (float64 input) on the PNG pairs in `fixtures/msssim`.

use std::path::{Path, PathBuf};

use mdc_core::metrics::{ms_ssim, mr_ssim};
use mdc_core::{Image, ScaleWeights};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/msssim")
}

fn reference() -> Vec<(Image, Image, f64)> {
    let dir = fixture_dir();
    let text = std::fs::read_to_string(dir.join("reference.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let x = Image::load_png(dir.join(f[0])).unwrap();
            let y = Image::load_png(dir.join(f[1])).unwrap();
            (x, y, f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn ms_ssim_matches_tensorflow() {
    let pairs = reference();
    assert_eq!(pairs.len(), 10);
    for (i, (x, y, want)) in pairs.iter().enumerate() {
        let got = ms_ssim(x, y).unwrap();
        // reference values went through float32 inside TF
        assert!((got - want).abs() < 1e-4, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn reference_pairs_are_ordered_by_degradation() {
    let pairs = reference();
    let scores: Vec<f64> = pairs.iter().map(|(x, y, _)| mr_ssim(x, y, &ScaleWeights::mr()).unwrap()).collect();
    assert!(scores[0] > scores[9]);
    assert!(scores.iter().all(|s| *s > 0.0 && *s <= 1.0));
}

#[test]
fn identical_fixtures_score_one() {
    let (x, _, _) = &reference()[3];
    assert!((ms_ssim(x, x).unwrap() - 1.0).abs() < 1e-12);
    assert!((mr_ssim(x, x, &ScaleWeights::mr()).unwrap() - 1.0).abs() < 1e-12);
}
