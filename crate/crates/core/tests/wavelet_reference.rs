//! Cross-checks the symmetric-boundary transform against coefficients
//! produced by PyWavelets (`tests/fixtures/pywt_symmetric.json`).

use serde::Deserialize;
use sentispread::wavelet::{smooth, wavedec, Boundary, WaveletFamily, WaveletSpec};

#[derive(Deserialize)]
struct Case {
    wavelet: String,
    n: usize,
    level: usize,
    approx: Vec<f64>,
    details_coarse_to_fine: Vec<Vec<f64>>,
    smoothed: Vec<f64>,
}

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

fn signal(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_pywavelets() {
    let fx: Fixture =
        serde_json::from_str(include_str!("fixtures/pywt_symmetric.json")).unwrap();
    assert_eq!(fx.cases.len(), 18);
    for c in fx.cases {
        let family: WaveletFamily = c.wavelet.parse().unwrap();
        let x = signal(c.n);
        let p = wavedec(&x, family, c.level, Boundary::Symmetric).unwrap();
        assert!(max_diff(&p.approx, &c.approx) < 1e-12, "{} n={} L={}", c.wavelet, c.n, c.level);
        for (mine, theirs) in p.details.iter().rev().zip(&c.details_coarse_to_fine) {
            assert!(max_diff(mine, theirs) < 1e-12);
        }
        let spec = WaveletSpec {
            family,
            level: c.level,
            ..Default::default()
        };
        let s = smooth(&x, &spec).unwrap().values;
        assert!(max_diff(&s, &c.smoothed) < 1e-12);
    }
}
