//! Daubechies discrete wavelet transform and the smoothing operator built on it.
//!
//! The symmetric boundary follows the half-sample reflection convention
//! (`... x1 x0 | x0 x1 ... xn | xn xn-1 ...`) with coefficient counts
//! `floor((n + F - 1) / 2)` per level, so decompositions line up with the
//! usual `wavedec`/`waverec` tooling. Periodization is also available and
//! is the orthogonal variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DB4_DEC_LO: [f64; 8] = [
    -0.010597401785069032,
    0.0328830116668852,
    0.030841381835560764,
    -0.18703481171909309,
    -0.027983769416859854,
    0.6308807679298589,
    0.7148465705529157,
    0.2303778133088965,
];

const DB2_DEC_LO: [f64; 4] = [
    -0.12940952255126037,
    0.2241438680420134,
    0.8365163037378079,
    0.48296291314453416,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WaveletFamily {
    /// 8-tap Daubechies with 4 vanishing moments.
    #[default]
    #[serde(rename = "db4", alias = "db4_8tap")]
    Db4,
    /// 4-tap Daubechies with 2 vanishing moments (sometimes called "D4").
    #[serde(rename = "db2", alias = "d4")]
    Db2,
}

impl std::str::FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "db4" | "db4_8tap" => Ok(WaveletFamily::Db4),
            "db2" | "d4" => Ok(WaveletFamily::Db2),
            other => Err(Error::Config(format!("unknown wavelet family {other:?}"))),
        }
    }
}

/// Analysis and synthesis filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavelet {
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

impl Wavelet {
    pub fn new(family: WaveletFamily) -> Self {
        let dec_lo: Vec<f64> = match family {
            WaveletFamily::Db4 => DB4_DEC_LO.to_vec(),
            WaveletFamily::Db2 => DB2_DEC_LO.to_vec(),
        };
        let f = dec_lo.len();
        let dec_hi: Vec<f64> = (0..f)
            .map(|k| {
                let s = if k % 2 == 0 { -1.0 } else { 1.0 };
                s * dec_lo[f - 1 - k]
            })
            .collect();
        let rec_lo = dec_lo.iter().rev().copied().collect();
        let rec_hi = dec_hi.iter().rev().copied().collect();
        Wavelet {
            dec_lo,
            dec_hi,
            rec_lo,
            rec_hi,
        }
    }

    pub fn filter_len(&self) -> usize {
        self.dec_lo.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Symmetric,
    Periodization,
}

/// Index into a half-sample symmetric extension of a length-`n` signal.
fn sym_index(t: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = t.rem_euclid(p) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Single-level analysis step. Returns `(approx, detail)`.
pub fn dwt(x: &[f64], w: &Wavelet, boundary: Boundary) -> (Vec<f64>, Vec<f64>) {
    let f = w.filter_len();
    match boundary {
        Boundary::Symmetric => {
            let n = x.len();
            let n_out = (n + f - 1) / 2;
            let mut ca = vec![0.0; n_out];
            let mut cd = vec![0.0; n_out];
            for i in 0..n_out {
                let center = 2 * i as isize + 1;
                let (mut a, mut d) = (0.0, 0.0);
                for j in 0..f {
                    let v = x[sym_index(center - j as isize, n)];
                    a += w.dec_lo[j] * v;
                    d += w.dec_hi[j] * v;
                }
                ca[i] = a;
                cd[i] = d;
            }
            (ca, cd)
        }
        Boundary::Periodization => {
            let padded = pad_even(x);
            let n = padded.len();
            let n_out = n / 2;
            let mut ca = vec![0.0; n_out];
            let mut cd = vec![0.0; n_out];
            for i in 0..n_out {
                let (mut a, mut d) = (0.0, 0.0);
                for j in 0..f {
                    let v = padded[(2 * i as isize + 1 - j as isize).rem_euclid(n as isize) as usize];
                    a += w.dec_lo[j] * v;
                    d += w.dec_hi[j] * v;
                }
                ca[i] = a;
                cd[i] = d;
            }
            (ca, cd)
        }
    }
}

fn pad_even(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    if v.len() % 2 == 1 {
        v.push(*x.last().expect("nonempty"));
    }
    v
}

/// Single-level synthesis step, inverse of [`dwt`].
///
/// Symmetric mode yields `2 * len - F + 2` samples; periodization yields
/// `2 * len`. Callers trim to the length they decomposed.
pub fn idwt(ca: &[f64], cd: &[f64], w: &Wavelet, boundary: Boundary) -> Result<Vec<f64>> {
    if ca.len() != cd.len() {
        return Err(Error::DimMismatch {
            expected: ca.len(),
            got: cd.len(),
        });
    }
    let f = w.filter_len();
    let n = ca.len();
    match boundary {
        Boundary::Symmetric => {
            if n < f / 2 {
                return Err(Error::TooShort { len: n, min: f / 2 });
            }
            let half = f / 2;
            let mut out = vec![0.0; 2 * n + 2 - f];
            for (o, i) in (half - 1..n).enumerate() {
                let (mut even, mut odd) = (0.0, 0.0);
                for j in 0..half {
                    let (a, d) = (ca[i - j], cd[i - j]);
                    even += w.rec_lo[2 * j] * a + w.rec_hi[2 * j] * d;
                    odd += w.rec_lo[2 * j + 1] * a + w.rec_hi[2 * j + 1] * d;
                }
                out[2 * o] = even;
                out[2 * o + 1] = odd;
            }
            Ok(out)
        }
        Boundary::Periodization => {
            // Transpose of the circular analysis operator.
            let len = 2 * n;
            let mut out = vec![0.0; len];
            for i in 0..n {
                for j in 0..f {
                    let t = (2 * i as isize + 1 - j as isize).rem_euclid(len as isize) as usize;
                    out[t] += w.dec_lo[j] * ca[i] + w.dec_hi[j] * cd[i];
                }
            }
            Ok(out)
        }
    }
}

/// Multilevel decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub approx: Vec<f64>,
    /// Detail bands, finest (level 1) first.
    pub details: Vec<Vec<f64>>,
    /// Input length at each level, level 1 first.
    lengths: Vec<usize>,
    family: WaveletFamily,
    boundary: Boundary,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn signal_len(&self) -> usize {
        self.lengths[0]
    }

    pub fn n_coeffs(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn min_len(family: WaveletFamily) -> usize {
    Wavelet::new(family).filter_len()
}

pub fn wavedec(
    x: &[f64],
    family: WaveletFamily,
    level: usize,
    boundary: Boundary,
) -> Result<Pyramid> {
    if level == 0 {
        return Err(Error::Config("wavelet level must be at least 1".into()));
    }
    let w = Wavelet::new(family);
    if x.len() < w.filter_len() {
        return Err(Error::TooShort {
            len: x.len(),
            min: w.filter_len(),
        });
    }
    let mut a = x.to_vec();
    let mut details = Vec::with_capacity(level);
    let mut lengths = Vec::with_capacity(level);
    for _ in 0..level {
        lengths.push(a.len());
        let (ca, cd) = dwt(&a, &w, boundary);
        details.push(cd);
        a = ca;
    }
    Ok(Pyramid {
        approx: a,
        details,
        lengths,
        family,
        boundary,
    })
}

/// Reconstructs the signal, trimmed to the decomposed length.
pub fn waverec(p: &Pyramid) -> Result<Vec<f64>> {
    let w = Wavelet::new(p.family);
    let mut a = p.approx.clone();
    for lvl in (0..p.levels()).rev() {
        let d = &p.details[lvl];
        if a.len() == d.len() + 1 {
            a.pop();
        }
        a = idwt(&a, d, &w, p.boundary)?;
        a.truncate(p.lengths[lvl]);
    }
    Ok(a)
}

// Smoothing ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMode {
    /// Decompose the whole series at once.
    #[default]
    FullSample,
    /// Output `k` only sees samples `..=k`.
    Causal,
}

impl std::str::FromStr for SmoothMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_sample" => Ok(SmoothMode::FullSample),
            "causal" => Ok(SmoothMode::Causal),
            other => Err(Error::Config(format!("unknown smoothing mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// Zero every detail band and keep the approximation.
    #[default]
    ZeroDetails,
    /// Soft-threshold details at the universal threshold.
    SoftUniversal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveletSpec {
    pub family: WaveletFamily,
    pub level: usize,
    pub mode: SmoothMode,
    /// Trailing window length in causal mode.
    pub window: usize,
    pub boundary: Boundary,
    pub shrinkage: Shrinkage,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        WaveletSpec {
            family: WaveletFamily::Db4,
            level: 6,
            mode: SmoothMode::FullSample,
            window: 128,
            boundary: Boundary::Symmetric,
            shrinkage: Shrinkage::ZeroDetails,
        }
    }
}

impl WaveletSpec {
    pub fn validate(&self) -> Result<()> {
        if self.level == 0 {
            return Err(Error::Config("wavelet.level must be at least 1".into()));
        }
        if self.mode == SmoothMode::Causal && self.window < min_len(self.family) {
            return Err(Error::Config(format!(
                "wavelet.window must be at least {}",
                min_len(self.family)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn shrink(p: &mut Pyramid, how: Shrinkage) {
    match how {
        Shrinkage::ZeroDetails => {
            for d in &mut p.details {
                d.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Shrinkage::SoftUniversal => {
            let mut finest: Vec<f64> = p.details[0].iter().map(|v| v.abs()).collect();
            let sigma = median(&mut finest) / 0.6745;
            let lambda = sigma * (2.0 * (p.signal_len() as f64).ln()).sqrt();
            for d in &mut p.details {
                for v in d.iter_mut() {
                    *v = v.signum() * (v.abs() - lambda).max(0.0);
                }
            }
        }
    }
}

fn smooth_block(x: &[f64], spec: &WaveletSpec) -> Result<Vec<f64>> {
    let mut p = wavedec(x, spec.family, spec.level, spec.boundary)?;
    shrink(&mut p, spec.shrinkage);
    waverec(&p)
}

/// Wavelet smoothing of a daily series.
pub fn smooth(series: &[f64], spec: &WaveletSpec) -> Result<Smoothed> {
    spec.validate()?;
    let min = min_len(spec.family);
    match spec.mode {
        SmoothMode::FullSample => Ok(Smoothed {
            values: smooth_block(series, spec)?,
            warnings: Vec::new(),
        }),
        SmoothMode::Causal => {
            let mut values = Vec::with_capacity(series.len());
            let mut passthrough = 0;
            for k in 0..series.len() {
                let len = (k + 1).min(spec.window);
                if len < min {
                    values.push(series[k]);
                    passthrough += 1;
                    continue;
                }
                let block = smooth_block(&series[k + 1 - len..=k], spec)?;
                values.push(*block.last().expect("nonempty block"));
            }
            let mut warnings = Vec::new();
            if passthrough > 0 {
                let msg = format!(
                    "causal smoothing: first {passthrough} sample(s) have fewer than {min} points of history; passed through unsmoothed"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Ok(Smoothed { values, warnings })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn filter_bank_is_orthonormal() {
        for fam in [WaveletFamily::Db4, WaveletFamily::Db2] {
            let w = Wavelet::new(fam);
            let s: f64 = w.dec_lo.iter().sum();
            assert!((s - 2f64.sqrt()).abs() < 1e-12);
            let e: f64 = w.dec_lo.iter().map(|v| v * v).sum();
            assert!((e - 1.0).abs() < 1e-12);
            assert!(w.dec_hi.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_both_boundaries() {
        for boundary in [Boundary::Symmetric, Boundary::Periodization] {
            for n in [8, 9, 64, 77, 256] {
                let x = randn(n, n as u64);
                for level in 1..=6 {
                    let p = wavedec(&x, WaveletFamily::Db4, level, boundary).unwrap();
                    let y = waverec(&p).unwrap();
                    let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert_eq!(y.len(), n);
                    assert!(err < 1e-10, "{boundary:?} n={n} level={level} err={err}");
                }
            }
        }
    }

    #[test]
    fn coefficient_counts() {
        let p = wavedec(&randn(100, 1), WaveletFamily::Db4, 3, Boundary::Symmetric).unwrap();
        // 100 -> 53 -> 30 -> 18
        let lens: Vec<usize> = p.details.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![53, 30, 18]);
        assert_eq!(p.approx.len(), 18);
        assert_eq!(p.n_coeffs(), 53 + 30 + 18 + 18);
    }

    #[test]
    fn too_short_and_bad_level() {
        assert!(matches!(
            wavedec(&[1.0; 5], WaveletFamily::Db4, 1, Boundary::Symmetric),
            Err(Error::TooShort { .. })
        ));
        assert!(wavedec(&[1.0; 16], WaveletFamily::Db4, 0, Boundary::Symmetric).is_err());
    }

    #[test]
    fn constants_are_invariant() {
        let x = vec![0.75; 200];
        for mode in [SmoothMode::FullSample, SmoothMode::Causal] {
            let spec = WaveletSpec {
                mode,
                ..Default::default()
            };
            let y = smooth(&x, &spec).unwrap().values;
            assert!(y.iter().all(|v| (v - 0.75).abs() < 1e-10), "{mode:?}");
            let z = smooth(&[0.0; 200], &spec).unwrap().values;
            assert!(z.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn causal_ignores_the_future() {
        let mut x = randn(300, 5);
        let spec = WaveletSpec {
            mode: SmoothMode::Causal,
            ..Default::default()
        };
        let clean = smooth(&x, &spec).unwrap();
        for v in &mut x[150..] {
            *v = f64::NAN;
        }
        let poisoned = smooth(&x, &spec).unwrap();
        for k in 0..150 {
            assert!(poisoned.values[k].is_finite());
            assert_eq!(poisoned.values[k], clean.values[k]);
        }
        assert_eq!(clean.warnings.len(), 1);
    }

    #[test]
    fn full_sample_too_short_errors() {
        assert!(smooth(&[1.0, 2.0, 3.0], &WaveletSpec::default()).is_err());
    }

    #[test]
    fn soft_threshold_between_identity_and_zeroing() {
        let x: Vec<f64> = (0..256)
            .map(|i| (i as f64 / 20.0).sin())
            .zip(randn(256, 9))
            .map(|(s, n)| s + 0.2 * n)
            .collect();
        let soft = WaveletSpec {
            shrinkage: Shrinkage::SoftUniversal,
            ..Default::default()
        };
        let y = smooth(&x, &soft).unwrap().values;
        let z = smooth(&x, &WaveletSpec::default()).unwrap().values;
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        assert!(dist(&y, &x) > 0.0);
        assert!(dist(&y, &x) < dist(&z, &x));
    }
}
