//! Per-bond composite sentiment: firm-level plus industry-level series,
//! then wavelet smoothing.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::Calendar;
use crate::error::{Error, Result};
use crate::matrix::SentimentMatrix;
use crate::wavelet::{smooth, WaveletSpec};

/// Elementwise sum of two equal-length series.
pub fn aggregate(alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != beta.len() {
        return Err(Error::DimMismatch {
            expected: alpha.len(),
            got: beta.len(),
        });
    }
    Ok(alpha.iter().zip(beta).map(|(a, b)| a + b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSeries {
    pub bond_id: String,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub spec: WaveletSpec,
}

impl CompositeSeries {
    pub fn from_raw(bond_id: impl Into<String>, raw: Vec<f64>, spec: &WaveletSpec) -> Result<Self> {
        let bond_id = bond_id.into();
        let s = smooth(&raw, spec)?;
        for w in &s.warnings {
            log::warn!("{bond_id}: {w}");
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("smoothed series for {bond_id}")));
        }
        Ok(CompositeSeries {
            bond_id,
            raw,
            smoothed: s.values,
            spec: *spec,
        })
    }
}

fn check_calendars(a: &SentimentMatrix, b: &SentimentMatrix) -> Result<()> {
    if a.calendar() != b.calendar() {
        return Err(Error::Invalid(format!(
            "calendar mismatch: {}..{} vs {}..{}",
            a.calendar().start(),
            a.calendar().end(),
            b.calendar().start(),
            b.calendar().end()
        )));
    }
    Ok(())
}

/// Composite series for each bond in `bonds`. `meso` holds per-bond
/// industry averages; a bond absent from it contributes zeros.
pub fn build_composite(
    alpha: &SentimentMatrix,
    meso: &SentimentMatrix,
    bonds: &[String],
    spec: &WaveletSpec,
) -> Result<BTreeMap<String, CompositeSeries>> {
    check_calendars(alpha, meso)?;
    let zeros = vec![0.0; alpha.n_days()];
    let mut out = BTreeMap::new();
    for b in bonds {
        let a = alpha.row_by_name(b).ok_or_else(|| Error::UnknownBond(b.clone()))?;
        let m = meso.row_by_name(b).unwrap_or(&zeros);
        out.insert(b.clone(), CompositeSeries::from_raw(b.clone(), aggregate(a, m)?, spec)?);
    }
    Ok(out)
}

pub fn write_composite_csv(
    path: impl AsRef<Path>,
    series: &BTreeMap<String, CompositeSeries>,
    calendar: &Calendar,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bond_id", "date", "raw", "smoothed"])?;
    for s in series.values() {
        for (k, day) in calendar.days().enumerate() {
            w.write_record([
                s.bond_id.as_str(),
                &day.to_string(),
                &s.raw[k].to_string(),
                &s.smoothed[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a composite CSV back; `spec` is attached to every series since the
/// file does not carry it.
pub fn read_composite_csv(
    path: impl AsRef<Path>,
    calendar: &Calendar,
    spec: &WaveletSpec,
) -> Result<BTreeMap<String, CompositeSeries>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let k = calendar.len();
    let mut out: BTreeMap<String, CompositeSeries> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(Error::schema(path, line, "expected bond_id,date,raw,smoothed"));
        }
        let day = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| Error::schema(path, line, e.to_string()))?;
        let idx = calendar.index(day)?;
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::schema(path, line, format!("bad number {s:?}")))
        };
        let (raw, sm) = (parse(&rec[2])?, parse(&rec[3])?);
        let e = out.entry(rec[0].to_string()).or_insert_with(|| CompositeSeries {
            bond_id: rec[0].to_string(),
            raw: vec![0.0; k],
            smoothed: vec![0.0; k],
            spec: *spec,
        });
        e.raw[idx] = raw;
        e.smoothed[idx] = sm;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_calendar;
    use crate::matrix::MatrixAxis;
    use crate::wavelet::SmoothMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cal(n: i64) -> Calendar {
        let s = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        build_calendar(s, s + chrono::Duration::days(n - 1)).unwrap()
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[0.5], &[-0.5]).unwrap(), vec![0.0]);
        assert_eq!(aggregate(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(aggregate(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let s = aggregate(&a, &b).unwrap();
        for i in 0..100 {
            assert_eq!(s[i], a[i] + b[i]);
        }
    }

    fn matrices(k: i64, seed: u64) -> (SentimentMatrix, SentimentMatrix) {
        let c = cal(k);
        let bonds = vec!["A".to_string(), "Z".to_string()];
        let mut a = SentimentMatrix::zeros(MatrixAxis::Alpha, bonds.clone(), c).unwrap();
        let mut m = SentimentMatrix::zeros(MatrixAxis::Meso, bonds, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..c.len() {
            a.set(0, k, rng.gen_range(-1.0..1.0));
            m.set(0, k, rng.gen_range(-2.0..2.0));
        }
        (a, m)
    }

    #[test]
    fn composition_matches_manual_pipeline() {
        let (a, m) = matrices(256, 4);
        let spec = WaveletSpec::default();
        let out = build_composite(&a, &m, &["A".into(), "Z".into()], &spec).unwrap();
        let manual = smooth(&aggregate(a.row(0), m.row(0)).unwrap(), &spec).unwrap();
        assert_eq!(out["A"].smoothed, manual.values);
        assert!(out["Z"].raw.iter().chain(&out["Z"].smoothed).all(|v| *v == 0.0));
        assert!(matches!(
            build_composite(&a, &m, &["Q".into()], &spec),
            Err(Error::UnknownBond(_))
        ));
    }

    #[test]
    fn mode_flip_only_changes_smoothed() {
        let (a, m) = matrices(300, 5);
        let full = WaveletSpec::default();
        let causal = WaveletSpec {
            mode: SmoothMode::Causal,
            ..Default::default()
        };
        let x = build_composite(&a, &m, &["A".into()], &full).unwrap();
        let y = build_composite(&a, &m, &["A".into()], &causal).unwrap();
        assert_eq!(x["A"].raw, y["A"].raw);
        assert_ne!(x["A"].smoothed, y["A"].smoothed);
    }

    #[test]
    fn calendar_mismatch_rejected() {
        let (a, _) = matrices(100, 1);
        let (_, m) = matrices(101, 1);
        assert!(build_composite(&a, &m, &["A".into()], &WaveletSpec::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (a, m) = matrices(80, 2);
        let spec = WaveletSpec::default();
        let out = build_composite(&a, &m, &["A".into(), "Z".into()], &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_composite_csv(&p, &out, a.calendar()).unwrap();
        let back = read_composite_csv(&p, a.calendar(), &spec).unwrap();
        assert_eq!(back, out);
    }
}
