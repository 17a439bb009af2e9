//! Ingestion schemas: text records, soft labels, bond panels, the day
//! calendar and bond-level dataset splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of numeric bond features in a panel row.
pub const N_FEATURES: usize = 45;

/// Panel feature columns, in file order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "USDCNYC",
    "Shibor (Shanghai Interbank Offered Rate) in March",
    "Manufacturing PMI (Purchasing Managers' Index)",
    "Macroeconomic Prosperity Index: Leading Index",
    "PPI (Producer Price Index): Year-over-Year for the Current Month",
    "GDP (Gross Domestic Product): Year-over-Year for the Current Quarter",
    "CPI (Consumer Price Index): Year-over-Year for the Current Month",
    "Aggregate Financing to the Real Economy (AFRE): Year-over-Year at Period-End",
    "Yield on Government Bonds (for the Corresponding Period)",
    "SWS Primary Industry Index",
    "Trading Volume",
    "Operating Revenue",
    "Operating Costs",
    "Total Profit",
    "Current Assets",
    "Non-Current Assets",
    "Total Assets",
    "Current Liabilities",
    "Non-Current Liabilities",
    "Total Liabilities",
    "Total Shareholders' Equity",
    "Cash Flow from Operations",
    "Cash Flow from Investment",
    "Cash Flow from Finance",
    "Total Cash Flow",
    "Current Ratio",
    "Quick Ratio",
    "Super Quick Ratio",
    "Debt-to-Asset Ratio (%)",
    "Equity Ratio (%)",
    "Tangible Net Worth Debt Ratio (%)",
    "Gross Profit Margin (%)",
    "Net Profit Margin (%)",
    "Return on Assets (%)",
    "Operating Profit Margin (%)",
    "Average Return on Equity (%)",
    "Operating Cycle (Days)",
    "Inventory Turnover Ratio",
    "Accounts Receivable Turnover Ratio",
    "Current Asset Turnover Ratio",
    "Shareholders' Equity Turnover Ratio",
    "Total Asset Turnover Ratio",
    "Remaining Credit Utilization Ratio",
    "Month-over-Month Change in Credit",
    "Secured Credit Ratio",
];

/// Indices `0..9` of [`FEATURE_NAMES`] are macroeconomic and shared by all bonds.
pub const N_MACRO_FEATURES: usize = 9;

// ---------------------------------------------------------------------------
// Calendar

/// Dense inclusive range of calendar days, indexed `0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    start: NaiveDate,
    end: NaiveDate,
}

pub fn build_calendar(start: NaiveDate, end: NaiveDate) -> Result<Calendar> {
    if start > end {
        return Err(Error::InvertedCalendar { start, end });
    }
    Ok(Calendar { start, end })
}

impl Calendar {
    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    /// Number of days `K`.
    pub fn len(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        day >= self.start && day <= self.end
    }

    pub fn index(&self, day: NaiveDate) -> Result<usize> {
        if !self.contains(day) {
            return Err(Error::DateOutOfRange {
                date: day,
                start: self.start,
                end: self.end,
            });
        }
        Ok((day - self.start).num_days() as usize)
    }

    pub fn day(&self, index: usize) -> Option<NaiveDate> {
        (index < self.len()).then(|| self.start + Duration::days(index as i64))
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (0..self.len()).map(move |i| self.start + Duration::days(i as i64))
    }
}

// ---------------------------------------------------------------------------
// Texts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Micro,
    Meso,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Micro => f.write_str("micro"),
            Stream::Meso => f.write_str("meso"),
        }
    }
}

/// Probability triple over (negative, neutral, positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SoftLabel {
    pub p_neg: f64,
    pub p_neu: f64,
    pub p_pos: f64,
}

impl SoftLabel {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(p_neg: f64, p_neu: f64, p_pos: f64) -> Result<Self> {
        let p = [p_neg, p_neu, p_pos];
        if p.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "soft label components must lie in [0,1], got {p:?}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Invalid(format!(
                "soft label must sum to 1, got {sum}"
            )));
        }
        Ok(SoftLabel {
            p_neg,
            p_neu,
            p_pos,
        })
    }

    /// One-hot label for a polarity in {-1, 0, 1}.
    pub fn one_hot(polarity: i8) -> Self {
        match polarity {
            p if p < 0 => SoftLabel::new(1.0, 0.0, 0.0),
            0 => SoftLabel::new(0.0, 1.0, 0.0),
            _ => SoftLabel::new(0.0, 0.0, 1.0),
        }
        .expect("one-hot is a valid label")
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_neg, self.p_neu, self.p_pos]
    }
}

impl TryFrom<[f64; 3]> for SoftLabel {
    type Error = Error;

    fn try_from(p: [f64; 3]) -> Result<Self> {
        SoftLabel::new(p[0], p[1], p[2])
    }
}

impl From<SoftLabel> for [f64; 3] {
    fn from(l: SoftLabel) -> Self {
        l.as_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub text_id: String,
    pub date: NaiveDate,
    pub stream: Stream,
    #[serde(default)]
    pub mentioned_bonds: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<SoftLabel>,
}

impl TextRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.text_id.is_empty() {
            return Err("empty text_id".into());
        }
        match self.stream {
            Stream::Micro if self.mentioned_bonds.is_empty() => {
                Err("micro record must mention at least one bond".into())
            }
            Stream::Meso if !self.mentioned_bonds.is_empty() => {
                Err("meso record must not mention bonds".into())
            }
            _ => Ok(()),
        }
    }
}

/// Validated, immutable set of text records from one stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextCollection {
    records: Vec<TextRecord>,
    by_id: HashMap<String, usize>,
}

impl TextCollection {
    pub fn new(records: Vec<TextRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.text_id.clone(), i).is_some() {
                return Err(Error::DuplicateText(r.text_id.clone()));
            }
        }
        Ok(TextCollection { records, by_id })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TextRecord] {
        &self.records
    }

    pub fn get(&self, text_id: &str) -> Option<&TextRecord> {
        self.by_id.get(text_id).map(|&i| &self.records[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TextRecord> {
        self.records.iter()
    }
}

/// Reads a texts JSONL file. Any malformed line rejects the whole file.
///
/// When `calendar` is given, every record date must fall inside it.
pub fn ingest_texts(
    path: impl AsRef<Path>,
    stream: Stream,
    calendar: Option<&Calendar>,
) -> Result<TextCollection> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema(path, lineno, e.to_string()))?;
        if rec.stream != stream {
            return Err(Error::schema(
                path,
                lineno,
                format!("expected stream {stream}, found {}", rec.stream),
            ));
        }
        rec.check().map_err(|m| Error::schema(path, lineno, m))?;
        if let Some(cal) = calendar {
            cal.index(rec.date)
                .map_err(|e| Error::schema(path, lineno, e.to_string()))?;
        }
        if !seen.insert(rec.text_id.clone()) {
            return Err(Error::schema(
                path,
                lineno,
                Error::DuplicateText(rec.text_id).to_string(),
            ));
        }
        records.push(rec);
    }
    TextCollection::new(records)
}

pub fn write_texts(path: impl AsRef<Path>, records: &[TextRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Bond panels

/// Daily feature rows and credit-spread target for one bond.
#[derive(Debug, Clone, PartialEq)]
pub struct BondPanel {
    pub bond_id: String,
    pub industry_ids: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// Row-major `dates.len() x N_FEATURES`.
    pub features: Vec<[f64; N_FEATURES]>,
    pub credit_spread: Vec<f64>,
}

impl BondPanel {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.dates.len() || self.credit_spread.len() != self.dates.len()
        {
            return Err(Error::Invalid(format!(
                "bond {}: row count mismatch",
                self.bond_id
            )));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "bond {}: dates must be strictly increasing",
                self.bond_id
            )));
        }
        if let Some(k) = self.credit_spread.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bond {} credit_spread on {}",
                self.bond_id, self.dates[k]
            )));
        }
        Ok(())
    }
}

/// Reads `bond_id,date,<features>,credit_spread` plus a `bond_id,industry`
/// membership file. Bonds come back in order of first appearance.
pub fn load_panels(
    panel_csv: impl AsRef<Path>,
    industries_csv: impl AsRef<Path>,
) -> Result<Vec<BondPanel>> {
    let panel_csv = panel_csv.as_ref();
    let mut rdr = csv::Reader::from_path(panel_csv)?;
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("bond_id")
        .chain(std::iter::once("date"))
        .chain(FEATURE_NAMES.iter().copied())
        .chain(std::iter::once("credit_spread"))
        .collect();
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::schema(
            panel_csv,
            1,
            format!(
                "panel header must be bond_id,date,<{N_FEATURES} features>,credit_spread ({} columns)",
                expected.len()
            ),
        ));
    }

    let mut order: Vec<String> = Vec::new();
    let mut panels: HashMap<String, BondPanel> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 2;
        let rec = rec?;
        let bond = rec[0].to_string();
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| Error::schema(panel_csv, lineno, format!("bad date: {e}")))?;
        let mut row = [0.0; N_FEATURES];
        for (j, v) in row.iter_mut().enumerate() {
            *v = rec[j + 2].trim().parse().map_err(|_| {
                Error::schema(panel_csv, lineno, format!("bad number in {}", FEATURE_NAMES[j]))
            })?;
        }
        let spread: f64 = rec[N_FEATURES + 2]
            .trim()
            .parse()
            .map_err(|_| Error::schema(panel_csv, lineno, "bad credit_spread"))?;
        let p = panels.entry(bond.clone()).or_insert_with(|| {
            order.push(bond.clone());
            BondPanel {
                bond_id: bond.clone(),
                industry_ids: Vec::new(),
                dates: Vec::new(),
                features: Vec::new(),
                credit_spread: Vec::new(),
            }
        });
        p.dates.push(date);
        p.features.push(row);
        p.credit_spread.push(spread);
    }

    let mut rdr = csv::Reader::from_path(industries_csv.as_ref())?;
    for rec in rdr.records() {
        let rec = rec?;
        if let Some(p) = panels.get_mut(&rec[0]) {
            p.industry_ids.push(rec[1].to_string());
        }
    }

    let out: Vec<BondPanel> = order
        .into_iter()
        .map(|b| panels.remove(&b).expect("registered"))
        .collect();
    for p in &out {
        p.validate()?;
    }
    Ok(out)
}

pub fn write_panels(
    panel_csv: impl AsRef<Path>,
    industries_csv: impl AsRef<Path>,
    panels: &[BondPanel],
) -> Result<()> {
    let mut w = csv::Writer::from_path(panel_csv)?;
    let mut header = vec!["bond_id".to_string(), "date".to_string()];
    header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    header.push("credit_spread".into());
    w.write_record(&header)?;
    for p in panels {
        for k in 0..p.len() {
            let mut row = Vec::with_capacity(N_FEATURES + 3);
            row.push(p.bond_id.clone());
            row.push(p.dates[k].to_string());
            row.extend(p.features[k].iter().map(|v| format!("{v}")));
            row.push(format!("{}", p.credit_spread[k]));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(industries_csv)?;
    w.write_record(["bond_id", "industry"])?;
    for p in panels {
        for ind in &p.industry_ids {
            w.write_record([p.bond_id.as_str(), ind.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, bond_id: &str) -> Option<Split> {
        self.assignment.get(bond_id).copied()
    }

    pub fn members(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(b, _)| b.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.count(Split::Train),
            self.count(Split::Valid),
            self.count(Split::Test),
        )
    }
}

/// Split sizes for `n` bonds: valid and test take the floor of their share,
/// train takes everything left.
pub fn split_sizes(n: usize, ratios: (u32, u32, u32)) -> (usize, usize, usize) {
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    let valid = n * ratios.1 as usize / total;
    let test = n * ratios.2 as usize / total;
    (n - valid - test, valid, test)
}

/// Shuffles bonds with a seeded generator and partitions them by `ratios`.
pub fn split_bonds(
    bond_ids: &[String],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let parts = (ratios.0 + ratios.1 + ratios.2) as usize;
    if bond_ids.len() < parts {
        return Err(Error::Invalid(format!(
            "{} bonds cannot fill a {}:{}:{} split",
            bond_ids.len(),
            ratios.0,
            ratios.1,
            ratios.2
        )));
    }
    let unique: HashSet<&String> = bond_ids.iter().collect();
    if unique.len() != bond_ids.len() {
        return Err(Error::Invalid("duplicate bond ids".into()));
    }
    let mut ids = bond_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let (n_train, n_valid, _) = split_sizes(ids.len(), ratios);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            (b, s)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}

pub fn write_splits(path: impl AsRef<Path>, splits: &SplitAssignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bond_id", "split"])?;
    for (b, s) in &splits.assignment {
        w.write_record([b.as_str(), &s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_splits(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut assignment = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let split: Split = rec[1]
            .parse()
            .map_err(|e: Error| Error::schema(path, i + 2, e.to_string()))?;
        if assignment.insert(rec[0].to_string(), split).is_some() {
            return Err(Error::schema(path, i + 2, format!("duplicate bond {}", &rec[0])));
        }
    }
    Ok(SplitAssignment { assignment })
}
