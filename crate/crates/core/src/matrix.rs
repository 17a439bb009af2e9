use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::Calendar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixAxis {
    /// Bonds x days, firm-level.
    Alpha,
    /// Industries x days.
    Beta,
    /// Bonds x days, industry-derived.
    Meso,
    /// Bonds x days, combined.
    Composite,
}

/// Dense entity x day matrix of sentiment values.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentMatrix {
    pub axis: MatrixAxis,
    entities: Vec<String>,
    index: HashMap<String, usize>,
    calendar: Calendar,
    data: Vec<f64>,
}

impl SentimentMatrix {
    pub fn zeros(axis: MatrixAxis, entities: Vec<String>, calendar: Calendar) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if index.insert(e.clone(), i).is_some() {
                return Err(Error::DuplicateName(e.clone()));
            }
        }
        let data = vec![0.0; entities.len() * calendar.len()];
        Ok(SentimentMatrix {
            axis,
            entities,
            index,
            calendar,
            data,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn entity_index(&self, entity: &str) -> Option<usize> {
        self.index.get(entity).copied()
    }

    pub fn get(&self, entity: usize, day: usize) -> f64 {
        self.data[entity * self.n_days() + day]
    }

    pub fn set(&mut self, entity: usize, day: usize, v: f64) {
        let k = self.n_days();
        self.data[entity * k + day] = v;
    }

    pub fn add(&mut self, entity: usize, day: usize, v: f64) {
        let k = self.n_days();
        self.data[entity * k + day] += v;
    }

    pub fn row(&self, entity: usize) -> &[f64] {
        let k = self.n_days();
        &self.data[entity * k..(entity + 1) * k]
    }

    pub fn row_mut(&mut self, entity: usize) -> &mut [f64] {
        let k = self.n_days();
        &mut self.data[entity * k..(entity + 1) * k]
    }

    pub fn row_by_name(&self, entity: &str) -> Option<&[f64]> {
        self.entity_index(entity).map(|i| self.row(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Long-format CSV: `entity,date,value`, one row per cell.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["entity", "date", "value"])?;
        for (i, e) in self.entities.iter().enumerate() {
            for (k, day) in self.calendar.days().enumerate() {
                w.write_record([e.as_str(), &day.to_string(), &format!("{}", self.get(i, k))])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a long-format CSV; entities keep first-appearance order and
    /// missing cells are zero.
    pub fn read_csv(path: impl AsRef<Path>, axis: MatrixAxis, calendar: Calendar) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let mut cells = Vec::new();
        let mut entities: Vec<String> = Vec::new();
        let mut seen = HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let day = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
                .map_err(|e| Error::schema(path, i + 2, e.to_string()))?;
            let v: f64 = rec[2]
                .parse()
                .map_err(|_| Error::schema(path, i + 2, "bad value"))?;
            let e = seen.entry(rec[0].to_string()).or_insert_with(|| {
                entities.push(rec[0].to_string());
                entities.len() - 1
            });
            cells.push((*e, calendar.index(day)?, v));
        }
        let mut m = SentimentMatrix::zeros(axis, entities, calendar)?;
        for (e, k, v) in cells {
            m.set(e, k, v);
        }
        Ok(m)
    }
}
