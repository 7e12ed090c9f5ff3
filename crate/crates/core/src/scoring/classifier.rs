//! Class-probability models fed by externally computed logits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScoringError;

/// `softmax(logits / t)`, stabilized by subtracting the max logit.
pub fn temperature_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub id: String,
    pub label: usize,
    pub logits: Vec<f64>,
}

/// Per-example logits plus a temperature; probabilities are produced on
/// demand by [`temperature_softmax`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilityModel {
    rows: Vec<LogitRow>,
    classes: usize,
    temperature: f64,
}

impl ClassProbabilityModel {
    pub fn new(rows: Vec<LogitRow>, temperature: f64) -> Result<Self, ScoringError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(ScoringError::InvalidParameter(format!("temperature {temperature}")));
        }
        let classes = rows.first().map(|r| r.logits.len()).unwrap_or(0);
        for row in &rows {
            if row.logits.len() != classes {
                return Err(ScoringError::Format(format!(
                    "row {} has {} logits, expected {classes}",
                    row.id,
                    row.logits.len()
                )));
            }
            if row.label >= classes {
                return Err(ScoringError::InvalidClass {
                    class: row.label,
                    classes,
                });
            }
            if row.logits.iter().any(|l| !l.is_finite()) {
                return Err(ScoringError::Format(format!("row {} has non-finite logits", row.id)));
            }
        }
        Ok(Self {
            rows,
            classes,
            temperature,
        })
    }

    /// Reads `id,label,logit_0,...,logit_{C-1}` with a header row.
    pub fn from_csv_reader<R: std::io::Read>(
        reader: R,
        temperature: f64,
    ) -> Result<Self, ScoringError> {
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut rows = Vec::new();
        for record in csv.records() {
            let record = record?;
            if record.len() < 3 {
                return Err(ScoringError::Format("need id, label and at least one logit".into()));
            }
            let parse = |i: usize| -> Result<f64, ScoringError> {
                record[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| ScoringError::Format(format!("column {i}: {e}")))
            };
            let label = record[1]
                .trim()
                .parse::<usize>()
                .map_err(|e| ScoringError::Format(format!("label: {e}")))?;
            let logits = (2..record.len()).map(parse).collect::<Result<Vec<_>, _>>()?;
            rows.push(LogitRow {
                id: record[0].trim().to_string(),
                label,
                logits,
            });
        }
        Self::new(rows, temperature)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, temperature: f64) -> Result<Self, ScoringError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, temperature)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn rows(&self) -> &[LogitRow] {
        &self.rows
    }

    pub fn probabilities(&self, index: usize) -> Vec<f64> {
        temperature_softmax(&self.rows[index].logits, self.temperature)
    }

    /// Class with the largest logit for the given row.
    pub fn predicted_label(&self, index: usize) -> usize {
        let logits = &self.rows[index].logits;
        (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap_or(0)
    }
}
