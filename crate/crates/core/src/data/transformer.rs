//! Reversible tabular encoding: mode-specific normalization for continuous
//! columns and one-hot vectors for discrete ones.
//!
//! A continuous value `v` is encoded as a scalar `alpha` followed by a one-hot
//! mode indicator. The mode `m` is drawn from the fitted mixture's posterior at
//! `v` and `alpha = clip((v - mu_m) / (4 sigma_m), -1, 1)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmm::{fit_gmm, GmmModel};
use super::table::{Column, ColumnKind, Table, TableSchema, Value};
use super::DataError;
use crate::autodiff::{Span, Tensor};

pub const DEFAULT_MODES: usize = 10;

/// Encoded positions of one column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnLayout {
    Continuous { alpha: usize, modes: SpanRecord },
    Discrete { span: SpanRecord },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub len: usize,
}

impl From<SpanRecord> for Span {
    fn from(s: SpanRecord) -> Span {
        Span::new(s.start, s.len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedLayout {
    pub columns: Vec<ColumnLayout>,
    pub width: usize,
}

impl EncodedLayout {
    /// Every softmax span: mode indicators and discrete one-hots, in column order.
    pub fn softmax_spans(&self) -> Vec<Span> {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnLayout::Continuous { modes, .. } => (*modes).into(),
                ColumnLayout::Discrete { span } => (*span).into(),
            })
            .collect()
    }

    pub fn discrete_spans(&self) -> Vec<Span> {
        self.columns
            .iter()
            .filter_map(|c| match c {
                ColumnLayout::Discrete { span } => Some((*span).into()),
                _ => None,
            })
            .collect()
    }

    pub fn alpha_slots(&self) -> Vec<usize> {
        self.columns
            .iter()
            .filter_map(|c| match c {
                ColumnLayout::Continuous { alpha, .. } => Some(*alpha),
                _ => None,
            })
            .collect()
    }

    /// Sum of all slot/span widths; equals `width` for a well-formed layout.
    pub fn accounted_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnLayout::Continuous { modes, .. } => 1 + modes.len,
                ColumnLayout::Discrete { span } => span.len,
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnEncoder {
    Continuous { gmm: GmmModel, min: f64, max: f64 },
    Discrete { vocabulary: Vec<String> },
}

/// Fitted encoder for a whole table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub schema: TableSchema,
    pub encoders: Vec<ColumnEncoder>,
    pub layout: EncodedLayout,
}

/// Fits one encoder per column on observed cells only.
pub fn fit_transformer(table: &Table, modes: usize, seed: u64) -> Result<Transformer, DataError> {
    if table.n_rows() == 0 {
        return Err(DataError::Empty("cannot fit a transformer on an empty table".into()));
    }
    let mut encoders = Vec::with_capacity(table.n_cols());
    let mut layout = Vec::with_capacity(table.n_cols());
    let mut schema = table.schema.clone();
    let mut offset = 0;
    for (j, (col, cs)) in table.columns.iter().zip(schema.columns.iter_mut()).enumerate() {
        match col {
            Column::Continuous(_) => {
                let vals = col.observed_nums();
                if vals.is_empty() {
                    return Err(DataError::EntirelyMissing(cs.name.clone()));
                }
                let (gmm, _) = fit_gmm(&vals, modes, seed.wrapping_add(j as u64))?;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let k = gmm.k();
                layout.push(ColumnLayout::Continuous {
                    alpha: offset,
                    modes: SpanRecord { start: offset + 1, len: k },
                });
                offset += 1 + k;
                encoders.push(ColumnEncoder::Continuous { gmm, min, max });
            }
            Column::Discrete(_) => {
                let mut vocab: Vec<String> = col.observed_cats().into_iter().map(str::to_string).collect();
                vocab.sort();
                vocab.dedup();
                if vocab.is_empty() {
                    return Err(DataError::EntirelyMissing(cs.name.clone()));
                }
                layout.push(ColumnLayout::Discrete { span: SpanRecord { start: offset, len: vocab.len() } });
                offset += vocab.len();
                cs.vocabulary = vocab.clone();
                encoders.push(ColumnEncoder::Discrete { vocabulary: vocab });
            }
        }
    }
    Ok(Transformer { schema, encoders, layout: EncodedLayout { columns: layout, width: offset } })
}

impl Transformer {
    pub fn width(&self) -> usize {
        self.layout.width
    }

    /// Encodes one fully observed row; mode indicators are sampled from the posterior.
    pub fn transform<R: Rng>(&self, row: &[Value], rng: &mut R) -> Result<Vec<f64>, DataError> {
        if row.len() != self.encoders.len() {
            return Err(DataError::Width { expected: self.encoders.len(), found: row.len() });
        }
        let mut out = vec![0.0; self.width()];
        for (j, ((enc, lay), v)) in self.encoders.iter().zip(&self.layout.columns).zip(row).enumerate() {
            match (enc, lay, v) {
                (ColumnEncoder::Continuous { gmm, .. }, ColumnLayout::Continuous { alpha, modes }, Value::Num(x)) => {
                    let resp = gmm.responsibilities(*x);
                    let m = sample_index(&resp, rng);
                    let c = &gmm.components[m];
                    out[*alpha] = ((x - c.mean) / (4.0 * c.std)).clamp(-1.0, 1.0);
                    out[modes.start + m] = 1.0;
                }
                (ColumnEncoder::Discrete { vocabulary }, ColumnLayout::Discrete { span }, Value::Cat(s)) => {
                    let idx = vocabulary.binary_search(s).map_err(|_| DataError::UnseenCategory {
                        column: self.schema.columns[j].name.clone(),
                        value: s.clone(),
                    })?;
                    out[span.start + idx] = 1.0;
                }
                _ => {
                    return Err(DataError::Schema(format!(
                        "value kind mismatch in column `{}`",
                        self.schema.columns[j].name
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Encodes every row of a fully observed table.
    pub fn transform_table<R: Rng>(&self, table: &Table, rng: &mut R) -> Result<Tensor, DataError> {
        self.check_table(table)?;
        let mut values = Vec::with_capacity(table.n_rows() * self.width());
        for i in 0..table.n_rows() {
            let row: Vec<Value> = table
                .row(i)
                .into_iter()
                .enumerate()
                .map(|(j, v)| {
                    v.ok_or_else(|| {
                        DataError::Schema(format!("row {i}, column `{}` is missing", self.schema.columns[j].name))
                    })
                })
                .collect::<Result<_, _>>()?;
            values.extend(self.transform(&row, rng)?);
        }
        Tensor::from_vec(table.n_rows(), self.width(), values).map_err(|e| DataError::Schema(e.to_string()))
    }

    /// Decodes one encoded row: argmax mode and `alpha * 4 sigma + mu` for
    /// continuous columns, argmax category for discrete ones.
    pub fn inverse_transform(&self, encoded: &[f64]) -> Result<Vec<Value>, DataError> {
        self.decode(encoded, false)
    }

    /// Like [`Transformer::inverse_transform`], with continuous values clamped
    /// to the range seen during fitting.
    pub fn inverse_transform_clamped(&self, encoded: &[f64]) -> Result<Vec<Value>, DataError> {
        self.decode(encoded, true)
    }

    fn decode(&self, encoded: &[f64], clamp: bool) -> Result<Vec<Value>, DataError> {
        if encoded.len() != self.width() {
            return Err(DataError::Width { expected: self.width(), found: encoded.len() });
        }
        Ok(self
            .encoders
            .iter()
            .zip(&self.layout.columns)
            .map(|(enc, lay)| match (enc, lay) {
                (ColumnEncoder::Continuous { gmm, min, max }, ColumnLayout::Continuous { alpha, modes }) => {
                    let m = argmax(&encoded[modes.start..modes.start + modes.len]);
                    let c = &gmm.components[m];
                    let a = encoded[*alpha].clamp(-1.0, 1.0);
                    let v = a * 4.0 * c.std + c.mean;
                    Value::Num(if clamp { v.clamp(*min, *max) } else { v })
                }
                (ColumnEncoder::Discrete { vocabulary }, ColumnLayout::Discrete { span }) => {
                    let idx = argmax(&encoded[span.start..span.start + span.len]);
                    Value::Cat(vocabulary[idx].clone())
                }
                _ => unreachable!("encoder and layout kinds are built together"),
            })
            .collect())
    }

    /// Errors unless `table` has the same column names and kinds as the fitted schema.
    pub fn check_table(&self, table: &Table) -> Result<(), DataError> {
        let ours: Vec<(&str, ColumnKind)> = self.schema.columns.iter().map(|c| (c.name.as_str(), c.kind)).collect();
        let theirs: Vec<(&str, ColumnKind)> = table.schema.columns.iter().map(|c| (c.name.as_str(), c.kind)).collect();
        if ours != theirs {
            return Err(DataError::Schema(format!("table columns {theirs:?} do not match fitted {ours:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transformer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        serde_json::from_str(s).map_err(|e| DataError::Schema(format!("transformer json: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}
