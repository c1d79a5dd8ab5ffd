//! Filling missing cells: the trained generator plus the global-mean (GM)
//! and fixed-value (FV) baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{condition_from_row, ConditionVector};
use crate::data::{Column, DataError, Table, Value};
use crate::gan::{row_rng, GanError, GanModel};

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gan(#[from] GanError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Impugan,
    Gm,
    Fv,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Impugan => "impugan",
            Method::Gm => "gm",
            Method::Fv => "fv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "impugan" => Ok(Method::Impugan),
            "gm" => Ok(Method::Gm),
            "fv" => Ok(Method::Fv),
            other => Err(format!("unknown method `{other}` (expected impugan, gm or fv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Imputed,
    /// Imputed from an unconditional sample because the row had no observed cell.
    Unconditional,
}

impl Provenance {
    pub fn flag(self) -> char {
        match self {
            Provenance::Observed => 'O',
            Provenance::Imputed => 'I',
            Provenance::Unconditional => 'U',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    pub table: Table,
    /// Row-major provenance of every cell.
    pub provenance: Vec<Vec<Provenance>>,
    pub method: Method,
    pub seed: Option<u64>,
    /// Generated rows used as donors, one per row that had missing cells.
    pub donors: BTreeMap<usize, Vec<Value>>,
}

impl ImputationResult {
    fn new(input: &Table, method: Method, seed: Option<u64>) -> Self {
        let provenance = (0..input.n_rows())
            .map(|i| {
                (0..input.n_cols())
                    .map(|j| if input.columns[j].is_observed(i) { Provenance::Observed } else { Provenance::Imputed })
                    .collect()
            })
            .collect();
        ImputationResult { table: input.clone(), provenance, method, seed, donors: BTreeMap::new() }
    }

    pub fn imputed_count(&self) -> usize {
        self.provenance.iter().flatten().filter(|p| **p != Provenance::Observed).count()
    }

    /// Provenance flags as CSV with the table header.
    pub fn provenance_csv(&self) -> String {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        wtr.write_record(self.table.schema.names()).expect("in-memory write");
        for row in &self.provenance {
            wtr.write_record(row.iter().map(|p| p.flag().to_string())).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8 csv")
    }
}

/// Fills each incomplete row from one generator sample conditioned on the
/// row's observed discrete cells. Observed cells are never modified.
///
/// A row with no observed discrete cell feeds the generator a condition drawn
/// from the training frequencies, without enforcing it. A row with no observed
/// cell at all is marked [`Provenance::Unconditional`].
pub fn impute_impugan(model: &GanModel, table: &Table, seed: u64) -> Result<ImputationResult, ImputeError> {
    model.transformer.check_table(table)?;
    let mut result = ImputationResult::new(table, Method::Impugan, Some(seed));
    let rows: Vec<usize> = (0..table.n_rows()).filter(|&i| table.columns.iter().any(|c| !c.is_observed(i))).collect();

    let mut noise = Vec::with_capacity(rows.len());
    let mut inputs = Vec::with_capacity(rows.len());
    let mut enforced = Vec::with_capacity(rows.len());
    for &i in &rows {
        let mut rng = row_rng(seed, i);
        noise.push(model.draw_noise(&mut rng));
        let observed = table.row(i);
        let cond = condition_from_row(&observed, &model.cond_layout);
        if cond.is_empty() {
            inputs.push(model.draw_original_condition(&mut rng));
            enforced.push(ConditionVector::empty(&model.cond_layout));
        } else {
            inputs.push(cond.clone());
            enforced.push(cond);
        }
    }
    if rows.is_empty() {
        return Ok(result);
    }
    let mut act = model.generate_rows(&noise, &inputs)?;
    model.hard_apply_all(&mut act, &enforced)?;
    let generated = model.decode(&act)?;

    for (r, &i) in rows.iter().enumerate() {
        let donor: Vec<Value> = (0..table.n_cols()).map(|j| generated.get(r, j).expect("decoded rows are complete")).collect();
        let none_observed = table.columns.iter().all(|c| !c.is_observed(i));
        for j in 0..table.n_cols() {
            if !table.columns[j].is_observed(i) {
                result.table.set(i, j, Some(donor[j].clone()))?;
                if none_observed {
                    result.provenance[i][j] = Provenance::Unconditional;
                }
            }
        }
        result.donors.insert(i, donor);
    }
    Ok(result)
}

/// `m` independent completions with seeds `seed, seed + 1, ...`.
pub fn impute_impugan_multiple(model: &GanModel, table: &Table, seed: u64, m: usize) -> Result<Vec<ImputationResult>, ImputeError> {
    (0..m as u64).map(|k| impute_impugan(model, table, seed.wrapping_add(k))).collect()
}

/// Column mean for continuous columns, most frequent category for discrete
/// ones (ties go to the category that sorts first).
pub fn impute_gm(table: &Table) -> Result<ImputationResult, ImputeError> {
    let mut result = ImputationResult::new(table, Method::Gm, None);
    for (j, col) in table.columns.iter().enumerate() {
        let name = &table.schema.columns[j].name;
        let fill = match col {
            Column::Continuous(_) => {
                let obs = col.observed_nums();
                if obs.is_empty() {
                    return Err(DataError::EntirelyMissing(name.clone()).into());
                }
                Value::Num(obs.iter().sum::<f64>() / obs.len() as f64)
            }
            Column::Discrete(_) => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for c in col.observed_cats() {
                    *counts.entry(c).or_default() += 1;
                }
                let best = counts.iter().fold(None::<(&str, usize)>, |acc, (k, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                });
                let Some((mode, _)) = best else {
                    return Err(DataError::EntirelyMissing(name.clone()).into());
                };
                Value::Cat(mode.to_string())
            }
        };
        fill_column(&mut result.table, j, &fill)?;
    }
    Ok(result)
}

/// Continuous cells get `constant`; discrete cells get the first category of
/// the column vocabulary.
pub fn impute_fv(table: &Table, constant: f64) -> Result<ImputationResult, ImputeError> {
    let mut result = ImputationResult::new(table, Method::Fv, None);
    for (j, col) in table.columns.iter().enumerate() {
        let fill = match col {
            Column::Continuous(_) => Value::Num(constant),
            Column::Discrete(_) => {
                let first = table.schema.columns[j]
                    .vocabulary
                    .first()
                    .cloned()
                    .or_else(|| col.observed_cats().into_iter().min().map(str::to_string))
                    .unwrap_or_else(|| constant.to_string());
                Value::Cat(first)
            }
        };
        fill_column(&mut result.table, j, &fill)?;
    }
    Ok(result)
}

fn fill_column(table: &mut Table, j: usize, value: &Value) -> Result<(), DataError> {
    for i in 0..table.n_rows() {
        if !table.columns[j].is_observed(i) {
            table.set(i, j, Some(value.clone()))?;
        }
    }
    Ok(())
}
