//! Mask generators for the MCAR, MAR and MNAR mechanisms.
//!
//! * MCAR: every maskable cell is dropped independently with probability `rate`.
//! * MAR: cell `(i, j)` is dropped with probability proportional to
//!   `sigmoid(z_i)`, where `z_i` is the standardized value of the driver column
//!   assigned to `j`, scaled so the expected marginal rate equals `rate`.
//!   Drivers are exempt from masking, so missingness depends on observed data only.
//! * MNAR: cells in the upper half of their own column (ranked, ties broken at
//!   random) are dropped with probability `2 * rate`; the lower half is kept.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, MaskMatrix, Table, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MissingnessError {
    #[error("missingness rate {0} must lie strictly between 0 and 1")]
    Rate(f64),
    #[error("column `{0}` named in the missingness spec does not exist")]
    UnknownColumn(String),
    #[error("mask is {mask_rows}x{mask_cols} but table is {rows}x{cols}")]
    Dimensions { mask_rows: usize, mask_cols: usize, rows: usize, cols: usize },
    #[error("no column is left to mask")]
    NothingToMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "MCAR",
            Mechanism::Mar => "MAR",
            Mechanism::Mnar => "MNAR",
        })
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MCAR" => Ok(Mechanism::Mcar),
            "MAR" => Ok(Mechanism::Mar),
            "MNAR" => Ok(Mechanism::Mnar),
            other => Err(format!("unknown mechanism `{other}` (expected MCAR, MAR or MNAR)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    /// Columns that are never masked (e.g. the label).
    #[serde(default)]
    pub exempt: Vec<String>,
    /// MAR only: explicit target -> driver assignments.
    #[serde(default)]
    pub mar_drivers: BTreeMap<String, String>,
}

impl MissingnessSpec {
    pub fn new(mechanism: Mechanism, rate: f64, seed: u64) -> Self {
        MissingnessSpec { mechanism, rate, seed, exempt: Vec::new(), mar_drivers: BTreeMap::new() }
    }

    pub fn with_exempt(mut self, cols: &[&str]) -> Self {
        self.exempt = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self, table: &Table) -> Result<(), MissingnessError> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(MissingnessError::Rate(self.rate));
        }
        for name in self.exempt.iter().chain(self.mar_drivers.keys()).chain(self.mar_drivers.values()) {
            if table.schema.index_of(name).is_none() {
                return Err(MissingnessError::UnknownColumn(name.clone()));
            }
        }
        Ok(())
    }
}

/// Resolved MAR driver assignment: `(exempt columns, target -> driver)`.
pub fn mar_assignment(table: &Table, spec: &MissingnessSpec) -> Result<(BTreeSet<usize>, BTreeMap<usize, usize>), MissingnessError> {
    let idx = |n: &str| table.schema.index_of(n).ok_or_else(|| MissingnessError::UnknownColumn(n.to_string()));
    let mut exempt: BTreeSet<usize> = spec.exempt.iter().map(|n| idx(n)).collect::<Result<_, _>>()?;
    for d in spec.mar_drivers.values() {
        exempt.insert(idx(d)?);
    }
    if exempt.is_empty() {
        // first continuous column by name, else first column by name
        let mut names: Vec<(usize, &str)> = table.schema.columns.iter().enumerate().map(|(j, c)| (j, c.name.as_str())).collect();
        names.sort_by_key(|(_, n)| *n);
        let pick = names
            .iter()
            .find(|(j, _)| matches!(table.columns[*j], Column::Continuous(_)))
            .or(names.first())
            .map(|(j, _)| *j)
            .ok_or(MissingnessError::NothingToMask)?;
        exempt.insert(pick);
    }
    let mut by_name: Vec<usize> = exempt.iter().copied().collect();
    by_name.sort_by_key(|&j| table.schema.columns[j].name.clone());

    let mut drivers = BTreeMap::new();
    for j in 0..table.n_cols() {
        if exempt.contains(&j) {
            continue;
        }
        let name = &table.schema.columns[j].name;
        let driver = match spec.mar_drivers.get(name) {
            Some(d) => idx(d)?,
            None => *by_name
                .iter()
                .find(|&&e| table.schema.columns[e].name.as_str() > name.as_str())
                .unwrap_or(&by_name[0]),
        };
        drivers.insert(j, driver);
    }
    Ok((exempt, drivers))
}

/// Draws a mask for `table`. Cells that are already missing stay missing.
pub fn generate_mask(table: &Table, spec: &MissingnessSpec) -> Result<MaskMatrix, MissingnessError> {
    spec.validate(table)?;
    let (n, d) = (table.n_rows(), table.n_cols());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // drop probability for every maskable cell
    let mut prob = vec![vec![0.0; d]; n];
    let exempt: BTreeSet<usize> = match spec.mechanism {
        Mechanism::Mar => {
            let (exempt, drivers) = mar_assignment(table, spec)?;
            let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (&j, &drv) in &drivers {
                let s = cache.entry(drv).or_insert_with(|| {
                    let z = standardized(&table.columns[drv]);
                    let sig: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
                    let mean = sig.iter().sum::<f64>() / sig.len() as f64;
                    sig.into_iter().map(|x| x / mean).collect()
                });
                for i in 0..n {
                    prob[i][j] = (spec.rate * s[i]).clamp(0.0, 1.0);
                }
            }
            exempt
        }
        Mechanism::Mcar | Mechanism::Mnar => {
            let exempt: BTreeSet<usize> = spec
                .exempt
                .iter()
                .map(|e| table.schema.index_of(e).ok_or_else(|| MissingnessError::UnknownColumn(e.clone())))
                .collect::<Result<_, _>>()?;
            for j in (0..d).filter(|j| !exempt.contains(j)) {
                if spec.mechanism == Mechanism::Mcar {
                    for row in prob.iter_mut() {
                        row[j] = spec.rate;
                    }
                } else {
                    let upper = upper_half(&table.columns[j], &mut rng);
                    let p = (2.0 * spec.rate).min(1.0);
                    for (i, row) in prob.iter_mut().enumerate() {
                        row[j] = if upper[i] { p } else { 0.0 };
                    }
                }
            }
            exempt
        }
    };
    if exempt.len() == d {
        return Err(MissingnessError::NothingToMask);
    }

    let mut mask = table.mask();
    for i in 0..n {
        let draw_row = |rng: &mut ChaCha8Rng| -> Vec<bool> {
            (0..d).map(|j| !(prob[i][j] > 0.0 && rng.random::<f64>() < prob[i][j])).collect()
        };
        let mut keep = draw_row(&mut rng);
        let mut attempts = 0;
        while !(0..d).any(|j| keep[j] && mask.is_observed(i, j)) {
            attempts += 1;
            if attempts > 100 {
                let candidates: Vec<usize> = (0..d).filter(|&j| mask.is_observed(i, j)).collect();
                if let Some(&j) = candidates.choose(&mut rng) {
                    keep[j] = true;
                }
                break;
            }
            keep = draw_row(&mut rng);
        }
        for j in 0..d {
            if !keep[j] {
                mask.set(i, j, false);
            }
        }
    }
    Ok(mask)
}

/// Standardized numeric view of a column; discrete columns use their sorted
/// category index. Missing cells map to 0.
fn standardized(col: &Column) -> Vec<f64> {
    let raw: Vec<Option<f64>> = match col {
        Column::Continuous(v) => v.clone(),
        Column::Discrete(v) => {
            let vocab: BTreeSet<&str> = v.iter().flatten().map(String::as_str).collect();
            let vocab: Vec<&str> = vocab.into_iter().collect();
            v.iter()
                .map(|c| c.as_deref().map(|s| vocab.binary_search(&s).unwrap_or(0) as f64))
                .collect()
        }
    };
    let obs: Vec<f64> = raw.iter().flatten().copied().collect();
    if obs.is_empty() {
        return vec![0.0; raw.len()];
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let std = (obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / obs.len() as f64).sqrt();
    raw.iter()
        .map(|v| match v {
            Some(x) if std > 0.0 => (x - mean) / std,
            _ => 0.0,
        })
        .collect()
}

/// Marks the upper half (by value, random tie-break) of the observed cells.
fn upper_half<R: Rng>(col: &Column, rng: &mut R) -> Vec<bool> {
    let keys: Vec<Option<f64>> = standardized_keys(col);
    let mut obs: Vec<(f64, f64, usize)> = keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (k, rng.random::<f64>(), i)))
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut upper = vec![false; keys.len()];
    let half = obs.len() / 2;
    for &(_, _, i) in &obs[obs.len() - half..] {
        upper[i] = true;
    }
    upper
}

fn standardized_keys(col: &Column) -> Vec<Option<f64>> {
    match col {
        Column::Continuous(v) => v.clone(),
        Column::Discrete(v) => {
            let vocab: BTreeSet<&str> = v.iter().flatten().map(String::as_str).collect();
            let vocab: Vec<&str> = vocab.into_iter().collect();
            v.iter()
                .map(|c| c.as_deref().map(|s| vocab.binary_search(&s).unwrap_or(0) as f64))
                .collect()
        }
    }
}

/// Incomplete table plus the ground truth it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTable {
    pub incomplete: Table,
    pub truth: Table,
    pub mask: MaskMatrix,
}

impl MaskedTable {
    /// Pre-mask value of a cell.
    pub fn true_value(&self, i: usize, j: usize) -> Option<Value> {
        self.truth.get(i, j)
    }

    /// Cells missing in the incomplete table but observed in the truth.
    pub fn evaluated_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.truth.n_cols() {
            for i in 0..self.truth.n_rows() {
                if !self.mask.is_observed(i, j) && self.truth.columns[j].is_observed(i) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

pub fn apply_mask(table: &Table, mask: &MaskMatrix) -> Result<MaskedTable, MissingnessError> {
    if mask.rows() != table.n_rows() || mask.cols() != table.n_cols() {
        return Err(MissingnessError::Dimensions {
            mask_rows: mask.rows(),
            mask_cols: mask.cols(),
            rows: table.n_rows(),
            cols: table.n_cols(),
        });
    }
    let mut incomplete = table.clone();
    for j in 0..table.n_cols() {
        for i in mask.missing_rows(j) {
            incomplete.set(i, j, None).expect("clearing a cell never fails");
        }
    }
    Ok(MaskedTable { incomplete, truth: table.clone(), mask: mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, IngestOptions};

    fn numeric_table(n: usize, d: usize) -> Table {
        let mut text: String = (0..d).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
        text.push('\n');
        for i in 0..n {
            let row: Vec<String> = (0..d).map(|j| format!("{}", ((i * 7919 + j * 104_729) % 1000) as f64 / 10.0)).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        parse_csv(&text, &IngestOptions::default()).unwrap()
    }

    #[test]
    fn rate_must_be_open_interval() {
        let t = numeric_table(10, 2);
        for r in [0.0, 1.0, -0.1, 1.5] {
            let spec = MissingnessSpec::new(Mechanism::Mcar, r, 0);
            assert_eq!(generate_mask(&t, &spec), Err(MissingnessError::Rate(r)));
        }
    }

    #[test]
    fn vanishing_rate_keeps_everything() {
        let t = numeric_table(200, 5);
        for mech in [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar] {
            let m = generate_mask(&t, &MissingnessSpec::new(mech, 1e-12, 3)).unwrap();
            assert_eq!(m.missing_count(), 0, "{mech}");
        }
    }

    #[test]
    fn mcar_rate_within_binomial_band() {
        // n*d = 10,000 cells, sd = sqrt(0.3*0.7/10000) ~ 0.0046; 0.015 is > 3 sd
        let t = numeric_table(1000, 10);
        let m = generate_mask(&t, &MissingnessSpec::new(Mechanism::Mcar, 0.3, 42)).unwrap();
        assert!((m.missing_fraction() - 0.3).abs() <= 0.015, "{}", m.missing_fraction());
    }

    #[test]
    fn mnar_masks_only_upper_half() {
        // second column keeps every row observed so no resampling interferes
        let text: String = std::iter::once("v,k".to_string())
            .chain((1..=100).map(|i| format!("{i},a")))
            .collect::<Vec<_>>()
            .join("\n");
        let t = parse_csv(&text, &IngestOptions::default()).unwrap();
        let spec = MissingnessSpec::new(Mechanism::Mnar, 0.5, 9).with_exempt(&["k"]);
        let m = generate_mask(&t, &spec).unwrap();
        for i in m.missing_rows(0) {
            assert!(t.get(i, 0).unwrap().as_num().unwrap() > 50.0);
        }
        assert_eq!(m.missing_count(), 50);
    }

    #[test]
    fn unknown_driver_is_rejected() {
        let t = numeric_table(10, 3);
        let mut spec = MissingnessSpec::new(Mechanism::Mar, 0.2, 0);
        spec.mar_drivers.insert("c0".into(), "nope".into());
        assert_eq!(generate_mask(&t, &spec), Err(MissingnessError::UnknownColumn("nope".into())));
    }

    #[test]
    fn mar_drivers_are_never_masked() {
        let t = numeric_table(500, 4);
        let spec = MissingnessSpec::new(Mechanism::Mar, 0.4, 1);
        let (exempt, drivers) = mar_assignment(&t, &spec).unwrap();
        assert_eq!(exempt.iter().copied().collect::<Vec<_>>(), vec![0]);
        assert!(drivers.values().all(|d| *d == 0));
        let m = generate_mask(&t, &spec).unwrap();
        assert!(m.missing_rows(0).is_empty());
        assert!(m.missing_count() > 0);
    }

    #[test]
    fn same_seed_same_mask() {
        let t = numeric_table(300, 4);
        for mech in [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnar] {
            let spec = MissingnessSpec::new(mech, 0.3, 77);
            assert_eq!(generate_mask(&t, &spec).unwrap(), generate_mask(&t, &spec).unwrap());
        }
    }

    #[test]
    fn every_row_keeps_an_observed_cell() {
        let t = numeric_table(400, 2);
        let m = generate_mask(&t, &MissingnessSpec::new(Mechanism::Mcar, 0.9, 5)).unwrap();
        assert!((0..400).all(|i| m.row_observed_count(i) >= 1));
    }

    #[test]
    fn apply_mask_blanks_exactly_the_zeroed_cells() {
        let t = numeric_table(5, 3);
        let all = MaskMatrix::all_observed(5, 3);
        assert_eq!(apply_mask(&t, &all).unwrap().incomplete, t);

        let mut one = all.clone();
        one.set(2, 1, false);
        let masked = apply_mask(&t, &one).unwrap();
        assert_eq!(masked.incomplete.missing_count(), 1);
        assert!(masked.incomplete.get(2, 1).is_none());
        assert_eq!(masked.true_value(2, 1), t.get(2, 1));
        assert_eq!(masked.evaluated_cells(), vec![(2, 1)]);
    }

    #[test]
    fn apply_mask_checks_dimensions() {
        let t = numeric_table(5, 3);
        assert!(matches!(
            apply_mask(&t, &MaskMatrix::all_observed(4, 3)),
            Err(MissingnessError::Dimensions { .. })
        ));
    }

    #[test]
    fn ground_truth_holds_every_masked_value() {
        let t = numeric_table(200, 4);
        let m = generate_mask(&t, &MissingnessSpec::new(Mechanism::Mcar, 0.3, 8)).unwrap();
        let masked = apply_mask(&t, &m).unwrap();
        for (i, j) in masked.evaluated_cells() {
            assert!(masked.incomplete.get(i, j).is_none());
            assert_eq!(masked.true_value(i, j), t.get(i, j));
        }
    }

    #[test]
    fn mask_csv_round_trip() {
        let t = numeric_table(20, 3);
        let m = generate_mask(&t, &MissingnessSpec::new(Mechanism::Mcar, 0.3, 2)).unwrap();
        let back = MaskMatrix::from_csv(&m.to_csv(&t.schema.names())).unwrap();
        assert_eq!(back, m);
    }
}
