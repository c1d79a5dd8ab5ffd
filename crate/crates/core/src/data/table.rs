use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Sorted category vocabulary; empty for continuous columns.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSchema>,
    /// Cell strings that denote a missing value. The first one is used when writing.
    pub missing_tokens: Vec<String>,
}

impl TableSchema {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn missing_token(&self) -> &str {
        self.missing_tokens.first().map_or("", String::as_str)
    }

    pub fn is_missing_token(&self, s: &str) -> bool {
        self.missing_tokens.iter().any(|t| t == s)
    }
}

pub fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "?".to_string()]
}

/// A single observed cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Num(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Continuous(Vec<Option<f64>>),
    Discrete(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Continuous(v) => v.len(),
            Column::Discrete(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Continuous(_) => ColumnKind::Continuous,
            Column::Discrete(_) => ColumnKind::Discrete,
        }
    }

    pub fn get(&self, i: usize) -> Option<Value> {
        match self {
            Column::Continuous(v) => v[i].map(Value::Num),
            Column::Discrete(v) => v[i].clone().map(Value::Cat),
        }
    }

    pub fn is_observed(&self, i: usize) -> bool {
        match self {
            Column::Continuous(v) => v[i].is_some(),
            Column::Discrete(v) => v[i].is_some(),
        }
    }

    /// Observed numeric values (continuous columns only).
    pub fn observed_nums(&self) -> Vec<f64> {
        match self {
            Column::Continuous(v) => v.iter().flatten().copied().collect(),
            Column::Discrete(_) => Vec::new(),
        }
    }

    pub fn observed_cats(&self) -> Vec<&str> {
        match self {
            Column::Discrete(v) => v.iter().flatten().map(String::as_str).collect(),
            Column::Continuous(_) => Vec::new(),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Continuous(v) => Column::Continuous(rows.iter().map(|&i| v[i]).collect()),
            Column::Discrete(v) => Column::Discrete(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Column-major table of possibly-missing cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: TableSchema,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn new(schema: TableSchema, columns: Vec<Column>) -> Result<Self, DataError> {
        if schema.columns.len() != columns.len() {
            return Err(DataError::Schema(format!(
                "{} schema columns for {} data columns",
                schema.columns.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, Column::len);
        for (c, s) in columns.iter().zip(&schema.columns) {
            if c.len() != n {
                return Err(DataError::Schema(format!("column `{}` has {} rows, expected {n}", s.name, c.len())));
            }
            if c.kind() != s.kind {
                return Err(DataError::Schema(format!("column `{}` data does not match declared kind", s.name)));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &schema.columns {
            if !seen.insert(&s.name) {
                return Err(DataError::Schema(format!("duplicate column name `{}`", s.name)));
            }
        }
        Ok(Table { schema, columns })
    }

    /// Builds a table from row-major cells; each cell must match its column kind.
    pub fn from_rows(schema: TableSchema, rows: &[Vec<Option<Value>>]) -> Result<Self, DataError> {
        let mut columns: Vec<Column> = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Continuous => Column::Continuous(Vec::with_capacity(rows.len())),
                ColumnKind::Discrete => Column::Discrete(Vec::with_capacity(rows.len())),
            })
            .collect();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(DataError::Width { expected: columns.len(), found: row.len() });
            }
            for (j, (col, cell)) in columns.iter_mut().zip(row).enumerate() {
                match (col, cell) {
                    (Column::Continuous(v), None) => v.push(None),
                    (Column::Discrete(v), None) => v.push(None),
                    (Column::Continuous(v), Some(Value::Num(x))) => v.push(Some(*x)),
                    (Column::Discrete(v), Some(Value::Cat(s))) => v.push(Some(s.clone())),
                    _ => {
                        return Err(DataError::Schema(format!(
                            "row {i}: value kind does not match column `{}`",
                            schema.columns[j].name
                        )))
                    }
                }
            }
        }
        Table::new(schema, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Value> {
        self.columns[j].get(i)
    }

    pub fn set(&mut self, i: usize, j: usize, value: Option<Value>) -> Result<(), DataError> {
        match (&mut self.columns[j], value) {
            (Column::Continuous(v), None) => v[i] = None,
            (Column::Discrete(v), None) => v[i] = None,
            (Column::Continuous(v), Some(Value::Num(x))) => v[i] = Some(x),
            (Column::Discrete(v), Some(Value::Cat(s))) => v[i] = Some(s),
            _ => {
                return Err(DataError::Schema(format!(
                    "value kind does not match column `{}`",
                    self.schema.columns[j].name
                )))
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> Vec<Option<Value>> {
        self.columns.iter().map(|c| c.get(i)).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<&Column> {
        self.schema.index_of(name).map(|j| &self.columns[j])
    }

    /// Observed/missing indicator of every cell.
    pub fn mask(&self) -> MaskMatrix {
        let (n, d) = (self.n_rows(), self.n_cols());
        let mut m = MaskMatrix::all_observed(n, d);
        for (j, c) in self.columns.iter().enumerate() {
            for i in 0..n {
                if !c.is_observed(i) {
                    m.set(i, j, false);
                }
            }
        }
        m
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
        }
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.columns.iter().all(|c| c.is_observed(i)))
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.mask().missing_count()
    }

    /// Rebuilds each discrete vocabulary from the observed cells.
    pub fn refresh_vocabularies(&mut self) {
        for (s, c) in self.schema.columns.iter_mut().zip(&self.columns) {
            if let Column::Discrete(v) = c {
                let set: BTreeSet<&str> = v.iter().flatten().map(String::as_str).collect();
                s.vocabulary = set.into_iter().map(str::to_string).collect();
            }
        }
    }
}

/// Binary indicator aligned with a table: `true` = observed (M_ij = 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl MaskMatrix {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        MaskMatrix { rows, cols, observed: vec![true; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, DataError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DataError::Ragged { line: 0, expected: cols, found: 0 });
        }
        Ok(MaskMatrix { rows: rows.len(), cols, observed: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.observed[i * self.cols + j] = observed;
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.observed.is_empty() {
            0.0
        } else {
            self.missing_count() as f64 / self.observed.len() as f64
        }
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        self.observed[i * self.cols..(i + 1) * self.cols].iter().filter(|o| **o).count()
    }

    /// Missing cells of column `j`.
    pub fn missing_rows(&self, j: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| !self.is_observed(i, j)).collect()
    }

    /// `0/1` CSV with the given header.
    pub fn to_csv(&self, header: &[&str]) -> String {
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|j| if self.is_observed(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
            let row = rec
                .iter()
                .map(|s| match s.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(DataError::Csv(format!("line {}: mask cell `{other}` is not 0/1", line + 2))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}
