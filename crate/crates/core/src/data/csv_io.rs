use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::table::{default_missing_tokens, Column, ColumnKind, ColumnSchema, Table, TableSchema};
use super::DataError;

/// Share of observed cells that must parse as numbers for a column to be continuous.
pub const NUMERIC_SHARE: f64 = 0.99;

/// Optional overrides applied during ingestion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Column kinds that bypass inference.
    #[serde(default)]
    pub kinds: BTreeMap<String, ColumnKind>,
    /// Missing-cell tokens; defaults to empty cell and `?`.
    #[serde(default)]
    pub missing_tokens: Option<Vec<String>>,
}

pub fn ingest_csv(path: &Path, options: &IngestOptions) -> Result<Table, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text, options)
}

pub fn parse_csv(text: &str, options: &IngestOptions) -> Result<Table, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(DataError::Empty("no header row".into()));
    }
    let d = header.len();
    let missing_tokens = options.missing_tokens.clone().unwrap_or_else(default_missing_tokens);

    let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); d];
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() != d {
            return Err(DataError::Ragged { line: idx + 2, expected: d, found: rec.len() });
        }
        for (j, cell) in rec.iter().enumerate() {
            let missing = missing_tokens.iter().any(|t| t == cell);
            raw[j].push((!missing).then(|| cell.to_string()));
        }
    }
    if raw[0].is_empty() {
        return Err(DataError::Empty("no data rows".into()));
    }

    let mut schema_cols = Vec::with_capacity(d);
    let mut columns = Vec::with_capacity(d);
    for (name, cells) in header.into_iter().zip(raw) {
        let kind = match options.kinds.get(&name) {
            Some(k) => *k,
            None => infer_kind(&cells),
        };
        let (col, vocab) = match kind {
            ColumnKind::Continuous => {
                let mut dropped = 0usize;
                let vals = cells
                    .iter()
                    .map(|c| {
                        c.as_ref().and_then(|s| match s.parse::<f64>() {
                            Ok(v) if v.is_finite() => Some(v),
                            _ => {
                                dropped += 1;
                                None
                            }
                        })
                    })
                    .collect();
                if dropped > 0 {
                    log::warn!("column `{name}`: {dropped} non-numeric cells treated as missing");
                }
                (Column::Continuous(vals), Vec::new())
            }
            ColumnKind::Discrete => {
                let vocab: BTreeSet<&str> = cells.iter().flatten().map(String::as_str).collect();
                let vocab = vocab.into_iter().map(str::to_string).collect();
                (Column::Discrete(cells), vocab)
            }
        };
        schema_cols.push(ColumnSchema { name, kind, vocabulary: vocab });
        columns.push(col);
    }
    Table::new(TableSchema { columns: schema_cols, missing_tokens }, columns)
}

fn infer_kind(cells: &[Option<String>]) -> ColumnKind {
    let observed: Vec<&String> = cells.iter().flatten().collect();
    if observed.is_empty() {
        return ColumnKind::Continuous;
    }
    let numeric = observed
        .iter()
        .filter(|s| s.parse::<f64>().is_ok_and(f64::is_finite))
        .count();
    if numeric as f64 >= NUMERIC_SHARE * observed.len() as f64 {
        ColumnKind::Continuous
    } else {
        ColumnKind::Discrete
    }
}

/// RFC-4180 CSV; missing cells are written as the schema's first missing token.
pub fn to_csv_string(table: &Table) -> String {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    wtr.write_record(table.schema.names()).expect("in-memory write");
    let token = table.schema.missing_token();
    for i in 0..table.n_rows() {
        let rec: Vec<String> = table
            .columns
            .iter()
            .map(|c| c.get(i).map_or_else(|| token.to_string(), |v| v.to_string()))
            .collect();
        wtr.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8 csv")
}

pub fn write_csv(table: &Table, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_csv_string(table)).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

/// Re-reads `text` using the column kinds of `schema`, then restores its vocabularies.
pub fn parse_csv_with_schema(text: &str, schema: &TableSchema) -> Result<Table, DataError> {
    let options = IngestOptions {
        kinds: schema.columns.iter().map(|c| (c.name.clone(), c.kind)).collect(),
        missing_tokens: Some(schema.missing_tokens.clone()),
    };
    let mut t = parse_csv(text, &options)?;
    if t.schema.names() != schema.names() {
        return Err(DataError::Schema(format!(
            "columns {:?} do not match expected {:?}",
            t.schema.names(),
            schema.names()
        )));
    }
    t.schema = schema.clone();
    Ok(t)
}
