//! Tables, CSV ingestion, and the reversible encoder used by the generator.

pub mod csv_io;
pub mod gmm;
pub mod table;
pub mod transformer;

pub use csv_io::{ingest_csv, parse_csv, parse_csv_with_schema, to_csv_string, write_csv, IngestOptions};
pub use gmm::{fit_gmm, EmTrace, GmmComponent, GmmModel};
pub use table::{Column, ColumnKind, ColumnSchema, MaskMatrix, Table, TableSchema, Value};
pub use transformer::{fit_transformer, ColumnEncoder, ColumnLayout, EncodedLayout, SpanRecord, Transformer};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("io: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("empty table: {0}")]
    Empty(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("column `{0}` has no observed cells")]
    EntirelyMissing(String),
    #[error("category `{value}` was not seen in column `{column}` during fitting")]
    UnseenCategory { column: String, value: String },
    #[error("encoded width mismatch: expected {expected}, found {found}")]
    Width { expected: usize, found: usize },
    #[error("gmm: {0}")]
    Gmm(String),
}
