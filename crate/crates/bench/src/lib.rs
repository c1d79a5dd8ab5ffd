//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabimpute::data::{Column, ColumnKind, ColumnSchema, Table, TableSchema};

/// `n` rows of two continuous and two discrete columns.
pub fn mixed_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = ["a", "b", "c", "d"];
    let mut c1 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..cats.len());
        c1.push(Some(k as f64 * 3.0 + rng.random::<f64>()));
        c2.push(Some(rng.random::<f64>() * 100.0));
        d1.push(Some(cats[k].to_string()));
        d2.push(Some(if rng.random::<f64>() < 0.3 { "x" } else { "y" }.to_string()));
    }
    let col = |name: &str, kind: ColumnKind| ColumnSchema { name: name.into(), kind, vocabulary: vec![] };
    let schema = TableSchema {
        columns: vec![
            col("c1", ColumnKind::Continuous),
            col("c2", ColumnKind::Continuous),
            col("d1", ColumnKind::Discrete),
            col("d2", ColumnKind::Discrete),
        ],
        missing_tokens: vec!["?".into()],
    };
    let mut t = Table::new(schema, vec![Column::Continuous(c1), Column::Continuous(c2), Column::Discrete(d1), Column::Discrete(d2)]).expect("fixture table");
    t.refresh_vocabularies();
    t
}

/// Uniform draws in `[0, 1)`.
pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}
