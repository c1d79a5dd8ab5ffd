//! Multi-hot condition vectors, training-by-sampling, and hard conditioning.
//!
//! The condition vector concatenates one span per discrete column, in table
//! order, each as wide as the column's vocabulary. A selected column carries a
//! one-hot at the requested category; unselected columns stay all-zero.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Span, Tensor};
use crate::data::{ColumnLayout, Table, Transformer, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is continuous and cannot be conditioned on")]
    NotDiscrete(String),
    #[error("category `{value}` is not in the vocabulary of `{column}`")]
    UnknownCategory { column: String, value: String },
    #[error("condition width {found} does not match layout width {expected}")]
    Width { expected: usize, found: usize },
    #[error("malformed condition `{0}` (expected column=category)")]
    Syntax(String),
}

/// One discrete column as seen by the conditioning machinery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondColumn {
    pub name: String,
    /// Index of the column in the table.
    pub column: usize,
    pub vocabulary: Vec<String>,
    /// Offset of this column's span inside the condition vector.
    pub offset: usize,
    /// Start of the matching one-hot span inside the encoded row.
    pub encoded_start: usize,
}

impl CondColumn {
    pub fn cond_span(&self) -> Span {
        Span::new(self.offset, self.vocabulary.len())
    }

    pub fn encoded_span(&self) -> Span {
        Span::new(self.encoded_start, self.vocabulary.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondLayout {
    pub columns: Vec<CondColumn>,
    pub width: usize,
}

impl CondLayout {
    pub fn from_transformer(tf: &Transformer) -> Self {
        let mut columns = Vec::new();
        let mut offset = 0;
        for (j, lay) in tf.layout.columns.iter().enumerate() {
            if let ColumnLayout::Discrete { span } = lay {
                let vocabulary = tf.schema.columns[j].vocabulary.clone();
                debug_assert_eq!(vocabulary.len(), span.len);
                columns.push(CondColumn {
                    name: tf.schema.columns[j].name.clone(),
                    column: j,
                    vocabulary,
                    offset,
                    encoded_start: span.start,
                });
                offset += span.len;
            }
        }
        CondLayout { columns, width: offset }
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn cond_spans(&self) -> Vec<Span> {
        self.columns.iter().map(CondColumn::cond_span).collect()
    }
}

/// Multi-hot condition plus the selection it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f64>,
    /// (position in the layout, category index), sorted by position.
    pub selections: Vec<(usize, usize)>,
}

impl ConditionVector {
    pub fn empty(layout: &CondLayout) -> Self {
        ConditionVector { values: vec![0.0; layout.width], selections: Vec::new() }
    }

    pub fn from_indices(layout: &CondLayout, picks: &[(usize, usize)]) -> Self {
        let mut values = vec![0.0; layout.width];
        let mut selections: Vec<(usize, usize)> = picks.to_vec();
        selections.sort_unstable();
        selections.dedup_by_key(|p| p.0);
        for &(k, q) in &selections {
            values[layout.columns[k].offset + q] = 1.0;
        }
        ConditionVector { values, selections }
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    /// Selections as `(column name, category)` pairs.
    pub fn describe(&self, layout: &CondLayout) -> Vec<(String, String)> {
        self.selections
            .iter()
            .map(|&(k, q)| (layout.columns[k].name.clone(), layout.columns[k].vocabulary[q].clone()))
            .collect()
    }
}

/// Builds the multi-hot vector for `selections` (column name -> category).
pub fn build_condition(selections: &BTreeMap<String, String>, layout: &CondLayout, tf: &Transformer) -> Result<ConditionVector, ConditionError> {
    let mut picks = Vec::with_capacity(selections.len());
    for (col, cat) in selections {
        let Some(k) = layout.position(col) else {
            return Err(if tf.schema.index_of(col).is_some() {
                ConditionError::NotDiscrete(col.clone())
            } else {
                ConditionError::UnknownColumn(col.clone())
            });
        };
        let q = layout.columns[k]
            .vocabulary
            .iter()
            .position(|v| v == cat)
            .ok_or_else(|| ConditionError::UnknownCategory { column: col.clone(), value: cat.clone() })?;
        picks.push((k, q));
    }
    Ok(ConditionVector::from_indices(layout, &picks))
}

/// Parses `column=category` strings as given on the command line.
pub fn parse_condition_args(args: &[String]) -> Result<BTreeMap<String, String>, ConditionError> {
    args.iter()
        .map(|a| {
            let (k, v) = a.split_once('=').ok_or_else(|| ConditionError::Syntax(a.clone()))?;
            if k.trim().is_empty() {
                return Err(ConditionError::Syntax(a.clone()));
            }
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Condition built from every observed discrete cell of a row.
pub fn condition_from_row(row: &[Option<Value>], layout: &CondLayout) -> ConditionVector {
    let picks: Vec<(usize, usize)> = layout
        .columns
        .iter()
        .enumerate()
        .filter_map(|(k, c)| match &row[c.column] {
            Some(Value::Cat(s)) => c.vocabulary.iter().position(|v| v == s).map(|q| (k, q)),
            _ => None,
        })
        .collect();
    ConditionVector::from_indices(layout, &picks)
}

/// Per-column category frequencies and row indices over the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSampler {
    /// `rows[k][q]`: training rows whose discrete column `k` holds category `q`.
    pub rows: Vec<Vec<Vec<usize>>>,
    /// `log(1 + frequency)` weights, normalized per column.
    pub log_weights: Vec<Vec<f64>>,
    /// Raw category frequencies, normalized per column.
    pub raw_weights: Vec<Vec<f64>>,
    pub n_rows: usize,
}

/// A batch of training conditions and the real rows matched to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBatch {
    pub conditions: Vec<ConditionVector>,
    pub real_rows: Vec<usize>,
}

impl ConditionBatch {
    pub fn tensor(&self, layout: &CondLayout) -> Tensor {
        let mut data = Vec::with_capacity(self.conditions.len() * layout.width);
        for c in &self.conditions {
            data.extend_from_slice(&c.values);
        }
        Tensor::from_vec(self.conditions.len(), layout.width, data).expect("condition rows share the layout width")
    }
}

impl TrainingSampler {
    /// Indexes the rows of `table` by category. Rows missing a discrete cell
    /// are left out of that column's index.
    pub fn new(table: &Table, layout: &CondLayout) -> Self {
        let mut rows = Vec::with_capacity(layout.columns.len());
        let mut log_weights = Vec::with_capacity(layout.columns.len());
        let mut raw_weights = Vec::with_capacity(layout.columns.len());
        for c in &layout.columns {
            let lookup: BTreeMap<&str, usize> = c.vocabulary.iter().enumerate().map(|(q, v)| (v.as_str(), q)).collect();
            let mut per_cat = vec![Vec::new(); c.vocabulary.len()];
            for i in 0..table.n_rows() {
                if let Some(Value::Cat(s)) = table.get(i, c.column) {
                    if let Some(&q) = lookup.get(s.as_str()) {
                        per_cat[q].push(i);
                    }
                }
            }
            let logs: Vec<f64> = per_cat.iter().map(|r| (1.0 + r.len() as f64).ln()).collect();
            let raws: Vec<f64> = per_cat.iter().map(|r| r.len() as f64).collect();
            log_weights.push(normalize(&logs));
            raw_weights.push(normalize(&raws));
            rows.push(per_cat);
        }
        TrainingSampler { rows, log_weights, raw_weights, n_rows: table.n_rows() }
    }

    pub fn has_conditions(&self) -> bool {
        self.rows.iter().any(|c| c.iter().any(|r| !r.is_empty()))
    }

    fn usable_columns(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&k| self.rows[k].iter().any(|r| !r.is_empty())).collect()
    }

    /// Training-by-sampling: column uniform, category by log-frequency, real
    /// row uniform among rows holding that category. Without discrete
    /// columns every condition is empty and rows are drawn uniformly.
    pub fn sample<R: Rng>(&self, layout: &CondLayout, batch: usize, rng: &mut R) -> ConditionBatch {
        let usable = self.usable_columns();
        let mut conditions = Vec::with_capacity(batch);
        let mut real_rows = Vec::with_capacity(batch);
        for _ in 0..batch {
            if usable.is_empty() {
                conditions.push(ConditionVector::empty(layout));
                real_rows.push(rng.random_range(0..self.n_rows));
                continue;
            }
            let k = usable[rng.random_range(0..usable.len())];
            let q = sample_weighted(&self.log_weights[k], rng);
            let pool = &self.rows[k][q];
            real_rows.push(pool[rng.random_range(0..pool.len())]);
            conditions.push(ConditionVector::from_indices(layout, &[(k, q)]));
        }
        ConditionBatch { conditions, real_rows }
    }

    /// Condition for unconditional generation: one column uniform, category by
    /// raw training frequency.
    pub fn sample_original<R: Rng>(&self, layout: &CondLayout, rng: &mut R) -> ConditionVector {
        let usable = self.usable_columns();
        if usable.is_empty() {
            return ConditionVector::empty(layout);
        }
        let k = usable[rng.random_range(0..usable.len())];
        let q = sample_weighted(&self.raw_weights[k], rng);
        ConditionVector::from_indices(layout, &[(k, q)])
    }
}

/// With probability `p_multi`, widens each condition with further discrete
/// cells of its matched real row; each extra column is kept with a
/// probability drawn once per row from U(0, 1).
pub fn extend_conditions<R: Rng>(batch: &mut ConditionBatch, table: &Table, layout: &CondLayout, p_multi: f64, rng: &mut R) {
    if layout.columns.len() < 2 || p_multi <= 0.0 {
        return;
    }
    for (cond, &row) in batch.conditions.iter_mut().zip(&batch.real_rows) {
        if cond.is_empty() || rng.random::<f64>() >= p_multi {
            continue;
        }
        let keep: f64 = rng.random();
        let mut picks = cond.selections.clone();
        for (k, c) in layout.columns.iter().enumerate() {
            if picks.iter().any(|p| p.0 == k) {
                continue;
            }
            let u: f64 = rng.random();
            if u >= keep {
                continue;
            }
            if let Some(Value::Cat(s)) = table.get(row, c.column) {
                if let Some(q) = c.vocabulary.iter().position(|v| *v == s) {
                    picks.push((k, q));
                }
            }
        }
        *cond = ConditionVector::from_indices(layout, &picks);
    }
}

/// Overwrites every conditioned span of an activated encoded row with the
/// exact one-hot of the requested category. Other entries are untouched.
pub fn hard_apply(row: &mut [f64], cond: &ConditionVector, layout: &CondLayout) -> Result<(), ConditionError> {
    if cond.values.len() != layout.width {
        return Err(ConditionError::Width { expected: layout.width, found: cond.values.len() });
    }
    for &(k, q) in &cond.selections {
        let span = layout.columns[k].encoded_span();
        if span.end() > row.len() {
            return Err(ConditionError::Width { expected: span.end(), found: row.len() });
        }
        for (i, slot) in row[span.start..span.end()].iter_mut().enumerate() {
            *slot = if i == q { 1.0 } else { 0.0 };
        }
    }
    Ok(())
}

fn normalize(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return vec![0.0; w.len()];
    }
    w.iter().map(|x| x / total).collect()
}

fn sample_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_transformer, parse_csv, IngestOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(text: &str) -> (Table, Transformer, CondLayout) {
        let t = parse_csv(text, &IngestOptions::default()).unwrap();
        let tf = fit_transformer(&t, 3, 0).unwrap();
        let layout = CondLayout::from_transformer(&tf);
        (t, tf, layout)
    }

    fn sel(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    const TOY: &str = "x,c,d\n1.0,a,u\n2.0,b,v\n3.0,c,u\n4.0,a,w\n";

    #[test]
    fn empty_selection_is_zero_vector() {
        let (_, tf, layout) = fixture(TOY);
        let c = build_condition(&BTreeMap::new(), &layout, &tf).unwrap();
        assert_eq!(c.values, vec![0.0; 6]);
        assert!(c.is_empty());
    }

    #[test]
    fn single_selection_sets_its_span() {
        let (_, tf, layout) = fixture(TOY);
        let c = build_condition(&sel(&[("c", "c")]), &layout, &tf).unwrap();
        assert_eq!(&c.values[0..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&c.values[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_selections_set_two_bits() {
        let (_, tf, layout) = fixture(TOY);
        for a in ["a", "b", "c"] {
            for b in ["u", "v", "w"] {
                let c = build_condition(&sel(&[("c", a), ("d", b)]), &layout, &tf).unwrap();
                assert_eq!(c.values.iter().filter(|v| **v == 1.0).count(), 2);
                assert_eq!(c.values.iter().sum::<f64>(), 2.0);
            }
        }
    }

    #[test]
    fn bad_selections_are_rejected() {
        let (_, tf, layout) = fixture(TOY);
        assert_eq!(build_condition(&sel(&[("zz", "a")]), &layout, &tf), Err(ConditionError::UnknownColumn("zz".into())));
        assert_eq!(build_condition(&sel(&[("x", "a")]), &layout, &tf), Err(ConditionError::NotDiscrete("x".into())));
        assert!(matches!(
            build_condition(&sel(&[("c", "q")]), &layout, &tf),
            Err(ConditionError::UnknownCategory { .. })
        ));
    }

    #[test]
    fn parses_cli_conditions() {
        let m = parse_condition_args(&["sex=Female".into(), "race = White".into()]).unwrap();
        assert_eq!(m, sel(&[("sex", "Female"), ("race", "White")]));
        assert!(parse_condition_args(&["oops".into()]).is_err());
    }

    #[test]
    fn single_category_column_draws_from_whole_table() {
        let (t, _, layout) = fixture("x,c\n1,a\n2,a\n3,a\n");
        let sampler = TrainingSampler::new(&t, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sampler.sample(&layout, 300, &mut rng);
        assert!(batch.conditions.iter().all(|c| c.values == vec![1.0]));
        for i in 0..3 {
            assert!(batch.real_rows.contains(&i));
        }
    }

    #[test]
    fn matched_rows_hold_the_sampled_category() {
        let (t, _, layout) = fixture(TOY);
        let sampler = TrainingSampler::new(&t, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sampler.sample(&layout, 500, &mut rng);
        for (c, &r) in batch.conditions.iter().zip(&batch.real_rows) {
            for (col, cat) in c.describe(&layout) {
                let j = t.schema.index_of(&col).unwrap();
                assert_eq!(t.get(r, j), Some(Value::Cat(cat)));
            }
        }
    }

    #[test]
    fn every_row_indexed_once_per_column() {
        let (t, _, layout) = fixture(TOY);
        let sampler = TrainingSampler::new(&t, &layout);
        for per_cat in &sampler.rows {
            let mut all: Vec<usize> = per_cat.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..t.n_rows()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn log_frequency_ratio() {
        // frequencies 9 and 99 -> weights ln 10 : ln 100 = 1 : 2
        let mut text = String::from("c,x\n");
        for i in 0..108 {
            text.push_str(if i < 9 { "rare," } else { "common," });
            text.push_str(&format!("{i}\n"));
        }
        let (t, _, layout) = fixture(&text);
        let sampler = TrainingSampler::new(&t, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sampler.sample(&layout, 10_000, &mut rng);
        let q_rare = layout.columns[0].vocabulary.iter().position(|v| v == "rare").unwrap();
        let rare = batch.conditions.iter().filter(|c| c.selections[0].1 == q_rare).count() as f64;
        let share = rare / 10_000.0;
        // expected 1/3, binomial sd ~ 0.0047
        assert!((share - 1.0 / 3.0).abs() < 0.02, "{share}");
    }

    #[test]
    fn log_sampling_has_higher_entropy_than_raw() {
        let mut text = String::from("c\n");
        for i in 0..1000 {
            text.push_str(match i % 100 {
                0 => "x\n",
                1..=9 => "y\n",
                _ => "z\n",
            });
        }
        let (t, _, layout) = fixture(&text);
        let s = TrainingSampler::new(&t, &layout);
        let h = |w: &[f64]| -w.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        assert!(h(&s.log_weights[0]) >= h(&s.raw_weights[0]));
    }

    #[test]
    fn hard_apply_paper_example() {
        let (_, tf, layout) = fixture("c\na\nb\nc\n");
        let cond = build_condition(&sel(&[("c", "a")]), &layout, &tf).unwrap();
        let mut row = vec![0.2, 0.5, 0.3];
        hard_apply(&mut row, &cond, &layout).unwrap();
        assert_eq!(row, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_apply_with_empty_condition_is_identity() {
        let (_, tf, layout) = fixture(TOY);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f64> = (0..tf.width()).map(|_| rng.random()).collect();
        let mut out = row.clone();
        hard_apply(&mut out, &ConditionVector::empty(&layout), &layout).unwrap();
        assert_eq!(out, row);
    }

    #[test]
    fn hard_apply_is_span_local() {
        let (_, tf, layout) = fixture(TOY);
        let cond = build_condition(&sel(&[("c", "b"), ("d", "w")]), &layout, &tf).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..tf.width()).map(|_| rng.random()).collect();
        let mut out = row.clone();
        hard_apply(&mut out, &cond, &layout).unwrap();
        let touched: Vec<Span> = layout.columns.iter().map(CondColumn::encoded_span).collect();
        for i in 0..row.len() {
            if !touched.iter().any(|s| i >= s.start && i < s.end()) {
                assert_eq!(out[i].to_bits(), row[i].to_bits());
            }
        }
        let decoded = tf.inverse_transform(&out).unwrap();
        assert_eq!(decoded[1], Value::Cat("b".into()));
        assert_eq!(decoded[2], Value::Cat("w".into()));
    }

    #[test]
    fn row_condition_uses_observed_discrete_cells() {
        let (t, _, layout) = fixture(TOY);
        let mut row = t.row(1);
        row[2] = None;
        let c = condition_from_row(&row, &layout);
        assert_eq!(c.describe(&layout), vec![("c".to_string(), "b".to_string())]);
    }

    #[test]
    fn extended_conditions_stay_consistent_with_real_rows() {
        let (t, _, layout) = fixture(TOY);
        let sampler = TrainingSampler::new(&t, &layout);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut batch = sampler.sample(&layout, 400, &mut rng);
        extend_conditions(&mut batch, &t, &layout, 1.0, &mut rng);
        assert!(batch.conditions.iter().any(|c| c.selections.len() == 2));
        for (c, &r) in batch.conditions.iter().zip(&batch.real_rows) {
            for (col, cat) in c.describe(&layout) {
                assert_eq!(t.get(r, t.schema.index_of(&col).unwrap()), Some(Value::Cat(cat)));
            }
        }
    }
}
