//! Metric battery comparing an imputed table against its ground truth.
//!
//! Cell-level and distribution metrics use the masked cells only. Continuous
//! values are min-max normalized by the ground-truth column range first.
//! Pairwise dependence metrics (chi-squared, mutual information, Pearson)
//! default to the rows where both cells of the pair were masked; see
//! [`PairScope`].

pub mod downstream;
pub mod metrics;
pub mod report;

pub use downstream::{downstream_accuracy, ClassifierKind, DownstreamConfig, Preprocessor};
pub use metrics::{
    chi2_normalized, contingency, emd_1d, jsd_continuous, jsd_discrete, jsd_from_counts, ks_statistic, mutual_information, pearson, rmse_mae,
    QuantileBins,
};
pub use report::{reports_to_csv, reports_to_json, EvaluationReport, MetricValue, METRIC_ORDER};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::{Column, ColumnKind, MaskMatrix, Table, Value};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("label: {0}")]
    Label(String),
    #[error("training data holds a single class")]
    SingleClass,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Rows used by the pairwise dependence metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScope {
    /// Rows where both columns of the pair were masked.
    #[default]
    MaskedRows,
    /// Every row of both tables.
    WholeTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub jsd_bins: usize,
    pub mi_bins: usize,
    pub pair_scope: PairScope,
    pub classifiers: Vec<ClassifierKind>,
    pub downstream: DownstreamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            jsd_bins: 20,
            mi_bins: 10,
            pair_scope: PairScope::MaskedRows,
            classifiers: vec![ClassifierKind::LinearSvm, ClassifierKind::Mlp],
            downstream: DownstreamConfig::default(),
        }
    }
}

/// Real test split and label used for downstream accuracy.
pub struct DownstreamTask<'a> {
    pub test: &'a Table,
    pub label: &'a str,
    pub seed: u64,
}

fn check_dims(truth: &Table, imputed: &Table, mask: &MaskMatrix) -> Result<(), EvalError> {
    let names = |t: &Table| t.schema.names().into_iter().map(str::to_string).collect::<Vec<_>>();
    if truth.n_rows() != imputed.n_rows() || names(truth) != names(imputed) || mask.rows() != truth.n_rows() || mask.cols() != truth.n_cols() {
        return Err(EvalError::Dimensions(format!(
            "truth {}x{}, imputed {}x{}, mask {}x{}",
            truth.n_rows(),
            truth.n_cols(),
            imputed.n_rows(),
            imputed.n_cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    Ok(())
}

fn evaluated_rows(truth: &Table, mask: &MaskMatrix, j: usize) -> Vec<usize> {
    mask.missing_rows(j).into_iter().filter(|&i| truth.columns[j].is_observed(i)).collect()
}

struct Range {
    lo: f64,
    span: f64,
}

impl Range {
    fn of(col: &Column) -> Self {
        let obs = col.observed_nums();
        let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Range { lo: if lo.is_finite() { lo } else { 0.0 }, span }
    }

    fn norm(&self, v: f64) -> f64 {
        (v - self.lo) / self.span
    }
}

fn num(t: &Table, i: usize, j: usize) -> Option<f64> {
    t.get(i, j).and_then(|v| v.as_num())
}

fn cat(t: &Table, i: usize, j: usize) -> Option<String> {
    t.get(i, j).map(|v| match v {
        Value::Cat(s) => s,
        Value::Num(x) => x.to_string(),
    })
}

/// The eight imputation-quality metrics, in [`METRIC_ORDER`] order.
pub fn imputation_metrics(truth: &Table, imputed: &Table, mask: &MaskMatrix, cfg: &EvalConfig) -> Result<Vec<MetricValue>, EvalError> {
    check_dims(truth, imputed, mask)?;
    let d = truth.n_cols();
    let kinds: Vec<ColumnKind> = truth.schema.columns.iter().map(|c| c.kind).collect();
    let ranges: Vec<Option<Range>> = truth
        .columns
        .iter()
        .map(|c| matches!(c, Column::Continuous(_)).then(|| Range::of(c)))
        .collect();

    // cell-level and per-column distribution metrics
    let (mut t_all, mut x_all) = (Vec::new(), Vec::new());
    let (mut ks, mut emd, mut jsd) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..d {
        let rows = evaluated_rows(truth, mask, j);
        if rows.is_empty() {
            continue;
        }
        match kinds[j] {
            ColumnKind::Continuous => {
                let r = ranges[j].as_ref().expect("continuous range");
                let mut tv = Vec::with_capacity(rows.len());
                let mut xv = Vec::with_capacity(rows.len());
                for &i in &rows {
                    if let (Some(t), Some(x)) = (num(truth, i, j), num(imputed, i, j)) {
                        tv.push(r.norm(t));
                        xv.push(r.norm(x));
                    }
                }
                if tv.is_empty() {
                    continue;
                }
                ks.push(Some(ks_statistic(&xv, &tv)?));
                emd.push(Some(emd_1d(&xv, &tv)?));
                jsd.push(Some(jsd_continuous(&xv, &tv, cfg.jsd_bins)?));
                t_all.extend(tv);
                x_all.extend(xv);
            }
            ColumnKind::Discrete => {
                let tv: Vec<String> = rows.iter().filter_map(|&i| cat(truth, i, j)).collect();
                let xv: Vec<String> = rows.iter().filter_map(|&i| cat(imputed, i, j)).collect();
                if !tv.is_empty() && !xv.is_empty() {
                    jsd.push(Some(jsd_discrete(&xv, &tv)?));
                }
            }
        }
    }
    let (rmse, mae) = match rmse_mae(&t_all, &x_all) {
        Ok((r, m)) => (MetricValue::defined("rmse", r), MetricValue::defined("mae", m)),
        Err(_) => (MetricValue::undefined("rmse"), MetricValue::undefined("mae")),
    };

    // pairwise dependence
    let pair_rows = |a: usize, b: usize| -> Vec<usize> {
        match cfg.pair_scope {
            PairScope::WholeTable => (0..truth.n_rows()).collect::<Vec<_>>(),
            PairScope::MaskedRows => (0..truth.n_rows())
                .filter(|&i| !mask.is_observed(i, a) && !mask.is_observed(i, b))
                .collect(),
        }
        .into_iter()
        .filter(|&i| {
            truth.columns[a].is_observed(i) && truth.columns[b].is_observed(i) && imputed.columns[a].is_observed(i) && imputed.columns[b].is_observed(i)
        })
        .collect()
    };
    let (mut chi2, mut mi, mut rho) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..d {
        for b in a + 1..d {
            let rows = pair_rows(a, b);
            if rows.len() < 2 {
                continue;
            }
            let coded = |t: &Table, j: usize, bins: &Option<QuantileBins>, dict: &mut BTreeMap<String, usize>| -> Vec<usize> {
                rows.iter()
                    .map(|&i| match bins {
                        Some(q) => q.code(num(t, i, j).expect("observed")),
                        None => {
                            let s = cat(t, i, j).expect("observed");
                            let next = dict.len();
                            *dict.entry(s).or_insert(next)
                        }
                    })
                    .collect()
            };
            let bins_for = |j: usize| -> Option<QuantileBins> {
                (kinds[j] == ColumnKind::Continuous).then(|| {
                    let vals: Vec<f64> = rows.iter().map(|&i| num(truth, i, j).expect("observed")).collect();
                    QuantileBins::fit(&vals, cfg.mi_bins)
                })
            };
            let (ba, bb) = (bins_for(a), bins_for(b));
            let (mut da, mut db) = (BTreeMap::new(), BTreeMap::new());
            let ra = coded(truth, a, &ba, &mut da);
            let rb = coded(truth, b, &bb, &mut db);
            let xa = coded(imputed, a, &ba, &mut da);
            let xb = coded(imputed, b, &bb, &mut db);
            let distinct = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len();

            if distinct(&ra) > 1 && distinct(&rb) > 1 {
                mi.push(Some((mutual_information(&ra, &rb) - mutual_information(&xa, &xb)).abs()));
            } else {
                log::debug!("mi: pair ({a}, {b}) skipped, single-category real variable");
            }

            match (kinds[a], kinds[b]) {
                (ColumnKind::Discrete, ColumnKind::Discrete) => {
                    if distinct(&ra) < 2 || distinct(&rb) < 2 {
                        continue;
                    }
                    if distinct(&xa) < 2 || distinct(&xb) < 2 {
                        chi2.push(None);
                        continue;
                    }
                    let (ka, kb) = (da.len(), db.len());
                    let o = contingency(&xa, &xb, ka, kb);
                    let e = contingency(&ra, &rb, ka, kb);
                    chi2.push(Some(chi2_normalized(&o, &e)));
                }
                (ColumnKind::Continuous, ColumnKind::Continuous) => {
                    let vals = |t: &Table, j: usize| rows.iter().map(|&i| num(t, i, j).expect("observed")).collect::<Vec<_>>();
                    let Some(real) = pearson(&vals(truth, a), &vals(truth, b)) else {
                        continue;
                    };
                    rho.push(pearson(&vals(imputed, a), &vals(imputed, b)).map(|r| (real - r).abs()));
                }
                _ => {}
            }
        }
    }

    Ok(vec![
        rmse,
        mae,
        MetricValue::mean_of("ks", &ks),
        MetricValue::mean_of("emd", &emd),
        MetricValue::mean_of("jsd", &jsd),
        MetricValue::mean_of("chi2", &chi2),
        MetricValue::mean_of("mi_dev", &mi),
        MetricValue::mean_of("pearson_dev", &rho),
    ])
}

/// Full metric battery, including downstream accuracy when a task is given.
pub fn evaluate_all(truth: &Table, imputed: &Table, mask: &MaskMatrix, cfg: &EvalConfig, task: Option<&DownstreamTask<'_>>) -> Result<Vec<MetricValue>, EvalError> {
    let mut out = imputation_metrics(truth, imputed, mask, cfg)?;
    for kind in [ClassifierKind::LinearSvm, ClassifierKind::Mlp] {
        let name = format!("acc_{}", kind.name().replace('-', "_"));
        let value = match task {
            Some(t) if cfg.classifiers.contains(&kind) => {
                Some(downstream_accuracy(imputed, t.test, t.label, kind, &cfg.downstream, t.seed)?)
            }
            _ => None,
        };
        out.push(MetricValue { name, value });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, IngestOptions};
    use crate::imputer::{impute_fv, impute_gm};
    use crate::missingness::{apply_mask, generate_mask, Mechanism, MissingnessSpec};

    fn toy(n: usize) -> Table {
        let mut text = String::from("a,b,c,d,label\n");
        for i in 0..n {
            let x = (i * 37 % 101) as f64;
            text.push_str(&format!(
                "{x},{},{},{},{}\n",
                x * 0.5 + (i % 7) as f64,
                ["p", "q", "r"][i % 3],
                ["u", "v"][(i / 3) % 2],
                ["yes", "no"][(i / 5) % 2]
            ));
        }
        parse_csv(&text, &IngestOptions::default()).unwrap()
    }

    #[test]
    fn identity_imputation_scores_zero() {
        let t = toy(300);
        let spec = MissingnessSpec::new(Mechanism::Mcar, 0.3, 1).with_exempt(&["label"]);
        let mask = generate_mask(&t, &spec).unwrap();
        for scope in [PairScope::MaskedRows, PairScope::WholeTable] {
            let cfg = EvalConfig { pair_scope: scope, ..EvalConfig::default() };
            let m = imputation_metrics(&t, &t, &mask, &cfg).unwrap();
            assert_eq!(m.len(), 8);
            for v in &m {
                assert_eq!(v.value, Some(0.0), "{}", v.name);
            }
        }
    }

    #[test]
    fn metric_names_follow_report_order() {
        let t = toy(100);
        let mask = generate_mask(&t, &MissingnessSpec::new(Mechanism::Mcar, 0.3, 2)).unwrap();
        let m = evaluate_all(&t, &t, &mask, &EvalConfig::default(), None).unwrap();
        let names: Vec<&str> = m.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, METRIC_ORDER);
        assert!(!m[8].is_defined() && !m[9].is_defined());
    }

    #[test]
    fn constant_fills_make_dependence_metrics_null() {
        let t = toy(400);
        let spec = MissingnessSpec::new(Mechanism::Mcar, 0.5, 3).with_exempt(&["label"]);
        let mask = generate_mask(&t, &spec).unwrap();
        let masked = apply_mask(&t, &mask).unwrap();
        for out in [impute_fv(&masked.incomplete, 0.0).unwrap(), impute_gm(&masked.incomplete).unwrap()] {
            let m = imputation_metrics(&t, &out.table, &mask, &EvalConfig::default()).unwrap();
            let get = |n: &str| m.iter().find(|v| v.name == n).unwrap();
            assert!(!get("pearson_dev").is_defined());
            assert!(!get("chi2").is_defined());
            assert!(get("mi_dev").is_defined());
            assert!(get("emd").value.unwrap() > 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let t = toy(10);
        let mask = MaskMatrix::all_observed(9, 5);
        assert!(matches!(imputation_metrics(&t, &t, &mask, &EvalConfig::default()), Err(EvalError::Dimensions(_))));
    }

    #[test]
    fn identical_tables_give_identical_accuracy() {
        let t = toy(200);
        let mask = MaskMatrix::all_observed(200, 5);
        let cfg = EvalConfig {
            downstream: DownstreamConfig { mlp_epochs: 20, svm_epochs: 20, ..DownstreamConfig::default() },
            ..EvalConfig::default()
        };
        let task = DownstreamTask { test: &t, label: "label", seed: 4 };
        let a = evaluate_all(&t, &t, &mask, &cfg, Some(&task)).unwrap();
        let b = evaluate_all(&t, &t.clone(), &mask, &cfg, Some(&task)).unwrap();
        assert_eq!(a, b);
        assert!(a[9].value.unwrap() >= 0.0 && a[9].value.unwrap() <= 1.0);
    }
}
