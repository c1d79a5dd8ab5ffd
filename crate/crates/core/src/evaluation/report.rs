//! Evaluation reports and their JSON/CSV renderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

/// Metric columns in report order.
pub const METRIC_ORDER: [&str; 10] = [
    "rmse",
    "mae",
    "ks",
    "emd",
    "jsd",
    "chi2",
    "mi_dev",
    "pearson_dev",
    "acc_linear_svm",
    "acc_mlp",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    /// `None` when the metric is undefined on its inputs.
    pub value: Option<f64>,
}

impl MetricValue {
    pub fn defined(name: &str, value: f64) -> Self {
        MetricValue { name: name.to_string(), value: Some(value) }
    }

    pub fn undefined(name: &str) -> Self {
        MetricValue { name: name.to_string(), value: None }
    }

    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }

    /// Mean of the defined entries; undefined when there are none.
    pub fn mean_of(name: &str, values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        if defined.is_empty() {
            Self::undefined(name)
        } else {
            Self::defined(name, defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    pub fn csv_cell(&self) -> String {
        self.value.map_or_else(|| "null".to_string(), |v| v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub mechanism: String,
    pub rate: f64,
    pub method: String,
    pub seed: u64,
    /// One entry per name in [`METRIC_ORDER`], in that order.
    pub metrics: Vec<MetricValue>,
    pub config_hash: String,
    pub version: String,
}

impl EvaluationReport {
    pub fn metric(&self, name: &str) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["dataset", "mechanism", "rate", "method", "seed"];
        cols.extend(METRIC_ORDER);
        cols.extend(["config_hash", "version"]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells = vec![
            self.dataset.clone(),
            self.mechanism.clone(),
            self.rate.to_string(),
            self.method.clone(),
            self.seed.to_string(),
        ];
        for name in METRIC_ORDER {
            cells.push(self.metric(name).map_or_else(|| "null".to_string(), MetricValue::csv_cell));
        }
        cells.push(self.config_hash.clone());
        cells.push(self.version.clone());
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        wtr.write_record(&cells).expect("in-memory write");
        let s = String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8 csv");
        s.trim_end_matches('\n').to_string()
    }
}

/// Flat CSV, one line per report, in the given order.
pub fn reports_to_csv(reports: &[EvaluationReport]) -> String {
    let mut out = EvaluationReport::csv_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Nested JSON: dataset -> method -> list of runs with their metrics.
pub fn reports_to_json(reports: &[EvaluationReport]) -> String {
    let mut tree: BTreeMap<&str, BTreeMap<&str, Vec<Json>>> = BTreeMap::new();
    for r in reports {
        let mut metrics = Map::new();
        for m in &r.metrics {
            metrics.insert(m.name.clone(), m.value.map_or(Json::Null, |v| json!(v)));
        }
        tree.entry(&r.dataset).or_default().entry(&r.method).or_default().push(json!({
            "mechanism": r.mechanism,
            "rate": r.rate,
            "seed": r.seed,
            "metrics": metrics,
            "config_hash": r.config_hash,
            "version": r.version,
        }));
    }
    serde_json::to_string_pretty(&tree).expect("report tree serializes")
}
