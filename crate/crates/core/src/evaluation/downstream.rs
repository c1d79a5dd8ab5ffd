//! Classifiers trained on imputed data and scored on a real test split.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::{AdamConfig, AdamState, Graph, ParamSet, Span, Tensor};
use crate::data::{Column, Table};
use crate::nn::{Activation, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassifierKind {
    #[serde(rename = "linear-svm")]
    LinearSvm,
    #[serde(rename = "mlp")]
    Mlp,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::LinearSvm => "linear-svm",
            ClassifierKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear-svm" => Ok(ClassifierKind::LinearSvm),
            "mlp" => Ok(ClassifierKind::Mlp),
            other => Err(format!("unknown classifier `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,
    pub svm_epochs: usize,
    pub svm_lr: f64,
    pub svm_l2: f64,
    pub batch_size: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            mlp_hidden: 10,
            mlp_epochs: 300,
            mlp_lr: 1e-3,
            svm_epochs: 100,
            svm_lr: 1e-2,
            svm_l2: 1e-4,
            batch_size: 200,
        }
    }
}

enum Feature {
    Continuous { column: usize, median: f64, mean: f64, std: f64 },
    Discrete { column: usize, mode: String, categories: Vec<String> },
}

/// Median/mode fill, standardization and one-hot encoding, fitted on the
/// training table only. Test categories never seen in training encode as zeros.
pub struct Preprocessor {
    features: Vec<Feature>,
    pub classes: Vec<String>,
    label: String,
    width: usize,
}

fn label_strings(table: &Table, label: usize) -> Vec<Option<String>> {
    (0..table.n_rows()).map(|i| table.get(i, label).map(|v| v.to_string())).collect()
}

impl Preprocessor {
    pub fn fit(train: &Table, label: &str) -> Result<Self, EvalError> {
        let li = train.schema.index_of(label).ok_or_else(|| EvalError::Label(format!("label `{label}` not in training table")))?;
        let mut features = Vec::new();
        let mut width = 0;
        for (j, col) in train.columns.iter().enumerate() {
            if j == li {
                continue;
            }
            match col {
                Column::Continuous(_) => {
                    let mut obs = col.observed_nums();
                    if obs.is_empty() {
                        continue;
                    }
                    obs.sort_by(f64::total_cmp);
                    let median = obs[obs.len() / 2];
                    let n = train.n_rows() as f64;
                    let filled: Vec<f64> = (0..train.n_rows()).map(|i| train.get(i, j).and_then(|v| v.as_num()).unwrap_or(median)).collect();
                    let mean = filled.iter().sum::<f64>() / n;
                    let std = (filled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                    features.push(Feature::Continuous { column: j, median, mean, std: if std > 0.0 { std } else { 1.0 } });
                    width += 1;
                }
                Column::Discrete(_) => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    col.observed_cats().into_iter().for_each(|c| *counts.entry(c).or_default() += 1);
                    let Some(mode) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| k.to_string()) else {
                        continue;
                    };
                    let categories: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
                    width += categories.len();
                    features.push(Feature::Discrete { column: j, mode, categories });
                }
            }
        }
        let mut classes: Vec<String> = label_strings(train, li).into_iter().flatten().collect();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(EvalError::SingleClass);
        }
        Ok(Preprocessor { features, classes, label: label.to_string(), width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Design matrix and class indices for the rows with a known label.
    /// Labels not seen in training map to `None`.
    pub fn transform(&self, table: &Table) -> Result<(Tensor, Vec<Option<usize>>), EvalError> {
        let li = table
            .schema
            .index_of(&self.label)
            .ok_or_else(|| EvalError::Label(format!("label `{}` missing from table", self.label)))?;
        let labels = label_strings(table, li);
        let rows: Vec<usize> = (0..table.n_rows()).filter(|&i| labels[i].is_some()).collect();
        let mut x = Vec::with_capacity(rows.len() * self.width);
        for &i in &rows {
            for f in &self.features {
                match f {
                    Feature::Continuous { column, median, mean, std } => {
                        let v = table.get(i, *column).and_then(|v| v.as_num()).unwrap_or(*median);
                        x.push((v - mean) / std);
                    }
                    Feature::Discrete { column, mode, categories } => {
                        let v = table.get(i, *column).map(|v| v.to_string()).unwrap_or_else(|| mode.clone());
                        x.extend(categories.iter().map(|c| if *c == v { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        let y = rows
            .iter()
            .map(|&i| labels[i].as_ref().and_then(|l| self.classes.binary_search(l).ok()))
            .collect();
        Ok((Tensor::from_vec(rows.len(), self.width, x)?, y))
    }
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(rows.len() * x.cols());
    for &r in rows {
        out.extend(x.array().row(r).iter().copied());
    }
    Tensor::from_vec(rows.len(), x.cols(), out).expect("gathered shape")
}

/// Trains `kind` on `train` and returns accuracy on `test`.
pub fn downstream_accuracy(train: &Table, test: &Table, label: &str, kind: ClassifierKind, cfg: &DownstreamConfig, seed: u64) -> Result<f64, EvalError> {
    if test.schema.index_of(label).is_none() {
        return Err(EvalError::Label(format!("label `{label}` not in test table")));
    }
    let pre = Preprocessor::fit(train, label)?;
    let (x, y) = pre.transform(train)?;
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    let x = gather(&x, &keep);
    let y: Vec<usize> = keep.iter().map(|&i| y[i].expect("kept rows are labelled")).collect();
    let k = pre.classes.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, epochs, lr) = match kind {
        ClassifierKind::Mlp => (MlpSpec::new(pre.width(), &[cfg.mlp_hidden], k, Activation::Relu), cfg.mlp_epochs, cfg.mlp_lr),
        ClassifierKind::LinearSvm => (MlpSpec::new(pre.width(), &[], k, Activation::Relu), cfg.svm_epochs, cfg.svm_lr),
    };
    let mut params = spec.init("clf", &mut rng);
    let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &params);
    let spans: Rc<[Span]> = vec![Span::new(0, k)].into();
    let mut order: Vec<usize> = (0..y.len()).collect();
    let bs = cfg.batch_size.max(1);

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let xb = gather(&x, chunk);
            let b = chunk.len() as f64;
            let mut g = Graph::new();
            let pv = params.bind(&mut g);
            let xv = g.leaf(xb);
            let scores = spec.forward(&mut g, &pv, xv)?;
            let loss = match kind {
                ClassifierKind::Mlp => {
                    let mut onehot = Tensor::zeros(chunk.len(), k);
                    chunk.iter().enumerate().for_each(|(r, &i)| onehot.set(r, y[i], 1.0));
                    let logp = g.log_softmax_spans(scores, spans.clone())?;
                    let t = g.leaf(onehot);
                    let picked = g.mul(logp, t)?;
                    let s = g.sum(picked)?;
                    g.scale(s, -1.0 / b)?
                }
                ClassifierKind::LinearSvm => {
                    let mut signs = Tensor::from_vec(chunk.len(), k, vec![-1.0; chunk.len() * k])?;
                    chunk.iter().enumerate().for_each(|(r, &i)| signs.set(r, y[i], 1.0));
                    let t = g.leaf(signs);
                    let margin = g.mul(scores, t)?;
                    let slack = g.neg(margin)?;
                    let slack = g.add_scalar(slack, 1.0)?;
                    let hinge = g.relu(slack)?;
                    let h = g.sum(hinge)?;
                    let h = g.scale(h, 1.0 / b)?;
                    let w2 = g.square(pv[0])?;
                    let w2 = g.sum(w2)?;
                    let reg = g.scale(w2, cfg.svm_l2)?;
                    g.add(h, reg)?
                }
            };
            let grads = g.gradients(loss, &pv)?;
            let grads: Vec<Tensor> = grads.iter().map(|gr| g.value(gr.var)).collect();
            adam.update(&mut params, &grads)?;
        }
    }
    accuracy(&spec, &params, &pre, test)
}

fn accuracy(spec: &MlpSpec, params: &ParamSet, pre: &Preprocessor, test: &Table) -> Result<f64, EvalError> {
    let (x, y) = pre.transform(test)?;
    if y.is_empty() {
        return Err(EvalError::Empty("test table has no labelled rows".into()));
    }
    let scores = spec.predict(params, x)?;
    let mut correct = 0usize;
    for (r, truth) in y.iter().enumerate() {
        let row = scores.row_slice(r);
        let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        if *truth == Some(best) {
            correct += 1;
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, IngestOptions};
    use rand::Rng;

    fn quick() -> DownstreamConfig {
        DownstreamConfig { mlp_epochs: 100, svm_epochs: 50, mlp_lr: 1e-2, ..DownstreamConfig::default() }
    }

    #[test]
    fn separable_data_is_learned() {
        let mut text = String::from("x,y,c,label\n");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..400 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y: f64 = rng.random_range(-1.0..1.0);
            let label = if x + 0.5 * y > 0.1 { "pos" } else { "neg" };
            text.push_str(&format!("{x},{y},{},{label}\n", ["a", "b"][rng.random_range(0..2)]));
        }
        let t = parse_csv(&text, &IngestOptions::default()).unwrap();
        for kind in [ClassifierKind::LinearSvm, ClassifierKind::Mlp] {
            let acc = downstream_accuracy(&t, &t, "label", kind, &quick(), 0).unwrap();
            assert!(acc >= 0.97, "{kind}: {acc}");
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let t = parse_csv("x,label\n1,a\n2,a\n", &IngestOptions::default()).unwrap();
        assert!(matches!(
            downstream_accuracy(&t, &t, "label", ClassifierKind::Mlp, &quick(), 0),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            downstream_accuracy(&t, &t, "nope", ClassifierKind::Mlp, &quick(), 0),
            Err(EvalError::Label(_))
        ));
    }

    #[test]
    fn unseen_test_categories_encode_as_zero() {
        let train = parse_csv("c,label\na,0\nb,1\n", &IngestOptions::default()).unwrap();
        let test = parse_csv("c,label\nz,0\n", &IngestOptions::default()).unwrap();
        let pre = Preprocessor::fit(&train, "label").unwrap();
        let (x, y) = pre.transform(&test).unwrap();
        assert_eq!(x.to_vec(), vec![0.0, 0.0]);
        assert_eq!(y, vec![Some(0)]);
    }
}
