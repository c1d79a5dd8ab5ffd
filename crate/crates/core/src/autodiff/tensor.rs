use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Dense row-major matrix of `f64`. Scalars are `1 x 1`, vectors are rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor(pub(crate) Array2<f64>);

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AutodiffError> {
        if rows * cols != values.len() {
            return Err(AutodiffError::Layout(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| AutodiffError::Layout(e.to_string()))?;
        Ok(Tensor(arr))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::Layout("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor(Array2::zeros((rows, cols)))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor(Array2::ones((rows, cols)))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor(Array2::from_elem((1, 1), v))
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.0.nrows(), self.0.ncols()]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Row-major copy of the values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[[r, c]]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[[r, c]] = v;
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.0.len(), 1);
        self.0[[0, 0]]
    }

    pub fn row_slice(&self, r: usize) -> Vec<f64> {
        self.0.row(r).to_vec()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn from_array(arr: Array2<f64>) -> Self {
        Tensor(arr.as_standard_layout().into_owned())
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.0)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Serialized form: explicit shape header followed by row-major values.
#[derive(Serialize, Deserialize)]
pub(crate) struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        TensorRecord { shape: t.shape(), values: t.to_vec() }
    }
}

impl TryFrom<TensorRecord> for Tensor {
    type Error = AutodiffError;

    fn try_from(r: TensorRecord) -> Result<Self, Self::Error> {
        Tensor::from_vec(r.shape[0], r.shape[1], r.values)
    }
}

/// Branch-free scan so the check vectorizes on large tensors.
pub(crate) fn all_finite(a: &Array2<f64>) -> bool {
    match a.as_slice_memory_order() {
        Some(s) => s.chunks(64).all(|c| c.iter().fold(true, |ok, x| ok & x.is_finite())),
        None => a.iter().all(|x| x.is_finite()),
    }
}
