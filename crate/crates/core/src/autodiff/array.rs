use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f64 array with a same-shaped gradient buffer.
///
/// Serializes as `{shape, values}`; gradients are transient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ArrayRepr", try_from = "ArrayRepr")]
pub struct DifferentiableArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
struct ArrayRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl From<DifferentiableArray> for ArrayRepr {
    fn from(a: DifferentiableArray) -> Self {
        ArrayRepr {
            shape: a.shape,
            values: a.values,
        }
    }
}

impl TryFrom<ArrayRepr> for DifferentiableArray {
    type Error = Error;

    fn try_from(r: ArrayRepr) -> Result<Self> {
        DifferentiableArray::new(r.shape, r.values)
    }
}

impl DifferentiableArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid array shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grad: vec![0.0; len],
            shape,
            values,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len]).expect("zeros shape")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("filled shape")
    }

    /// A 2-D array from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of the array viewed as a matrix (all leading axes collapsed).
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.values.len(), 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let grad = self.grad_mut();
        debug_assert_eq!(grad.len(), g.len());
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().chain(&self.grad).all(|v| v.is_finite())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
