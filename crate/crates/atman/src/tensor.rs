//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value type. Gradient bookkeeping lives in the
//! computation graph ([`crate::graph`]); a tensor only carries an optional
//! gradient buffer so parameter stores can accumulate across graphs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, same shape as `data` when present.
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let t = Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Construction without the finiteness check, for graph-internal values
    /// that were already validated at op boundaries.
    pub(crate) fn from_raw_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row-major offset of a 2-d index.
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        i * self.shape[1] + j
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Ensures a zeroed gradient buffer exists and returns it.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `delta` into the gradient buffer (additive-until-cleared).
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
