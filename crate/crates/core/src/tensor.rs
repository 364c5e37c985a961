//! Dense row-major f32 tensor.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::fmt::Write as _;

/// N-dimensional array of 32-bit floats with row-major layout.
///
/// A rank-0 tensor (empty shape) is a scalar. `requires_grad` marks the
/// tensor as a differentiation leaf when it is registered on a tape; it has
/// no effect elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", "positive dimensions", format!("{shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} values for shape {shape:?}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false }
    }

    /// Uniform [0,1) fill, consuming `rng` deterministically.
    pub fn rand_uniform(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_f32()).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Normal(0, std) fill.
    pub fn rand_normal(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_normal() * std).collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Dimensions of a rank-4 tensor as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", "rank-4 tensor", format!("{:?}", self.shape))),
        }
    }

    /// Err if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("shape {shape:?} = {numel}"),
            ));
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: false })
    }

    /// Stack rank-4 tensors along the batch dimension.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("stack_batch: empty input"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n_total = 0;
        for p in parts {
            let (n, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("[*,{c},{h},{w}]"),
                    format!("{:?}", p.shape()),
                ));
            }
            n_total += n;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![n_total, c, h, w], data)
    }

    /// Debug dump: a shape line followed by row-major values, one row of the
    /// innermost dimension per line. Used by golden-file tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "shape: {}", if dims.is_empty() { "scalar".to_string() } else { dims.join("x") });
        let row = *self.shape.last().unwrap_or(&1);
        for chunk in self.data.chunks(row.max(1)) {
            let vals: Vec<String> = chunk.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }
}
