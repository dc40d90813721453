//! Dense row-major f64 tensors.
//!
//! Everything in this crate runs on plain `Vec<f64>` storage with an explicit
//! shape. Image-like tensors use BCHW order throughout: `[batch, channels,
//! height, width]`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{context}: non-finite value produced")]
    NonFinite { context: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl TensorError {
    /// Prefix the error with the layer path that produced it, so a failure
    /// deep inside the model names the offending stage.
    pub fn in_layer(self, layer: &str) -> TensorError {
        match self {
            TensorError::NonFinite { context } => TensorError::NonFinite {
                context: format!("{layer}/{context}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

pub(crate) fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::Invalid { op, detail }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same data under a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Dimensions of a rank-4 tensor as (B, C, H, W).
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(shape_err(
                op,
                format!("expected rank-4 BCHW tensor, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * ch + c) * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dimensions of a rank-4 shape slice as (B, C, H, W).
pub(crate) fn dims4_of(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err(
            op,
            format!("expected rank-4 BCHW tensor, got shape {:?}", shape),
        ));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshaped(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }

    #[test]
    fn layer_annotation_prefixes_nonfinite() {
        let e = TensorError::NonFinite {
            context: "conv2d".into(),
        };
        let e = e.in_layer("enc1.block0");
        assert_eq!(e.to_string(), "enc1.block0/conv2d: non-finite value produced");
    }
}
