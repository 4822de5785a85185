//! Dense tensor values carried on the autodiff tape.
//!
//! The engine only ever needs rank 0, 1 and 2; an enum keeps dispatch cheap
//! and shapes explicit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, PartialEq)]
pub enum Value<T: Scalar> {
    Scalar(T),
    Vector(Array1<T>),
    Matrix(Array2<T>),
}

impl<T: Scalar> Value<T> {
    pub fn shape_desc(&self) -> String {
        match self {
            Value::Scalar(_) => "scalar".to_string(),
            Value::Vector(v) => format!("vector[{}]", v.len()),
            Value::Matrix(m) => format!("matrix[{}x{}]", m.nrows(), m.ncols()),
        }
    }

    pub fn as_scalar(&self) -> Result<T> {
        match self {
            Value::Scalar(s) => Ok(*s),
            other => Err(Error::shape("as_scalar", format!("expected scalar, got {}", other.shape_desc()))),
        }
    }

    pub fn as_vector(&self) -> Result<&Array1<T>> {
        match self {
            Value::Vector(v) => Ok(v),
            other => Err(Error::shape("as_vector", format!("expected vector, got {}", other.shape_desc()))),
        }
    }

    pub fn as_matrix(&self) -> Result<&Array2<T>> {
        match self {
            Value::Matrix(m) => Ok(m),
            other => Err(Error::shape("as_matrix", format!("expected matrix, got {}", other.shape_desc()))),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Vector(v) => v.len(),
            Value::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Value<T>) -> bool {
        match (self, other) {
            (Value::Scalar(_), Value::Scalar(_)) => true,
            (Value::Vector(a), Value::Vector(b)) => a.len() == b.len(),
            (Value::Matrix(a), Value::Matrix(b)) => a.dim() == b.dim(),
            _ => false,
        }
    }

    pub fn zeros_like(&self) -> Value<T> {
        match self {
            Value::Scalar(_) => Value::Scalar(T::zero()),
            Value::Vector(v) => Value::Vector(Array1::zeros(v.len())),
            Value::Matrix(m) => Value::Matrix(Array2::zeros(m.dim())),
        }
    }

    /// Flat view of the underlying data in row-major order.
    pub fn flat(&self) -> Vec<T> {
        match self {
            Value::Scalar(s) => vec![*s],
            Value::Vector(v) => v.to_vec(),
            Value::Matrix(m) => m.iter().copied().collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Value::Scalar(s) => s.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    /// Frobenius norm (2-norm for vectors, |x| for scalars).
    pub fn norm(&self) -> T {
        let ss: T = match self {
            Value::Scalar(s) => *s * *s,
            Value::Vector(v) => v.iter().map(|x| *x * *x).sum(),
            Value::Matrix(m) => m.iter().map(|x| *x * *x).sum(),
        };
        ss.sqrt()
    }

    /// Elementwise accumulate `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Value<T>) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "add_assign",
                format!("{} vs {}", self.shape_desc(), other.shape_desc()),
            ));
        }
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => *a = *a + *b,
            (Value::Vector(a), Value::Vector(b)) => *a += b,
            (Value::Matrix(a), Value::Matrix(b)) => *a += b,
            _ => unreachable!(),
        }
        Ok(())
    }
}

impl<T: Scalar> From<T> for Value<T> {
    fn from(s: T) -> Self {
        Value::Scalar(s)
    }
}

impl<T: Scalar> From<Array1<T>> for Value<T> {
    fn from(v: Array1<T>) -> Self {
        Value::Vector(v)
    }
}

impl<T: Scalar> From<Array2<T>> for Value<T> {
    fn from(m: Array2<T>) -> Self {
        Value::Matrix(m)
    }
}
