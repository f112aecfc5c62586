use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_WIDTH: usize = 512;

/// Vector in the joint image-text space. Encoder outputs are unit
/// normalized; differences between them are not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    /// Normalizes `values` to unit L2 norm.
    pub fn unit(mut values: Vec<f64>) -> Result<Self> {
        let n = l2(&values);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::DegenerateDirection { norm: n });
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &Embedding) -> Result<f64> {
        check_width(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        check_width(self, other)?;
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        Ok(dot / (self.norm() * other.norm()))
    }
}

pub(crate) fn check_width(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.width() != b.width() {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {} vs {}",
            a.width(),
            b.width()
        )));
    }
    Ok(())
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
