//! The rank-4 activation carrier and finiteness checks.

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayD, Dimension};

/// A batch of feature maps laid out `[batch, channels, height, width]`.
///
/// Values are unbounded reals; images are additionally restricted to `[0, 1]`
/// by the operations that produce them. Every dimension is at least one and
/// construction rejects non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array4<f64>,
}

impl FeatureMap {
    /// Validates dimensions and finiteness.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "feature map dimensions must all be >= 1, got [{n}, {c}, {h}, {w}]"
            )));
        }
        check_finite_4d(&data, "FeatureMap::new")?;
        Ok(Self { data })
    }

    /// Wraps data that is known finite (outputs of checked operations).
    pub(crate) fn from_valid(data: Array4<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((n, c, h, w)),
        }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    /// `(batch, channels, height, width)`.
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn shape(&self) -> [usize; 4] {
        let (n, c, h, w) = self.data.dim();
        [n, c, h, w]
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp_unit(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub(crate) fn into_dyn(self) -> ArrayD<f64> {
        self.data.into_dyn()
    }
}

/// Returns the first non-finite index of `data`, if any.
pub(crate) fn first_non_finite(data: &ArrayD<f64>) -> Option<Vec<usize>> {
    data.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(idx, _)| idx.as_array_view().to_vec())
}

/// Rejects non-finite input with a diagnostic naming the first offending index.
pub fn check_finite(data: &ArrayD<f64>, context: &str) -> Result<()> {
    if let Some(index) = first_non_finite(data) {
        return Err(Error::NonFinite {
            context: context.to_string(),
            index,
        });
    }
    Ok(())
}

pub(crate) fn check_finite_4d(data: &Array4<f64>, context: &str) -> Result<()> {
    if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
            index: vec![idx.0, idx.1, idx.2, idx.3],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_dims() {
        assert!(FeatureMap::new(Array4::zeros((0, 3, 4, 4))).is_err());
        assert!(FeatureMap::new(Array4::zeros((1, 3, 0, 4))).is_err());
    }

    #[test]
    fn rejects_non_finite_with_index() {
        let mut a = Array4::zeros((1, 2, 3, 3));
        a[[0, 1, 2, 0]] = f64::NAN;
        match FeatureMap::new(a) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, vec![0, 1, 2, 0]),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn clamp_unit_bounds() {
        let mut a = Array4::zeros((1, 1, 2, 2));
        a[[0, 0, 0, 0]] = -0.5;
        a[[0, 0, 1, 1]] = 1.5;
        let f = FeatureMap::new(a).unwrap().clamp_unit();
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
