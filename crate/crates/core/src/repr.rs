//! Query and document representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::NUM_SPECIAL;

/// Nonnegative bag of weighted vocabulary terms. Term ids are strictly
/// increasing, every weight is positive and finite, and special-token ids
/// never appear.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(u32, f32)>,
}

impl SparseVector {
    pub fn new(mut entries: Vec<(u32, f32)>) -> Result<Self> {
        entries.sort_by_key(|&(t, _)| t);
        entries.retain(|&(_, w)| w != 0.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateId(format!("term {}", w[0].0)));
            }
        }
        for &(t, w) in &entries {
            if (t as usize) < NUM_SPECIAL {
                return Err(Error::InvalidConfig(format!("special term id {t} in sparse vector")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("invalid weight {w} for term {t}")));
            }
        }
        Ok(Self { entries })
    }

    /// Keeps the strictly positive, non-special coordinates of a dense row.
    pub fn from_dense<T: Scalar>(row: &[T]) -> Self {
        let entries = row
            .iter()
            .enumerate()
            .skip(NUM_SPECIAL)
            .filter_map(|(j, &w)| {
                let w = w.as_f64() as f32;
                (w > 0.0 && w.is_finite()).then_some((j as u32, w))
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    pub fn l1(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w as f64).sum()
    }

    /// Merge-join dot product, accumulated in f64 in term order.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j) = (0, 0);
        let mut s = 0.0f64;
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a[i].1 as f64 * b[j].1 as f64;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        for &(t, w) in &self.entries {
            v[t as usize] = w;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    values: Vec<f32>,
}

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite dense vector entry".into()));
        }
        Ok(Self { values })
    }

    pub fn from_row<T: Scalar>(row: &[T]) -> Self {
        Self { values: row.iter().map(|v| v.as_f64() as f32).collect() }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), actual: other.len() });
        }
        Ok(self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_normalizes_and_validates() {
        let v = SparseVector::new(vec![(9, 1.0), (7, 2.0), (8, 0.0)]).unwrap();
        assert_eq!(v.entries(), &[(7, 2.0), (9, 1.0)]);
        assert!(SparseVector::new(vec![(3, 1.0)]).is_err());
        assert!(SparseVector::new(vec![(7, -1.0)]).is_err());
        assert!(SparseVector::new(vec![(7, 1.0), (7, 2.0)]).is_err());
    }

    #[test]
    fn from_dense_drops_specials_and_zeros() {
        let v = SparseVector::from_dense(&[5.0f64, 5.0, 5.0, 5.0, 5.0, 0.0, 0.5, 0.0]);
        assert_eq!(v.entries(), &[(6, 0.5)]);
    }

    #[test]
    fn dot_products() {
        let a = SparseVector::new(vec![(5, 1.0), (6, 2.0)]).unwrap();
        let b = SparseVector::new(vec![(6, 3.0), (7, 1.0)]).unwrap();
        assert_eq!(a.dot(&b), 6.0);
        let x = DenseVector::new(vec![1.0, 2.0]).unwrap();
        let y = DenseVector::new(vec![3.0]).unwrap();
        assert!(matches!(x.dot(&y), Err(Error::DimensionMismatch { .. })));
    }
}
