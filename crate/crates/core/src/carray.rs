use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dense row-major complex array.
#[derive(Clone, Debug, PartialEq)]
pub struct CArray {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl CArray {
    pub fn zeros(shape: &[usize]) -> Self {
        CArray {
            shape: shape.to_vec(),
            data: vec![C64::new(0.0, 0.0); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<C64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "complex array",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(CArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn span(&self, prefix: &[usize]) -> (usize, usize) {
        let inner: usize = self.shape[prefix.len()..].iter().product();
        let off = prefix
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            });
        (off * inner, inner)
    }

    /// Contiguous sub-array addressed by leading indices.
    pub fn slice(&self, prefix: &[usize]) -> &[C64] {
        let (start, len) = self.span(prefix);
        &self.data[start..start + len]
    }

    pub fn slice_mut(&mut self, prefix: &[usize]) -> &mut [C64] {
        let (start, len) = self.span(prefix);
        &mut self.data[start..start + len]
    }

    pub fn at(&self, index: &[usize]) -> C64 {
        self.slice(index)[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.data)
    }
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_follow_leading_indices() {
        let data = (0..24).map(|i| C64::new(i as f64, 0.0)).collect();
        let a = CArray::from_vec(&[2, 3, 4], data).unwrap();
        assert_eq!(a.slice(&[1, 2])[0].re, 20.0);
        assert_eq!(a.slice(&[1]).len(), 12);
        assert_eq!(a.at(&[0, 1, 3]).re, 7.0);
    }
}
