//! Dense binary masks.

use serde::{Deserialize, Serialize};

/// Row-major `height x width` binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Panics if `rows` is ragged.
    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged mask rows");
        Self::from_fn(height, width, |r, c| rows[r][c] != 0)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count()
    }

    /// Mask as 0/1 reals in row-major order.
    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting() {
        let a = BinaryMask::from_rows(&[&[1, 1, 0], &[1, 1, 0]]);
        let b = BinaryMask::from_rows(&[&[0, 1, 1], &[0, 1, 1]]);
        assert_eq!(a.count(), 4);
        assert_eq!(a.intersection_count(&b), 2);
        assert_eq!(a.union_count(&b), 6);
        let mut u = a.clone();
        u.union_with(&b);
        assert_eq!(u.count(), 6);
        assert!(a.get(1, 0) && !a.get(1, 2));
    }
}
