//! Dense row-major f64 tensor.
//!
//! Everything trainable or differentiable in this crate lives in one of these.
//! 64-bit floats are a hard requirement: the finite-difference gradient oracle
//! (relative error ≤ 1e-3 at h = 1e-5) drowns in f32 rounding noise.

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Row vector (1×n).
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor { shape: vec![1, n], data: values }
    }

    /// Matrix from rows×cols and a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a 2-D matrix. Rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_matches_len() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dims2(), (2, 3));
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    fn rank1_is_a_row() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        assert_eq!(t.dims2(), (1, 3));
    }
}
