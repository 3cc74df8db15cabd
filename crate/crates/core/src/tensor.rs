//! Dense row-major f64 tensors.
//!
//! Only rank 0/1/2 shows up in this model (scalars, feature vectors, weight
//! matrices and batches), but shapes are kept as a `Vec<usize>` so the tape
//! ops can validate dimensions uniformly. All arithmetic lives on the tape in
//! [`crate::graph`]; `Tensor` is plain storage.

use rand::Rng;

/// Row-major dense tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching value buffer.
    ///
    /// Panics if `shape.iter().product() != values.len()`; that is a
    /// programming error, not a data error.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} implies {} values, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], values)
    }

    /// `rows x cols` matrix with every entry drawn uniformly from
    /// `[-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let values = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Self::matrix(rows, cols, values)
    }

    /// Length-`n` vector with entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform_vector(n: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self::vector((0..n).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.len() <= 1
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction_and_accessors() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.values()[4], 5.0);

        let s = Tensor::scalar(7.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);

        let z = Tensor::zeros(vec![4]);
        assert_eq!(z.values(), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "implies 6 values")]
    fn shape_value_mismatch_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn uniform_respects_bound_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(5, 7, 0.25, &mut rng);
        assert!(a.values().iter().all(|v| v.abs() <= 0.25));
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let b = Tensor::uniform(5, 7, 0.25, &mut rng2);
        assert_eq!(a, b);
    }
}
