//! Dense row-major tensors of 64-bit floats.

/// A dense tensor: positive dimensions, row-major flat storage.
///
/// Training runs entirely in `f64`; conversion to the compact `f32` archive
/// representation happens in `persist`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `dims` is empty, any dim is zero, or `data` has the wrong
    /// length. Those are caller bugs, not runtime conditions.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(!dims.is_empty(), "tensor needs at least one dimension");
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be positive");
        let expect: usize = dims.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    /// Flat offset of `(i, j)` in a rank-2 tensor.
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        i * self.dims[1] + j
    }

    /// Flat offset of `(i, j, k)` in a rank-3 tensor.
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.dims[1] + j) * self.dims[2] + k
    }
}

/// Renders dims like `[3,4]` for error messages.
pub fn dims_str(dims: &[usize]) -> String {
    let inner: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(","))
}
