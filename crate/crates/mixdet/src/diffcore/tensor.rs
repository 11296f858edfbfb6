use crate::real::Real;

/// Dense row-major tensor of `Real` values. Shapes follow HWC layout for
/// images and feature maps: `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f64> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/value count mismatch"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![R::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: R) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: R) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn item(&self) -> R {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// Index into an `[h, w, c]` tensor.
    pub fn at3(&self, y: usize, x: usize, c: usize) -> R {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(y * self.shape[1] + x) * self.shape[2] + c]
    }
}
