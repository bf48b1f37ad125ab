use crate::error::{Result, ScdError};

/// Dense rank-4 array in (n, c, h, w) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(ScdError::Shape(format!("zero dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(ScdError::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: [1, 1, 1, 1], data: vec![value] }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut k = 0;
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[k] = f([i, j, y, x]);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, i: usize, c: usize, y: usize, x: usize) -> usize {
        ((i * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, i: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(i, c, y, x)]
    }

    /// The value of a (1,1,1,1) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn count_nonfinite(&self) -> usize {
        self.data.iter().filter(|v| !v.is_finite()).count()
    }

    /// Select batch entries into a new tensor.
    pub fn batch_select(&self, idx: &[usize]) -> Self {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self { shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]], data }
    }

    /// Stack single-batch tensors along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Self> {
        let first = items.first().ok_or_else(|| ScdError::Shape("stack of nothing".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(ScdError::Shape(format!("stack {:?} with {:?}", t.shape, first.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }
}
