use crate::error::{Error, Result};
use crate::volume::Volume;

/// Dense row-major `f32` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(op, format!("expected NCHW input, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(op, format!("expected a rank-2 input, got {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stack same-shaped 2D volumes into an `N × C × H × W` batch.
    pub fn stack_volumes(volumes: &[&Volume]) -> Result<Tensor> {
        let first = volumes.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let [h, w] = match first.extents() {
            &[h, w] => [h, w],
            e => return Err(Error::shape("stack_volumes", format!("expected 2D volumes, got extents {e:?}"))),
        };
        let c = first.channels();
        let mut data = Vec::with_capacity(volumes.len() * c * h * w);
        for v in volumes {
            if v.channels() != c || v.extents() != first.extents() {
                return Err(Error::shape(
                    "stack_volumes",
                    format!("{}x{:?} vs {}x{:?}", v.channels(), v.extents(), c, first.extents()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![volumes.len(), c, h, w], data)
    }

    /// Split an `N × C × H × W` batch back into volumes.
    pub fn unstack_volumes(&self) -> Result<Vec<Volume>> {
        let [n, c, h, w] = self.dims4("unstack_volumes")?;
        let per = c * h * w;
        (0..n).map(|i| Volume::new(c, vec![h, w], self.data[i * per..(i + 1) * per].to_vec())).collect()
    }
}
