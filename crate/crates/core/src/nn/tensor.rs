use crate::error::{shape_err, Result};
use crate::grid::ImageGrid;

/// Dense row-major tensor. Feature maps are `[channels, height, width]`,
/// vectors are `[len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_grid(g: &ImageGrid) -> Self {
        Self {
            shape: vec![1, g.height(), g.width()],
            data: g.as_slice().to_vec(),
        }
    }

    /// Stack single-channel grids into a `[n, h, w]` feature map.
    pub fn stack(grids: &[&ImageGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| shape_err("cannot stack zero grids"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            first.ensure_same_dims(g)?;
            data.extend_from_slice(g.as_slice());
        }
        Ok(Self {
            shape: vec![grids.len(), h, w],
            data,
        })
    }

    /// Channel `c` of a `[C, H, W]` tensor as a grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        let (_, h, w) = self.dims3();
        ImageGrid::new(h, w, self.data[c * h * w..(c + 1) * h * w].to_vec())
            .expect("channel slice has h*w values")
    }

    #[inline]
    pub fn dims3(&self) -> (usize, usize, usize) {
        debug_assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
