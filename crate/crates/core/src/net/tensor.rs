//! Dense 4-D tensor, layout `[n][c][h][w]` row-major.

use crate::rng::SeedRng;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform(shape: [usize; 4], bound: f64, rng: &mut SeedRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn off(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.off(n, c, y, x)]
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "not a scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single-image tensor `[1, 1, h, w]`.
    pub fn from_image(img: &crate::image::ImageGrid) -> Self {
        Tensor {
            shape: [1, 1, img.height(), img.width()],
            data: img.data().to_vec(),
        }
    }

    /// Plane `(n, c)` as an image grid.
    pub fn plane_to_image(&self, n: usize, c: usize) -> crate::image::ImageGrid {
        let (h, w) = (self.shape[2], self.shape[3]);
        let start = self.off(n, c, 0, 0);
        crate::image::ImageGrid::new(w, h, self.data[start..start + h * w].to_vec())
            .expect("finite plane")
    }
}
