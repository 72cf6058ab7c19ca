//! Dense 2D and 3D containers shared by every stage.
//!
//! Axis convention is `(z, y, x)` with `x` varying fastest, the same order
//! NIfTI stores voxels in.

use serde::{Deserialize, Serialize};

/// Extent of a volume along `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims3 {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Self { z, y, x }
    }

    pub const fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.y * self.x
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }
}

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T> Grid2<T> {
    /// Panics if `data.len() != height * width`.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            height * width,
            "grid data length does not match {height}x{width}"
        );
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid2<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }
}

/// Three-channel float image stored planar (`C, H, W`), the layout the
/// segmentation backends consume directly.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    /// Panics if `data.len() != 3 * height * width`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "planar RGB length mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_channels(r: &Grid2<f32>, g: &Grid2<f32>, b: &Grid2<f32>) -> Self {
        assert!(r.shape() == g.shape() && g.shape() == b.shape());
        let mut data = Vec::with_capacity(3 * r.data().len());
        data.extend_from_slice(r.data());
        data.extend_from_slice(g.data());
        data.extend_from_slice(b.data());
        Self {
            height: r.height(),
            width: r.width(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn planar_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}
