//! Binary masks and boxes.

use crate::error::{FssError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-open pixel rectangle `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Binary `height x width` mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Any non-zero byte counts as foreground.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(FssError::Shape(format!(
                "mask {height}x{width} needs {} bytes, got {}",
                height * width,
                bytes.len()
            )));
        }
        Ok(Self { height, width, data: bytes.iter().map(|&b| u8::from(b != 0)).collect() })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    /// 0/1 per pixel, row-major.
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn is_all_ones(&self) -> bool {
        self.data.iter().all(|&v| v != 0)
    }

    /// Nearest-neighbour resize; output pixel `o` samples input `floor(o * in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            self.get(y * self.height / height, x * self.width / width)
        })
    }

    /// Tight hull of the foreground, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let bb = b.get_or_insert(BoundingBox { x_min: x, y_min: y, x_max: x + 1, y_max: y + 1 });
                bb.x_min = bb.x_min.min(x);
                bb.y_min = bb.y_min.min(y);
                bb.x_max = bb.x_max.max(x + 1);
                bb.y_max = bb.y_max.max(y + 1);
            }
        }
        b
    }

    /// True when every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }

    /// `[height, width]` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| T::from_u8(v).unwrap()).collect()).unwrap()
    }

    /// 0/255 bytes for raster output.
    pub fn to_raster(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }
}
