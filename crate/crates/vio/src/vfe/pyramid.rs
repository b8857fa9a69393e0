//! Image pyramid for coarse-to-fine optical flow.
//!
//! Levels halve in resolution by exact 2x2 averaging: level L pixel (x, y)
//! is the mean of the four level L-1 pixels it covers. Odd trailing rows or
//! columns are cut, matching a hardware downsampler that processes aligned
//! pixel quads. Samples are kept in f32 so subpixel interpolation and
//! gradients do not round between levels.

use nalgebra::Vector2;

use crate::error::VioError;
use crate::framecodec::Frame;

/// Grayscale raster with f32 samples and clamp-to-edge access.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_frame(frame: &Frame) -> Self {
        GrayImage {
            width: frame.width(),
            height: frame.height(),
            data: frame.pixels().iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Integer access with edge clamping.
    pub fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let p00 = self.at(xi, yi) as f64;
        let p10 = self.at(xi + 1, yi) as f64;
        let p01 = self.at(xi, yi + 1) as f64;
        let p11 = self.at(xi + 1, yi + 1) as f64;
        p00 * (1.0 - fx) * (1.0 - fy)
            + p10 * fx * (1.0 - fy)
            + p01 * (1.0 - fx) * fy
            + p11 * fx * fy
    }

    /// Central-difference gradient sampled bilinearly.
    pub fn gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(
            (self.sample(x + 1.0, y) - self.sample(x - 1.0, y)) * 0.5,
            (self.sample(x, y + 1.0) - self.sample(x, y - 1.0)) * 0.5,
        )
    }

    /// Exact 2x2 average, trailing odd row/column cut.
    pub fn downsample(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.data[2 * y * self.width + 2 * x]
                    + self.data[2 * y * self.width + 2 * x + 1]
                    + self.data[(2 * y + 1) * self.width + 2 * x]
                    + self.data[(2 * y + 1) * self.width + 2 * x + 1];
                data.push(s * 0.25);
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Coarse-to-fine stack, level 0 finest.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    /// Builds `levels` levels. Errors when the coarsest level would be
    /// smaller than the tracking window.
    pub fn build(frame: &Frame, levels: usize, min_dim: usize) -> Result<Pyramid, VioError> {
        assert!(levels >= 1);
        let mut stack = vec![GrayImage::from_frame(frame)];
        for _ in 1..levels {
            let next = stack.last().unwrap().downsample();
            if next.width() < min_dim || next.height() < min_dim {
                return Err(VioError::Config(format!(
                    "pyramid level {}x{} smaller than window {min_dim}",
                    next.width(),
                    next.height()
                )));
            }
            stack.push(next);
        }
        Ok(Pyramid { levels: stack })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &GrayImage {
        &self.levels[l]
    }
}
