//! Row-major scalar image container shared by color images, grayscale
//! images, and depth maps. Invalid depth is encoded as 0.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 for depth/gray, 3 for color.
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn from_values(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height * channels);
        ImageBuffer {
            width,
            height,
            channels,
            values,
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            values: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y);
        &self.values[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Luma conversion (0.299 R + 0.587 G + 0.114 B); grayscale images
    /// pass through.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageBuffer::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                out.set(x, y, 0, 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
            }
        }
        out
    }

    /// Half-resolution image by 2x2 box averaging. Odd trailing rows or
    /// columns are averaged over the in-bounds subset.
    pub fn downsample2(&self) -> ImageBuffer {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = ImageBuffer::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sx = 2 * x + dx;
                            let sy = 2 * y + dy;
                            if sx < self.width && sy < self.height {
                                sum += self.get(sx, sy, c);
                                n += 1.0;
                            }
                        }
                    }
                    out.set(x, y, c, sum / n);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with a kernel truncated at 3 sigma.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageBuffer {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut norm = 0.0;
        for i in -radius..=radius {
            let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
            kernel.push(v);
            norm += v;
        }
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

        let mut tmp = ImageBuffer::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sx = clamp(x as i64 + ki as i64 - radius, self.width);
                        acc += k * self.get(sx, y, c);
                    }
                    tmp.set(x, y, c, acc);
                }
            }
        }
        let mut out = ImageBuffer::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sy = clamp(y as i64 + ki as i64 - radius, self.height);
                        acc += k * tmp.get(x, sy, c);
                    }
                    out.set(x, y, c, acc);
                }
            }
        }
        out
    }
}

/// Bilinear interpolation of the four lattice neighbors of `(px, py)`.
/// Errors with `OutOfBounds` when the sample footprint leaves the image;
/// callers treat that as zero contribution.
pub fn bilinear_sample(image: &ImageBuffer, px: f64, py: f64) -> Result<Vec<f64>> {
    if !px.is_finite() || !py.is_finite() {
        return Err(Error::OutOfBounds);
    }
    if px < 0.0
        || py < 0.0
        || px > (image.width - 1) as f64
        || py > (image.height - 1) as f64
    {
        return Err(Error::OutOfBounds);
    }
    let x0 = (px.floor() as usize).min(image.width - 1);
    let y0 = (py.floor() as usize).min(image.height - 1);
    let x1 = (x0 + 1).min(image.width - 1);
    let y1 = (y0 + 1).min(image.height - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let mut out = vec![0.0; image.channels];
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = image.get(x0, y0, c);
        let v10 = image.get(x1, y0, c);
        let v01 = image.get(x0, y1, c);
        let v11 = image.get(x1, y1, c);
        *o = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
    }
    Ok(out)
}
