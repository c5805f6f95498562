use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// RGB image with channel-first `f32` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("Frame", format!("{} values for 3x{height}x{width}", data.len())));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.resize(data.len() + plane, v);
        }
        Frame { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Per-channel means.
    pub fn channel_means(&self) -> [f32; 3] {
        let plane = self.height * self.width;
        std::array::from_fn(|c| {
            let s: f64 = self.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
            (s / plane.max(1) as f64) as f32
        })
    }

    /// Mean Rec.601 luma.
    pub fn mean_luminance(&self) -> f64 {
        let m = self.channel_means();
        0.299 * m[0] as f64 + 0.587 * m[1] as f64 + 0.114 * m[2] as f64
    }

    /// Non-overlapping `p×p` patches in row-major patch order, each
    /// flattened as `(channel, row, col)`: `[n_patches, 3·p·p]`.
    pub fn patchify(&self, p: usize) -> Result<Vec<f32>> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::invalid("patchify", format!("patch {p} does not divide {}x{}", self.height, self.width)));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for y in 0..p {
                        let row = (c * self.height + py * p + y) * self.width + px * p;
                        out.extend_from_slice(&self.data[row..row + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(std::array::from_fn(|c| to_u8(self.get(c, y as usize, x as usize))))
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut f = Frame::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                f.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(f)
    }

    /// Rounds every value to the 8-bit grid a PNG round trip would produce.
    pub fn quantize(&mut self) {
        self.data.iter_mut().for_each(|v| *v = to_u8(*v) as f32 / 255.0);
    }
}

/// Nearest 8-bit level of a value in `[0, 1]` (ties round up).
#[inline]
pub fn to_u8(v: f32) -> u8 {
    // the float-to-int cast truncates, which is rounding after the +0.5
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Stacks patchified frames into `[B, n_patches, 3·p·p]`.
pub fn patch_batch<T: Float>(frames: &[&Frame], p: usize) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::invalid("patch_batch", "empty batch"))?;
    let n = (first.height / p.max(1)) * (first.width / p.max(1));
    let mut data = Vec::with_capacity(frames.len() * first.data.len());
    for f in frames {
        if f.height != first.height || f.width != first.width {
            return Err(Error::shape("patch_batch", "frames differ in size"));
        }
        data.extend(f.patchify(p)?.into_iter().map(|v| T::lit(v as f64)));
    }
    Tensor::new(vec![frames.len(), n, 3 * p * p], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_patches_row_major() {
        let mut f = Frame::filled(4, 4, [0.0; 3]);
        for y in 0..4 {
            for x in 0..4 {
                f.set(0, y, x, (y * 4 + x) as f32);
            }
        }
        let p = f.patchify(2).unwrap();
        assert_eq!(p.len(), 4 * 12);
        assert_eq!(&p[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[12..16], &[2.0, 3.0, 6.0, 7.0]);
        assert!(f.patchify(3).is_err());
    }
}
