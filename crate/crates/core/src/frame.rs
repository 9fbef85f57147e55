//! Raster containers shared by the generator, tokenizer and tracer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({}x{})", self.width, self.height)
    }
}

impl Frame {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Frame { width, height, pixels }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{} bytes for a {width}x{height} RGB frame",
                pixels.len()
            )));
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Crop a window `[x0, x0+w) x [y0, y0+h)`; the window must lie inside the frame.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Frame> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dim("crop window outside frame"));
        }
        let mut out = Frame::filled(w, h, [0; 3]);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * w * 3;
            out.pixels[dst..dst + w * 3].copy_from_slice(&self.pixels[src..src + w * 3]);
        }
        Ok(out)
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Frame {
        let mut out = Frame::filled(w, h, [0; 3]);
        for y in 0..h {
            let sy = (y * self.height) / h;
            for x in 0..w {
                let sx = (x * self.width) / w;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// Dense per-pixel displacement from one frame to the next, `(u, v)` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            vectors: vec![[0.0; 2]; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }
}

/// `true` marks a frame-1 pixel that is not visible in frame 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl OcclusionMask {
    pub fn none(width: usize, height: usize) -> Self {
        OcclusionMask {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_resize() {
        let mut f = Frame::filled(4, 4, [0; 3]);
        f.set(2, 1, [9, 8, 7]);
        let c = f.crop(2, 1, 2, 2).unwrap();
        assert_eq!(c.get(0, 0), [9, 8, 7]);
        let up = c.resize_nearest(4, 4);
        assert_eq!(up.get(1, 1), [9, 8, 7]);
        assert_eq!(up.get(2, 2), [0, 0, 0]);
        assert!(f.crop(3, 3, 2, 2).is_err());
        assert!(Frame::from_raw(2, 2, vec![0; 11]).is_err());
    }
}
