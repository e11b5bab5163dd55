//! Image and label-map containers.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Label code for background pixels.
pub const BACKGROUND: u8 = 0;
/// Label code for pixels excluded from supervision and evaluation.
pub const IGNORE: u8 = 255;

/// RGB image with every channel scaled into `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter {
                name: "image size",
                reason: "height and width must be at least 1",
            });
        }
        if pixels.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if let Some(index) = pixels
            .iter()
            .position(|px| px.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::InvalidParameter {
                name: "pixel",
                reason: if pixels[index].iter().any(|c| c.is_nan()) {
                    "channel value is NaN"
                } else {
                    "channel value outside [0, 1]"
                },
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        self.pixels[row * self.width + col]
    }
}

/// Per-pixel class indices. `0` is background and `255` is ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelImage {
    /// Builds a label map without checking class indices against a class
    /// count. Use [`LabelImage::validate`] when the count is known.
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter {
                name: "label map size",
                reason: "height and width must be at least 1",
            });
        }
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Like [`LabelImage::new`], then rejects any value that is neither
    /// below `num_classes` nor [`IGNORE`].
    pub fn with_classes(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        let image = Self::new(height, width, labels)?;
        image.validate(num_classes)?;
        Ok(image)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&v| v != IGNORE && usize::from(v) >= num_classes)
        {
            Some(&value) => Err(Error::InvalidClassIndex { value, num_classes }),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Nearest-neighbour resampling to a grid no larger than the source.
    ///
    /// Target row `i` reads source row `floor(i * height / target_h)`, and
    /// likewise for columns.
    pub fn downsample_nearest(&self, target_h: usize, target_w: usize) -> Result<Self> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidParameter {
                name: "target size",
                reason: "height and width must be at least 1",
            });
        }
        if target_h > self.height || target_w > self.width {
            return Err(Error::Upsampling {
                from_h: self.height,
                from_w: self.width,
                to_h: target_h,
                to_w: target_w,
            });
        }
        let mut labels = Vec::with_capacity(target_h * target_w);
        for i in 0..target_h {
            let src_row = i * self.height / target_h;
            for j in 0..target_w {
                let src_col = j * self.width / target_w;
                labels.push(self.get(src_row, src_col));
            }
        }
        Self::new(target_h, target_w, labels)
    }
}
