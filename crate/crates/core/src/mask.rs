//! Known/missing masks: corruption, output compositing, and min-pooling to
//! discriminator patch grids.
//!
//! Mask convention: `1` marks a known pixel, `0` a missing one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// Values must be 0 or 1.
    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                got: vec![values.len()],
            });
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::SchemaVersionMismatch(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
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

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, known: bool) {
        self.values[y * self.width + x] = known as u8;
    }

    pub fn known_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn missing_count(&self) -> usize {
        self.values.len() - self.known_count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.values.iter().map(|v| *v as f64).collect(),
        )
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the missing region.
    pub fn missing_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 0 {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Area of the missing-region bounding box; the object scale used for OKS.
    pub fn missing_bbox_area(&self) -> f64 {
        self.missing_bbox()
            .map(|(x0, y0, x1, y1)| ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64)
            .unwrap_or(0.0)
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.values[y * self.width + x] = self.get(y, self.width - 1 - x);
            }
        }
        out
    }
}

fn check_image(image: &Tensor, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dims();
    if image.shape() != [3, h, w] {
        return Err(Error::ShapeMismatch {
            expected: vec![3, h, w],
            got: image.shape().to_vec(),
        });
    }
    Ok(())
}

/// `image ⊙ mask`, broadcasting the mask over channels.
pub fn corrupt(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_image(image, mask)?;
    let hw = mask.height * mask.width;
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        for (v, m) in plane.iter_mut().zip(&mask.values) {
            *v *= *m as f64;
        }
    }
    Ok(out)
}

/// `raw ⊙ (1 − M) + corrupted ⊙ M`. Known pixels are copied from `corrupted`,
/// so they match it bit for bit.
pub fn composite(raw: &Tensor, corrupted: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_image(raw, mask)?;
    check_image(corrupted, mask)?;
    let hw = mask.height * mask.width;
    let mut out = raw.clone();
    for (plane, src) in out.data_mut().chunks_mut(hw).zip(corrupted.data().chunks(hw)) {
        for ((v, s), m) in plane.iter_mut().zip(src).zip(&mask.values) {
            if *m == 1 {
                *v = *s;
            }
        }
    }
    Ok(out)
}

/// Half-open source band `[floor(i·src/dst), ceil((i+1)·src/dst))`.
pub fn band(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let lo = i * src / dst;
    let hi = ((i + 1) * src).div_ceil(dst);
    (lo, hi)
}

/// Min-pools a mask to `target_h x target_w` over adaptive bands.
pub fn minpool_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    let (h, w) = mask.dims();
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::InvalidTarget {
            src_h: h,
            src_w: w,
            target_h,
            target_w,
        });
    }
    let mut out = Mask::ones(target_h, target_w);
    for i in 0..target_h {
        let (y0, y1) = band(i, h, target_h);
        for j in 0..target_w {
            let (x0, x1) = band(j, w, target_w);
            let known = (y0..y1).all(|y| (x0..x1).all(|x| mask.get(y, x) == 1));
            out.set(i, j, known);
        }
    }
    Ok(out)
}
