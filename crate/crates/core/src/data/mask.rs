use super::Image;
use crate::error::{Error, Result};

/// Binary lower-face mask: the lower half of an ellipse centred on the crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UMask {
    size: usize,
    values: Vec<u8>,
}

impl UMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.values[y * self.size + x] != 0
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Mask with every pixel set to `on`; used to test the masking contracts.
    pub fn uniform(size: usize, on: bool) -> Self {
        Self {
            size,
            values: vec![on as u8; size * size],
        }
    }

    /// Nearest-neighbour resample to `res × res`.
    pub fn downsample(&self, res: usize) -> Vec<u8> {
        let mut out = vec![0u8; res * res];
        for y in 0..res {
            let sy = (y * self.size + self.size / 2) / res;
            for x in 0..res {
                let sx = (x * self.size + self.size / 2) / res;
                out[y * res + x] = self.values[sy.min(self.size - 1) * self.size
                    + sx.min(self.size - 1)];
            }
        }
        out
    }
}

/// `values[y][x] = 1` iff `y > S/2` and the pixel lies inside the ellipse with
/// semi-axes `0.42·S` (horizontal) and `0.48·S` (vertical) centred at
/// `(S/2, S/2)`.
pub fn build_umask(size: usize) -> Result<UMask> {
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "mask size must be a power of two >= 16, got {size}"
        )));
    }
    let s = size as f64;
    let half = s / 2.0;
    let (ax, ay) = (0.42 * s, 0.48 * s);
    let mut values = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let e = ((fx - half) / ax).powi(2) + ((fy - half) / ay).powi(2);
            if fy > half && e <= 1.0 {
                values[y * size + x] = 1;
            }
        }
    }
    Ok(UMask { size, values })
}

/// `(1 − M)·frame` for every channel.
pub fn mask_frame(frame: &Image, mask: &UMask) -> Result<Image> {
    if frame.width() != mask.size || frame.height() != mask.size {
        return Err(Error::Shape(format!(
            "frame {}x{} vs mask {}",
            frame.width(),
            frame.height(),
            mask.size
        )));
    }
    let mut out = frame.clone();
    let n = mask.size * mask.size;
    for c in 0..3 {
        let plane = out.plane_mut(c);
        for i in 0..n {
            if mask.values[i] != 0 {
                plane[i] = 0.0;
            }
        }
    }
    Ok(out)
}
