use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// RGB image in planar (channel-major) layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for (c, v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(*v);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    /// Channel-mean luminance at a pixel.
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.rgb(x, y);
        (r + g + b) / 3.0
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the nearest multiple of 1/255 (what an 8-bit
    /// lossless image stores).
    pub fn quantize8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Rows `y0..y0+h` as a new image.
    pub fn crop_rows(&self, y0: usize, h: usize) -> Image {
        let mut out = Image::new(self.width, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..self.width {
                    out.set(c, x, y, self.get(c, x, y0 + y));
                }
            }
        }
        out
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Builds an image from sample `index` of an `[N, 3, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::Shape(format!(
                "expected [N,3,H,W] tensor with N > {index}, got {s:?}"
            )));
        }
        let n = 3 * s[2] * s[3];
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| v.to_f64_lossy() as f32)
            .collect();
        Image::from_planar(s[3], s[2], data)
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn stack<T: Real>(images: &[&Image]) -> Tensor<T> {
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        assert_eq!((img.width, img.height), (w, h), "stack size mismatch");
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data).expect("stack shape")
}
