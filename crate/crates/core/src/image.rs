//! Three-channel image planes, depth maps and their file I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `H×W×3` linear intensities, stored planar (`[channel][row][col]`).
///
/// Values are nominally in `[0, 1]`. Formation-model outputs are kept
/// unclipped until export, so a plane may carry out-of-range values; those
/// planes have [`ImagePlane::is_unclipped`] set.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
    unclipped: bool,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
            unclipped: false,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    /// Wraps planar data, flagging it when any value falls outside `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "planar buffer length");
        let unclipped = data.iter().any(|v| !(0.0..=1.0).contains(v));
        Self {
            height,
            width,
            data,
            unclipped,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// True when some value lies outside `[0, 1]` (a pre-clip intermediate).
    pub fn is_unclipped(&self) -> bool {
        self.unclipped
    }

    pub fn clipped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            unclipped: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Clips, then rounds to the 8-bit grid and back.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self::from_planar(self.height, self.width, data)
    }

    /// `1×3×H×W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    /// Inverse of [`ImagePlane::to_tensor`]; accepts any `1×3×H×W` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [1, 3, h, w] => Ok(Self::from_planar(
                *h,
                *w,
                t.data().iter().map(|v| v.f64()).collect(),
            )),
            other => Err(Error::validation(format!(
                "expected a 1×3×H×W tensor, got {other:?}"
            ))),
        }
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane = self.channel(c);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let top =
                        plane[y0 * self.width + x0] * (1.0 - wx) + plane[y0 * self.width + x1] * wx;
                    let bot =
                        plane[y1 * self.width + x0] * (1.0 - wx) + plane[y1 * self.width + x1] * wx;
                    data.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    /// BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// Decodes any 8- or 16-bit image file the `image` crate understands.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().bytes_per_pixel() / img.color().channel_count() <= 1 {
            let rgb = img.to_rgb8();
            Self::from_fn(h, w, |c, y, x| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        } else {
            let rgb = img.to_rgb16();
            Self::from_fn(h, w, |c, y, x| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
            })
        }
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px =
                |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Clips to `[0, 1]` and writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Per-pixel scene depth, `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "depth buffer length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Nearest-neighbour resampling (no mixing across depth edges).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                    .min(self.width - 1);
                data.push(self.get(sy, sx));
            }
        }
        Self::new(height, width, data)
    }
}
