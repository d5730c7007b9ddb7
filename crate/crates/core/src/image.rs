//! RGB float images, square crops with mean padding, drawing, and PNG I/O.

use std::path::Path;

use crate::error::Result;
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub type Rgb = [f32; 3];

/// Mean and standard deviation used to normalise network inputs.
const INPUT_MEAN: f32 = 0.5;
const INPUT_STD: f32 = 0.25;

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image buffer size");
        Self { width, height, data }
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

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Alpha-blends `c` over pixel `(x, y)`; out-of-bounds writes are ignored.
    pub fn blend(&mut self, x: i64, y: i64, c: Rgb, alpha: f32) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        for (d, v) in self.data[i..i + 3].iter_mut().zip(c) {
            *d += alpha * (v - *d);
        }
    }

    /// Per-channel mean.
    pub fn mean(&self) -> Rgb {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for k in 0..3 {
                acc[k] += px[k] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        acc.map(|v| (v / n) as f32)
    }

    pub fn map(&self, f: impl Fn(usize, f32) -> f32) -> Self {
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i % 3, v)).collect();
        Self { width: self.width, height: self.height, data }
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)` covers
    /// `[i, i+1) x [j, j+1)`; samples outside the image read `pad`.
    pub fn sample(&self, x: f64, y: f64, pad: Rgb) -> Rgb {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
        let at = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                pad
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let (p00, p10, p01, p11) = (at(x0, y0), at(x0 + 1.0, y0), at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0));
        let mut out = [0f32; 3];
        for k in 0..3 {
            let top = p00[k] + ax * (p10[k] - p00[k]);
            let bot = p01[k] + ax * (p11[k] - p01[k]);
            out[k] = top + ay * (bot - top);
        }
        out
    }

    /// Resamples the square of side `side` centred on `(cx, cy)` to
    /// `out x out` pixels, padding with the image mean.
    pub fn crop_resize(&self, cx: f64, cy: f64, side: f64, out: usize) -> Self {
        let pad = self.mean();
        let scale = side / out as f64;
        // average 2x2 samples per output pixel when shrinking
        let sub = if scale > 1.5 { 2 } else { 1 };
        let x0 = cx - side / 2.0;
        let y0 = cy - side / 2.0;
        let mut img = Self::filled(out, out, pad);
        let w = 1.0 / (sub * sub) as f32;
        for j in 0..out {
            for i in 0..out {
                let mut acc = [0f32; 3];
                for sj in 0..sub {
                    for si in 0..sub {
                        let u = i as f64 + (si as f64 + 0.5) / sub as f64;
                        let v = j as f64 + (sj as f64 + 0.5) / sub as f64;
                        let c = self.sample(x0 + u * scale, y0 + v * scale, pad);
                        for k in 0..3 {
                            acc[k] += w * c[k];
                        }
                    }
                }
                img.put(i, j, acc);
            }
        }
        img
    }

    /// Normalised `[3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                data[k * plane + p] = T::lit(((px[k] - INPUT_MEAN) / INPUT_STD) as f64);
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).unwrap()
    }

    /// Stacks images of equal size into an `[N, 3, H, W]` batch.
    pub fn batch<T: Scalar>(images: &[&Image]) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
        Tensor::stack(&parts).expect("images of one batch share a size")
    }

    /// Draws a box outline of the given thickness.
    pub fn draw_box<T: Scalar>(&mut self, b: &BBox<T>, color: Rgb, thickness: i64) {
        let r = |v: T| v.to_f64_lossy().round() as i64;
        let (x0, y0, x1, y1) = (r(b.x0), r(b.y0), r(b.x1) - 1, r(b.y1) - 1);
        for t in 0..thickness {
            for x in x0 - t..=x1 + t {
                self.blend(x, y0 - t, color, 1.0);
                self.blend(x, y1 + t, color, 1.0);
            }
            for y in y0 - t..=y1 + t {
                self.blend(x0 - t, y, color, 1.0);
                self.blend(x1 + t, y, color, 1.0);
            }
        }
    }

    /// A `w x h` heat map of `values` (row-major) scaled to `[0, 1]` by
    /// their range, with a blue-to-red colour ramp.
    pub fn heatmap(values: &[f64], w: usize, h: usize) -> Self {
        assert_eq!(values.len(), w * h, "heatmap size");
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = Self::filled(w, h, [0.0; 3]);
        for (i, &v) in values.iter().enumerate() {
            let t = ((v - lo) / span) as f32;
            let c = [t.clamp(0.0, 1.0), (1.0 - (2.0 * t - 1.0).abs()).clamp(0.0, 1.0), (1.0 - t).clamp(0.0, 1.0)];
            img.put(i % w, i / w, c);
        }
        img
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Self {
        let mut img = Self::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, self.get(x * self.width / w, y * self.height / h));
            }
        }
        img
    }

    /// Places `other` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, other: &Image, x: usize, y: usize) {
        for j in 0..other.height.min(self.height.saturating_sub(y)) {
            for i in 0..other.width.min(self.width.saturating_sub(x)) {
                self.put(x + i, y + j, other.get(i, j));
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches size");
        buf.save(path)?;
        Ok(())
    }
}
