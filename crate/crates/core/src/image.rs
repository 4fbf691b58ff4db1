//! Interleaved `H×W×C` images, the payload of the synthesis pipeline and of
//! every file read or written by the tools.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> ImageTensor<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite pixel value {v}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.max(S::zero()).min(S::one());
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp01();
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= S::zero() && v <= S::one())
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn cast<T: Scalar>(&self) -> ImageTensor<T> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Single-sample tensor `[C, 1, H, W]`.
    pub fn to_tensor(&self) -> Tensor<S> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![S::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::from_vec(Shape::new(c, 1, h, w), out).expect("shape consistent")
    }

    /// Sample `n` of a `[C, N, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<S>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c() != 1 && s.c() != 3 {
            return Err(Error::Shape(format!("tensor {s} is not an image batch")));
        }
        if n >= s.n() {
            return Err(Error::Shape(format!("sample {n} out of batch {}", s.n())));
        }
        let (c, h, w) = (s.c(), s.h(), s.w());
        let mut data = vec![S::zero(); h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = t.at(ch, n, y, x);
                }
            }
        }
        Ok(Self { height: h, width: w, channels: c, data })
    }

    /// Luma with 0.299 / 0.587 / 0.114 weights; single-channel images pass through.
    pub fn to_luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|v| v.to_f64_lossy()).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0].to_f64_lossy() + 0.587 * p[1].to_f64_lossy() + 0.114 * p[2].to_f64_lossy())
            .collect()
    }

    /// 8-bit quantisation with round-half-up after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let quant = |v: S| -> u8 { (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8 };
        match self.channels {
            3 => self.data.iter().map(|&v| quant(v)).collect(),
            _ => self.data.iter().flat_map(|&v| [quant(v); 3]).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| S::lit(b as f64 / 255.0)).collect();
        Self::new(h as usize, w as usize, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_counts_and_nan() {
        assert!(ImageTensor::<f32>::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(ImageTensor::<f32>::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageTensor::<f32>::new(2, 1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = ImageTensor::<f64>::from_fn(3, 4, 3, |y, x, c| (y * 12 + x * 3 + c) as f64 / 40.0);
        let t = img.to_tensor();
        assert_eq!(t.shape(), Shape::new(3, 1, 3, 4));
        assert_eq!(t.at(2, 0, 1, 3), img.get(1, 3, 2));
        assert_eq!(ImageTensor::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::<f32>::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 90) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::<f32>::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    impl ImageTensor<f32> {
        fn max_abs_diff(&self, o: &Self) -> f32 {
            self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
        }
    }
}
