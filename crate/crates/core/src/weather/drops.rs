//! Lens raindrops: circular regions replaced by a blend of the underlying
//! content and its Gaussian blur.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaindropParams {
    pub count: usize,
    pub radius_range: [f64; 2],
    /// Blur standard deviation; `0` means half the drop radius.
    pub blur_sigma: f64,
    pub alpha: f64,
}

impl RaindropParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::InvalidParameter(format!("drop radius range [{lo}, {hi}] invalid")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("drop alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("drop blur sigma {} invalid", self.blur_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Drop {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

pub fn sample_drops(height: usize, width: usize, params: &RaindropParams, seed_: u64) -> Vec<Drop> {
    let mut rng = seed::rng(seed_);
    let [lo, hi] = params.radius_range;
    (0..params.count)
        .map(|_| {
            let cx = rng.gen::<f64>() * width as f64;
            let cy = rng.gen::<f64>() * height as f64;
            let radius = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            Drop { cx, cy, radius }
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Gaussian blur of `img` over rows `y0..y1` and columns `x0..x1`, reading
/// outside the box with edge clamping. Output is box-local, interleaved.
fn blur_box<S: Scalar>(img: &ImageTensor<S>, sigma: f64, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height() as isize, img.width() as isize, img.channels());
    let (bw, bh) = (x1 - x0, y1 - y0);
    // horizontal pass over the rows the vertical pass will read
    let ry0 = (y0 as isize - r).max(0);
    let ry1 = (y1 as isize + r).min(h);
    let mut horiz = vec![0.0; (ry1 - ry0) as usize * bw * c];
    for y in ry0..ry1 {
        for x in 0..bw {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sx = (x0 as isize + x as isize + t as isize - r).clamp(0, w - 1);
                    acc += kv * img.get(y as usize, sx as usize, ch).to_f64_lossy();
                }
                horiz[((y - ry0) as usize * bw + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; bh * bw * c];
    for y in 0..bh {
        for x in 0..bw {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sy = (y0 as isize + y as isize + t as isize - r).clamp(0, h - 1);
                    acc += kv * horiz[((sy - ry0) as usize * bw + x) * c + ch];
                }
                out[(y * bw + x) * c + ch] = acc;
            }
        }
    }
    out
}

pub fn apply_raindrops<S: Scalar>(clean: &ImageTensor<S>, params: &RaindropParams, seed_: u64) -> Result<ImageTensor<S>> {
    params.validate()?;
    let (h, w) = (clean.height(), clean.width());
    let limit = h.min(w) as f64 / 2.0;
    if params.radius_range[1] > limit {
        return Err(Error::InvalidParameter(format!("drop radius {} exceeds half the image extent {limit}", params.radius_range[1])));
    }
    if params.count == 0 || params.alpha == 0.0 {
        return Ok(clean.clone());
    }
    let mut img = clean.clone();
    let c = img.channels();
    for d in sample_drops(h, w, params, seed_) {
        let sigma = if params.blur_sigma > 0.0 { params.blur_sigma } else { (d.radius / 2.0).max(1e-3) };
        let y0 = (d.cy - d.radius).floor().max(0.0) as usize;
        let x0 = (d.cx - d.radius).floor().max(0.0) as usize;
        let y1 = ((d.cy + d.radius).ceil() as usize + 1).min(h);
        let x1 = ((d.cx + d.radius).ceil() as usize + 1).min(w);
        if y0 >= y1 || x0 >= x1 {
            continue;
        }
        let blurred = blur_box(&img, sigma, y0, y1, x0, x1);
        let bw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                if (x as f64 - d.cx).powi(2) + (y as f64 - d.cy).powi(2) > d.radius * d.radius {
                    continue;
                }
                for ch in 0..c {
                    let v = img.get(y, x, ch).to_f64_lossy();
                    let b = blurred[((y - y0) * bw + (x - x0)) * c + ch];
                    img.set(y, x, ch, S::lit(((1.0 - params.alpha) * v + params.alpha * b).clamp(0.0, 1.0)));
                }
            }
        }
    }
    Ok(img)
}
