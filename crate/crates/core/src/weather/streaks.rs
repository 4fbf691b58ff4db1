//! Rain streaks: antialiased oriented segments, a short blur along the fall
//! direction, and screen-like compositing toward white.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Light,
    Heavy,
}

impl Intensity {
    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Light => "light",
            Intensity::Heavy => "heavy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainStreakParams {
    pub intensity: Intensity,
    /// Angle from vertical, positive leaning right.
    pub orientation_deg: f64,
    /// Streaks per megapixel.
    pub density: f64,
    pub length: f64,
    pub width: f64,
    pub alpha: f64,
}

impl RainStreakParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.density.is_finite() && self.density >= 0.0) {
            return bad(format!("streak density {} must be >= 0", self.density));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("streak alpha {} outside [0, 1]", self.alpha));
        }
        if !(-90.0..=90.0).contains(&self.orientation_deg) {
            return bad(format!("streak orientation {} outside [-90, 90]", self.orientation_deg));
        }
        if !(self.length.is_finite() && self.length >= 0.0 && self.width.is_finite() && self.width > 0.0) {
            return bad(format!("streak length {} / width {} invalid", self.length, self.width));
        }
        Ok(())
    }

    /// Unit fall direction `(dx, dy)` in image coordinates (y down).
    pub fn direction(&self) -> (f64, f64) {
        let r = self.orientation_deg.to_radians();
        (r.sin(), r.cos())
    }

    pub fn streak_count(&self, height: usize, width: usize) -> usize {
        (self.density * (height * width) as f64 / 1e6).round() as usize
    }
}

/// One streak as a segment between two points, in pixel-centre coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Draw the streak segments for an image of `height×width`.
pub fn sample_streaks(height: usize, width: usize, params: &RainStreakParams, seed_: u64) -> Vec<Segment> {
    let mut rng = seed::rng(seed_);
    let (dx, dy) = params.direction();
    (0..params.streak_count(height, width))
        .map(|_| {
            let cx = rng.gen::<f64>() * width as f64;
            let cy = rng.gen::<f64>() * height as f64;
            let half = 0.5 * params.length * rng.gen_range(0.75..1.25);
            Segment { x0: cx - dx * half, y0: cy - dy * half, x1: cx + dx * half, y1: cy + dy * half }
        })
        .collect()
}

pub fn point_segment_distance(px: f64, py: f64, s: &Segment) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - s.x0) * vx + (py - s.y0) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (s.x0 + t * vx - px, s.y0 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Coverage mask in `[0, 1]`, maximum over segments.
pub fn rasterize(height: usize, width: usize, segments: &[Segment], stroke: f64) -> Vec<f64> {
    let mut mask = vec![0.0f64; height * width];
    let reach = stroke / 2.0 + 0.5;
    for s in segments {
        let xmin = (s.x0.min(s.x1) - reach).floor().max(0.0) as usize;
        let ymin = (s.y0.min(s.y1) - reach).floor().max(0.0) as usize;
        let xmax = ((s.x0.max(s.x1) + reach).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let ymax = ((s.y0.max(s.y1) + reach).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        if xmin >= width || ymin >= height {
            continue;
        }
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let cov = (reach - point_segment_distance(x as f64, y as f64, s)).clamp(0.0, 1.0);
                let m = &mut mask[y * width + x];
                *m = m.max(cov);
            }
        }
    }
    mask
}

/// Three-tap `[1/4, 1/2, 1/4]` blur along `(dx, dy)` with border clamping.
pub fn directional_blur(mask: &[f64], height: usize, width: usize, dx: f64, dy: f64) -> Vec<f64> {
    let (ox, oy) = (dx.round() as isize, dy.round() as isize);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        mask[y * width + x]
    };
    let mut out = vec![0.0; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            out[y as usize * width + x as usize] = 0.25 * at(y - oy, x - ox) + 0.5 * at(y, x) + 0.25 * at(y + oy, x + ox);
        }
    }
    out
}

/// `out = clean + α·M·(1 − clean)` per channel.
pub fn composite<S: Scalar>(clean: &ImageTensor<S>, mask: &[f64], alpha: f64) -> ImageTensor<S> {
    let c = clean.channels();
    let mut out = clean.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(mask) {
        if m == 0.0 {
            continue;
        }
        for v in px {
            let j = v.to_f64_lossy();
            *v = S::lit((j + alpha * m * (1.0 - j)).clamp(0.0, 1.0));
        }
    }
    out
}

pub fn render_rain_streaks<S: Scalar>(clean: &ImageTensor<S>, params: &RainStreakParams, seed_: u64) -> Result<ImageTensor<S>> {
    params.validate()?;
    let (h, w) = (clean.height(), clean.width());
    let segments = sample_streaks(h, w, params, seed_);
    if segments.is_empty() || params.alpha == 0.0 {
        return Ok(clean.clone());
    }
    let mask = rasterize(h, w, &segments, params.width);
    let (dx, dy) = params.direction();
    let mask = directional_blur(&mask, h, w, dx, dy);
    Ok(composite(clean, &mask, params.alpha))
}
