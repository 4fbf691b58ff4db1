//! Atmospheric scattering: `I = J·t + A·(1 − t)` with `t = exp(−β·d)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Per-pixel scalar field (depth or transmission), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} map needs {} values, got {}", height * width, values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, values: vec![v; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Where scene depth comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthModel {
    /// Linear in the row index: `top` on the first row, `bottom` on the last.
    VerticalRamp { top: f64, bottom: f64 },
    Constant { depth: f64 },
}

impl Default for DepthModel {
    fn default() -> Self {
        DepthModel::VerticalRamp { top: 1.0, bottom: 0.1 }
    }
}

impl DepthModel {
    pub fn render(&self, height: usize, width: usize) -> ScalarMap {
        match *self {
            DepthModel::VerticalRamp { top, bottom } => {
                let mut values = Vec::with_capacity(height * width);
                for y in 0..height {
                    let f = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                    values.extend(std::iter::repeat_n(top + (bottom - top) * f, width));
                }
                ScalarMap { height, width, values }
            }
            DepthModel::Constant { depth } => ScalarMap::constant(height, width, depth),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub atmospheric_light: [f64; 3],
    pub beta: f64,
    pub depth: DepthModel,
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("scattering coefficient {} must be finite and >= 0", self.beta)));
        }
        if self.atmospheric_light.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParameter(format!("atmospheric light {:?} outside [0, 1]", self.atmospheric_light)));
        }
        Ok(())
    }
}

/// `t = exp(−β·d)`, bounded below by the smallest positive double.
pub fn transmission_map(depth: &ScalarMap, beta: f64) -> Result<ScalarMap> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("scattering coefficient {beta} must be finite and >= 0")));
    }
    if let Some(d) = depth.values.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidParameter(format!("depth value {d} must be finite and >= 0")));
    }
    let values = depth.values.iter().map(|d| (-beta * d).exp().max(f64::MIN_POSITIVE)).collect();
    Ok(ScalarMap { height: depth.height, width: depth.width, values })
}

/// Haze with an explicit depth map.
pub fn apply_haze_with_depth<S: Scalar>(clean: &ImageTensor<S>, light: [f64; 3], beta: f64, depth: &ScalarMap) -> Result<ImageTensor<S>> {
    if (depth.height, depth.width) != (clean.height(), clean.width()) {
        return Err(Error::Shape(format!(
            "depth map {}x{} does not match image {}x{}",
            depth.height,
            depth.width,
            clean.height(),
            clean.width()
        )));
    }
    let t = transmission_map(depth, beta)?;
    let c = clean.channels();
    let mut out = clean.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let ti = t.values[i];
        for (ch, v) in px.iter_mut().enumerate() {
            let a = light[if c == 1 { 0 } else { ch }];
            let j = v.to_f64_lossy();
            *v = S::lit((j * ti + a * (1.0 - ti)).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

pub fn apply_haze<S: Scalar>(clean: &ImageTensor<S>, params: &HazeParams) -> Result<ImageTensor<S>> {
    params.validate()?;
    let depth = params.depth.render(clean.height(), clean.width());
    apply_haze_with_depth(clean, params.atmospheric_light, params.beta, &depth)
}

/// Invert the scattering model for known light and transmission.
pub fn dehaze_known<S: Scalar>(hazy: &ImageTensor<S>, light: [f64; 3], transmission: &ScalarMap) -> ImageTensor<S> {
    let c = hazy.channels();
    let mut out = hazy.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let t = transmission.values[i];
        for (ch, v) in px.iter_mut().enumerate() {
            let a = light[if c == 1 { 0 } else { ch }];
            *v = S::lit((v.to_f64_lossy() - a * (1.0 - t)) / t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, s: u64) -> ImageTensor<f64> {
        let mut r = seed::rng(s);
        ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn transmission_examples() {
        let d = ScalarMap::constant(3, 2, 7.0);
        assert!(transmission_map(&d, 0.0).unwrap().values.iter().all(|&t| t == 1.0));
        let d = ScalarMap::constant(2, 2, 2f64.ln());
        assert!(transmission_map(&d, 1.0).unwrap().values.iter().all(|&t| (t - 0.5).abs() < 1e-15));
        let mut r = seed::rng(1);
        let d = ScalarMap::new(4, 4, (0..16).map(|_| r.gen_range(0.0..3.0)).collect()).unwrap();
        let t = transmission_map(&d, 0.7).unwrap();
        for (tv, dv) in t.values.iter().zip(&d.values) {
            assert_eq!(*tv, (-0.7 * dv).exp());
        }
        assert!(transmission_map(&d, -0.1).is_err());
        assert!(transmission_map(&ScalarMap::constant(1, 1, f64::NAN), 1.0).is_err());
        assert!(transmission_map(&ScalarMap::constant(1, 1, 1e9), 1e9).unwrap().values[0] > 0.0);
    }

    #[test]
    fn hand_arithmetic_case() {
        let clean = ImageTensor::<f64>::new(2, 2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.25]).unwrap();
        let depth = ScalarMap::constant(2, 2, 2f64.ln());
        let out = apply_haze_with_depth(&clean, [0.8; 3], 1.0, &depth).unwrap();
        for (o, j) in out.data().iter().zip(clean.data()) {
            assert!((o - (0.5 * j + 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_beta_is_identity_and_large_beta_gives_light() {
        let clean = random_image(5, 6, 2);
        let p = HazeParams { atmospheric_light: [0.9, 0.8, 0.75], beta: 0.0, depth: DepthModel::default() };
        assert_eq!(apply_haze(&clean, &p).unwrap(), clean);
        // ramp minimum is 0.1, so beta = 80 gives beta·min(d) = 8
        let p = HazeParams { beta: 80.0, ..p };
        let out = apply_haze(&clean, &p).unwrap();
        for px in out.data().chunks(3) {
            for (v, a) in px.iter().zip(p.atmospheric_light) {
                assert!((v - a).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let clean = random_image(4, 4, 3);
        assert!(matches!(apply_haze_with_depth(&clean, [0.9; 3], 1.0, &ScalarMap::constant(4, 5, 1.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn ramp_depth() {
        let d = DepthModel::default().render(10, 3);
        assert_eq!(d.get(0, 2), 1.0);
        assert!((d.get(9, 0) - 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip_with_known_parameters(s in 0u64..1000, beta in 0.0f64..2.0, a in 0.7f64..1.0) {
            let clean = random_image(6, 5, s);
            let depth = DepthModel::default().render(6, 5);
            let hazy = apply_haze_with_depth(&clean, [a; 3], beta, &depth).unwrap();
            let t = transmission_map(&depth, beta).unwrap();
            let back = dehaze_known(&hazy, [a; 3], &t);
            for (x, y) in back.data().iter().zip(clean.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn more_scattering_moves_toward_light(s in 0u64..1000, b1 in 0.0f64..3.0, db in 0.0f64..3.0) {
            let clean = random_image(4, 4, s);
            let light = [0.85, 0.9, 0.95];
            let depth = DepthModel::default().render(4, 4);
            let lo = apply_haze_with_depth(&clean, light, b1, &depth).unwrap();
            let hi = apply_haze_with_depth(&clean, light, b1 + db, &depth).unwrap();
            for (i, (l, h)) in lo.data().iter().zip(hi.data()).enumerate() {
                let a = light[i % 3];
                prop_assert!((h - a).abs() <= (l - a).abs() + 1e-12);
            }
        }

        #[test]
        fn output_in_unit_range(s in 0u64..1000, beta in 0.0f64..5.0) {
            let clean = random_image(4, 3, s);
            let p = HazeParams { atmospheric_light: [1.0, 0.7, 0.0], beta, depth: DepthModel::default() };
            prop_assert!(apply_haze(&clean, &p).unwrap().in_unit_range());
        }
    }
}
