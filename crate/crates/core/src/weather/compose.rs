//! The four weather variants of a clean image.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::drops::{apply_raindrops, RaindropParams};
use super::haze::{apply_haze, DepthModel, HazeParams};
use super::streaks::{render_rain_streaks, Intensity, RainStreakParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HazeLevel {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariantTag {
    pub rain: Intensity,
    pub haze: HazeLevel,
}

impl VariantTag {
    pub const ALL: [VariantTag; 4] = [
        VariantTag { rain: Intensity::Heavy, haze: HazeLevel::A },
        VariantTag { rain: Intensity::Heavy, haze: HazeLevel::B },
        VariantTag { rain: Intensity::Light, haze: HazeLevel::A },
        VariantTag { rain: Intensity::Light, haze: HazeLevel::B },
    ];
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let haze = match self.haze {
            HazeLevel::A => "hazeA",
            HazeLevel::B => "hazeB",
        };
        write!(f, "{}-{haze}", self.rain.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant tag `{s}`")))
    }
}

impl Serialize for VariantTag {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariantTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to reproduce one degraded image from its clean source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecipe {
    pub seed: u64,
    pub streak: RainStreakParams,
    pub drop: RaindropParams,
    pub haze: HazeParams,
}

impl WeatherRecipe {
    /// Streaks, then drops, then haze.
    pub fn apply<S: Scalar>(&self, clean: &ImageTensor<S>) -> Result<ImageTensor<S>> {
        let img = render_rain_streaks(clean, &self.streak, seed::derive(self.seed, "streak"))?;
        let img = apply_raindrops(&img, &self.drop, seed::derive(self.seed, "drop"))?;
        apply_haze(&img, &self.haze)
    }
}

/// Ranges from which per-image weather parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherConfig {
    pub light_density: f64,
    pub streak_length: f64,
    pub streak_width: f64,
    pub light_alpha: f64,
    pub heavy_density_factor: f64,
    pub heavy_alpha_factor: f64,
    pub orientation_range_deg: [f64; 2],
    pub drop: RaindropParams,
    pub light_range: [f64; 2],
    pub beta_a: [f64; 2],
    pub beta_b: [f64; 2],
    pub depth: DepthModel,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self {
            light_density: 2500.0,
            streak_length: 14.0,
            streak_width: 1.0,
            light_alpha: 0.45,
            heavy_density_factor: 4.0,
            heavy_alpha_factor: 1.5,
            orientation_range_deg: [-30.0, 30.0],
            drop: RaindropParams { count: 3, radius_range: [2.0, 6.0], blur_sigma: 0.0, alpha: 0.85 },
            light_range: [0.7, 1.0],
            beta_a: [0.6, 1.8],
            beta_b: [1.8, 3.0],
            depth: DepthModel::default(),
        }
    }
}

impl WeatherConfig {
    /// Every effect disabled.
    pub fn clear() -> Self {
        Self {
            light_density: 0.0,
            drop: RaindropParams { count: 0, ..Self::default().drop },
            beta_a: [0.0, 0.0],
            beta_b: [0.0, 0.0],
            ..Self::default()
        }
    }

    fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    }

    /// Draw the recipe of one variant of the image seeded by `base_seed`.
    pub fn recipe(&self, tag: VariantTag, base_seed: u64) -> WeatherRecipe {
        let seed_ = seed::derive(base_seed, &format!("variant/{tag}"));
        let mut rng = seed::rng_for(seed_, "params");
        let (density, alpha) = match tag.rain {
            Intensity::Light => (self.light_density, self.light_alpha),
            Intensity::Heavy => (self.light_density * self.heavy_density_factor, (self.light_alpha * self.heavy_alpha_factor).min(1.0)),
        };
        let streak = RainStreakParams {
            intensity: tag.rain,
            orientation_deg: Self::uniform(&mut rng, self.orientation_range_deg),
            density,
            length: self.streak_length,
            width: self.streak_width,
            alpha,
        };
        let atmospheric_light = [(); 3].map(|_| Self::uniform(&mut rng, self.light_range));
        let beta = Self::uniform(&mut rng, if tag.haze == HazeLevel::A { self.beta_a } else { self.beta_b });
        WeatherRecipe { seed: seed_, streak, drop: self.drop.clone(), haze: HazeParams { atmospheric_light, beta, depth: self.depth.clone() } }
    }
}

/// One degraded variant of a clean image.
pub struct Variant<S> {
    pub tag: VariantTag,
    pub image: ImageTensor<S>,
    pub recipe: WeatherRecipe,
}

pub fn compose_variants<S: Scalar>(clean: &ImageTensor<S>, base_seed: u64, config: &WeatherConfig) -> Result<Vec<Variant<S>>> {
    VariantTag::ALL
        .into_iter()
        .map(|tag| {
            let recipe = config.recipe(tag, base_seed);
            Ok(Variant { tag, image: recipe.apply(clean)?, recipe })
        })
        .collect()
}
