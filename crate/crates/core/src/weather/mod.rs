//! Synthetic rain and haze, and the paired datasets built from them.

pub mod compose;
pub mod dataset;
pub mod drops;
pub mod haze;
pub mod streaks;

pub use compose::{compose_variants, HazeLevel, Variant, VariantTag, WeatherConfig, WeatherRecipe};
pub use dataset::{build_paired_dataset, load_pairs, BuildOutcome, DatasetManifest, ManifestRecord, Pair, Split, SplitPolicy, SynthConfig};
pub use drops::{apply_raindrops, RaindropParams};
pub use haze::{apply_haze, apply_haze_with_depth, transmission_map, DepthModel, HazeParams, ScalarMap};
pub use streaks::{render_rain_streaks, Intensity, RainStreakParams};
