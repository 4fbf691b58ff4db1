//! Procedural road-like scenes: bright stripes over a textured surface.
//!
//! Labels come straight from the generator: the number of stripes (1 to 3)
//! and their lean, i.e. the horizontal displacement between the bottom and
//! top rows in units of a quarter of the image width, in `[-1, 1]`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;
use crate::weather::dataset::LABELS_FILE;

pub const CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLabel {
    /// Stripe count, 1 to 3.
    pub class: usize,
    pub offset: f64,
}

/// Render one scene of `size×size` from `seed_`.
pub fn render_toy_scene<S: Scalar>(size: usize, seed_: u64) -> (ImageTensor<S>, ToyLabel) {
    let mut rng = seed::rng_for(seed_, "scene");
    let class = rng.gen_range(1..=CLASSES);
    let offset = rng.gen_range(-1.0..1.0);
    let scale = size as f64 / 64.0;
    let spacing = rng.gen_range(12.0..16.0) * scale;
    let center = size as f64 / 2.0 + rng.gen_range(-5.0..5.0) * scale;
    let half_width = rng.gen_range(1.25..1.75) * scale;
    let bright = rng.gen_range(0.8..0.95);
    let stripe = [bright, bright, bright * rng.gen_range(0.7..1.0)];
    let gray = rng.gen_range(0.2..0.45);
    let tint: [f64; 3] = [(); 3].map(|_| rng.gen_range(-0.04..0.04));
    let waves: Vec<(f64, f64, f64, f64)> =
        (0..3).map(|_| (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.3), rng.gen_range(0.01..0.04))).collect();
    let grain: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let lean = offset * size as f64 / 4.0;
    let denom = (size.max(2) - 1) as f64;
    let img = ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut bg = gray * (0.8 + 0.4 * yf / denom) + tint[c] + grain[y * size + x];
        for &(fy, fx, ph, amp) in &waves {
            bg += amp * (fy * yf + fx * xf + ph).sin();
        }
        // lean is measured from the bottom row upward
        let shift = lean * (1.0 - yf / denom) - lean / 2.0;
        let cover = (0..class)
            .map(|i| {
                let xi = center + (i as f64 - (class - 1) as f64 / 2.0) * spacing + shift;
                (half_width + 0.5 - (xf - xi).abs()).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max);
        S::lit((bg * (1.0 - cover) + stripe[c] * cover).clamp(0.0, 1.0))
    });
    (img, ToyLabel { class, offset })
}

/// A labelled scene.
#[derive(Clone, Debug)]
pub struct ToySample<S> {
    pub image: ImageTensor<S>,
    pub label: ToyLabel,
}

#[derive(Clone, Debug)]
pub struct ToyDataset<S> {
    pub train: Vec<ToySample<S>>,
    pub test: Vec<ToySample<S>>,
}

impl<S: Scalar> ToyDataset<S> {
    pub fn generate(n_train: usize, n_test: usize, size: usize, seed_: u64) -> Self {
        let make = |split: &str, n: usize| {
            (0..n)
                .map(|i| {
                    let (image, label) = render_toy_scene(size, seed::derive(seed_, &format!("{split}/{i}")));
                    ToySample { image, label }
                })
                .collect()
        };
        Self { train: make("train", n_train), test: make("test", n_test) }
    }
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    file: String,
    #[serde(flatten)]
    label: ToyLabel,
}

/// Write `train/` and `test/` PNGs plus a label file; returns the dataset as written.
pub fn write_toy_dataset(dir: &Path, n_train: usize, n_test: usize, size: usize, seed_: u64) -> Result<ToyDataset<f32>> {
    let data = ToyDataset::<f32>::generate(n_train, n_test, size, seed_);
    let mut lines = String::new();
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            let file = format!("{split}/scene_{i:04}.png");
            s.image.save_png(&dir.join(&file))?;
            lines.push_str(&serde_json::to_string(&LabelLine { file, label: s.label })?);
            lines.push('\n');
        }
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(data)
}

/// Read a directory produced by [`write_toy_dataset`].
pub fn load_toy_dataset<S: Scalar>(dir: &Path) -> Result<ToyDataset<S>> {
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut data = ToyDataset { train: Vec::new(), test: Vec::new() };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: LabelLine = serde_json::from_str(line)?;
        let sample = ToySample { image: ImageTensor::load_png(&dir.join(&l.file))?, label: l.label };
        if l.file.starts_with("test/") {
            data.test.push(sample);
        } else {
            data.train.push(sample);
        }
    }
    if data.train.is_empty() && data.test.is_empty() {
        return Err(Error::Empty(format!("no labelled scenes in {}", dir.display())));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_generator_and_scenes_are_reproducible() {
        let mut classes = [0; 3];
        for s in 0..60 {
            let (a, la) = render_toy_scene::<f32>(64, s);
            let (b, lb) = render_toy_scene::<f32>(64, s);
            assert_eq!(a, b);
            assert_eq!(la, lb);
            assert!((1..=3).contains(&la.class) && la.offset.abs() <= 1.0);
            assert!(a.in_unit_range());
            classes[la.class - 1] += 1;
        }
        assert!(classes.iter().all(|&c| c > 5), "{classes:?}");
    }

    #[test]
    fn stripe_count_is_visible_on_the_middle_row() {
        for s in 0..40 {
            let (img, label) = render_toy_scene::<f64>(64, s);
            let row: Vec<f64> = (0..64).map(|x| img.get(32, x, 0)).collect();
            let mut peaks = 0;
            let mut inside = false;
            for v in row {
                if v > 0.77 && !inside {
                    peaks += 1;
                }
                inside = v > 0.77;
            }
            assert_eq!(peaks, label.class, "seed {s}");
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let written = write_toy_dataset(tmp.path(), 3, 2, 32, 5).unwrap();
        let loaded = load_toy_dataset::<f32>(tmp.path()).unwrap();
        assert_eq!(loaded.train.len(), 3);
        assert_eq!(loaded.test.len(), 2);
        for (a, b) in written.train.iter().zip(&loaded.train) {
            assert_eq!(a.label, b.label);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
        let text = fs::read_to_string(tmp.path().join(LABELS_FILE)).unwrap();
        assert!(text.lines().next().unwrap().contains("\"file\":\"train/scene_0000.png\""));
    }
}
