//! Paired clean / degraded datasets on disk.
//!
//! A dataset directory holds the degraded PNGs under `train/` and `test/`
//! and a `manifest.jsonl` with one record per degraded image. Clean paths
//! are absolute; degraded paths are relative to the manifest directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::compose::{compose_variants, VariantTag, WeatherConfig, WeatherRecipe};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Optional per-image task labels next to the clean images, one JSON object
/// per line with a `file` key holding the path relative to the clean directory.
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Split assignment for clean directories without `train/` and `test/` subdirectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    AllTrain,
    AllTest,
    /// Seeded shuffle, the last `test_fraction` of images go to test.
    HoldOut { test_fraction: f64 },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::HoldOut { test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub weather: WeatherConfig,
    pub split: SplitPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub variant_tag: VariantTag,
    pub recipe: WeatherRecipe,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn degraded_path(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.degraded_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Every referenced file exists and each clean image has one record per tag.
    pub fn check(&self) -> Result<()> {
        let mut per_clean: HashMap<&Path, Vec<VariantTag>> = HashMap::new();
        for r in &self.records {
            for p in [r.clean_path.clone(), self.degraded_path(r)] {
                if !p.is_file() {
                    return Err(Error::Contract(format!("manifest references missing file {}", p.display())));
                }
            }
            per_clean.entry(&r.clean_path).or_default().push(r.variant_tag);
        }
        let mut all = VariantTag::ALL.to_vec();
        all.sort();
        for (clean, mut tags) in per_clean {
            tags.sort();
            if tags != all {
                return Err(Error::Contract(format!("{} has variants {tags:?}", clean.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub skipped: Vec<Skipped>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Clean images with their split, in a stable order.
pub fn discover(clean_dir: &Path, policy: &SplitPolicy, seed_: u64) -> Result<Vec<(PathBuf, Split)>> {
    if !clean_dir.is_dir() {
        return Err(Error::io(clean_dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let subdirs: Vec<Split> = Split::ALL.into_iter().filter(|s| clean_dir.join(s.as_str()).is_dir()).collect();
    if !subdirs.is_empty() {
        let mut out = Vec::new();
        for s in subdirs {
            out.extend(list_images(&clean_dir.join(s.as_str()))?.into_iter().map(|p| (p, s)));
        }
        return Ok(out);
    }
    let files = list_images(clean_dir)?;
    Ok(match *policy {
        SplitPolicy::AllTrain => files.into_iter().map(|p| (p, Split::Train)).collect(),
        SplitPolicy::AllTest => files.into_iter().map(|p| (p, Split::Test)).collect(),
        SplitPolicy::HoldOut { test_fraction } => {
            if !(0.0..=1.0).contains(&test_fraction) {
                return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1]")));
            }
            let mut order: Vec<usize> = (0..files.len()).collect();
            order.shuffle(&mut seed::rng_for(seed_, "split"));
            let n_test = (files.len() as f64 * test_fraction).round() as usize;
            let test: Vec<usize> = order[files.len() - n_test..].to_vec();
            files.into_iter().enumerate().map(|(i, p)| (p, if test.contains(&i) { Split::Test } else { Split::Train })).collect()
        }
    })
}

fn load_labels(clean_dir: &Path) -> Result<HashMap<String, serde_json::Value>> {
    let path = clean_dir.join(LABELS_FILE);
    let mut out = HashMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let file = v.get("file").and_then(|f| f.as_str()).ok_or_else(|| Error::Config(format!("label line without `file`: {line}")))?;
        out.insert(file.to_string(), v.clone());
    }
    Ok(out)
}

fn relative_key(clean_dir: &Path, p: &Path) -> String {
    p.strip_prefix(clean_dir).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Degrade every clean image four ways and write images plus manifest.
pub fn build_paired_dataset(clean_dir: &Path, out_dir: &Path, config: &SynthConfig, seed_: u64) -> Result<BuildOutcome> {
    let sources = discover(clean_dir, &config.split, seed_)?;
    let labels = load_labels(clean_dir)?;
    let clean_abs = fs::canonicalize(clean_dir).map_err(|e| Error::io(clean_dir, e))?;
    let mut loaded = Vec::new();
    let mut skipped = Vec::new();
    for (path, split) in sources {
        match ImageTensor::<f32>::load_png(&path) {
            Ok(img) => loaded.push((path, split, img)),
            Err(e) => skipped.push(Skipped { path, reason: e.to_string() }),
        }
    }
    if loaded.is_empty() {
        return Err(Error::Empty(format!("no decodable images in {}", clean_dir.display())));
    }
    let mut records = Vec::new();
    for (path, split, img) in loaded {
        let key = relative_key(clean_dir, &path);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let base = seed::derive(seed_, &format!("image/{key}"));
        for v in compose_variants(&img, base, &config.weather)? {
            let rel = PathBuf::from(split.as_str()).join(format!("{stem}_{}.png", v.tag));
            v.image.save_png(&out_dir.join(&rel))?;
            records.push(ManifestRecord {
                clean_path: clean_abs.join(&key),
                degraded_path: rel,
                variant_tag: v.tag,
                recipe: v.recipe,
                split,
                label: labels.get(&key).cloned(),
            });
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    Ok(BuildOutcome { manifest, manifest_path, skipped })
}

/// A loaded clean / degraded pair.
#[derive(Clone, Debug)]
pub struct Pair<S> {
    /// Absolute path of the clean source.
    pub clean_path: PathBuf,
    /// Degraded file relative to the manifest root.
    pub degraded_path: PathBuf,
    pub clean: ImageTensor<S>,
    pub degraded: ImageTensor<S>,
    pub tag: VariantTag,
    pub label: Option<serde_json::Value>,
}

pub fn load_pairs<S: Scalar>(manifest: &DatasetManifest, split: Split) -> Result<Vec<Pair<S>>> {
    let mut cache: HashMap<PathBuf, ImageTensor<S>> = HashMap::new();
    let mut out = Vec::new();
    for r in manifest.split(split) {
        if !cache.contains_key(&r.clean_path) {
            cache.insert(r.clean_path.clone(), ImageTensor::load_png(&r.clean_path)?);
        }
        let clean = cache[&r.clean_path].clone();
        let degraded = ImageTensor::load_png(&manifest.degraded_path(r))?;
        if !clean.same_shape(&degraded) {
            return Err(Error::Shape(format!("{} and its degraded version differ in size", r.clean_path.display())));
        }
        out.push(Pair { clean_path: r.clean_path.clone(), degraded_path: r.degraded_path.clone(), clean, degraded, tag: r.variant_tag, label: r.label.clone() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_clean(dir: &Path, names: &[&str]) {
        fs::create_dir_all(dir).unwrap();
        for (i, n) in names.iter().enumerate() {
            ImageTensor::<f32>::from_fn(20, 24, 3, |y, x, c| ((y * 5 + x * 7 + c * 30 + i * 11) % 240) as f32 / 255.0)
                .save_png(&dir.join(n))
                .unwrap();
        }
    }

    #[test]
    fn three_images_make_twelve_records() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        write_clean(&clean, &["a.png", "b.png", "c.png"]);
        fs::write(clean.join("notes.txt"), "ignored").unwrap();
        fs::write(clean.join("broken.png"), "not a png").unwrap();
        let out = tmp.path().join("out");
        let cfg = SynthConfig { split: SplitPolicy::AllTrain, ..Default::default() };
        let r = build_paired_dataset(&clean, &out, &cfg, 7).unwrap();
        assert_eq!(r.manifest.records.len(), 12);
        assert_eq!(r.skipped.len(), 1);
        assert!(r.skipped[0].path.ends_with("broken.png"));
        let loaded = DatasetManifest::load(&r.manifest_path).unwrap();
        assert_eq!(loaded.records, r.manifest.records);
        loaded.check().unwrap();
        assert_eq!(load_pairs::<f32>(&loaded, Split::Train).unwrap().len(), 12);

        let again = build_paired_dataset(&clean, &tmp.path().join("out2"), &cfg, 7).unwrap();
        assert_eq!(again.manifest.records, r.manifest.records);
        assert_eq!(fs::read(&again.manifest_path).unwrap(), fs::read(&r.manifest_path).unwrap());
    }

    #[test]
    fn empty_directory_is_an_error_without_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        fs::create_dir_all(&clean).unwrap();
        let out = tmp.path().join("out");
        assert!(matches!(build_paired_dataset(&clean, &out, &SynthConfig::default(), 1), Err(Error::Empty(_))));
        assert!(!out.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn subdirectory_splits_and_labels_are_kept() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        write_clean(&clean.join("train"), &["a.png", "b.png"]);
        write_clean(&clean.join("test"), &["a.png"]);
        fs::write(clean.join(LABELS_FILE), "{\"file\":\"test/a.png\",\"class\":2}\n").unwrap();
        let r = build_paired_dataset(&clean, &tmp.path().join("out"), &SynthConfig::default(), 1).unwrap();
        assert_eq!(r.manifest.split(Split::Train).count(), 8);
        let test: Vec<_> = r.manifest.split(Split::Test).collect();
        assert_eq!(test.len(), 4);
        assert!(test.iter().all(|t| t.label.as_ref().unwrap()["class"] == 2));
        assert!(r.manifest.split(Split::Train).all(|t| t.label.is_none()));
    }

    #[test]
    fn hold_out_policy() {
        let tmp = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..10).map(|i| format!("{i}.png")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        write_clean(tmp.path(), &refs);
        let d = discover(tmp.path(), &SplitPolicy::HoldOut { test_fraction: 0.3 }, 4).unwrap();
        assert_eq!(d.iter().filter(|(_, s)| *s == Split::Test).count(), 3);
        assert_eq!(d, discover(tmp.path(), &SplitPolicy::HoldOut { test_fraction: 0.3 }, 4).unwrap());
    }
}
