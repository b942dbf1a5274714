//! Dataset ingestion, labeled/unlabeled splitting, augmentation, and the
//! synthetic generator.
//!
//! On-disk layout: `root/benign/*.png` and `root/malignant/*.png`, with mask
//! files named `<stem>_mask.png` alongside each image. The synthetic
//! generator writes the same layout.

pub mod augment;
pub mod imgops;
mod synth;

pub use augment::{
    apply_geometry_image, apply_geometry_mask, apply_photometric, augment_strong, augment_weak,
    make_view_pair, Geometry, Photometric, ViewPair, WeakView,
};
pub use synth::synth_generate;

use crate::error::{HermesError, Result};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CLASS_DIRS: [&str; 2] = ["benign", "malignant"];

/// One image with optional pixel mask and optional class label.
/// Labeled samples carry both annotations; unlabeled samples carry neither.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [3, H, W] with values in [0, 1].
    pub image: Array3<f64>,
    /// [H, W] with values in {0, 1}.
    pub mask: Option<Array2<u8>>,
    /// 0 = benign, 1 = malignant.
    pub class_label: Option<u8>,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.mask.is_some() && self.class_label.is_some()
    }

    /// Drops annotations, producing the unlabeled form.
    pub fn stripped(mut self) -> Sample {
        self.mask = None;
        self.class_label = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.image.dim();
        if let Some(mask) = &self.mask {
            if mask.dim() != (h, w) {
                return Err(HermesError::Data(format!(
                    "sample {}: mask {:?} does not match image {}x{}",
                    self.id,
                    mask.dim(),
                    h,
                    w
                )));
            }
        }
        if self.mask.is_some() != self.class_label.is_some() {
            return Err(HermesError::Data(format!(
                "sample {}: mask and class label must be present together",
                self.id
            )));
        }
        Ok(())
    }
}

/// Disjoint id lists for the three roles plus the dataset root.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn assert_disjoint(&self) {
        let mut seen = std::collections::HashSet::new();
        for id in self
            .labeled
            .iter()
            .chain(self.unlabeled.iter())
            .chain(self.val.iter())
        {
            assert!(seen.insert(id.clone()), "duplicate id {id} across splits");
        }
    }
}

#[derive(Debug)]
enum Source {
    Disk,
    Memory(BTreeMap<String, Sample>),
}

/// An index plus the loader that resolves ids to samples.
#[derive(Debug)]
pub struct Dataset {
    pub index: DatasetIndex,
    source: Source,
}

impl Dataset {
    /// Wraps in-memory samples (synthetic runs); everything starts labeled.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Dataset> {
        let mut map = BTreeMap::new();
        let mut ids = Vec::with_capacity(samples.len());
        for s in samples {
            s.validate()?;
            if !s.is_labeled() {
                return Err(HermesError::Data(format!(
                    "in-memory dataset requires labeled samples, got {}",
                    s.id
                )));
            }
            ids.push(s.id.clone());
            if map.insert(s.id.clone(), s).is_some() {
                return Err(HermesError::Data("duplicate sample id".into()));
            }
        }
        ids.sort();
        Ok(Dataset {
            index: DatasetIndex {
                labeled: ids,
                ..Default::default()
            },
            source: Source::Memory(map),
        })
    }

    /// Loads a sample with full annotations (ground truth), regardless of
    /// which split it sits in. Experiment harnesses use this for hidden-truth
    /// bookkeeping.
    pub fn load_full(&self, id: &str) -> Result<Sample> {
        match &self.source {
            Source::Memory(map) => map
                .get(id)
                .cloned()
                .ok_or_else(|| HermesError::Data(format!("unknown sample id {id}"))),
            Source::Disk => load_disk_sample(&self.index.root, id),
        }
    }

    /// Loads a sample in its split role: unlabeled ids come back stripped.
    pub fn load(&self, id: &str) -> Result<Sample> {
        let full = self.load_full(id)?;
        if self.index.unlabeled.iter().any(|u| u == id) {
            Ok(full.stripped())
        } else {
            Ok(full)
        }
    }

    /// Validation split first (val_fraction), then `n_labeled` training
    /// samples keep annotations and the remainder are stripped to unlabeled.
    /// Deterministic under `seed`.
    pub fn split_labeled(&mut self, n_labeled: usize, val_fraction: f64, seed: u64) -> Result<()> {
        let mut ids: Vec<String> = self
            .index
            .labeled
            .iter()
            .chain(self.index.unlabeled.iter())
            .chain(self.index.val.iter())
            .cloned()
            .collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let n_val = (ids.len() as f64 * val_fraction).round() as usize;
        if n_val > ids.len() {
            return Err(HermesError::Data("val fraction exceeds dataset".into()));
        }
        let val: Vec<String> = ids[..n_val].to_vec();
        let train = &ids[n_val..];
        if n_labeled > train.len() {
            return Err(HermesError::Data(format!(
                "n_labeled {} exceeds available training samples {}",
                n_labeled,
                train.len()
            )));
        }
        let mut labeled: Vec<String> = train[..n_labeled].to_vec();
        let mut unlabeled: Vec<String> = train[n_labeled..].to_vec();
        let mut val = val;
        labeled.sort();
        unlabeled.sort();
        val.sort();
        self.index.labeled = labeled;
        self.index.unlabeled = unlabeled;
        self.index.val = val;
        self.index.assert_disjoint();
        Ok(())
    }

    /// Removes the unlabeled ids entirely (labeled-only baseline runs keep
    /// the identical labeled/val sets of the matching split).
    pub fn drop_unlabeled(&mut self) {
        self.index.unlabeled.clear();
    }
}

/// Scans the on-disk layout; every image must have its mask. The returned
/// dataset has all samples in the labeled list, ordered lexicographically.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(HermesError::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut ids = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| HermesError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for entry in entries {
        if !entry.is_dir() {
            continue;
        }
        let dir_name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if !CLASS_DIRS.contains(&dir_name.as_str()) {
            return Err(HermesError::Data(format!(
                "unknown class directory {}",
                entry.display()
            )));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&entry)
            .map_err(|e| HermesError::io(&entry, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        let stems: Vec<String> = files
            .iter()
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect();
        for stem in &stems {
            if stem.ends_with("_mask") {
                let image_stem = stem.trim_end_matches("_mask");
                if !stems.iter().any(|s| s == image_stem) {
                    return Err(HermesError::Data(format!(
                        "mask without image: {}/{stem}.png",
                        entry.display()
                    )));
                }
                continue;
            }
            if !stems.iter().any(|s| s == &format!("{stem}_mask")) {
                return Err(HermesError::Data(format!(
                    "missing mask for labeled image {}/{stem}.png",
                    entry.display()
                )));
            }
            ids.push(format!("{dir_name}/{stem}"));
        }
    }
    ids.sort();
    Ok(Dataset {
        index: DatasetIndex {
            labeled: ids,
            root: root.to_path_buf(),
            ..Default::default()
        },
        source: Source::Disk,
    })
}

fn load_disk_sample(root: &Path, id: &str) -> Result<Sample> {
    let (class_dir, stem) = id
        .split_once('/')
        .ok_or_else(|| HermesError::Data(format!("malformed id {id}")))?;
    let class_label = CLASS_DIRS
        .iter()
        .position(|&c| c == class_dir)
        .ok_or_else(|| HermesError::Data(format!("unknown class in id {id}")))? as u8;
    let img_path = root.join(class_dir).join(format!("{stem}.png"));
    let mask_path = root.join(class_dir).join(format!("{stem}_mask.png"));
    let image = read_image_png(&img_path)?;
    let mask = read_mask_png(&mask_path)?;
    let s = Sample {
        id: id.to_string(),
        image,
        mask: Some(mask),
        class_label: Some(class_label),
    };
    s.validate()?;
    Ok(s)
}

/// Reads a PNG as [3,H,W] in [0,1]; grayscale inputs are replicated.
pub fn read_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| HermesError::Data(format!("unreadable image {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Reads a mask PNG as {0,1}: luma above 127 counts as foreground.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| HermesError::Data(format!("unreadable mask {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = u8::from(p.0[0] > 127);
    }
    Ok(out)
}

/// Writes channel 0 of a [3,H,W] image as 8-bit grayscale PNG.
pub fn write_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (image[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)
        .map_err(|e| HermesError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask[(y, x)] * 255]));
        }
    }
    buf.save(path)
        .map_err(|e| HermesError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes samples to the on-disk layout under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for class_dir in CLASS_DIRS {
        std::fs::create_dir_all(dir.join(class_dir)).map_err(|e| HermesError::io(dir, e))?;
    }
    for s in samples {
        let class = s.class_label.ok_or_else(|| {
            HermesError::Data(format!("cannot write unlabeled sample {}", s.id))
        })? as usize;
        let stem = s.id.replace('/', "_");
        let base = dir.join(CLASS_DIRS[class]);
        write_image_png(&base.join(format!("{stem}.png")), &s.image)?;
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| HermesError::Data(format!("sample {} has no mask", s.id)))?;
        write_mask_png(&base.join(format!("{stem}_mask.png")), mask)?;
    }
    Ok(())
}

/// SHA-256 digest over sample bytes; a pure function of the generator inputs.
pub fn dataset_digest(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        for v in s.image.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(m) = &s.mask {
            h.update(m.as_slice().unwrap());
        }
        h.update([s.class_label.unwrap_or(255)]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sample(id: &str, class: u8) -> Sample {
        let image = Array3::from_elem((3, 8, 8), 0.5);
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask[(4, 4)] = 1;
        Sample {
            id: id.to_string(),
            image,
            mask: Some(mask),
            class_label: Some(class),
        }
    }

    #[test]
    fn scan_pairs_images_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![tiny_sample("a", 0), tiny_sample("b", 1)];
        write_dataset(dir.path(), &samples).unwrap();
        let ds = scan_dataset(dir.path()).unwrap();
        assert_eq!(ds.index.labeled, vec!["benign/a", "malignant/b"]);
        let s = ds.load("benign/a").unwrap();
        assert_eq!(s.class_label, Some(0));
        assert_eq!(s.mask.as_ref().unwrap()[(4, 4)], 1);
    }

    #[test]
    fn scan_empty_root_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let ds = scan_dataset(dir.path()).unwrap();
        assert!(ds.index.labeled.is_empty());
    }

    #[test]
    fn scan_errors_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("benign")).unwrap();
        write_image_png(
            &dir.path().join("benign/x.png"),
            &Array3::from_elem((3, 4, 4), 0.2),
        )
        .unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x.png"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("mystery")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }

    #[test]
    fn split_roles_and_determinism() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| tiny_sample(&format!("s{i:03}"), (i % 2) as u8))
            .collect();
        let mut ds = Dataset::from_samples(samples.clone()).unwrap();
        ds.split_labeled(70, 0.3, 42).unwrap();
        assert_eq!(ds.index.val.len(), 30);
        assert_eq!(ds.index.labeled.len(), 70);
        assert_eq!(ds.index.unlabeled.len(), 0);

        let mut ds2 = Dataset::from_samples(samples.clone()).unwrap();
        ds2.split_labeled(70, 0.3, 42).unwrap();
        assert_eq!(ds.index.labeled, ds2.index.labeled);
        assert_eq!(ds.index.val, ds2.index.val);

        let mut ds3 = Dataset::from_samples(samples).unwrap();
        ds3.split_labeled(20, 0.3, 42).unwrap();
        assert_eq!(ds3.index.unlabeled.len(), 50);
        // Unlabeled ids load stripped; hidden truth stays reachable.
        let uid = ds3.index.unlabeled[0].clone();
        let s = ds3.load(&uid).unwrap();
        assert!(!s.is_labeled());
        assert!(ds3.load_full(&uid).unwrap().is_labeled());
        ds3.index.assert_disjoint();
    }

    #[test]
    fn split_rejects_oversized_label_count() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| tiny_sample(&format!("s{i}"), 0))
            .collect();
        let mut ds = Dataset::from_samples(samples).unwrap();
        assert!(ds.split_labeled(8, 0.3, 1).is_err());
    }

    #[test]
    fn png_roundtrip_preserves_grayscale_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_generate(1, 32, 9).pop().unwrap();
        write_dataset(dir.path(), &[s.clone()]).unwrap();
        let ds = scan_dataset(dir.path()).unwrap();
        let back = ds.load(&ds.index.labeled[0]).unwrap();
        assert_eq!(back.mask.as_ref().unwrap(), s.mask.as_ref().unwrap());
        // 8-bit quantization: within 1/255 everywhere, channels replicated.
        for (a, b) in back.image.iter().zip(s.image.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn digest_is_pure_function_of_inputs() {
        let a = dataset_digest(&synth_generate(4, 32, 11));
        let b = dataset_digest(&synth_generate(4, 32, 11));
        let c = dataset_digest(&synth_generate(4, 32, 12));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
