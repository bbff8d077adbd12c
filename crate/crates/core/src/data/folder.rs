//! Folder datasets:
//!
//! ```text
//! root/images/<id>.png     RGB, 8 bit
//! root/semantic/<id>.png   grey, 8 bit class labels
//! root/instance/<id>.png   grey, 16 bit instance ids
//! root/manifest.json       ids, split assignment, instance classes
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{split_indices, Dataset, InstanceMap, Sample, Split};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::report::to_rgb8;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Instance id to class; ids without an entry default to class 1.
    #[serde(default)]
    pub instance_classes: BTreeMap<u32, u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Seed of the shuffle used for entries without a split.
    #[serde(default)]
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

/// Lazy handle; samples are read on access.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub splits: [Vec<usize>; 3],
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(format!("{}: {other}", path.display())),
    }
}

pub fn load_folder_dataset(root: impl AsRef<Path>) -> Result<FolderDataset> {
    let root = root.as_ref().to_path_buf();
    let images = root.join("images");
    let manifest_path = root.join(MANIFEST);
    let manifest = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_str::<Manifest>(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?
    } else {
        let listing = std::fs::read_dir(&images)
            .map_err(|_| Error::MissingFile(format!("{} does not exist", images.display())))?;
        let mut ids: Vec<String> = listing
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        Manifest {
            seed: 0,
            samples: ids
                .into_iter()
                .map(|id| ManifestEntry {
                    id,
                    split: None,
                    instance_classes: BTreeMap::new(),
                })
                .collect(),
        }
    };
    if manifest.samples.is_empty() {
        return Err(Error::MissingFile(format!("no samples under {}", root.display())));
    }
    for e in &manifest.samples {
        for dir in ["images", "semantic", "instance"] {
            let p = root.join(dir).join(format!("{}.png", e.id));
            if !p.is_file() {
                return Err(Error::MissingFile(format!("sample {}: {}", e.id, p.display())));
            }
        }
    }
    let splits = if manifest.samples.iter().all(|e| e.split.is_some()) {
        let mut s: [Vec<usize>; 3] = Default::default();
        for (i, e) in manifest.samples.iter().enumerate() {
            let k = match e.split.expect("checked") {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            s[k].push(i);
        }
        s
    } else {
        split_indices(manifest.samples.len(), manifest.seed)
    };
    Ok(FolderDataset {
        root,
        entries: manifest.samples,
        splits,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

impl FolderDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits[0],
            Split::Val => &self.splits[1],
            Split::Test => &self.splits[2],
        }
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let file = |dir: &str| self.root.join(dir).join(format!("{}.png", e.id));
        let image = load_rgb_png(&file("images"))?;
        let (h, w) = (image.dim(1), image.dim(2));

        let sp = file("semantic");
        let sem = image::open(&sp).map_err(|err| image_err(&sp, err))?.to_luma8();
        if (sem.height() as usize, sem.width() as usize) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: semantic mask is {}x{} but image is {h}x{w}",
                e.id,
                sem.height(),
                sem.width()
            )));
        }
        let ip = file("instance");
        let ins = image::open(&ip).map_err(|err| image_err(&ip, err))?.to_luma16();
        if (ins.height() as usize, ins.width() as usize) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: instance map is {}x{} but image is {h}x{w}",
                e.id,
                ins.height(),
                ins.width()
            )));
        }
        let ids: Vec<u32> = ins.into_raw().into_iter().map(u32::from).collect();
        let mut classes = BTreeMap::new();
        for &id in ids.iter().filter(|&&id| id != 0) {
            classes.entry(id).or_insert_with(|| e.instance_classes.get(&id).copied().unwrap_or(1));
        }
        Ok(Sample {
            id: e.id.clone(),
            image,
            semantic: sem.into_raw(),
            instance: InstanceMap {
                height: h,
                width: w,
                ids,
                classes,
            },
        })
    }

    /// Iterates lazily over one split.
    pub fn iter(&self, split: Split) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.indices(split).iter().map(|&i| self.load(i))
    }

    /// Reads every sample into memory.
    pub fn into_dataset(self) -> Result<Dataset> {
        let samples = (0..self.len()).map(|i| self.load(i)).collect::<Result<Vec<_>>>()?;
        let [train, val, test] = self.splits;
        Ok(Dataset { samples, train, val, test })
    }
}

pub fn save_label_png(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).ok_or_else(|| Error::Shape("label size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes an interleaved RGB8 raster.
pub fn save_rgb8_png(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.to_vec()).ok_or_else(|| Error::Shape("rgb size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes instance ids as a 16-bit grayscale PNG.
pub fn save_instance_png(path: &Path, ids: &[u32], h: usize, w: usize) -> Result<()> {
    let ids: Vec<u16> = ids
        .iter()
        .map(|&v| u16::try_from(v).map_err(|_| Error::LabelRange(format!("{}: instance id {v} exceeds 16 bits", path.display()))))
        .collect::<Result<_>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, ids).ok_or_else(|| Error::Shape("instance size".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Writes samples in the folder layout with the given partition.
pub fn write_folder_dataset(root: impl AsRef<Path>, ds: &Dataset, seed: u64) -> Result<()> {
    let root = root.as_ref();
    for dir in ["images", "semantic", "instance"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut split_of = vec![Split::Train; ds.samples.len()];
    for &i in &ds.val {
        split_of[i] = Split::Val;
    }
    for &i in &ds.test {
        split_of[i] = Split::Test;
    }
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (s, split) in ds.samples.iter().zip(split_of) {
        let (h, w) = s.size();
        let file = |dir: &str| root.join(dir).join(format!("{}.png", s.id));
        save_rgb8_png(&file("images"), &to_rgb8(&s.image), h, w)?;
        save_label_png(&file("semantic"), &s.semantic, h, w)?;
        save_instance_png(&file("instance"), &s.instance.ids, h, w)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            split: Some(split),
            instance_classes: s.instance.classes.clone(),
        });
    }
    let manifest = Manifest { seed, samples: entries };
    let mp = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorSpec;

    fn spec() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 32,
            num_instances: 3,
            min_radius: 2.0,
            max_radius: 3.0,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn round_trip_and_split_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(10, 4, &spec()).unwrap();
        write_folder_dataset(dir.path(), &ds, 4).unwrap();
        let f = load_folder_dataset(dir.path()).unwrap();
        let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| f.indices(s).len()).collect();
        assert_eq!(sizes, vec![7, 1, 2]);
        let back = f.load(3).unwrap();
        let orig = &ds.samples[3];
        assert_eq!(back.semantic, orig.semantic);
        assert_eq!(back.instance, orig.instance);
        let err = back.image.zip_map(&orig.image, |a, b| (a - b).abs()).max_abs();
        assert!(err <= 0.5 / 255.0 + 1e-12);
        assert_eq!(f.iter(Split::Test).count(), 2);
    }

    #[test]
    fn split_computed_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(10, 0, &spec()).unwrap();
        write_folder_dataset(dir.path(), &ds, 0).unwrap();
        std::fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let f = load_folder_dataset(dir.path()).unwrap();
        assert_eq!(f.splits.iter().map(Vec::len).collect::<Vec<_>>(), vec![7, 1, 2]);
    }

    #[test]
    fn empty_folder_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_folder_dataset(dir.path()), Err(Error::MissingFile(_))));
        std::fs::create_dir(dir.path().join("images")).unwrap();
        assert!(matches!(load_folder_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn mismatched_mask_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let big = GeneratorSpec { image_size: 64, ..spec() };
        let ds = Dataset::synthetic(10, 0, &big).unwrap();
        write_folder_dataset(dir.path(), &ds, 0).unwrap();
        let id = &ds.samples[2].id;
        save_label_png(&dir.path().join("semantic").join(format!("{id}.png")), &vec![0; 32 * 32], 32, 32).unwrap();
        let f = load_folder_dataset(dir.path()).unwrap();
        match f.load(2) {
            Err(Error::ShapeMismatch(m)) => assert!(m.contains(id.as_str()), "{m}"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
