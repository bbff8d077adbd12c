//! Samples, instance targets, batching and dataset sources.

mod folder;
mod generator;

use std::collections::BTreeMap;

pub use folder::{
    load_folder_dataset, load_rgb_png, save_instance_png, save_label_png, save_rgb8_png, write_folder_dataset, FolderDataset, Manifest, ManifestEntry,
};
pub use generator::{generate_sample, GeneratorSpec};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::losses::SegTargets;

/// Instance ids with their classes; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub classes: BTreeMap<u32, u8>,
}

impl InstanceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
            classes: BTreeMap::new(),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len()
    }

    /// Checks class coverage, class range and 4-connectivity of every instance.
    pub fn validate(&self, num_instance_classes: usize) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if self.ids.len() != h * w {
            return Err(Error::ShapeMismatch(format!("instance map has {} ids for {h}x{w}", self.ids.len())));
        }
        let mut first = BTreeMap::new();
        let mut count = BTreeMap::new();
        for (p, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                first.entry(id).or_insert(p);
                *count.entry(id).or_insert(0usize) += 1;
            }
        }
        for (&id, &start) in &first {
            match self.classes.get(&id) {
                None => return Err(Error::LabelRange(format!("instance {id} has no class"))),
                Some(&c) if c == 0 || c as usize > num_instance_classes => {
                    return Err(Error::LabelRange(format!(
                        "instance {id} has class {c}, expected 1..={num_instance_classes}"
                    )))
                }
                _ => {}
            }
            let reached = flood(&self.ids, h, w, start, |v| v == id).len();
            if reached != count[&id] {
                return Err(Error::Validation {
                    field: "instance".into(),
                    message: format!("instance {id} is not 4-connected"),
                });
            }
        }
        Ok(())
    }
}

/// 4-connected flood fill from `start` over pixels accepted by `keep`.
pub(crate) fn flood<T: Copy>(map: &[T], h: usize, w: usize, start: usize, keep: impl Fn(T) -> bool) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    let mut out = Vec::new();
    seen[start] = true;
    while let Some(p) = stack.pop() {
        out.push(p);
        let (y, x) = (p / w, p % w);
        let nb = [
            (y > 0).then(|| p - w),
            (y + 1 < h).then(|| p + w),
            (x > 0).then(|| p - 1),
            (x + 1 < w).then(|| p + 1),
        ];
        for q in nb.into_iter().flatten() {
            if !seen[q] && keep(map[q]) {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    out
}

/// One image with paired semantic and instance ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`
    pub semantic: Vec<u8>,
    pub instance: InstanceMap,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.dim(1), self.image.dim(2))
    }

    pub fn validate(&self, num_semantic_classes: usize, num_instance_classes: usize) -> Result<()> {
        let (h, w) = self.size();
        let who = &self.id;
        if self.image.rank() != 3 || self.image.dim(0) != 3 {
            return Err(Error::ShapeMismatch(format!("{who}: image shape {:?} is not [3, H, W]", self.image.shape())));
        }
        if self.semantic.len() != h * w {
            return Err(Error::ShapeMismatch(format!("{who}: semantic mask does not match image {h}x{w}")));
        }
        if (self.instance.height, self.instance.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "{who}: instance map {}x{} does not match image {h}x{w}",
                self.instance.height, self.instance.width
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Validation {
                field: "image".into(),
                message: format!("{who}: pixel values outside [0, 1]"),
            });
        }
        if let Some(&bad) = self.semantic.iter().find(|&&c| c as usize >= num_semantic_classes) {
            return Err(Error::LabelRange(format!("{who}: semantic label {bad} >= {num_semantic_classes}")));
        }
        self.instance
            .validate(num_instance_classes)
            .map_err(|e| Error::Validation {
                field: "instance".into(),
                message: format!("{who}: {e}"),
            })
    }
}

/// Per-pixel instance training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTargets {
    pub height: usize,
    pub width: usize,
    /// `[H, W]` 1 on instance foreground.
    pub binary: Vec<u8>,
    /// `[2, H, W]` horizontal then vertical normalised centroid offsets.
    pub hv: Tensor,
    /// `[H, W]` instance class, 0 on background.
    pub types: Vec<u8>,
}

impl InstanceTargets {
    /// `[2, H, W]` one-hot background/foreground.
    pub fn binary_onehot(&self) -> Tensor {
        let n = self.height * self.width;
        Tensor::from_fn(&[2, self.height, self.width], |i| {
            let fg = self.binary[i % n] == 1;
            if (i < n) != fg {
                1.0
            } else {
                0.0
            }
        })
    }
}

pub fn derive_instance_targets(inst: &InstanceMap) -> InstanceTargets {
    let (h, w) = (inst.height, inst.width);
    let n = h * w;
    let mut pixels: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, &id) in inst.ids.iter().enumerate() {
        if id != 0 {
            pixels.entry(id).or_default().push(p);
        }
    }
    let mut hv = vec![0.0; 2 * n];
    let mut types = vec![0u8; n];
    for (id, px) in &pixels {
        let m = px.len() as f64;
        let cx = px.iter().map(|p| (p % w) as f64).sum::<f64>() / m;
        let cy = px.iter().map(|p| (p / w) as f64).sum::<f64>() / m;
        let sx = px.iter().map(|p| ((p % w) as f64 - cx).abs()).fold(0.0, f64::max);
        let sy = px.iter().map(|p| ((p / w) as f64 - cy).abs()).fold(0.0, f64::max);
        let class = inst.classes.get(id).copied().unwrap_or(0);
        for &p in px {
            let (dx, dy) = ((p % w) as f64 - cx, (p / w) as f64 - cy);
            hv[p] = if sx > 0.0 { dx / sx } else { 0.0 };
            hv[n + p] = if sy > 0.0 { dy / sy } else { 0.0 };
            types[p] = class;
        }
    }
    InstanceTargets {
        height: h,
        width: w,
        binary: inst.ids.iter().map(|&id| u8::from(id != 0)).collect(),
        hv: Tensor::new(vec![2, h, w], hv),
        types,
    }
}

/// Foreground fraction per `factor x factor` cell.
pub fn downsample_binary(binary: &[u8], h: usize, w: usize, factor: usize) -> Tensor {
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    Tensor::from_fn(&[oh, ow], |i| {
        let (oy, ox) = (i / ow, i % ow);
        let mut s = 0usize;
        for y in oy * factor..(oy + 1) * factor {
            for x in ox * factor..(ox + 1) * factor {
                s += binary[y * w + x] as usize;
            }
        }
        s as f64 / area
    })
}

/// Stacked images and training targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]`
    pub images: Tensor,
    pub targets: SegTargets,
    /// `[B, 1, H/f, W/f]` semantic foreground fraction for the coarse masks.
    pub coarse_sem: Tensor,
    /// `[B, 1, H/f, W/f]` instance foreground fraction for the coarse masks.
    pub coarse_ins: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `coarse_factor` is the ratio between image and coarse-mask resolution.
pub fn make_batch(samples: &[&Sample], coarse_factor: usize) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = first.size();
    if coarse_factor == 0 || h % coarse_factor != 0 || w % coarse_factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by coarse factor {coarse_factor}")));
    }
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let (mut semantic, mut types, mut binary) = (Vec::new(), Vec::new(), Vec::new());
    let (mut fg, mut hv) = (Vec::new(), Vec::new());
    let (mut coarse_sem, mut coarse_ins) = (Vec::new(), Vec::new());
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::ShapeMismatch(format!("{}: {:?} differs from batch size {h}x{w}", s.id, s.size())));
        }
        let t = derive_instance_targets(&s.instance);
        images.extend_from_slice(s.image.data());
        semantic.extend_from_slice(&s.semantic);
        types.extend_from_slice(&t.types);
        binary.extend_from_slice(&t.binary);
        fg.extend(t.binary.iter().map(|&v| v as f64));
        hv.extend_from_slice(t.hv.data());
        let sem_fg: Vec<u8> = s.semantic.iter().map(|&c| u8::from(c != 0)).collect();
        coarse_sem.extend(downsample_binary(&sem_fg, h, w, coarse_factor).into_data());
        coarse_ins.extend(downsample_binary(&t.binary, h, w, coarse_factor).into_data());
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(vec![b, 3, h, w], images),
        targets: SegTargets {
            semantic,
            types,
            binary,
            fg: Tensor::new(vec![b, 1, h, w], fg),
            hv: Tensor::new(vec![b, 2, h, w], hv),
        },
        coarse_sem: Tensor::new(vec![b, 1, h / coarse_factor, w / coarse_factor], coarse_sem),
        coarse_ins: Tensor::new(vec![b, 1, h / coarse_factor, w / coarse_factor], coarse_ins),
    })
}

/// Which partition a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seeded 7:1:2 partition of `0..n`: sizes `floor(0.7n)`, `floor(0.1n)`, rest.
pub fn split_indices(n: usize, seed: u64) -> [Vec<usize>; 3] {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

/// In-memory dataset with a fixed partition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&Sample> {
        let idx = match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// `n` generated samples with seeds `seed..seed + n`.
    pub fn synthetic(n: usize, seed: u64, spec: &GeneratorSpec) -> Result<Self> {
        if n < MIN_SPLIT_SAMPLES {
            return Err(Error::Validation {
                field: "n".into(),
                message: "need at least 10 samples for a nonempty split".into(),
            });
        }
        let samples = (0..n as u64).map(|i| generate_sample(seed + i, spec)).collect::<Result<Vec<_>>>()?;
        let [train, val, test] = split_indices(n, seed);
        Ok(Self { samples, train, val, test })
    }
}
