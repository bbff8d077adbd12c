//! Instance extraction from binary, hv and type maps: Sobel edge energy on
//! the hv maps, marker-controlled watershed, then per-instance class vote.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{flood, InstanceMap};
use crate::losses::sobel5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub fg: f64,
    pub edge: f64,
    pub min_area: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            fg: 0.5,
            edge: 0.4,
            min_area: 10,
        }
    }
}

impl Thresholds {
    pub fn from_config(cfg: &crate::ExperimentConfig) -> Self {
        Self {
            fg: cfg.fg_threshold,
            edge: cfg.edge_threshold,
            min_area: cfg.min_instance_area,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: u32,
    pub class: u8,
    /// Mean foreground probability.
    pub confidence: f64,
    /// `(y, x)`
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub height: usize,
    pub width: usize,
    /// Labels `1..=M`, 0 is background.
    pub labels: Vec<u32>,
    pub instances: Vec<InstanceInfo>,
}

impl InstancePrediction {
    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn to_instance_map(&self) -> InstanceMap {
        InstanceMap {
            height: self.height,
            width: self.width,
            ids: self.labels.clone(),
            classes: self.instances.iter().map(|i| (i.id, i.class)).collect(),
        }
    }
}

/// Edge-replicated correlation of one plane.
fn correlate_edge(x: &[f64], h: usize, w: usize, k: &Tensor) -> Vec<f64> {
    let r = (k.dim(0) / 2) as isize;
    let kd = k.data();
    let kw = k.dim(1);
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
                    acc += kd[((dy + r) as usize) * kw + (dx + r) as usize] * x[sy * w + sx];
                }
            }
            out[y as usize * w + xx as usize] = acc;
        }
    }
    out
}

fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Per-pixel boundary energy in `[0, 1]`, restricted to `fg`.
///
/// Inside an instance the hv maps increase along their axis; a decrease marks
/// a boundary. Each map is min-max normalised, differentiated with a 5x5
/// Sobel kernel along its own axis and mapped to `1 - minmax(derivative)`.
pub fn edge_energy(hv: &[f64], fg: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let (gx, gy) = sobel5();
    let mut hmap = hv[..n].to_vec();
    let mut vmap = hv[n..2 * n].to_vec();
    min_max(&mut hmap);
    min_max(&mut vmap);
    let mut sh = correlate_edge(&hmap, h, w, &gx);
    let mut sv = correlate_edge(&vmap, h, w, &gy);
    min_max(&mut sh);
    min_max(&mut sv);
    (0..n)
        .map(|p| if fg[p] { (1.0 - sh[p]).max(1.0 - sv[p]) } else { 0.0 })
        .collect()
}

struct Item {
    energy: f64,
    seq: u64,
    pixel: usize,
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Item {
    // min-heap on (energy, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.energy.total_cmp(&self.energy).then(other.seq.cmp(&self.seq))
    }
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// Marker-controlled watershed over `energy`, confined to `mask`.
/// Mask components without a marker become their own region.
pub fn watershed(energy: &[f64], markers: &[u32], mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut labels = markers.to_vec();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut queued = vec![false; h * w];
    for p in 0..h * w {
        if labels[p] != 0 {
            queued[p] = true;
            for q in neighbours(p, h, w) {
                if mask[q] && labels[q] == 0 && !queued[q] {
                    queued[q] = true;
                    heap.push(Item { energy: energy[q], seq, pixel: q });
                    seq += 1;
                }
            }
        }
    }
    while let Some(Item { pixel: p, .. }) = heap.pop() {
        // take the label of the first labelled neighbour
        let label = neighbours(p, h, w).map(|q| labels[q]).find(|&l| l != 0).unwrap_or(0);
        labels[p] = label;
        for q in neighbours(p, h, w) {
            if mask[q] && labels[q] == 0 && !queued[q] {
                queued[q] = true;
                heap.push(Item { energy: energy[q], seq, pixel: q });
                seq += 1;
            }
        }
    }
    let mut next = labels.iter().copied().max().unwrap_or(0);
    for p in 0..h * w {
        if mask[p] && labels[p] == 0 {
            next += 1;
            for q in flood(&labels, h, w, p, |l| l == 0) {
                if mask[q] {
                    labels[q] = next;
                }
            }
        }
    }
    labels
}

fn components(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for p in 0..h * w {
        if mask[p] && labels[p] == 0 {
            next += 1;
            for q in flood(mask, h, w, p, |m| m) {
                labels[q] = next;
            }
        }
    }
    labels
}

/// `fg_prob` is `[H, W]`, `hv` is `[2, H, W]`, `type_prob` is `[K + 1, H, W]`
/// with channel 0 the background.
pub fn instances_from_maps(fg_prob: &[f64], hv: &[f64], type_prob: &[f64], h: usize, w: usize, th: &Thresholds) -> InstancePrediction {
    let n = h * w;
    let k = type_prob.len() / n;
    let fg: Vec<bool> = fg_prob.iter().map(|&p| p >= th.fg).collect();
    let energy = edge_energy(hv, &fg, h, w);
    let seeds: Vec<bool> = (0..n).map(|p| fg[p] && energy[p] < th.edge).collect();
    let markers = components(&seeds, h, w);
    let raw = watershed(&energy, &markers, &fg, h, w);

    let max_label = raw.iter().copied().max().unwrap_or(0) as usize;
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (p, &l) in raw.iter().enumerate() {
        if l != 0 {
            pixels[l as usize].push(p);
        }
    }
    let mut labels = vec![0u32; n];
    let mut instances = Vec::new();
    for px in pixels.iter().skip(1) {
        if px.is_empty() || px.len() < th.min_area {
            continue;
        }
        let id = instances.len() as u32 + 1;
        let m = px.len() as f64;
        let mut votes = vec![0usize; k];
        let mut mass = vec![0.0; k];
        for &p in px {
            labels[p] = id;
            let mut best = 1;
            for c in 1..k {
                mass[c] += type_prob[c * n + p];
                if type_prob[c * n + p] > type_prob[best * n + p] {
                    best = c;
                }
            }
            if k > 1 {
                votes[best] += 1;
            }
        }
        let class = (1..k.max(2))
            .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(mass[a].total_cmp(&mass[b])).then(b.cmp(&a)))
            .unwrap_or(1) as u8;
        instances.push(InstanceInfo {
            id,
            class,
            confidence: px.iter().map(|&p| fg_prob[p]).sum::<f64>() / m,
            centroid: (
                px.iter().map(|&p| (p / w) as f64).sum::<f64>() / m,
                px.iter().map(|&p| (p % w) as f64).sum::<f64>() / m,
            ),
            area: px.len(),
        });
    }
    InstancePrediction {
        height: h,
        width: w,
        labels,
        instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_instance_targets, generate_sample, GeneratorSpec};
    use std::collections::BTreeMap;

    fn disks(h: usize, w: usize, centres: &[(f64, f64, f64, u8)]) -> InstanceMap {
        let mut m = InstanceMap::empty(h, w);
        for (i, &(cy, cx, r, class)) in centres.iter().enumerate() {
            for p in 0..h * w {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                if (y - cy).powi(2) + (x - cx).powi(2) <= r * r && m.ids[p] == 0 {
                    m.ids[p] = i as u32 + 1;
                }
            }
            m.classes.insert(i as u32 + 1, class);
        }
        m
    }

    /// Ideal network outputs for a ground-truth map.
    fn ideal(m: &InstanceMap, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = derive_instance_targets(m);
        let n = m.height * m.width;
        let fg = t.binary.iter().map(|&b| b as f64).collect();
        let mut types = vec![0.0; (k + 1) * n];
        for p in 0..n {
            types[t.types[p] as usize * n + p] = 1.0;
        }
        (fg, t.hv.into_data(), types)
    }

    /// Pixel sets equal up to relabelling.
    fn same_partition(a: &[u32], b: &[u32]) -> bool {
        let mut fwd = BTreeMap::new();
        let mut back = BTreeMap::new();
        a.iter().zip(b).all(|(&x, &y)| {
            (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
        })
    }

    #[test]
    fn background_gives_nothing() {
        let n = 16 * 16;
        let p = instances_from_maps(&vec![0.1; n], &vec![0.0; 2 * n], &vec![0.5; 2 * n], 16, 16, &Thresholds::default());
        assert_eq!(p.num_instances(), 0);
        assert!(p.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn separated_blobs_are_recovered_exactly() {
        let gt = disks(40, 40, &[(10.0, 10.0, 5.0, 1), (28.0, 27.0, 6.0, 2)]);
        let (fg, hv, ty) = ideal(&gt, 2);
        let p = instances_from_maps(&fg, &hv, &ty, 40, 40, &Thresholds::default());
        assert_eq!(p.num_instances(), 2);
        assert!(same_partition(&p.labels, &gt.ids));
        let mut classes: Vec<u8> = p.instances.iter().map(|i| i.class).collect();
        classes.sort();
        assert_eq!(classes, vec![1, 2]);
        assert!(p.instances.iter().all(|i| i.confidence == 1.0));
    }

    #[test]
    fn touching_blobs_are_split() {
        // disks spanning columns 4..=16 and 17..=29 on the same rows
        let gt = disks(32, 34, &[(16.0, 10.0, 6.0, 1), (16.0, 23.0, 6.0, 1)]);
        let touching = (0..32 * 34).any(|p| p % 34 + 1 < 34 && gt.ids[p] == 1 && gt.ids[p + 1] == 2);
        assert!(touching);
        let (fg, hv, ty) = ideal(&gt, 1);
        let p = instances_from_maps(&fg, &hv, &ty, 32, 34, &Thresholds::default());
        assert_eq!(p.num_instances(), 2);
        for g in 1..=2u32 {
            let best = (1..=2u32)
                .map(|l| {
                    let inter = (0..32 * 34).filter(|&q| gt.ids[q] == g && p.labels[q] == l).count();
                    let union = (0..32 * 34).filter(|&q| gt.ids[q] == g || p.labels[q] == l).count();
                    inter as f64 / union as f64
                })
                .fold(0.0, f64::max);
            assert!(best > 0.9, "instance {g}: iou {best}");
        }
    }

    #[test]
    fn generated_scenes_round_trip() {
        let spec = GeneratorSpec {
            image_size: 64,
            num_instances: 6,
            min_radius: 3.0,
            max_radius: 5.0,
            touching_fraction: 0.0,
            ..GeneratorSpec::default()
        };
        for seed in 0..6 {
            let s = generate_sample(seed, &spec).unwrap();
            let (fg, hv, ty) = ideal(&s.instance, 3);
            let p = instances_from_maps(&fg, &hv, &ty, 64, 64, &Thresholds::default());
            assert!(same_partition(&p.labels, &s.instance.ids), "seed {seed}");
        }
    }

    #[test]
    fn output_properties() {
        let spec = GeneratorSpec {
            image_size: 48,
            num_instances: 8,
            min_radius: 2.0,
            max_radius: 5.0,
            touching_fraction: 0.5,
            ..GeneratorSpec::default()
        };
        for seed in 0..8 {
            let s = generate_sample(seed, &spec).unwrap();
            let (fg, hv, ty) = ideal(&s.instance, 3);
            let mut last = usize::MAX;
            for min_area in [0, 5, 10, 20, 40, 80] {
                let th = Thresholds { min_area, ..Thresholds::default() };
                let p = instances_from_maps(&fg, &hv, &ty, 48, 48, &th);
                assert!(p.num_instances() <= last);
                last = p.num_instances();
                // labels contiguous, inside foreground, classes in range
                let max = p.labels.iter().copied().max().unwrap_or(0) as usize;
                assert_eq!(max, p.num_instances());
                for (i, info) in p.instances.iter().enumerate() {
                    assert_eq!(info.id as usize, i + 1);
                    assert!((1..=3).contains(&info.class));
                    assert_eq!(p.labels.iter().filter(|&&l| l == info.id).count(), info.area);
                }
                assert!(p.labels.iter().zip(&fg).all(|(&l, &f)| l == 0 || f >= 0.5));
            }
            // relabelling the ground truth only relabels the output
            let mut perm = s.instance.clone();
            let m = perm.num_instances() as u32;
            for v in perm.ids.iter_mut().filter(|v| **v != 0) {
                *v = m + 1 - *v;
            }
            perm.classes = s.instance.classes.iter().map(|(&id, &c)| (m + 1 - id, c)).collect();
            let (fg2, hv2, ty2) = ideal(&perm, 3);
            let a = instances_from_maps(&fg, &hv, &ty, 48, 48, &Thresholds::default());
            let b = instances_from_maps(&fg2, &hv2, &ty2, 48, 48, &Thresholds::default());
            assert!(same_partition(&a.labels, &b.labels));
        }
    }

    #[test]
    fn class_vote_ties_use_probability_mass() {
        // 2x2 instance: two pixels vote class 1, two vote class 2; class 2 is
        // more confident overall
        let (h, w) = (2, 2);
        let fg = vec![1.0; 4];
        let hv = vec![0.0; 8];
        let mut ty = vec![0.0; 12];
        for p in 0..2 {
            ty[4 + p] = 0.6;
            ty[8 + p] = 0.4;
        }
        for p in 2..4 {
            ty[4 + p] = 0.05;
            ty[8 + p] = 0.95;
        }
        let th = Thresholds { min_area: 1, ..Thresholds::default() };
        let p = instances_from_maps(&fg, &hv, &ty, h, w, &th);
        assert_eq!(p.num_instances(), 1);
        assert_eq!(p.instances[0].class, 2);
    }
}
