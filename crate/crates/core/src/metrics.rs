//! Segmentation metrics: Dice, IoU, Hausdorff, object F1, AJI and panoptic
//! quality, plus a pluggable backend for the instance metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::config::MetricsBackendKind;
use crate::data::InstanceMap;
use crate::error::{Error, Result};

/// Match threshold for object F1 and PQ; matches need IoU strictly above it.
pub const MATCH_IOU: f64 = 0.5;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("prediction has {a} pixels, ground truth {b}")));
    }
    Ok(())
}

fn class_counts(pred: &[u8], gt: &[u8], k: u8) -> (usize, usize, usize) {
    let (mut p, mut g, mut i) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (x, y) = (a == k, b == k);
        p += x as usize;
        g += y as usize;
        i += (x && y) as usize;
    }
    (p, g, i)
}

/// `2|P∩G| / (|P| + |G|)`; 1 when class `k` is absent from both.
pub fn dice(pred: &[u8], gt: &[u8], k: u8) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let (p, g, i) = class_counts(pred, gt, k);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when class `k` is absent from both.
pub fn miou(pred: &[u8], gt: &[u8], k: u8) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let (p, g, i) = class_counts(pred, gt, k);
    Ok(if p + g == 0 { 1.0 } else { i as f64 / (p + g - i) as f64 })
}

/// Foreground pixels with a 4-neighbour outside the mask; pixels beyond the
/// image border count as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ay, ax) in a {
        let mut best = f64::INFINITY;
        for &(by, bx) in b {
            let d = (ay as f64 - by as f64).powi(2) + (ax as f64 - bx as f64).powi(2);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance between mask boundaries in pixels; `None`
/// when either mask is empty.
pub fn hausdorff_mask(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<Option<f64>> {
    check_len(pred.len(), gt.len())?;
    check_len(pred.len(), h * w)?;
    let (a, b) = (boundary(pred, h, w), boundary(gt, h, w));
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some(directed_hausdorff(&a, &b).max(directed_hausdorff(&b, &a))))
}

pub fn hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize, k: u8) -> Result<Option<f64>> {
    let p: Vec<bool> = pred.iter().map(|&v| v == k).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v == k).collect();
    hausdorff_mask(&p, &g, h, w)
}

/// Pairwise overlaps between two id rasters, background excluded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Contingency {
    pub gt_area: BTreeMap<u32, usize>,
    pub pred_area: BTreeMap<u32, usize>,
    pub overlap: BTreeMap<(u32, u32), usize>,
}

impl Contingency {
    pub fn build(gt: &[u32], pred: &[u32]) -> Result<Self> {
        check_len(pred.len(), gt.len())?;
        let mut t = Self::default();
        for (&g, &p) in gt.iter().zip(pred) {
            if g != 0 {
                *t.gt_area.entry(g).or_default() += 1;
            }
            if p != 0 {
                *t.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 && p != 0 {
                *t.overlap.entry((g, p)).or_default() += 1;
            }
        }
        Ok(t)
    }

    pub fn iou(&self, g: u32, p: u32) -> f64 {
        let i = self.overlap.get(&(g, p)).copied().unwrap_or(0);
        i as f64 / (self.gt_area[&g] + self.pred_area[&p] - i) as f64
    }

    /// Overlapping pairs by descending IoU; ties in id order.
    fn ranked(&self) -> Vec<(f64, u32, u32)> {
        let mut v: Vec<(f64, u32, u32)> = self.overlap.keys().map(|&(g, p)| (self.iou(g, p), g, p)).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        v
    }

    /// Greedy one-to-one matches with IoU above `MATCH_IOU`.
    pub fn matches(&self) -> Vec<(u32, u32, f64)> {
        let (mut gu, mut pu) = (BTreeSet::new(), BTreeSet::new());
        let mut out = Vec::new();
        for (iou, g, p) in self.ranked() {
            if iou <= MATCH_IOU {
                break;
            }
            if gu.contains(&g) || pu.contains(&p) {
                continue;
            }
            gu.insert(g);
            pu.insert(p);
            out.push((g, p, iou));
        }
        out
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both maps are empty.
pub fn object_f1_ids(pred: &[u32], gt: &[u32]) -> Result<f64> {
    let t = Contingency::build(gt, pred)?;
    let tp = t.matches().len();
    let fp = t.pred_area.len() - tp;
    let fn_ = t.gt_area.len() - tp;
    Ok(if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 })
}

/// Aggregated Jaccard index with one-to-one matching: pairs are taken by
/// descending IoU, each prediction at most once; unmatched predictions add
/// their area to the denominator. 1 when both maps are empty.
pub fn aji_ids(pred: &[u32], gt: &[u32]) -> Result<f64> {
    let t = Contingency::build(gt, pred)?;
    if t.gt_area.is_empty() && t.pred_area.is_empty() {
        return Ok(1.0);
    }
    let (mut gu, mut pu) = (BTreeSet::new(), BTreeSet::new());
    let (mut num, mut den) = (0usize, 0usize);
    for (_, g, p) in t.ranked() {
        if gu.contains(&g) || pu.contains(&p) {
            continue;
        }
        gu.insert(g);
        pu.insert(p);
        let i = t.overlap[&(g, p)];
        num += i;
        den += t.gt_area[&g] + t.pred_area[&p] - i;
    }
    den += t.gt_area.iter().filter(|(g, _)| !gu.contains(*g)).map(|(_, a)| a).sum::<usize>();
    den += t.pred_area.iter().filter(|(p, _)| !pu.contains(*p)).map(|(_, a)| a).sum::<usize>();
    Ok(num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pq {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Panoptic quality; `(1, 1, 1)` when both maps are empty.
pub fn panoptic_quality_ids(pred: &[u32], gt: &[u32]) -> Result<Pq> {
    let t = Contingency::build(gt, pred)?;
    let m = t.matches();
    let tp = m.len() as f64;
    let fp = t.pred_area.len() as f64 - tp;
    let fn_ = t.gt_area.len() as f64 - tp;
    if tp + fp + fn_ == 0.0 {
        return Ok(Pq { pq: 1.0, sq: 1.0, rq: 1.0 });
    }
    let sum_iou: f64 = m.iter().map(|x| x.2).sum();
    let sq = if tp > 0.0 { sum_iou / tp } else { 0.0 };
    let rq = tp / (tp + 0.5 * fp + 0.5 * fn_);
    Ok(Pq { pq: sq * rq, sq, rq })
}

/// Ids of instances of class `k` (all instances for `None`); others zeroed.
pub fn restrict(map: &InstanceMap, k: Option<u8>) -> Vec<u32> {
    match k {
        None => map.ids.clone(),
        Some(k) => map
            .ids
            .iter()
            .map(|&id| if id != 0 && map.classes.get(&id) == Some(&k) { id } else { 0 })
            .collect(),
    }
}

pub fn object_f1(pred: &InstanceMap, gt: &InstanceMap, k: Option<u8>) -> Result<f64> {
    object_f1_ids(&restrict(pred, k), &restrict(gt, k))
}

pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    aji_ids(&pred.ids, &gt.ids)
}

pub fn panoptic_quality(pred: &InstanceMap, gt: &InstanceMap, k: Option<u8>) -> Result<Pq> {
    panoptic_quality_ids(&restrict(pred, k), &restrict(gt, k))
}

/// Instance-metric implementation: the reference code in this module or a
/// faster native kernel with the same contracts.
pub trait MetricsBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn object_f1(&self, pred: &[u32], gt: &[u32]) -> Result<f64>;
    fn aji(&self, pred: &[u32], gt: &[u32]) -> Result<f64>;
    fn panoptic_quality(&self, pred: &[u32], gt: &[u32]) -> Result<Pq>;
    fn hausdorff(&self, pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<Option<f64>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Reference;

impl MetricsBackend for Reference {
    fn name(&self) -> &'static str {
        "reference"
    }
    fn object_f1(&self, pred: &[u32], gt: &[u32]) -> Result<f64> {
        object_f1_ids(pred, gt)
    }
    fn aji(&self, pred: &[u32], gt: &[u32]) -> Result<f64> {
        aji_ids(pred, gt)
    }
    fn panoptic_quality(&self, pred: &[u32], gt: &[u32]) -> Result<Pq> {
        panoptic_quality_ids(pred, gt)
    }
    fn hausdorff(&self, pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<Option<f64>> {
        hausdorff_mask(pred, gt, h, w)
    }
}

static KERNEL: OnceLock<Box<dyn MetricsBackend>> = OnceLock::new();

/// Installs the native kernel; returns false if one is already installed.
pub fn register_kernel(kernel: Box<dyn MetricsBackend>) -> bool {
    KERNEL.set(kernel).is_ok()
}

pub fn kernel_available() -> bool {
    KERNEL.get().is_some()
}

/// Backend for `kind`; `Kernel` falls back to the reference when no kernel
/// has been registered.
pub fn backend(kind: MetricsBackendKind) -> &'static dyn MetricsBackend {
    static REFERENCE: Reference = Reference;
    match (kind, KERNEL.get()) {
        (MetricsBackendKind::Kernel, Some(k)) => k.as_ref(),
        _ => &REFERENCE,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticClassMetrics {
    pub class: u8,
    pub dice: Option<f64>,
    pub miou: Option<f64>,
    pub hd: Option<f64>,
    pub pq: Option<Pq>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceClassMetrics {
    pub class: u8,
    pub f1: Option<f64>,
    pub aji: Option<f64>,
    pub pq: Option<Pq>,
}

/// Metrics averaged over images; a class contributes to an image's average
/// only when present in the prediction or the ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub backend: String,
    pub num_images: usize,
    /// Foreground semantic classes.
    pub semantic: Vec<SemanticClassMetrics>,
    pub instance: Vec<InstanceClassMetrics>,
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub mean_hd: Option<f64>,
    pub mean_f1: f64,
    pub mean_aji: f64,
    pub mean_pq_semantic: f64,
    pub mean_pq_instance: f64,
    /// Mean PQ over all semantic and instance classes pooled together.
    pub mean_pq: f64,
    /// Class-agnostic instance metrics.
    pub binary_aji: f64,
    pub binary_f1: f64,
    pub binary_pq: Pq,
}

#[derive(Default, Clone)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }
    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Default, Clone)]
struct PqMean {
    pq: Mean,
    sq: Mean,
    rq: Mean,
}

impl PqMean {
    fn push(&mut self, v: Pq) {
        self.pq.push(v.pq);
        self.sq.push(v.sq);
        self.rq.push(v.rq);
    }
    fn get(&self) -> Option<Pq> {
        Some(Pq {
            pq: self.pq.get()?,
            sq: self.sq.get()?,
            rq: self.rq.get()?,
        })
    }
}

fn macro_mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut m = Mean::default();
    v.flatten().for_each(|x| m.push(x));
    m.get()
}

/// Accumulates per-image metrics into a [`MetricReport`].
pub struct Evaluator {
    backend: &'static dyn MetricsBackend,
    k_sem: usize,
    k_ins: usize,
    images: usize,
    sem: Vec<(Mean, Mean, Mean, PqMean)>,
    ins: Vec<(Mean, Mean, PqMean)>,
    bin: (Mean, Mean, PqMean),
}

impl Evaluator {
    /// `k_sem` includes background, `k_ins` excludes it.
    pub fn new(k_sem: usize, k_ins: usize, backend: &'static dyn MetricsBackend) -> Self {
        Self {
            backend,
            k_sem,
            k_ins,
            images: 0,
            sem: vec![Default::default(); k_sem.saturating_sub(1)],
            ins: vec![Default::default(); k_ins],
            bin: Default::default(),
        }
    }

    pub fn add(&mut self, pred_sem: &[u8], gt_sem: &[u8], pred: &InstanceMap, gt: &InstanceMap) -> Result<()> {
        let (h, w) = (gt.height, gt.width);
        check_len(pred_sem.len(), h * w)?;
        check_len(gt_sem.len(), h * w)?;
        check_len(pred.ids.len(), h * w)?;
        self.images += 1;
        for k in 1..self.k_sem {
            let (p, g, _) = class_counts(pred_sem, gt_sem, k as u8);
            if p + g == 0 {
                continue;
            }
            let acc = &mut self.sem[k - 1];
            acc.0.push(dice(pred_sem, gt_sem, k as u8)?);
            acc.1.push(miou(pred_sem, gt_sem, k as u8)?);
            let pm: Vec<bool> = pred_sem.iter().map(|&v| v == k as u8).collect();
            let gm: Vec<bool> = gt_sem.iter().map(|&v| v == k as u8).collect();
            if let Some(d) = self.backend.hausdorff(&pm, &gm, h, w)? {
                acc.2.push(d);
            }
            // one segment per class
            let pi: Vec<u32> = pm.iter().map(|&b| b as u32).collect();
            let gi: Vec<u32> = gm.iter().map(|&b| b as u32).collect();
            acc.3.push(self.backend.panoptic_quality(&pi, &gi)?);
        }
        for k in 1..=self.k_ins {
            let (p, g) = (restrict(pred, Some(k as u8)), restrict(gt, Some(k as u8)));
            if p.iter().chain(&g).all(|&v| v == 0) {
                continue;
            }
            let acc = &mut self.ins[k - 1];
            acc.0.push(self.backend.object_f1(&p, &g)?);
            acc.1.push(self.backend.aji(&p, &g)?);
            acc.2.push(self.backend.panoptic_quality(&p, &g)?);
        }
        self.bin.0.push(self.backend.object_f1(&pred.ids, &gt.ids)?);
        self.bin.1.push(self.backend.aji(&pred.ids, &gt.ids)?);
        self.bin.2.push(self.backend.panoptic_quality(&pred.ids, &gt.ids)?);
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let semantic: Vec<SemanticClassMetrics> = self
            .sem
            .iter()
            .enumerate()
            .map(|(i, a)| SemanticClassMetrics {
                class: i as u8 + 1,
                dice: a.0.get(),
                miou: a.1.get(),
                hd: a.2.get(),
                pq: a.3.get(),
            })
            .collect();
        let instance: Vec<InstanceClassMetrics> = self
            .ins
            .iter()
            .enumerate()
            .map(|(i, a)| InstanceClassMetrics {
                class: i as u8 + 1,
                f1: a.0.get(),
                aji: a.1.get(),
                pq: a.2.get(),
            })
            .collect();
        let pq_sem = macro_mean(semantic.iter().map(|c| c.pq.map(|p| p.pq))).unwrap_or(0.0);
        let pq_ins = macro_mean(instance.iter().map(|c| c.pq.map(|p| p.pq))).unwrap_or(0.0);
        MetricReport {
            backend: self.backend.name().to_string(),
            num_images: self.images,
            mean_dice: macro_mean(semantic.iter().map(|c| c.dice)).unwrap_or(0.0),
            mean_miou: macro_mean(semantic.iter().map(|c| c.miou)).unwrap_or(0.0),
            mean_hd: macro_mean(semantic.iter().map(|c| c.hd)),
            mean_f1: macro_mean(instance.iter().map(|c| c.f1)).unwrap_or(0.0),
            mean_aji: macro_mean(instance.iter().map(|c| c.aji)).unwrap_or(0.0),
            mean_pq_semantic: pq_sem,
            mean_pq_instance: pq_ins,
            mean_pq: macro_mean(
                semantic
                    .iter()
                    .map(|c| c.pq.map(|p| p.pq))
                    .chain(instance.iter().map(|c| c.pq.map(|p| p.pq))),
            )
            .unwrap_or(0.0),
            binary_f1: self.bin.0.get().unwrap_or(0.0),
            binary_aji: self.bin.1.get().unwrap_or(0.0),
            binary_pq: self.bin.2.get().unwrap_or(Pq { pq: 0.0, sq: 0.0, rq: 0.0 }),
            semantic,
            instance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&str]) -> Vec<u32> {
        rows.iter().flat_map(|r| r.bytes().map(|b| if b == b'.' { 0 } else { (b - b'0') as u32 })).collect()
    }

    #[test]
    fn dice_and_iou_fixtures() {
        let g = [1u8, 1, 1, 1, 0, 0];
        let p = [1u8, 1, 0, 0, 0, 0];
        assert!((dice(&p, &g, 1).unwrap() - 2.0 * 2.0 / 6.0).abs() < 1e-12);
        assert!((miou(&p, &g, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(dice(&g, &g, 1).unwrap(), 1.0);
        assert_eq!(miou(&g, &g, 1).unwrap(), 1.0);
        let d = [0u8, 0, 1, 1, 0, 0];
        let e = [1u8, 1, 0, 0, 0, 0];
        assert_eq!(dice(&d, &e, 1).unwrap(), 0.0);
        assert_eq!(miou(&d, &e, 1).unwrap(), 0.0);
        assert_eq!(dice(&[0; 4], &[0; 4], 1).unwrap(), 1.0);
        assert!(matches!(dice(&[0; 3], &[0; 4], 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn hausdorff_fixtures() {
        let (h, w) = (6, 6);
        let mut a = vec![0u8; 36];
        let mut b = vec![0u8; 36];
        a[0] = 1;
        b[3 * w + 4] = 1;
        assert_eq!(hausdorff(&a, &b, h, w, 1).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &a, h, w, 1).unwrap(), Some(0.0));
        let sq = |y0: usize, x0: usize| {
            let mut m = vec![0u8; 36];
            for y in y0..y0 + 2 {
                for x in x0..x0 + 2 {
                    m[y * w + x] = 1;
                }
            }
            m
        };
        assert_eq!(hausdorff(&sq(1, 1), &sq(2, 1), h, w, 1).unwrap(), Some(1.0));
        assert_eq!(hausdorff(&sq(1, 1), &[0; 36], h, w, 1).unwrap(), None);
    }

    #[test]
    fn instance_fixtures() {
        // 2 GT, 1 pred matching one exactly
        let gt = grid(&["11..", "11..", "..22", "..22"]);
        let pr = grid(&["11..", "11..", "....", "...."]);
        assert!((object_f1_ids(&pr, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(object_f1_ids(&gt, &gt).unwrap(), 1.0);
        // IoU 0.4 against the only GT
        let g1 = grid(&["11..", "11..", "....", "...."]);
        let p1 = grid(&["1...", "1...", "1...", "...."]);
        let t = Contingency::build(&g1, &p1).unwrap();
        assert!((t.iou(1, 1) - 0.4).abs() < 1e-12);
        assert_eq!(object_f1_ids(&p1, &g1).unwrap(), 0.0);
        // AJI: one 4 px GT, pred covers 2 of them
        let p2 = grid(&["11..", "....", "....", "...."]);
        assert!((aji_ids(&p2, &g1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(aji_ids(&gt, &gt).unwrap(), 1.0);
        assert_eq!(aji_ids(&[0; 16], &g1).unwrap(), 0.0);
        let c = Contingency::build(&g1, &p2).unwrap();
        assert_eq!(c.overlap, BTreeMap::from([((1, 1), 2)]));
        assert_eq!(c.gt_area, BTreeMap::from([(1, 4)]));
        assert_eq!(c.pred_area, BTreeMap::from([(1, 2)]));
    }

    #[test]
    fn pq_fixtures() {
        assert_eq!(panoptic_quality_ids(&[1, 1, 2], &[3, 3, 4]).unwrap(), Pq { pq: 1.0, sq: 1.0, rq: 1.0 });
        // areas 4 and 4, overlap 3: IoU 3/5
        let g = grid(&["1111", "....", "...."]);
        let p = grid(&[".111", "1...", "...."]);
        let q = panoptic_quality_ids(&p, &g).unwrap();
        assert!((q.pq - 0.6).abs() < 1e-12 && (q.sq - 0.6).abs() < 1e-12 && q.rq == 1.0);
        // IoU exactly one half is not a match
        let g = grid(&["111.", "...."]);
        let p = grid(&[".111", "...."]);
        assert_eq!(Contingency::build(&g, &p).unwrap().iou(1, 1), 0.5);
        assert_eq!(panoptic_quality_ids(&p, &g).unwrap().pq, 0.0);
    }

    #[test]
    fn relabelling_invariance() {
        let gt = grid(&["11.3", "11.3", "..22", "4.22"]);
        let pr = grid(&["11..", "1.33", "..22", "..22"]);
        let swap = |m: &[u32]| m.iter().map(|&v| if v == 0 { 0 } else { 10 - v }).collect::<Vec<_>>();
        let (gs, ps) = (swap(&gt), swap(&pr));
        assert_eq!(object_f1_ids(&pr, &gt).unwrap(), object_f1_ids(&ps, &gs).unwrap());
        assert_eq!(aji_ids(&pr, &gt).unwrap(), aji_ids(&ps, &gs).unwrap());
        assert_eq!(panoptic_quality_ids(&pr, &gt).unwrap(), panoptic_quality_ids(&ps, &gs).unwrap());
    }

    #[test]
    fn kernel_request_falls_back() {
        if !kernel_available() {
            assert_eq!(backend(MetricsBackendKind::Kernel).name(), "reference");
        }
        assert_eq!(backend(MetricsBackendKind::Reference).name(), "reference");
    }

    #[test]
    fn evaluator_perfect_prediction() {
        let sem = vec![0u8, 1, 1, 2, 2, 0, 0, 0, 0];
        let mut inst = InstanceMap::empty(3, 3);
        inst.ids[1] = 1;
        inst.ids[2] = 1;
        inst.ids[4] = 2;
        inst.classes.insert(1, 1);
        inst.classes.insert(2, 2);
        let mut ev = Evaluator::new(3, 3, &Reference);
        ev.add(&sem, &sem, &inst, &inst).unwrap();
        let r = ev.finish();
        assert_eq!((r.mean_dice, r.mean_miou, r.mean_f1, r.mean_aji, r.mean_pq), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.mean_hd, Some(0.0));
        assert_eq!(r.instance[2].pq, None);
    }
}
