//! Synthetic tissue-like scenes: blob-shaped semantic regions containing
//! elliptical instances whose class depends on the enclosing region.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{InstanceMap, Sample};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub image_size: usize,
    /// Including background.
    pub num_semantic_classes: usize,
    /// Excluding background.
    pub num_instance_classes: usize,
    pub num_regions: usize,
    /// Fraction of pixels covered by non-background regions.
    pub region_coverage: f64,
    pub num_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound on the fraction of instances touching another.
    pub touching_fraction: f64,
    /// Probability that an instance takes its region's preferred class.
    pub class_affinity: f64,
    pub noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            num_semantic_classes: 3,
            num_instance_classes: 3,
            num_regions: 4,
            region_coverage: 0.4,
            num_instances: 12,
            min_radius: 5.0,
            max_radius: 9.0,
            touching_fraction: 0.2,
            class_affinity: 0.85,
            noise: 0.03,
        }
    }
}

impl GeneratorSpec {
    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generator(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.num_semantic_classes < 2 || self.num_instance_classes < 1 {
            return bad("need at least 2 semantic classes and 1 instance class".into());
        }
        if !(0.0..=1.0).contains(&self.region_coverage) || !(0.0..=1.0).contains(&self.touching_fraction) {
            return bad("region_coverage and touching_fraction must lie in [0, 1]".into());
        }
        if !(self.min_radius >= 0.5 && self.min_radius <= self.max_radius) {
            return bad(format!("bad radius range [{}, {}]", self.min_radius, self.max_radius));
        }
        if self.num_instances > 0 && (self.num_regions == 0 || self.region_coverage == 0.0) {
            return bad("instances requested but no semantic region to hold them".into());
        }
        if self.num_instances > 0 && 2.0 * self.min_radius + 1.0 > self.image_size as f64 {
            return bad("instances larger than the image".into());
        }
        Ok(())
    }

    /// Preferred instance class (1-based) for a region class (1-based).
    pub fn preferred_class(&self, region: u8) -> u8 {
        ((region as usize - 1) % self.num_instance_classes + 1) as u8
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sy: f64,
    sx: f64,
    class: u8,
}

fn semantic_layout(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.image_size;
    let blobs: Vec<Blob> = (0..spec.num_regions)
        .map(|i| Blob {
            cy: rng.random_range(0.0..n as f64),
            cx: rng.random_range(0.0..n as f64),
            sy: rng.random_range(0.12..0.25) * n as f64,
            sx: rng.random_range(0.12..0.25) * n as f64,
            class: (i % (spec.num_semantic_classes - 1) + 1) as u8,
        })
        .collect();
    // low-frequency perturbation so region outlines are irregular
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / n as f64,
                rng.random_range(1.0..4.0) * std::f64::consts::TAU / n as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.15),
            )
        })
        .collect();
    let mut field = vec![0.0; n * n];
    let mut owner = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let wobble: f64 = waves.iter().map(|(a, b, ph, amp)| amp * (a * fy + b * fx + ph).sin()).sum();
            let mut best = (0.0, 0u8);
            for bl in &blobs {
                let d = ((fy - bl.cy) / bl.sy).powi(2) + ((fx - bl.cx) / bl.sx).powi(2);
                let v = (-0.5 * d).exp();
                if v > best.0 {
                    best = (v, bl.class);
                }
            }
            field[y * n + x] = best.0 * (1.0 + wobble);
            owner[y * n + x] = best.1;
        }
    }
    if blobs.is_empty() || spec.region_coverage == 0.0 {
        return vec![0; n * n];
    }
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite field"));
    let keep = ((spec.region_coverage * (n * n) as f64).round() as usize).clamp(1, n * n);
    let thr = sorted[keep - 1];
    field
        .iter()
        .zip(&owner)
        .map(|(&v, &c)| if v >= thr && v > 0.0 { c } else { 0 })
        .collect()
}

fn ellipse_pixels(n: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Vec<usize> {
    let (s, c) = angle.sin_cos();
    let r = ry.max(rx).ceil() as isize + 1;
    let mut out = Vec::new();
    for y in (cy as isize - r)..=(cy as isize + r) {
        for x in (cx as isize - r)..=(cx as isize + r) {
            if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                continue;
            }
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                out.push(y as usize * n + x as usize);
            }
        }
    }
    out
}

fn touches(ids: &[u32], n: usize, pixels: &[usize]) -> bool {
    pixels.iter().any(|&p| {
        let (y, x) = (p / n, p % n);
        let nb = [
            (y > 0).then(|| p - n),
            (y + 1 < n).then(|| p + n),
            (x > 0).then(|| p - 1),
            (x + 1 < n).then(|| p + 1),
        ];
        nb.into_iter().flatten().any(|q| ids[q] != 0)
    })
}

/// Deterministic in `seed`.
pub fn generate_sample(seed: u64, spec: &GeneratorSpec) -> Result<Sample> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let semantic = semantic_layout(spec, &mut rng);
    let fg_pixels: Vec<usize> = (0..n * n).filter(|&p| semantic[p] != 0).collect();
    if spec.num_instances > 0 && fg_pixels.is_empty() {
        return Err(Error::Generator("semantic layout has no foreground".into()));
    }

    let mut ids = vec![0u32; n * n];
    let mut classes = BTreeMap::new();
    let max_touching = (spec.touching_fraction * spec.num_instances as f64).floor() as usize;
    let mut touching = 0usize;
    let attempts = 400 * spec.num_instances.max(1);
    let mut tries = 0;
    while classes.len() < spec.num_instances {
        tries += 1;
        if tries > attempts {
            return Err(Error::Generator(format!(
                "placed {} of {} instances; regions too small for radius {}..{}",
                classes.len(),
                spec.num_instances,
                spec.min_radius,
                spec.max_radius
            )));
        }
        let centre = fg_pixels[rng.random_range(0..fg_pixels.len())];
        let (cy, cx) = ((centre / n) as f64, (centre % n) as f64);
        let ry = rng.random_range(spec.min_radius..=spec.max_radius);
        let rx = rng.random_range(spec.min_radius..=spec.max_radius);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let pix = ellipse_pixels(n, cy, cx, ry, rx, angle);
        if pix.is_empty() {
            continue;
        }
        let region = semantic[centre];
        // entirely inside one region, disjoint from other instances
        if pix.iter().any(|&p| semantic[p] != region || ids[p] != 0) {
            continue;
        }
        let touch = touches(&ids, n, &pix);
        if touch && touching + 2 > max_touching {
            continue;
        }
        if touch {
            touching += 2;
        }
        let id = classes.len() as u32 + 1;
        for &p in &pix {
            ids[p] = id;
        }
        let class = if rng.random_bool(spec.class_affinity) {
            spec.preferred_class(region)
        } else {
            rng.random_range(1..=spec.num_instance_classes as u8)
        };
        classes.insert(id, class);
    }

    let image = render(spec, &semantic, &ids, &classes, &mut rng);
    Ok(Sample {
        id: format!("synth_{seed:06}"),
        image,
        semantic,
        instance: InstanceMap {
            height: n,
            width: n,
            ids,
            classes,
        },
    })
}

fn render(spec: &GeneratorSpec, semantic: &[u8], ids: &[u32], classes: &BTreeMap<u32, u8>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = spec.image_size;
    let region_rgb = |c: u8| -> [f64; 3] {
        match c {
            0 => [0.93, 0.88, 0.92],
            _ => {
                let t = (c as f64 - 1.0) / (spec.num_semantic_classes.max(2) - 1) as f64;
                [0.85 - 0.25 * t, 0.55 + 0.2 * t, 0.75 - 0.1 * t]
            }
        }
    };
    let inst_rgb = |c: u8| -> [f64; 3] {
        let t = (c as f64 - 1.0) / spec.num_instance_classes.max(1) as f64;
        [0.25 + 0.45 * t, 0.1 + 0.15 * (1.0 - t), 0.45 - 0.2 * t]
    };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut data = vec![0.0; 3 * n * n];
    for p in 0..n * n {
        let rgb = match ids[p] {
            0 => region_rgb(semantic[p]),
            id => inst_rgb(classes[&id]),
        };
        for (c, v) in rgb.iter().enumerate() {
            let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data[c * n * n + p] = (v + e).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 64,
            num_instances: 5,
            min_radius: 2.0,
            max_radius: 4.0,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_sample(7, &small()).unwrap();
        let b = generate_sample(7, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.semantic, generate_sample(8, &small()).unwrap().semantic);
    }

    #[test]
    fn zero_instances_gives_empty_map() {
        let s = generate_sample(1, &GeneratorSpec { num_instances: 0, ..small() }).unwrap();
        assert!(s.instance.ids.iter().all(|&v| v == 0));
        assert!(s.instance.classes.is_empty());
    }

    #[test]
    fn centroids_lie_on_semantic_foreground() {
        let spec = small();
        for seed in 0..10 {
            let s = generate_sample(seed, &spec).unwrap();
            let coverage = s.semantic.iter().filter(|&&c| c != 0).count() as f64 / (64.0 * 64.0);
            assert!((coverage - 0.4).abs() < 0.02, "coverage {coverage}");
            assert_eq!(s.instance.classes.len(), 5);
            for &id in s.instance.classes.keys() {
                let px: Vec<usize> = (0..64 * 64).filter(|&p| s.instance.ids[p] == id).collect();
                let cy = px.iter().map(|p| (p / 64) as f64).sum::<f64>() / px.len() as f64;
                let cx = px.iter().map(|p| (p % 64) as f64).sum::<f64>() / px.len() as f64;
                let p = cy.round() as usize * 64 + cx.round() as usize;
                assert_ne!(s.semantic[p], 0, "seed {seed} instance {id}");
            }
            // instance foreground is a subset of semantic foreground
            for p in 0..64 * 64 {
                if s.instance.ids[p] != 0 {
                    assert_ne!(s.semantic[p], 0);
                }
            }
            s.instance.validate(3).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unsatisfiable_specs_are_rejected() {
        let huge = GeneratorSpec {
            min_radius: 40.0,
            max_radius: 40.0,
            ..small()
        };
        assert!(matches!(generate_sample(0, &huge), Err(Error::Generator(_))));
        let no_room = GeneratorSpec { region_coverage: 0.0, ..small() };
        assert!(matches!(generate_sample(0, &no_room), Err(Error::Generator(_))));
    }

    #[test]
    fn instance_class_follows_region() {
        let spec = GeneratorSpec {
            class_affinity: 1.0,
            ..small()
        };
        for seed in 0..5 {
            let s = generate_sample(seed, &spec).unwrap();
            for (&id, &c) in &s.instance.classes {
                let p = s.instance.ids.iter().position(|&v| v == id).unwrap();
                assert_eq!(c, spec.preferred_class(s.semantic[p]));
            }
        }
    }
}
