//! Browser demo. A [`Scene`] holds one synthetic sample; the page can
//! regenerate it, extract instances from noisy versions of its ground-truth
//! maps with the watershed post-processor, and score the result.

use coseg::data::{derive_instance_targets, generate_sample, GeneratorSpec, InstanceMap, Sample};
use coseg::metrics::{aji, dice, hausdorff_mask, object_f1, panoptic_quality};
use coseg::postprocess::{edge_energy, instances_from_maps, InstancePrediction, Thresholds};
use coseg::report::{overlay, to_rgb8};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Scores of the current prediction against the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub gt_instances: usize,
    pub pred_instances: usize,
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub f1: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[wasm_bindgen]
pub struct Scene {
    sample: Sample,
    num_classes: usize,
    energy: Vec<f64>,
    pred: Option<InstancePrediction>,
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn js(e: coseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Scene {
    pub fn generate(seed: u64, size: usize, instances: usize, touching: f64) -> coseg::Result<Self> {
        let spec = GeneratorSpec {
            image_size: size,
            num_instances: instances,
            touching_fraction: touching,
            min_radius: (size as f64 / 40.0).max(2.0),
            max_radius: (size as f64 / 22.0).max(3.0),
            ..GeneratorSpec::default()
        };
        let sample = generate_sample(seed, &spec)?;
        let n = size * size;
        Ok(Self {
            sample,
            num_classes: spec.num_instance_classes,
            energy: vec![0.0; n],
            pred: None,
        })
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn prediction(&self) -> Option<&InstancePrediction> {
        self.pred.as_ref()
    }

    /// Ground-truth maps with Gaussian noise of the given standard
    /// deviations on the foreground probability and hv maps, then watershed.
    pub fn extract(&mut self, fg_noise: f64, hv_noise: f64, th: &Thresholds, seed: u64) -> usize {
        let (h, w) = self.sample.size();
        let n = h * w;
        let t = derive_instance_targets(&self.sample.instance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |sd: f64| if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(&mut rng) } else { 0.0 };
        let fg: Vec<f64> = t.binary.iter().map(|&b| (b as f64 + jitter(fg_noise)).clamp(0.0, 1.0)).collect();
        let hv: Vec<f64> = t.hv.data().iter().map(|&v| v + jitter(hv_noise)).collect();
        let k = self.num_classes + 1;
        let mut types = vec![0.0; k * n];
        for (p, &c) in t.types.iter().enumerate() {
            types[c as usize * n + p] = 1.0;
        }
        let mask: Vec<bool> = fg.iter().map(|&p| p >= th.fg).collect();
        self.energy = edge_energy(&hv, &mask, h, w);
        let pred = instances_from_maps(&fg, &hv, &types, h, w, th);
        let m = pred.num_instances();
        self.pred = Some(pred);
        m
    }

    pub fn scores(&self) -> coseg::Result<Option<Scores>> {
        let Some(pred) = &self.pred else { return Ok(None) };
        let (h, w) = self.sample.size();
        let gt: &InstanceMap = &self.sample.instance;
        let pm = pred.to_instance_map();
        let bin = |ids: &[u32]| ids.iter().map(|&i| u8::from(i != 0)).collect::<Vec<u8>>();
        let (pb, gb) = (bin(&pm.ids), bin(&gt.ids));
        let mask = |b: &[u8]| b.iter().map(|&x| x == 1).collect::<Vec<bool>>();
        let pq = panoptic_quality(&pm, gt, None)?;
        Ok(Some(Scores {
            gt_instances: gt.num_instances(),
            pred_instances: pm.num_instances(),
            dice: dice(&pb, &gb, 1)?,
            hausdorff: hausdorff_mask(&mask(&pb), &mask(&gb), h, w)?,
            f1: object_f1(&pm, gt, None)?,
            aji: aji(&pm, gt)?,
            pq: pq.pq,
            sq: pq.sq,
            rq: pq.rq,
        }))
    }

    fn class_map(map: &InstanceMap) -> Vec<u8> {
        map.ids.iter().map(|id| map.classes.get(id).copied().unwrap_or(0)).collect()
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, instances: usize, touching: f64) -> Result<Scene, JsError> {
        Self::generate(seed as u64, size, instances, touching).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.sample.size().0
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&to_rgb8(&self.sample.image))
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        let (h, w) = self.sample.size();
        let gt = &self.sample.instance;
        rgba(&overlay(&to_rgb8(&self.sample.image), &Self::class_map(gt), &gt.ids, h, w, 0.45))
    }

    /// Runs extraction and returns the instance count.
    pub fn segment(&mut self, fg_noise: f64, hv_noise: f64, fg_threshold: f64, edge_threshold: f64, min_area: usize, seed: u32) -> usize {
        let th = Thresholds {
            fg: fg_threshold,
            edge: edge_threshold,
            min_area,
        };
        self.extract(fg_noise, hv_noise, &th, seed as u64)
    }

    pub fn prediction_rgba(&self) -> Vec<u8> {
        let (h, w) = self.sample.size();
        let rgb = to_rgb8(&self.sample.image);
        match &self.pred {
            None => rgba(&rgb),
            Some(p) => {
                let m = p.to_instance_map();
                rgba(&overlay(&rgb, &Self::class_map(&m), &m.ids, h, w, 0.45))
            }
        }
    }

    /// Boundary energy of the last extraction as grey levels.
    pub fn energy_rgba(&self) -> Vec<u8> {
        self.energy
            .iter()
            .flat_map(|&e| {
                let v = (e.clamp(0.0, 1.0) * 255.0).round() as u8;
                [v, v, v, 255]
            })
            .collect()
    }

    /// Scores as JSON, `null` before the first extraction.
    pub fn scores_json(&self) -> Result<String, JsError> {
        let s = self.scores().map_err(js)?;
        Ok(serde_json::to_string(&s).expect("scores serialise"))
    }
}
