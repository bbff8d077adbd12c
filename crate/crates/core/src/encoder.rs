//! Shared two-stage hierarchical transformer encoder with FFN adapters.
//!
//! Stage 1 tokenises at half the patch size and runs at half width; a linear
//! merge and 2x2 mean pooling bring it to the final patch grid for stage 2.
//! Attention is global and there is no positional embedding, so shifting a
//! constant-padded image by whole patches shifts the tokens.

use std::path::Path;

use serde::Serialize;

use crate::autograd::{Tensor, Var};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{patchify, Adapter, Attention, Binder, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::types::ImageEmbedding;

pub const PREFIX: &str = "encoder.";
const ADAPTER_TAG: &str = ".adapter.";

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub adapter: Adapter,
}

impl Block {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, cfg: &ExperimentConfig) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, true),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, heads, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, true),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, dim * cfg.mlp_ratio, true),
            adapter: Adapter::new(store, init, &format!("{name}{ADAPTER_TAG}0"), dim, cfg.adapter_reduction),
        }
    }

    fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>, adapters: bool) -> Var<'g> {
        let n = self.norm1.forward(b, x);
        let x = x.add(self.attn.forward(b, n, n, n));
        let mut y = self.mlp.forward(b, self.norm2.forward(b, x));
        if adapters {
            y = self.adapter.forward(b, y);
        }
        x.add(y)
    }
}

/// Parameter counts after freezing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainableReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub stage1: Vec<Block>,
    pub merge: Linear,
    pub stage2: Vec<Block>,
    pub neck: LayerNorm,
    pub patch_size: usize,
    pub adapters_enabled: bool,
}

impl ImageEncoder {
    pub const STAGE1_DEPTH: usize = 1;
    pub const STAGE2_DEPTH: usize = 2;

    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ExperimentConfig) -> Self {
        let c = cfg.embed_dim;
        let c1 = c / 2;
        let p1 = cfg.patch_size / 2;
        let stage1 = (0..Self::STAGE1_DEPTH)
            .map(|i| Block::new(store, init, &format!("encoder.stage1.{i}"), c1, cfg.stage1_heads(), cfg))
            .collect();
        let merge = Linear::new(store, init, "encoder.merge", c1, c, true, true);
        let stage2 = (0..Self::STAGE2_DEPTH)
            .map(|i| Block::new(store, init, &format!("encoder.stage2.{i}"), c, cfg.num_heads, cfg))
            .collect();
        Self {
            patch: Linear::new(store, init, "encoder.patch", 3 * p1 * p1, c1, true, true),
            stage1,
            merge,
            stage2,
            neck: LayerNorm::new(store, "encoder.neck", c, true),
            patch_size: cfg.patch_size,
            adapters_enabled: false,
        }
    }

    /// `img` is `[B, 3, H, W]` with values in `[0, 1]`.
    pub fn encode<'g>(&self, b: &Binder<'g, '_>, img: Var<'g>) -> Result<ImageEmbedding<'g>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("image batch must be [B, 3, H, W], got {s:?}")));
        }
        let p = self.patch_size;
        if !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
            return Err(Error::Shape(format!("image {}x{} not divisible by patch size {p}", s[2], s[3])));
        }
        let (bs, gy, gx) = (s[0], s[2] / p, s[3] / p);
        let mut x = self.patch.forward(b, patchify(img.add_scalar(-0.5), p / 2));
        for blk in &self.stage1 {
            x = blk.forward(b, x, self.adapters_enabled);
        }
        let high_res = x;
        let c = self.merge.out_dim;
        let mut x = self
            .merge
            .forward(b, x)
            .reshape(&[bs, gy, 2, gx, 2, c])
            .permute(&[0, 1, 3, 2, 4, 5])
            .reshape(&[bs, gy * gx, 4, c])
            .mean_axis(2);
        for blk in &self.stage2 {
            x = blk.forward(b, x, self.adapters_enabled);
        }
        Ok(ImageEmbedding {
            tokens: self.neck.forward(b, x),
            grid: (gy, gx),
            high_res: Some(high_res),
        })
    }

    pub fn enable_adapters(&mut self) {
        self.adapters_enabled = true;
    }

    /// Marks every non-adapter encoder tensor frozen and every adapter tensor
    /// trainable, and switches adapters on. Idempotent.
    pub fn freeze_backbone_enable_adapters(&mut self, store: &mut ParamStore) -> TrainableReport {
        self.enable_adapters();
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(PREFIX))
            .map(|(id, p)| (id, p.name.contains(ADAPTER_TAG)))
            .collect();
        for (id, is_adapter) in ids {
            store.set_trainable(id, is_adapter);
        }
        Self::trainable_report(store)
    }

    pub fn trainable_report(store: &ParamStore) -> TrainableReport {
        let total = store.count(PREFIX, false);
        let trainable = store.count(PREFIX, true);
        TrainableReport {
            trainable,
            total,
            fraction: trainable as f64 / total.max(1) as f64,
        }
    }

    /// Writes every encoder tensor (backbone and adapters).
    pub fn save_pretrained(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<(&str, &Tensor)> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(PREFIX))
            .map(|(_, p)| (p.name.as_str(), &*p.value))
            .collect();
        checkpoint::write(path, &serde_json::json!({"kind": "encoder"}), &tensors)
    }

    /// Overwrites encoder tensors from a file written by
    /// [`ImageEncoder::save_pretrained`]. Nothing is changed unless every
    /// tensor matches by name and shape; all mismatches are reported.
    pub fn load_pretrained(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = checkpoint::read(path)
            .map_err(|e| Error::TopologyMismatch(format!("cannot read {}: {e}", path.display())))?;
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (name, t) in file.tensors {
            match store.id(&name).filter(|_| name.starts_with(PREFIX)) {
                None => problems.push(format!("unexpected tensor `{name}`")),
                Some(id) if store.get(id).shape() != t.shape() => problems.push(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )),
                Some(id) => updates.push((id, t)),
            }
        }
        for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with(PREFIX)) {
            if !updates.iter().any(|(u, _)| *u == id) && !problems.iter().any(|m| m.contains(&format!("`{}`", p.name))) {
                problems.push(format!("missing tensor `{}`", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::TopologyMismatch(problems.join("; ")));
        }
        for (id, t) in updates {
            store.set(id, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::GradMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ExperimentConfig) -> (ParamStore, ImageEncoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let enc = ImageEncoder::new(&mut store, &mut init, cfg);
        (store, enc)
    }

    fn image(rng: &mut ChaCha8Rng, bs: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[bs, 3, size, size], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn token_shape_and_batch_independence() {
        let cfg = ExperimentConfig::tiny();
        let (store, enc) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = image(&mut rng, 1, cfg.image_size);
        let two = Tensor::concat(&[&one, &one], 0);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::None);
        let h = enc.encode(&b, g.constant(two)).unwrap();
        assert_eq!(h.tokens.shape(), vec![2, cfg.num_tokens(), cfg.embed_dim]);
        assert_eq!(h.grid, (cfg.grid_size(), cfg.grid_size()));
        let v = h.tokens.value();
        assert_eq!(v.narrow(0, 0, 1), v.narrow(0, 1, 1));
        let bad = g.constant(Tensor::zeros(&[1, 3, cfg.image_size + 8, cfg.image_size]));
        assert!(matches!(enc.encode(&b, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn default_token_count() {
        let cfg = ExperimentConfig::default();
        let (store, enc) = build(&cfg);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::None);
        let h = enc.encode(&b, g.constant(Tensor::full(&[1, 3, 256, 256], 0.3))).unwrap();
        assert_eq!(h.tokens.shape(), vec![1, 256, cfg.embed_dim]);
        assert!(h.tokens.value().all_finite());
    }

    #[test]
    fn freezing_reports_small_fraction_and_is_idempotent() {
        let cfg = ExperimentConfig::default();
        let (mut store, mut enc) = build(&cfg);
        let r1 = enc.freeze_backbone_enable_adapters(&mut store);
        let r2 = enc.freeze_backbone_enable_adapters(&mut store);
        assert_eq!(r1, r2);
        assert!(r1.fraction > 0.0 && r1.fraction < 0.15, "{r1:?}");
        for (_, p) in store.iter() {
            assert_eq!(p.trainable, p.name.contains(ADAPTER_TAG), "{}", p.name);
        }
    }

    #[test]
    fn adapter_insertion_is_bit_identical() {
        let cfg = ExperimentConfig::tiny();
        let (mut store, mut enc) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = image(&mut rng, 2, cfg.image_size);
        let run = |enc: &ImageEncoder, store: &ParamStore| {
            let g = Graph::new();
            let b = Binder::new(&g, store, GradMode::None);
            (*enc.encode(&b, g.constant(img.clone())).unwrap().tokens.value()).clone()
        };
        let before = run(&enc, &store);
        enc.freeze_backbone_enable_adapters(&mut store);
        assert_eq!(before, run(&enc, &store));
    }

    #[test]
    fn adapters_receive_gradient_backbone_does_not() {
        let cfg = ExperimentConfig::tiny();
        let (mut store, mut enc) = build(&cfg);
        enc.freeze_backbone_enable_adapters(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image(&mut rng, 1, cfg.image_size);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::Trainable);
        let h = enc.encode(&b, g.constant(img.clone())).unwrap();
        // generic scalar of h (a plain norm would be flattened by the final LN)
        let proj = Tensor::from_fn(&h.tokens.shape(), |_| rng.random_range(-1.0..1.0));
        let loss = h.tokens.mul_const(&proj).sum_all();
        let grads = g.backward(loss);
        let mut adapter_grad = 0.0;
        for (id, v) in b.bound() {
            let name = store.name(id);
            match grads.get(v) {
                Some(t) if name.contains(ADAPTER_TAG) => adapter_grad += t.norm(),
                Some(_) => panic!("frozen tensor {name} received a gradient"),
                None => assert!(!store.is_trainable(id)),
            }
        }
        assert!(adapter_grad > 0.0);

        // finite-difference probe on one up-projection weight
        let id = store.id("encoder.stage2.1.adapter.0.up.weight").unwrap();
        let ad = grads.get(b.p(id)).unwrap().data()[3];
        let eval = |s: &ParamStore| {
            let g = Graph::new();
            let b = Binder::new(&g, s, GradMode::None);
            enc.encode(&b, g.constant(img.clone())).unwrap().tokens.mul_const(&proj).sum_all().item()
        };
        let hstep = 1e-6;
        let mut sp = store.clone();
        sp.get_mut(id).data_mut()[3] += hstep;
        let mut sm = store.clone();
        sm.get_mut(id).data_mut()[3] -= hstep;
        let fd = (eval(&sp) - eval(&sm)) / (2.0 * hstep);
        assert!((ad - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "{ad} vs {fd}");
    }

    #[test]
    fn translation_by_whole_patches_shifts_tokens() {
        let cfg = ExperimentConfig::tiny();
        let (store, enc) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let size = cfg.image_size;
        let p = cfg.patch_size;
        // content occupies the central block, border is constant padding
        let content = Tensor::from_fn(&[3, 2 * p, 2 * p], |_| rng.random_range(0.0..1.0));
        let place = |oy: usize, ox: usize| {
            let mut img = Tensor::full(&[1, 3, size, size], 0.25);
            for c in 0..3 {
                for y in 0..2 * p {
                    for x in 0..2 * p {
                        let o = img.offset(&[0, c, oy + y, ox + x]);
                        img.data_mut()[o] = content.at(&[c, y, x]);
                    }
                }
            }
            img
        };
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::None);
        let a = enc.encode(&b, g.constant(place(0, 0))).unwrap().tokens.value();
        let s = enc.encode(&b, g.constant(place(p, 2 * p))).unwrap().tokens.value();
        let grid = cfg.grid_size();
        let c = cfg.embed_dim;
        for y in 0..grid - 1 {
            for x in 0..grid - 2 {
                for k in 0..c {
                    let u = a.at(&[0, y * grid + x, k]);
                    let v = s.at(&[0, (y + 1) * grid + x + 2, k]);
                    assert!((u - v).abs() < 1e-5, "token ({y},{x}) ch {k}: {u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn pretrained_round_trip_and_mismatch_reporting() {
        let cfg = ExperimentConfig::tiny();
        let (store, _) = build(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ImageEncoder::save_pretrained(&store, &path).unwrap();

        let mut other = ParamStore::new();
        let mut init = Init::new(99);
        ImageEncoder::new(&mut other, &mut init, &cfg);
        ImageEncoder::load_pretrained(&mut other, &path).unwrap();
        for (id, p) in store.iter() {
            assert_eq!(*p.value, *other.get(id));
        }

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(ImageEncoder::load_pretrained(&mut other, &cut), Err(Error::TopologyMismatch(_))));

        let mut extra: Vec<(String, Tensor)> = checkpoint::read(&path).unwrap().tensors;
        extra.push(("encoder.ghost".to_string(), Tensor::zeros(&[2])));
        let refs: Vec<(&str, &Tensor)> = extra.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let xp = dir.path().join("extra.ckpt");
        checkpoint::write(&xp, &serde_json::json!({}), &refs).unwrap();
        match ImageEncoder::load_pretrained(&mut other, &xp) {
            Err(Error::TopologyMismatch(m)) => assert!(m.contains("encoder.ghost"), "{m}"),
            r => panic!("unexpected {r:?}"),
        }
    }
}
