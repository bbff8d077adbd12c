//! Spatio-temporal prompt encoder: turns the first-forward binary mask
//! logits of one task into a token field that guides the other task.

mod scan;

pub use scan::{causal_depthwise_conv1d, selective_scan};

use crate::autograd::{Tensor, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{patchify, Attention, Binder, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::types::{ImageEmbedding, PriorConstraint, Task};

/// Selective state-space layer over `[B, L, D]` sequences.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `A = -exp(a_log)`, shape `[D, N]`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl SelectiveSsm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, state: usize) -> Self {
        let delta_proj = Linear::new(store, init, &format!("{name}.delta"), dim, dim, true, true);
        // initial step sizes log-uniform in [1e-3, 1e-1]
        let u = init.uniform(&[dim], 1.0);
        let bias = u.map(|v| {
            let dt = (f64::ln(1e-3) + (v + 1.0) / 2.0 * (f64::ln(1e-1) - f64::ln(1e-3))).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        store.set(delta_proj.bias.expect("bias"), bias);
        let a_log = Tensor::from_fn(&[dim, state], |i| ((i % state + 1) as f64).ln());
        Self {
            delta_proj,
            b_proj: Linear::new(store, init, &format!("{name}.b"), dim, state, false, true),
            c_proj: Linear::new(store, init, &format!("{name}.c"), dim, state, false, true),
            a_log: store.add(format!("{name}.a_log"), a_log, true),
            d_skip: store.add(format!("{name}.d"), Tensor::full(&[dim], 1.0), true),
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let delta = self.delta_proj.forward(b, x).softplus();
        let a = b.p(self.a_log).exp().neg();
        let bm = self.b_proj.forward(b, x);
        let cm = self.c_proj.forward(b, x);
        selective_scan(x, delta, a, bm, cm, b.p(self.d_skip))
    }
}

/// `t = up(LN(SSM(conv1d(down(h)))))` over the raster-ordered token sequence.
#[derive(Clone, Debug)]
pub struct TemporalBranch {
    pub down: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SelectiveSsm,
    pub norm: LayerNorm,
    pub up: Linear,
}

impl TemporalBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, state: usize, kernel: usize) -> Self {
        let conv_w = init.uniform(&[dim, kernel], 1.0 / (kernel as f64).sqrt());
        Self {
            down: Linear::new(store, init, &format!("{name}.down"), dim, dim, false, true),
            conv_w: store.add(format!("{name}.conv.weight"), conv_w, true),
            conv_b: store.add(format!("{name}.conv.bias"), Tensor::zeros(&[dim]), true),
            ssm: SelectiveSsm::new(store, init, &format!("{name}.ssm"), dim, state),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, true),
            up: Linear::new(store, init, &format!("{name}.up"), dim, dim, false, true),
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, h: Var<'g>) -> Var<'g> {
        let x = self.down.forward(b, h);
        let x = causal_depthwise_conv1d(x, b.p(self.conv_w), b.p(self.conv_b));
        let x = self.ssm.forward(b, x);
        self.up.forward(b, self.norm.forward(b, x))
    }

    /// Test hook: identity projections and a pass-through conv tap, which
    /// reduces the branch to `LN(SSM(h))`.
    pub fn set_identity_hook(&self, store: &mut ParamStore) {
        let dim = self.down.in_dim;
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        store.set(self.down.weight, eye.clone());
        store.set(self.up.weight, eye);
        let k = store.get(self.conv_w).dim(1);
        store.set(self.conv_w, Tensor::from_fn(&[dim, k], |i| if i % k == k - 1 { 1.0 } else { 0.0 }));
        store.set(self.conv_b, Tensor::zeros(&[dim]));
    }
}

/// Patch-tokenises image-resolution mask logits and self-attends.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub patch: Linear,
    pub norm: LayerNorm,
    pub expand: Linear,
    pub pos: ParamId,
    pub attn: Attention,
    pub patch_size: usize,
    pub in_channels: usize,
    pub grid: usize,
}

impl SpatialBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ExperimentConfig, in_channels: usize) -> Self {
        let c = cfg.embed_dim;
        let p = cfg.patch_size;
        Self {
            patch: Linear::new(store, init, &format!("{name}.patch"), in_channels * p * p, c, true, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c, true),
            expand: Linear::new(store, init, &format!("{name}.expand"), c, c, true, true),
            pos: store.add(format!("{name}.pos"), init.normal(&[cfg.num_tokens(), c], 0.02), true),
            attn: Attention::new(store, init, &format!("{name}.attn"), c, cfg.num_heads, true),
            patch_size: p,
            in_channels,
            grid: cfg.grid_size(),
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, m: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(b, m)?.0)
    }

    /// Also returns the self-attention weights `[B*heads, N, N]`.
    pub fn forward_with_weights<'g>(&self, b: &Binder<'g, '_>, m: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let shape = m.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "mask logits must be [B, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let (hh, ww) = (shape[2], shape[3]);
        let p = self.patch_size;
        if hh % p != 0 || ww % p != 0 {
            return Err(Error::Shape(format!("mask size {hh}x{ww} not divisible by patch size {p}")));
        }
        let (gy, gx) = (hh / p, ww / p);
        if gy != self.grid || gx != self.grid {
            return Err(Error::Shape(format!(
                "mask size {hh}x{ww} gives a {gy}x{gx} grid, expected {0}x{0}",
                self.grid
            )));
        }
        let x = self.patch.forward(b, patchify(m, p));
        let x = self.expand.forward(b, self.norm.forward(b, x).gelu());
        let x = x.add_bcast(b.p(self.pos));
        let (a, w) = self.attn.forward_with_weights(b, x, x, x);
        Ok((x.add(a), w))
    }
}

/// `c = LN(s + CrossAttn(Q = s, K = t + pos, V = t))`
#[derive(Clone, Debug)]
pub struct Fuse {
    pub attn: Attention,
    pub pos: ParamId,
    pub norm: LayerNorm,
}

impl Fuse {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ExperimentConfig) -> Self {
        let c = cfg.embed_dim;
        Self {
            attn: Attention::new(store, init, &format!("{name}.attn"), c, cfg.num_heads, true),
            pos: store.add(format!("{name}.pos"), init.normal(&[cfg.num_tokens(), c], 0.02), true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c, true),
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, s: Var<'g>, t: Var<'g>) -> Var<'g> {
        let k = t.add_bcast(b.p(self.pos));
        let a = self.attn.forward(b, s, k, t);
        self.norm.forward(b, s.add(a))
    }
}

#[derive(Clone, Debug)]
pub struct StpEncoder {
    pub temporal: TemporalBranch,
    pub spatial: SpatialBranch,
    pub fuse: Fuse,
    pub image_size: usize,
}

impl StpEncoder {
    /// Mask-logit channel count consumed by the spatial branch.
    pub const MASK_CHANNELS: usize = 2;

    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ExperimentConfig) -> Self {
        Self {
            temporal: TemporalBranch::new(
                store,
                init,
                "stp.temporal",
                cfg.embed_dim,
                cfg.ssm_state_dim,
                cfg.ssm_conv_kernel,
            ),
            spatial: SpatialBranch::new(store, init, "stp.spatial", cfg, Self::MASK_CHANNELS),
            fuse: Fuse::new(store, init, "stp.fuse", cfg),
            image_size: cfg.image_size,
        }
    }

    /// Upsamples mask logits to image resolution when given at an integer
    /// fraction of it.
    fn to_image_res<'g>(&self, m: Var<'g>) -> Result<Var<'g>> {
        let s = m.shape();
        if s.len() != 4 || s[2] == 0 || s[2] != s[3] || !self.image_size.is_multiple_of(s[2]) {
            return Err(Error::Shape(format!(
                "mask logits {s:?} are not square at a divisor of image size {}",
                self.image_size
            )));
        }
        let f = self.image_size / s[2];
        Ok(if f == 1 { m } else { m.upsample_bilinear(f) })
    }

    /// Runs the temporal branch once on `h` and the spatial branch and fusion
    /// per task. With `enabled == false` both constraints are zero.
    pub fn encode_prompts<'g>(
        &self,
        b: &Binder<'g, '_>,
        h: &ImageEmbedding<'g>,
        m_sem: Var<'g>,
        m_ins: Var<'g>,
        enabled: bool,
    ) -> Result<(PriorConstraint<'g>, PriorConstraint<'g>)> {
        if !enabled {
            let z = b.constant(Tensor::zeros(&h.tokens.shape()));
            return Ok((
                PriorConstraint { c: z, task: Task::Semantic },
                PriorConstraint { c: z, task: Task::Instance },
            ));
        }
        let t = self.temporal.forward(b, h.tokens);
        let mut out = Vec::with_capacity(2);
        for m in [m_sem, m_ins] {
            let s = self.spatial.forward(b, self.to_image_res(m)?)?;
            out.push(self.fuse.forward(b, s, t));
        }
        Ok((
            PriorConstraint { c: out[0], task: Task::Semantic },
            PriorConstraint { c: out[1], task: Task::Instance },
        ))
    }

    /// Constraint from a single mask (used when only one forward runs).
    pub fn encode_single<'g>(&self, b: &Binder<'g, '_>, h: &ImageEmbedding<'g>, m: Var<'g>, task: Task) -> Result<PriorConstraint<'g>> {
        let t = self.temporal.forward(b, h.tokens);
        let s = self.spatial.forward(b, self.to_image_res(m)?)?;
        Ok(PriorConstraint { c: self.fuse.forward(b, s, t), task })
    }
}
