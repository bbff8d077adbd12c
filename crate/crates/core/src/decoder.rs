//! Cross-guided dual-head mask decoder.
//!
//! Each head owns a set of learned queries. Queries self-attend, read the
//! shared embedding enriched by the other task's constraint, are refined by
//! an MLP, and the embedding then attends back to the queries to give a
//! task-specific embedding `g`. A small pixel decoder upsamples `g` and every
//! query slot produces one mask channel by a dot product.

use std::cell::{Cell, RefCell};

use crate::autograd::{Tensor, Var};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Binder, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::types::{ImageEmbedding, PriorConstraint, Task};

/// What a query slot's mask channel means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotRole {
    /// Semantic class logit (0 = background).
    SemClass(usize),
    /// Instance binary logit: 0 = background, 1 = nucleus.
    Binary(usize),
    /// Horizontal (0) or vertical (1) distance map.
    Hv(usize),
    /// Instance type logit (0 = background).
    Type(usize),
}

pub fn slot_roles(task: Task, cfg: &ExperimentConfig) -> Vec<SlotRole> {
    match task {
        Task::Semantic => (0..cfg.num_semantic_classes).map(SlotRole::SemClass).collect(),
        Task::Instance => [SlotRole::Binary(0), SlotRole::Binary(1), SlotRole::Hv(0), SlotRole::Hv(1)]
            .into_iter()
            .chain((0..=cfg.num_instance_classes).map(SlotRole::Type))
            .collect(),
    }
}

/// Checks `roles` against the layout [`slot_roles`] prescribes.
pub fn validate_roles(task: Task, roles: &[SlotRole], cfg: &ExperimentConfig) -> Result<()> {
    let want = slot_roles(task, cfg);
    if roles != want.as_slice() {
        return Err(Error::RoleMismatch(format!(
            "{} head has {} slots {:?}, expected {} slots {:?}",
            task.as_str(),
            roles.len(),
            roles,
            want.len(),
            want
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct QuerySet<'g> {
    /// `[B, N_q, C]`
    pub q: Var<'g>,
    pub task: Task,
    pub roles: Vec<SlotRole>,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskEmbedding<'g> {
    /// `[B, N, C]`
    pub g: Var<'g>,
    pub task: Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Unprompted pass producing low-res binary masks and aligned distributions.
    Forward1,
    /// Constraint-guided pass producing the final masks.
    Forward2,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub reverse: Attention,
    pub norm4: LayerNorm,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ExperimentConfig) -> Self {
        let c = cfg.embed_dim;
        let h = cfg.num_heads;
        Self {
            self_attn: Attention::new(store, init, &format!("{name}.self_attn"), c, h, true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, true),
            cross: Attention::new(store, init, &format!("{name}.cross"), c, h, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, true),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), c, c * cfg.mlp_ratio, true),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c, true),
            reverse: Attention::new(store, init, &format!("{name}.reverse"), c, h, true),
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), c, true),
        }
    }

    /// Returns refined queries and the updated embedding.
    fn forward<'g>(&self, b: &Binder<'g, '_>, q: Var<'g>, kv: Var<'g>, pe: Var<'g>) -> (Var<'g>, Var<'g>) {
        let q = self.norm1.forward(b, q.add(self.self_attn.forward(b, q, q, q)));
        let kp = kv.add_bcast(pe);
        let q = self.norm2.forward(b, q.add(self.cross.forward(b, q, kp, kv)));
        let q = self.norm3.forward(b, q.add(self.mlp.forward(b, q)));
        let g = self.norm4.forward(b, kv.add(self.reverse.forward(b, kp, q, q)));
        (q, g)
    }
}

/// Two 2x2 stride-2 transposed convolutions (as per-token linear maps),
/// taking the token grid to 4x resolution and width `C/8`.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub up1: Linear,
    pub skip: Linear,
    pub norm: LayerNorm,
    pub up2: Linear,
    pub mid: usize,
    pub out: usize,
}

/// Rearranges `[B, gy*gx, 4*C]` (each token holding its 2x2 children) into
/// `[B, 2gy*2gx, C]` in raster order.
fn unshuffle2<'g>(x: Var<'g>, gy: usize, gx: usize, c: usize) -> Var<'g> {
    let bs = x.shape()[0];
    x.reshape(&[bs, gy, gx, 2, 2, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[bs, 4 * gy * gx, c])
}

impl PixelDecoder {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ExperimentConfig) -> Self {
        let c = cfg.embed_dim;
        let (mid, out) = (c / 4, c / 8);
        Self {
            up1: Linear::new(store, init, &format!("{name}.up1"), c, 4 * mid, true, true),
            skip: Linear::new(store, init, &format!("{name}.skip"), c / 2, mid, true, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), mid, true),
            up2: Linear::new(store, init, &format!("{name}.up2"), mid, 4 * out, true, true),
            mid,
            out,
        }
    }

    /// Features `[B, (4gy)*(4gx), C']`, channel-last, raster order.
    pub fn forward<'g>(&self, b: &Binder<'g, '_>, g: Var<'g>, grid: (usize, usize), high_res: Option<Var<'g>>) -> Var<'g> {
        let (gy, gx) = grid;
        let mut x = unshuffle2(self.up1.forward(b, g), gy, gx, self.mid);
        if let Some(hr) = high_res {
            x = x.add(self.skip.forward(b, hr));
        }
        let x = self.norm.forward(b, x).gelu();
        unshuffle2(self.up2.forward(b, x), 2 * gy, 2 * gx, self.out).gelu()
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: Task,
    pub queries: ParamId,
    pub pe: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub prob: Linear,
    pub pixel: PixelDecoder,
    /// Per-slot hypernetwork `[N_q, C, C']` and bias `[N_q, C']`.
    pub hyper_w: ParamId,
    pub hyper_b: ParamId,
    pub roles: Vec<SlotRole>,
}

impl TaskHead {
    fn new(store: &mut ParamStore, init: &mut Init, task: Task, cfg: &ExperimentConfig) -> Self {
        let name = format!("decoder.{}", task.as_str());
        let c = cfg.embed_dim;
        let roles = slot_roles(task, cfg);
        let nq = roles.len();
        let cp = cfg.pixel_dim();
        let bound = 1.0 / (c as f64).sqrt();
        Self {
            task,
            queries: store.add(format!("{name}.queries"), init.normal(&[nq, c], 1.0), true),
            pe: store.add(format!("{name}.pe"), init.normal(&[cfg.num_tokens(), c], 0.02), true),
            blocks: (0..cfg.decoder_depth)
                .map(|i| DecoderBlock::new(store, init, &format!("{name}.block{i}"), cfg))
                .collect(),
            prob: Linear::new(store, init, &format!("{name}.prob"), c, cfg.align_classes, true, true),
            pixel: PixelDecoder::new(store, init, &format!("{name}.pixel"), cfg),
            hyper_w: store.add(format!("{name}.hyper.weight"), init.uniform(&[nq, c, cp], bound), true),
            hyper_b: store.add(format!("{name}.hyper.bias"), init.uniform(&[nq, cp], bound), true),
            roles,
        }
    }

    /// Initial query set, broadcast over the batch.
    pub fn query_set<'g>(&self, b: &Binder<'g, '_>, batch: usize) -> QuerySet<'g> {
        let q = b.p(self.queries);
        let s = q.shape();
        let ones = b.constant(Tensor::full(&[batch, s[0], s[1]], 1.0));
        QuerySet {
            q: ones.mul_bcast(q),
            task: self.task,
            roles: self.roles.clone(),
        }
    }

    /// Per-slot linear map of refined queries into pixel-feature space.
    fn hyper<'g>(&self, b: &Binder<'g, '_>, q: Var<'g>) -> Var<'g> {
        let s = q.shape();
        let (bs, nq, c) = (s[0], s[1], s[2]);
        let w = b.p(self.hyper_w);
        let cp = w.shape()[2];
        q.permute(&[1, 0, 2])
            .reshape(&[nq, bs, c])
            .bmm(w, false)
            .permute(&[1, 0, 2])
            .add_bcast(b.p(self.hyper_b))
            .reshape(&[bs, nq, cp])
    }
}

/// Per-head products of one decoder pass.
#[derive(Clone, Debug)]
pub struct HeadOutputs<'g> {
    pub queries: QuerySet<'g>,
    pub embedding: TaskEmbedding<'g>,
    /// Every slot's logits at pixel-decoder resolution `[B, N_q, 4gy, 4gx]`.
    pub masks: Var<'g>,
    /// Binary foreground logits `[B, 2, 4gy, 4gx]`.
    pub y_bin: Var<'g>,
    /// Aligned distribution `[B, K_align, gy, gx]`.
    pub y_prob: Var<'g>,
}

/// Full-resolution instance logits.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLogits<'g> {
    pub binary: Var<'g>,
    pub hv: Var<'g>,
    pub types: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs<'g> {
    pub mode: Mode,
    pub sem: HeadOutputs<'g>,
    pub ins: HeadOutputs<'g>,
    /// `[B, K_sem, H, W]`, forward 2 only.
    pub final_sem: Option<Var<'g>>,
    pub final_ins: Option<InstanceLogits<'g>>,
}

#[derive(Debug)]
pub struct MtcDecoder {
    pub sem: TaskHead,
    pub ins: TaskHead,
    pub enable_d: bool,
    /// Factor from pixel-decoder resolution to image resolution.
    pub upscale: usize,
    calls: Cell<usize>,
    /// Graph leaf ids of every decoder parameter, one entry per call.
    param_trace: RefCell<Vec<Vec<usize>>>,
    /// Mode and largest constraint magnitude of every call.
    prompt_trace: RefCell<Vec<(Mode, f64)>>,
}

impl Clone for MtcDecoder {
    fn clone(&self) -> Self {
        Self {
            sem: self.sem.clone(),
            ins: self.ins.clone(),
            enable_d: self.enable_d,
            upscale: self.upscale,
            calls: Cell::new(0),
            param_trace: RefCell::new(Vec::new()),
            prompt_trace: RefCell::new(Vec::new()),
        }
    }
}

impl MtcDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ExperimentConfig) -> Self {
        Self {
            sem: TaskHead::new(store, init, Task::Semantic, cfg),
            ins: TaskHead::new(store, init, Task::Instance, cfg),
            enable_d: cfg.enable_d,
            upscale: cfg.patch_size / 4,
            calls: Cell::new(0),
            param_trace: RefCell::new(Vec::new()),
            prompt_trace: RefCell::new(Vec::new()),
        }
    }

    pub fn head(&self, task: Task) -> &TaskHead {
        match task {
            Task::Semantic => &self.sem,
            Task::Instance => &self.ins,
        }
    }

    /// Number of [`MtcDecoder::decoder_forward`] calls so far.
    pub fn invocations(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_instrumentation(&self) {
        self.calls.set(0);
        self.param_trace.borrow_mut().clear();
        self.prompt_trace.borrow_mut().clear();
    }

    pub fn param_trace(&self) -> Vec<Vec<usize>> {
        self.param_trace.borrow().clone()
    }

    pub fn prompt_trace(&self) -> Vec<(Mode, f64)> {
        self.prompt_trace.borrow().clone()
    }

    /// One head's block stack. `c_other = None` reads `h` alone.
    pub fn decode_task<'g>(
        &self,
        b: &Binder<'g, '_>,
        head: &TaskHead,
        q: QuerySet<'g>,
        h: &ImageEmbedding<'g>,
        c_other: Option<&PriorConstraint<'g>>,
    ) -> Result<(QuerySet<'g>, TaskEmbedding<'g>)> {
        let mut kv = h.tokens;
        if let Some(c) = c_other {
            if c.c.shape() != h.tokens.shape() {
                return Err(Error::Shape(format!(
                    "constraint {:?} does not match embedding {:?}",
                    c.c.shape(),
                    h.tokens.shape()
                )));
            }
            kv = kv.add(c.c);
        }
        let pe = b.p(head.pe);
        let mut qv = q.q;
        for blk in &head.blocks {
            let (nq, nkv) = blk.forward(b, qv, kv, pe);
            qv = nq;
            kv = nkv;
        }
        Ok((
            QuerySet { q: qv, ..q },
            TaskEmbedding { g: kv, task: head.task },
        ))
    }

    /// 1x1 projection and channel softmax on the token grid.
    pub fn to_probability<'g>(&self, b: &Binder<'g, '_>, head: &TaskHead, g: &TaskEmbedding<'g>, grid: (usize, usize)) -> Var<'g> {
        let bs = g.g.shape()[0];
        let k = head.prob.out_dim;
        head.prob
            .forward(b, g.g)
            .softmax(2)
            .permute(&[0, 2, 1])
            .reshape(&[bs, k, grid.0, grid.1])
    }

    /// Pixel features `[B, C', 4gy, 4gx]`.
    pub fn pixel_decode<'g>(&self, b: &Binder<'g, '_>, head: &TaskHead, g: &TaskEmbedding<'g>, h: &ImageEmbedding<'g>) -> Var<'g> {
        let f = head.pixel.forward(b, g.g, h.grid, h.high_res);
        let bs = f.shape()[0];
        f.permute(&[0, 2, 1]).reshape(&[bs, head.pixel.out, 4 * h.grid.0, 4 * h.grid.1])
    }

    /// `logits[b,k,y,x] = <slot_k(q'), features[b,:,y,x]>`.
    pub fn predict_masks<'g>(
        &self,
        b: &Binder<'g, '_>,
        head: &TaskHead,
        features: Var<'g>,
        q: &QuerySet<'g>,
        cfg: &ExperimentConfig,
    ) -> Result<Var<'g>> {
        validate_roles(q.task, &q.roles, cfg)?;
        let qs = q.q.shape();
        if qs[1] != q.roles.len() {
            return Err(Error::RoleMismatch(format!("{} queries for {} roles", qs[1], q.roles.len())));
        }
        let fs = features.shape();
        let (bs, cp, hh, ww) = (fs[0], fs[1], fs[2], fs[3]);
        let hyper = head.hyper(b, q.q);
        Ok(hyper
            .bmm(features.reshape(&[bs, cp, hh * ww]), false)
            .reshape(&[bs, qs[1], hh, ww]))
    }

    fn binary_logits<'g>(task: Task, masks: Var<'g>) -> Var<'g> {
        match task {
            Task::Semantic => {
                let k = masks.shape()[1];
                let bg = masks.narrow(1, 0, 1);
                let fg = masks.narrow(1, 1, k - 1).logsumexp(1);
                let s = fg.shape();
                Var::concat(&[bg, fg.reshape(&[s[0], 1, s[1], s[2]])], 1)
            }
            Task::Instance => masks.narrow(1, 0, 2),
        }
    }

    fn run_head<'g>(
        &self,
        b: &Binder<'g, '_>,
        head: &TaskHead,
        h: &ImageEmbedding<'g>,
        c_other: Option<&PriorConstraint<'g>>,
        cfg: &ExperimentConfig,
    ) -> Result<HeadOutputs<'g>> {
        let q0 = head.query_set(b, h.tokens.shape()[0]);
        let (q, g) = self.decode_task(b, head, q0, h, c_other)?;
        let y_prob = self.to_probability(b, head, &g, h.grid);
        let feats = self.pixel_decode(b, head, &g, h);
        let masks = self.predict_masks(b, head, feats, &q, cfg)?;
        Ok(HeadOutputs {
            y_bin: Self::binary_logits(head.task, masks),
            queries: q,
            embedding: g,
            masks,
            y_prob,
        })
    }

    /// Runs both heads with the same parameters in either mode. In forward 2
    /// the semantic head reads `c_ins` and the instance head reads `c_sem`.
    pub fn decoder_forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        h: &ImageEmbedding<'g>,
        constraints: Option<(&PriorConstraint<'g>, &PriorConstraint<'g>)>,
        mode: Mode,
        cfg: &ExperimentConfig,
    ) -> Result<DecoderOutputs<'g>> {
        if let Some((cs, ci)) = constraints {
            if cs.task != Task::Semantic || ci.task != Task::Instance {
                return Err(Error::Mode("constraints must be passed as (semantic, instance)".into()));
            }
            if mode == Mode::Forward1 && (cs.c.value().max_abs() != 0.0 || ci.c.value().max_abs() != 0.0) {
                return Err(Error::Mode("forward 1 runs without prompts but got nonzero constraints".into()));
            }
        } else if mode == Mode::Forward2 {
            return Err(Error::Mode("forward 2 requires constraints".into()));
        }
        self.calls.set(self.calls.get() + 1);
        let magnitude = constraints.map_or(0.0, |(cs, ci)| cs.c.value().max_abs().max(ci.c.value().max_abs()));
        self.prompt_trace.borrow_mut().push((mode, magnitude));
        let route = |c: &'_ PriorConstraint<'g>| (self.enable_d && mode == Mode::Forward2).then_some(*c);
        let (for_sem, for_ins) = match constraints {
            Some((cs, ci)) => (route(ci), route(cs)),
            None => (None, None),
        };
        let sem = self.run_head(b, &self.sem, h, for_sem.as_ref(), cfg)?;
        let ins = self.run_head(b, &self.ins, h, for_ins.as_ref(), cfg)?;
        self.param_trace.borrow_mut().push(self.param_ids().iter().map(|&id| b.p(id).id()).collect());
        let (final_sem, final_ins) = if mode == Mode::Forward2 {
            let up = |v: Var<'g>| if self.upscale == 1 { v } else { v.upsample_bilinear(self.upscale) };
            let k = cfg.num_instance_classes + 1;
            let full_ins = up(ins.masks);
            (
                Some(up(sem.masks)),
                Some(InstanceLogits {
                    binary: full_ins.narrow(1, 0, 2),
                    hv: full_ins.narrow(1, 2, 2),
                    types: full_ins.narrow(1, 4, k),
                }),
            )
        } else {
            (None, None)
        };
        Ok(DecoderOutputs {
            mode,
            sem,
            ins,
            final_sem,
            final_ins,
        })
    }

    /// Every parameter either head reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for head in [&self.sem, &self.ins] {
            ids.extend([head.queries, head.pe, head.hyper_w, head.hyper_b]);
            let lin = |l: &Linear, ids: &mut Vec<ParamId>| {
                ids.push(l.weight);
                ids.extend(l.bias);
            };
            let ln = |n: &LayerNorm, ids: &mut Vec<ParamId>| ids.extend([n.weight, n.bias]);
            let attn = |a: &Attention, ids: &mut Vec<ParamId>| {
                for l in [&a.q, &a.k, &a.v, &a.out] {
                    lin(l, ids);
                }
            };
            for blk in &head.blocks {
                attn(&blk.self_attn, &mut ids);
                attn(&blk.cross, &mut ids);
                attn(&blk.reverse, &mut ids);
                lin(&blk.mlp.fc1, &mut ids);
                lin(&blk.mlp.fc2, &mut ids);
                for n in [&blk.norm1, &blk.norm2, &blk.norm3, &blk.norm4] {
                    ln(n, &mut ids);
                }
            }
            lin(&head.prob, &mut ids);
            lin(&head.pixel.up1, &mut ids);
            lin(&head.pixel.skip, &mut ids);
            lin(&head.pixel.up2, &mut ids);
            ln(&head.pixel.norm, &mut ids);
        }
        ids
    }
}
