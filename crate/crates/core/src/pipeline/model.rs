use crate::autograd::{softmax_tensor, Graph, Tensor, Var};
use crate::config::ExperimentConfig;
use crate::data::Batch;
use crate::decoder::{DecoderOutputs, Mode, MtcDecoder};
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::losses::{bm_loss, ins_seg_loss, scc_loss, sem_seg_loss, total_loss_var, LossReport};
use crate::nn::{Binder, GradMode, Init, ParamStore};
use crate::postprocess::{instances_from_maps, InstancePrediction, Thresholds};
use crate::stp::StpEncoder;
use crate::types::{ImageEmbedding, PriorConstraint, Task};

/// Shared encoder, prompt encoder and two-head decoder over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub stp: StpEncoder,
    pub decoder: MtcDecoder,
}

/// Everything one co-segmentation pass produces.
pub struct CoSegForward<'g> {
    pub embedding: ImageEmbedding<'g>,
    /// Prompt-free pass; absent when the two-forward loop is off.
    pub first: Option<DecoderOutputs<'g>>,
    pub constraints: (PriorConstraint<'g>, PriorConstraint<'g>),
    pub second: DecoderOutputs<'g>,
}

/// Per-image inference result.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[H, W]`
    pub semantic: Vec<u8>,
    pub instances: InstancePrediction,
    /// `[H, W]` foreground probability.
    pub fg_prob: Vec<f64>,
    /// `[2, H, W]`
    pub hv: Vec<f64>,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let mut encoder = ImageEncoder::new(&mut store, &mut init, cfg);
        let stp = StpEncoder::new(&mut store, &mut init, cfg);
        let decoder = MtcDecoder::new(&mut store, &mut init, cfg);
        if cfg.freeze_backbone {
            encoder.freeze_backbone_enable_adapters(&mut store);
        } else {
            encoder.enable_adapters();
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            stp,
            decoder,
        })
    }

    /// Encode, prompt-free forward, prompt encoding, cross-guided forward.
    pub fn forward<'g>(&self, b: &Binder<'g, '_>, images: &Tensor) -> Result<CoSegForward<'g>> {
        let cfg = &self.cfg;
        let h = self.encoder.encode(b, b.constant(images.clone()))?;
        let (first, constraints) = if cfg.enable_c {
            let out = self.decoder.decoder_forward(b, &h, None, Mode::Forward1, cfg)?;
            let (mut ms, mut mi) = (out.sem.y_bin, out.ins.y_bin);
            if cfg.detach_constraints {
                ms = ms.detach();
                mi = mi.detach();
            }
            let c = self.stp.encode_prompts(b, &h, ms, mi, cfg.enable_p)?;
            (Some(out), c)
        } else {
            (None, self.single_pass_constraints(b, &h)?)
        };
        let second = self
            .decoder
            .decoder_forward(b, &h, Some((&constraints.0, &constraints.1)), Mode::Forward2, cfg)?;
        Ok(CoSegForward {
            embedding: h,
            first,
            constraints,
            second,
        })
    }

    /// Without the two-forward loop there are no task masks: the prompt
    /// encoder sees empty mask logits and both tasks get the same constraint.
    fn single_pass_constraints<'g>(&self, b: &Binder<'g, '_>, h: &ImageEmbedding<'g>) -> Result<(PriorConstraint<'g>, PriorConstraint<'g>)> {
        let bs = h.tokens.shape()[0];
        if !self.cfg.enable_p {
            let z = b.constant(Tensor::zeros(&h.tokens.shape()));
            return Ok((
                PriorConstraint { c: z, task: Task::Semantic },
                PriorConstraint { c: z, task: Task::Instance },
            ));
        }
        let (gy, gx) = h.grid;
        let empty = b.constant(Tensor::zeros(&[bs, StpEncoder::MASK_CHANNELS, 4 * gy, 4 * gx]));
        let c = self.stp.encode_single(b, h, empty, Task::Semantic)?;
        Ok((c, PriorConstraint { c: c.c, task: Task::Instance }))
    }

    /// Weighted co-segmentation objective and its components.
    pub fn loss<'g>(&self, fwd: &CoSegForward<'g>, batch: &Batch) -> Result<(Var<'g>, LossReport)> {
        let cfg = &self.cfg;
        let (scc, bm) = match &fwd.first {
            Some(f1) => {
                let scc = scc_loss(f1.sem.y_prob, f1.ins.y_prob, cfg.symmetric_kl)?;
                let fg = |y: Var<'g>| y.softmax(1).narrow(1, 1, 1);
                let bm = bm_loss(fg(f1.sem.y_bin), fg(f1.ins.y_bin), &batch.coarse_sem, &batch.coarse_ins)?;
                (Some(scc), Some(bm))
            }
            None => (None, None),
        };
        let final_sem = fwd.second.final_sem.ok_or_else(|| Error::Mode("second forward has no semantic logits".into()))?;
        let final_ins = fwd.second.final_ins.ok_or_else(|| Error::Mode("second forward has no instance logits".into()))?;
        let (sem, sem_parts) = sem_seg_loss(final_sem, &batch.targets.semantic)?;
        let (ins, ins_parts) = ins_seg_loss(final_ins.binary, final_ins.hv, final_ins.types, &batch.targets)?;
        let total = total_loss_var(cfg.lambda1, scc, bm, sem, ins);
        let report = LossReport {
            scc: scc.map_or(0.0, |v| v.item()),
            bm: bm.map_or(0.0, |v| v.item()),
            seg_sem: sem.item(),
            seg_ins: ins.item(),
            sem: sem_parts,
            ins: ins_parts,
            total: total.item(),
            lambda1: cfg.lambda1,
        };
        Ok((total, report))
    }

    /// Coarse-mask resolution factor relative to the image.
    pub fn coarse_factor(&self) -> usize {
        self.cfg.image_size / self.cfg.lowres_size()
    }

    /// Full inference with instance post-processing.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>> {
        let graph = Graph::new();
        let b = Binder::new(&graph, &self.store, GradMode::None);
        let fwd = self.forward(&b, images)?;
        let sem = fwd.second.final_sem.expect("second forward").value();
        let ins = fwd.second.final_ins.expect("second forward");
        let bin = softmax_tensor(&ins.binary.value(), 1);
        let types = softmax_tensor(&ins.types.value(), 1);
        let hv = ins.hv.value();
        let (bs, h, w) = (sem.dim(0), sem.dim(2), sem.dim(3));
        let labels = sem.argmax_axis(1);
        let th = Thresholds::from_config(&self.cfg);
        let n = h * w;
        let kt = types.dim(1);
        Ok((0..bs)
            .map(|i| {
                let fg_prob = bin.data()[(2 * i + 1) * n..(2 * i + 2) * n].to_vec();
                let hvi = hv.data()[2 * i * n..(2 * i + 2) * n].to_vec();
                let ty = &types.data()[kt * i * n..kt * (i + 1) * n];
                Prediction {
                    semantic: labels[i * n..(i + 1) * n].iter().map(|&c| c as u8).collect(),
                    instances: instances_from_maps(&fg_prob, &hvi, ty, h, w, &th),
                    fg_prob,
                    hv: hvi,
                }
            })
            .collect())
    }
}
