//! Training objectives: the cross-task consistency and binary-mask terms of
//! the first forward, the segmentation terms of the second, and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};

/// Clamp for every log argument.
pub const LOG_EPS: f64 = 1e-8;
/// Smoothing term in soft-Dice denominators.
pub const DICE_SMOOTH: f64 = 1e-6;
pub const FOCAL_GAMMA: f64 = 2.0;

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean per-pixel `KL(p_sem || p_ins)` in bits over `[B, K, h, w]`
/// distributions; with `symmetric`, the sum of both directions.
pub fn scc_loss<'g>(p_sem: Var<'g>, p_ins: Var<'g>, symmetric: bool) -> Result<Var<'g>> {
    let s = p_sem.shape();
    same_shape(&s, &p_ins.shape(), "consistency distributions")?;
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected [B, K, h, w], got {s:?}")));
    }
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let ls = p_sem.clamp_min(LOG_EPS).ln();
    let li = p_ins.clamp_min(LOG_EPS).ln();
    let diff = ls.sub(li);
    let mut kl = p_sem.mul(diff).sum_all();
    if symmetric {
        kl = kl.sub(p_ins.mul(diff).sum_all());
    }
    Ok(kl.scale(1.0 / (pixels * std::f64::consts::LN_2)))
}

/// Binary cross-entropy (natural log) of each head's foreground probability
/// against its own foreground target, summed over the two heads. Inputs are
/// `[B, 1, h, w]`; targets may be fractional.
pub fn bm_loss<'g>(p_sem: Var<'g>, p_ins: Var<'g>, t_sem: &Tensor, t_ins: &Tensor) -> Result<Var<'g>> {
    same_shape(&p_sem.shape(), t_sem.shape(), "semantic binary mask")?;
    same_shape(&p_ins.shape(), t_ins.shape(), "instance binary mask")?;
    let bce = |p: Var<'g>, target: &Tensor| {
        let n = target.numel() as f64;
        let inv = target.map(|t| 1.0 - t);
        let pos = p.clamp_min(LOG_EPS).ln().mul_const(target);
        let neg = p.neg().add_scalar(1.0).clamp_min(LOG_EPS).ln().mul_const(&inv);
        pos.add(neg).sum_all().scale(-1.0 / n)
    };
    Ok(bce(p_sem, t_sem).add(bce(p_ins, t_ins)))
}

/// Pointwise term paired with soft Dice in [`softmax_region_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    CrossEntropy,
    Focal(f64),
}

/// Channel-softmax segmentation loss on logits `[B, K, H, W]` against a
/// label map `[B, H, W]`, as one fused op returning `[pointwise, dice]`:
///
/// - pointwise: mean cross-entropy, or mean focal loss
///   `-(1 - p_y)^gamma ln max(p_y, eps)`;
/// - dice: `1 - mean_k 2 I_k / (S_k + smooth)` over the classes present in
///   the target, with `I_k = sum p_k t_k` and `S_k = sum p_k + sum t_k`
///   aggregated over the whole batch.
pub fn softmax_region_loss<'g>(z: Var<'g>, labels: &[u8], kind: Pointwise) -> Result<Var<'g>> {
    let zs = z.shape();
    if zs.len() != 4 {
        return Err(Error::ShapeMismatch(format!("logits must be [B, K, H, W], got {zs:?}")));
    }
    let (bs, k, hw) = (zs[0], zs[1], zs[2] * zs[3]);
    if labels.len() != bs * hw {
        return Err(Error::ShapeMismatch(format!(
            "labels have {} pixels, logits {}",
            labels.len(),
            bs * hw
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelRange(format!("label {bad} with {k} classes")));
    }
    let zv = z.value();
    let zd = zv.data();
    // softmax over channels
    let mut p = vec![0.0; zd.len()];
    for b in 0..bs {
        for i in 0..hw {
            let idx = |c: usize| (b * k + c) * hw + i;
            let m = (0..k).map(|c| zd[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..k {
                let e = (zd[idx(c)] - m).exp();
                p[idx(c)] = e;
                s += e;
            }
            for c in 0..k {
                p[idx(c)] /= s;
            }
        }
    }
    let npix = (bs * hw) as f64;
    let mut pointwise = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for b in 0..bs {
        for i in 0..hw {
            let y = labels[b * hw + i] as usize;
            let py = p[(b * k + y) * hw + i];
            pointwise += match kind {
                Pointwise::CrossEntropy => {
                    // log-sum-exp form keeps this exact for confident logits
                    let m = (0..k).map(|c| zd[(b * k + c) * hw + i]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..k).map(|c| (zd[(b * k + c) * hw + i] - m).exp()).sum::<f64>().ln();
                    lse - zd[(b * k + y) * hw + i]
                }
                Pointwise::Focal(gamma) => -(1.0 - py).powf(gamma) * py.max(LOG_EPS).ln(),
            };
            inter[y] += py;
            tsum[y] += 1.0;
            for c in 0..k {
                psum[c] += p[(b * k + c) * hw + i];
            }
        }
    }
    pointwise /= npix;
    let present: Vec<usize> = (0..k).filter(|&c| tsum[c] > 0.0).collect();
    let denom: Vec<f64> = (0..k).map(|c| psum[c] + tsum[c] + DICE_SMOOTH).collect();
    let dice_mean = present.iter().map(|&c| 2.0 * inter[c] / denom[c]).sum::<f64>() / present.len().max(1) as f64;
    let out = Tensor::new(vec![2], vec![pointwise, 1.0 - dice_mean]);
    let labels = labels.to_vec();
    Ok(z.graph().custom(&[z], out, move |g, _| {
        let (gp, gd) = (g.data()[0], g.data()[1]);
        let np = present.len().max(1) as f64;
        // dL_dice / dp_c at a pixel = -(1/|P|) (2 t_c / D_c - 2 I_c / D_c^2) for present c
        let coef_t: Vec<f64> = (0..k)
            .map(|c| if tsum[c] > 0.0 { -gd / np * 2.0 / denom[c] } else { 0.0 })
            .collect();
        let coef_p: Vec<f64> = (0..k)
            .map(|c| if tsum[c] > 0.0 { gd / np * 2.0 * inter[c] / (denom[c] * denom[c]) } else { 0.0 })
            .collect();
        let mut gz = vec![0.0; p.len()];
        let mut gpix = vec![0.0; k];
        for b in 0..bs {
            for i in 0..hw {
                let y = labels[b * hw + i] as usize;
                gpix.copy_from_slice(&coef_p);
                gpix[y] += coef_t[y];
                let py = p[(b * k + y) * hw + i];
                match kind {
                    Pointwise::CrossEntropy => {}
                    Pointwise::Focal(gamma) => {
                        let lp = py.max(LOG_EPS).ln();
                        let dlp = if py > LOG_EPS { 1.0 / py } else { 0.0 };
                        let d = gamma * (1.0 - py).powf(gamma - 1.0) * lp - (1.0 - py).powf(gamma) * dlp;
                        gpix[y] += gp * d / npix;
                    }
                }
                let dot: f64 = (0..k).map(|c| p[(b * k + c) * hw + i] * gpix[c]).sum();
                for (c, &gc) in gpix.iter().enumerate() {
                    let o = (b * k + c) * hw + i;
                    gz[o] = p[o] * (gc - dot);
                    if kind == Pointwise::CrossEntropy {
                        gz[o] += gp * (p[o] - if c == y { 1.0 } else { 0.0 }) / npix;
                    }
                }
            }
        }
        vec![Some(Tensor::new(zs.clone(), gz))]
    }))
}

/// HoVer-Net style 5x5 Sobel kernels `(d/dx, d/dy)` for correlation.
pub fn sobel5() -> (Tensor, Tensor) {
    let gx = Tensor::from_fn(&[5, 5], |i| {
        let (y, x) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
        x / (x * x + y * y + 1e-15)
    });
    let gy = Tensor::from_fn(&[5, 5], |i| {
        let (y, x) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
        y / (x * x + y * y + 1e-15)
    });
    (gx, gy)
}

fn fg_mask(fg: &Tensor, channels: usize) -> (Tensor, f64) {
    let s = fg.shape();
    let (bs, hw) = (s[0], s[2] * s[3]);
    let mut m = Vec::with_capacity(bs * channels * hw);
    for b in 0..bs {
        for _ in 0..channels {
            m.extend_from_slice(&fg.data()[b * hw..(b + 1) * hw]);
        }
    }
    let n = fg.sum();
    (Tensor::new(vec![bs, channels, s[2], s[3]], m), n)
}

/// Mean squared error of hv maps `[B, 2, H, W]` over foreground pixels
/// (`fg` is `[B, 1, H, W]` in `{0,1}`); zero when there is no foreground.
pub fn hv_mse<'g>(pred: Var<'g>, target: &Tensor, fg: &Tensor) -> Result<Var<'g>> {
    same_shape(&pred.shape(), target.shape(), "hv maps")?;
    let (mask, n) = fg_mask(fg, 2);
    let d = pred.add_const(&target.map(|v| -v));
    Ok(d.square().mul_const(&mask).sum_all().scale(1.0 / (2.0 * n).max(1.0)))
}

/// Mean squared error between Sobel gradients of predicted and target hv
/// maps (horizontal map along x, vertical map along y) over foreground.
pub fn hv_msge<'g>(pred: Var<'g>, target: &Tensor, fg: &Tensor) -> Result<Var<'g>> {
    same_shape(&pred.shape(), target.shape(), "hv maps")?;
    let (gx, gy) = sobel5();
    let (mask, n) = fg_mask(fg, 1);
    let d = pred.add_const(&target.map(|v| -v));
    let dh = d.narrow(1, 0, 1).conv2d_fixed(&gx);
    let dv = d.narrow(1, 1, 1).conv2d_fixed(&gy);
    let se = dh.square().add(dv.square()).mul_const(&mask).sum_all();
    Ok(se.scale(1.0 / (2.0 * n).max(1.0)))
}

/// Semantic segmentation loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemParts {
    pub ce: f64,
    pub dice: f64,
}

/// Instance segmentation loss components; `dice` and `focal` sum the
/// binary and type channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InsParts {
    pub dice: f64,
    pub focal: f64,
    pub mse: f64,
    pub msge: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub scc: f64,
    pub bm: f64,
    pub seg_sem: f64,
    pub seg_ins: f64,
    pub sem: SemParts,
    pub ins: InsParts,
    pub total: f64,
    pub lambda1: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.scc,
            self.bm,
            self.seg_sem,
            self.seg_ins,
            self.sem.ce,
            self.sem.dice,
            self.ins.dice,
            self.ins.focal,
            self.ins.mse,
            self.ins.msge,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `lambda1 * (scc + bm) + seg_sem + seg_ins`
pub fn total_loss(lambda1: f64, scc: f64, bm: f64, seg_sem: f64, seg_ins: f64) -> f64 {
    lambda1 * (scc + bm) + seg_sem + seg_ins
}

/// Graph form of [`total_loss`]; missing first-forward terms count as zero.
pub fn total_loss_var<'g>(lambda1: f64, scc: Option<Var<'g>>, bm: Option<Var<'g>>, seg_sem: Var<'g>, seg_ins: Var<'g>) -> Var<'g> {
    let mut t = seg_sem.add(seg_ins);
    for v in [scc, bm].into_iter().flatten() {
        t = t.add(v.scale(lambda1));
    }
    t
}

/// Full-resolution targets for one batch.
#[derive(Clone, Debug)]
pub struct SegTargets {
    /// `[B, H, W]` semantic labels.
    pub semantic: Vec<u8>,
    /// `[B, H, W]` instance type labels (0 = background).
    pub types: Vec<u8>,
    /// `[B, H, W]` binary foreground labels.
    pub binary: Vec<u8>,
    /// `[B, 1, H, W]` foreground indicator.
    pub fg: Tensor,
    /// `[B, 2, H, W]`
    pub hv: Tensor,
}

/// Semantic loss: cross-entropy plus soft Dice.
pub fn sem_seg_loss<'g>(logits: Var<'g>, labels: &[u8]) -> Result<(Var<'g>, SemParts)> {
    let v = softmax_region_loss(logits, labels, Pointwise::CrossEntropy)?;
    let t = v.value();
    Ok((v.sum_all(), SemParts { ce: t.data()[0], dice: t.data()[1] }))
}

/// Instance loss: Dice + Focal on binary and type logits, MSE and MSGE on hv.
pub fn ins_seg_loss<'g>(binary: Var<'g>, hv: Var<'g>, types: Var<'g>, tgt: &SegTargets) -> Result<(Var<'g>, InsParts)> {
    let b = softmax_region_loss(binary, &tgt.binary, Pointwise::Focal(FOCAL_GAMMA))?;
    let t = softmax_region_loss(types, &tgt.types, Pointwise::Focal(FOCAL_GAMMA))?;
    let mse = hv_mse(hv, &tgt.hv, &tgt.fg)?;
    let msge = hv_msge(hv, &tgt.hv, &tgt.fg)?;
    let (bv, tv) = (b.value(), t.value());
    let parts = InsParts {
        dice: bv.data()[1] + tv.data()[1],
        focal: bv.data()[0] + tv.data()[0],
        mse: mse.item(),
        msge: msge.item(),
    };
    Ok((b.sum_all().add(t.sum_all()).add(mse).add(msge), parts))
}
