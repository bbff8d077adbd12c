//! Selective state-space scan and the causal depthwise convolution that
//! precedes it, as differentiable graph ops.

use crate::autograd::{Tensor, Var};

/// Input-dependent linear recurrence, per batch `b`, channel `d`, state `n`:
///
/// ```text
/// s[t] = exp(delta[t,d] * a[d,n]) * s[t-1] + delta[t,d] * bm[t,n] * x[t,d]
/// y[t,d] = sum_n cm[t,n] * s[t][d,n] + dskip[d] * x[t,d]
/// ```
///
/// Shapes: `x, delta: [B,L,D]`, `a: [D,N]`, `bm, cm: [B,L,N]`, `dskip: [D]`.
/// `delta` must be positive and `a` negative for a contracting transition.
pub fn selective_scan<'g>(
    x: Var<'g>,
    delta: Var<'g>,
    a: Var<'g>,
    bm: Var<'g>,
    cm: Var<'g>,
    dskip: Var<'g>,
) -> Var<'g> {
    let (xv, dv, av, bv, cv, skv) = (x.value(), delta.value(), a.value(), bm.value(), cm.value(), dskip.value());
    let (bs, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
    let n = av.dim(1);
    assert_eq!(dv.shape(), xv.shape(), "delta shape");
    assert_eq!(av.shape(), &[d, n], "A shape");
    assert_eq!(bv.shape(), &[bs, l, n], "B shape");
    assert_eq!(cv.shape(), &[bs, l, n], "C shape");
    assert_eq!(skv.shape(), &[d], "D shape");

    // states[b, t, d, n] after step t
    let mut states = vec![0.0; bs * l * d * n];
    let mut y = vec![0.0; bs * l * d];
    let (xd, dd, ad, bd, cd, sd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skv.data());
    for b in 0..bs {
        for t in 0..l {
            let row = (b * l + t) * d;
            let bn = &bd[(b * l + t) * n..(b * l + t + 1) * n];
            let cn = &cd[(b * l + t) * n..(b * l + t + 1) * n];
            for ch in 0..d {
                let dt = dd[row + ch];
                let xt = xd[row + ch];
                let cur = ((b * l + t) * d + ch) * n;
                let mut acc = 0.0;
                for k in 0..n {
                    let prev = if t == 0 { 0.0 } else { states[cur - d * n + k] };
                    let s = (dt * ad[ch * n + k]).exp() * prev + dt * bn[k] * xt;
                    states[cur + k] = s;
                    acc += cn[k] * s;
                }
                y[row + ch] = acc + sd[ch] * xt;
            }
        }
    }
    let out = Tensor::new(vec![bs, l, d], y);
    x.graph()
        .custom(&[x, delta, a, bm, cm, dskip], out, move |g, need| {
            let (xd, dd, ad, bd, cd, sd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), skv.data());
            let gy = g.data();
            let mut gx = vec![0.0; bs * l * d];
            let mut gdelta = vec![0.0; bs * l * d];
            let mut ga = vec![0.0; d * n];
            let mut gb = vec![0.0; bs * l * n];
            let mut gc = vec![0.0; bs * l * n];
            let mut gskip = vec![0.0; d];
            // adjoint of the state, carried backwards in time
            let mut lam = vec![0.0; d * n];
            for b in 0..bs {
                lam.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..l).rev() {
                    let row = (b * l + t) * d;
                    let nrow = (b * l + t) * n;
                    for ch in 0..d {
                        let dt = dd[row + ch];
                        let xt = xd[row + ch];
                        let gyt = gy[row + ch];
                        gskip[ch] += gyt * xt;
                        let mut gxt = gyt * sd[ch];
                        let mut gdt = 0.0;
                        let cur = ((b * l + t) * d + ch) * n;
                        for k in 0..n {
                            let s = states[cur + k];
                            gc[nrow + k] += gyt * s;
                            // lam_t = gy_t * C_t + (carried alpha_{t+1} * lam_{t+1})
                            let lk = lam[ch * n + k] + gyt * cd[nrow + k];
                            let prev = if t == 0 { 0.0 } else { states[cur - d * n + k] };
                            let ak = ad[ch * n + k];
                            let alpha = (dt * ak).exp();
                            gxt += lk * dt * bd[nrow + k];
                            gb[nrow + k] += lk * dt * xt;
                            gdt += lk * (ak * alpha * prev + bd[nrow + k] * xt);
                            ga[ch * n + k] += lk * dt * alpha * prev;
                            lam[ch * n + k] = lk * alpha;
                        }
                        gx[row + ch] = gxt;
                        gdelta[row + ch] = gdt;
                    }
                }
            }
            let bld = vec![bs, l, d];
            let bln = vec![bs, l, n];
            vec![
                need[0].then(|| Tensor::new(bld.clone(), gx)),
                need[1].then(|| Tensor::new(bld.clone(), gdelta)),
                need[2].then(|| Tensor::new(vec![d, n], ga)),
                need[3].then(|| Tensor::new(bln.clone(), gb)),
                need[4].then(|| Tensor::new(bln.clone(), gc)),
                need[5].then(|| Tensor::new(vec![d], gskip)),
            ]
        })
}

/// Causal depthwise 1-D convolution over the sequence axis of `[B,L,D]`:
/// `y[t,d] = bias[d] + sum_j w[d,j] * x[t-(K-1)+j, d]`, zero before `t = 0`.
pub fn causal_depthwise_conv1d<'g>(x: Var<'g>, w: Var<'g>, bias: Var<'g>) -> Var<'g> {
    let (xv, wv, bv) = (x.value(), w.value(), bias.value());
    let (bs, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
    let k = wv.dim(1);
    assert_eq!(wv.shape(), &[d, k]);
    assert_eq!(bv.shape(), &[d]);
    let mut y = vec![0.0; bs * l * d];
    let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
    for b in 0..bs {
        for t in 0..l {
            let row = (b * l + t) * d;
            for ch in 0..d {
                let mut acc = bd[ch];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        acc += wd[ch * k + j] * xd[(b * l + src as usize) * d + ch];
                    }
                }
                y[row + ch] = acc;
            }
        }
    }
    let out = Tensor::new(vec![bs, l, d], y);
    x.graph().custom(&[x, w, bias], out, move |g, need| {
        let (xd, wd) = (xv.data(), wv.data());
        let gd = g.data();
        let mut gx = vec![0.0; bs * l * d];
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; d];
        for b in 0..bs {
            for t in 0..l {
                let row = (b * l + t) * d;
                for ch in 0..d {
                    let gv = gd[row + ch];
                    gb[ch] += gv;
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            let si = (b * l + src as usize) * d + ch;
                            gx[si] += gv * wd[ch * k + j];
                            gw[ch * k + j] += gv * xd[si];
                        }
                    }
                }
            }
        }
        vec![
            need[0].then(|| Tensor::new(vec![bs, l, d], gx)),
            need[1].then(|| Tensor::new(vec![d, k], gw)),
            need[2].then(|| Tensor::new(vec![d], gb)),
        ]
    })
}
