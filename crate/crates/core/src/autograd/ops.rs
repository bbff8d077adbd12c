//! Differentiable primitives on [`Var`].

use std::rc::Rc;

use super::graph::Var;
use super::tensor::{numel, split_axis, Tensor};

/// `C = A·B` on raw row/column strides (`C` overwritten when `accumulate` is false).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe sub-slices of `a`, `b`, `c`, which
    // the callers size as (m,k), (k,n) and (m,n) views respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sum_leading(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner = numel(suffix);
    let mut out = vec![0.0; inner];
    for chunk in g.data().chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(suffix.to_vec(), out)
}

fn check_suffix(a: &[usize], b: &[usize]) {
    assert!(
        b.len() <= a.len() && a[a.len() - b.len()..] == *b,
        "shape {b:?} is not a suffix of {a:?}"
    );
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    fn unary(self, value: Tensor, bw: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph().custom(&[self], value, move |g, _| vec![Some(bw(g))])
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph()
            .custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph()
            .custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().custom(&[self, other], out, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y)),
                need[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.zip_map(&b, |x, y| x / y);
        self.graph().custom(&[self, other], out, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g / y)),
                need[1].then(|| {
                    let t = g.zip_map(&a, |g, x| g * x);
                    t.zip_map(&b, |t, y| -t / (y * y))
                }),
            ]
        })
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s.
    pub fn add_bcast(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        check_suffix(a.shape(), b.shape());
        let inner = b.numel();
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let bshape = b.shape().to_vec();
        self.graph().custom(&[self, other], out, move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| sum_leading(g, &bshape)),
            ]
        })
    }

    /// `self * other` where `other`'s shape is a suffix of `self`'s.
    pub fn mul_bcast(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        check_suffix(a.shape(), b.shape());
        let inner = b.numel();
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(b.data()) {
                *o *= v;
            }
        }
        self.graph().custom(&[self, other], out, move |g, need| {
            let ga = need[0].then(|| {
                let mut t = g.clone();
                for chunk in t.data_mut().chunks_exact_mut(inner) {
                    for (o, v) in chunk.iter_mut().zip(b.data()) {
                        *o *= v;
                    }
                }
                t
            });
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; inner];
                for (gc, ac) in g.data().chunks_exact(inner).zip(a.data().chunks_exact(inner)) {
                    for ((o, gv), av) in acc.iter_mut().zip(gc).zip(ac) {
                        *o += gv * av;
                    }
                }
                Tensor::new(b.shape().to_vec(), acc)
            });
            vec![ga, gb]
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.unary(out, move |g| g.map(|v| v * s))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.unary(out, |g| g.clone())
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Var<'g> {
        let c = Rc::new(c.clone());
        let out = self.value().zip_map(&c, |x, y| x * y);
        self.unary(out, move |g| g.zip_map(&c, |g, y| g * y))
    }

    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let out = self.value().zip_map(c, |x, y| x + y);
        self.unary(out, |g| g.clone())
    }

    pub fn exp(self) -> Var<'g> {
        let out = self.value().map(f64::exp);
        let y = out.clone();
        self.unary(out, move |g| g.zip_map(&y, |g, y| g * y))
    }

    pub fn ln(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.unary(out, move |g| g.zip_map(&x, |g, x| g / x))
    }

    /// `max(x, lo)`; the gradient is cut where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.max(lo));
        self.unary(out, move |g| g.zip_map(&x, |g, x| if x >= lo { g } else { 0.0 }))
    }

    pub fn square(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |g, x| 2.0 * g * x))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = self.value().map(f64::sqrt);
        let y = out.clone();
        self.unary(out, move |g| g.zip_map(&y, |g, y| 0.5 * g / y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.value();
        let out = x.map(|v| 0.5 * v * (1.0 + (K * (v + A * v * v * v)).tanh()));
        self.unary(out, move |g| {
            g.zip_map(&x, |g, v| {
                let t = (K * (v + A * v * v * v)).tanh();
                let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * K * (1.0 + 3.0 * A * v * v);
                g * d
            })
        })
    }

    pub fn softplus(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(softplus);
        self.unary(out, move |g| g.zip_map(&x, |g, v| g * sigmoid(v)))
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        self.unary(Tensor::new(shape, out), move |g| {
            let mut r = vec![0.0; outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                for k in 0..n {
                    r[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            Tensor::new(in_shape.clone(), r)
        })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.value().dim(axis) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape);
        self.unary(out, move |g| g.clone().reshaped(&old))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let out = self.value().permute(perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.unary(out, move |g| g.permute(&inv))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let out = x.narrow(axis, start, len);
        let in_shape = x.shape().to_vec();
        self.unary(out, move |g| {
            let (outer, n, inner) = split_axis(&in_shape, axis);
            let mut r = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                r[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::new(in_shape.clone(), r)
        })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        parts[0].graph().custom(parts, out, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &nd)| {
                    let r = nd.then(|| g.narrow(axis, start, len));
                    start += len;
                    r
                })
                .collect()
        })
    }

    /// `x · w (+ b)` over the last axis of `x`; `w` is `[K, N]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let xs = x.shape().to_vec();
        let k = *xs.last().expect("linear on scalar");
        assert_eq!(wv.rank(), 2);
        assert_eq!(wv.dim(0), k, "linear: input width {k} vs weight {:?}", wv.shape());
        let n = wv.dim(1);
        let m = x.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), k, 1, wv.data(), n, 1, &mut out, false);
        if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape(), &[n]);
            for row in out.chunks_exact_mut(n) {
                for (o, v) in row.iter_mut().zip(bv.data()) {
                    *o += v;
                }
            }
        }
        let mut os = xs.clone();
        *os.last_mut().unwrap() = n;
        let out = Tensor::new(os, out);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.graph().custom(&parents, out, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut r = vec![0.0; m * k];
                // g [m,n] · wᵀ [n,k]
                gemm(m, n, k, gd, n, 1, wv.data(), 1, n, &mut r, false);
                Tensor::new(xs.clone(), r)
            });
            let gw = need[1].then(|| {
                let mut r = vec![0.0; k * n];
                // xᵀ [k,m] · g [m,n]
                gemm(k, m, n, x.data(), 1, k, gd, n, 1, &mut r, false);
                Tensor::new(vec![k, n], r)
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| sum_leading(g, &[n])));
            }
            res
        })
    }

    /// Batched matmul `[B,M,K]·[B,K,N]`, or `[B,M,K]·[B,N,K]ᵀ` when `transpose_rhs`.
    pub fn bmm(self, other: Var<'g>, transpose_rhs: bool) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.rank(), 3);
        assert_eq!(b.rank(), 3);
        let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        assert_eq!(b.dim(0), bs, "bmm batch mismatch");
        let n = if transpose_rhs { b.dim(1) } else { b.dim(2) };
        let kb = if transpose_rhs { b.dim(2) } else { b.dim(1) };
        assert_eq!(k, kb, "bmm inner dim mismatch {:?} {:?}", a.shape(), b.shape());
        // strides of the logical [K,N] rhs
        let (rsb, csb) = if transpose_rhs { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                k,
                1,
                &b.data()[i * k * n..],
                rsb,
                csb,
                &mut out[i * m * n..],
                false,
            );
        }
        let out = Tensor::new(vec![bs, m, n], out);
        let bshape = b.shape().to_vec();
        self.graph().custom(&[self, other], out, move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut r = vec![0.0; bs * m * k];
                for i in 0..bs {
                    // g [m,n] · rhsᵀ [n,k]
                    gemm(m, n, k, &gd[i * m * n..], n, 1, &b.data()[i * k * n..], csb, rsb, &mut r[i * m * k..], false);
                }
                Tensor::new(vec![bs, m, k], r)
            });
            let gb = need[1].then(|| {
                let mut r = vec![0.0; bs * k * n];
                for i in 0..bs {
                    if transpose_rhs {
                        // d(rhs stored [n,k]) = gᵀ [n,m] · a [m,k]
                        gemm(n, m, k, &gd[i * m * n..], 1, n, &a.data()[i * m * k..], k, 1, &mut r[i * k * n..], false);
                    } else {
                        // aᵀ [k,m] · g [m,n]
                        gemm(k, m, n, &a.data()[i * m * k..], 1, k, &gd[i * m * n..], n, 1, &mut r[i * k * n..], false);
                    }
                }
                Tensor::new(bshape.clone(), r)
            });
            vec![ga, gb]
        })
    }

    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let out = softmax_tensor(&x, axis);
        let y = out.clone();
        self.unary(out, move |g| {
            let (outer, n, inner) = split_axis(y.shape(), axis);
            let mut r = vec![0.0; y.numel()];
            let (yd, gd) = (y.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                    for k in 0..n {
                        r[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            Tensor::new(y.shape().to_vec(), r)
        })
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let p = softmax_tensor(&x, axis);
        let out = log_softmax_tensor(&x, axis);
        self.unary(out, move |g| {
            let (outer, n, inner) = split_axis(p.shape(), axis);
            let mut r = vec![0.0; p.numel()];
            let (pd, gd) = (p.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let gs: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                    for k in 0..n {
                        r[idx(k)] = gd[idx(k)] - pd[idx(k)] * gs;
                    }
                }
            }
            Tensor::new(p.shape().to_vec(), r)
        })
    }

    /// `log Σ exp` over `axis`, removing it.
    pub fn logsumexp(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let p = softmax_tensor(&x, axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let m = (0..n).map(|k| d[(o * n + k) * inner + i]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|k| (d[(o * n + k) * inner + i] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.unary(Tensor::new(shape, out), move |g| {
            let mut r = p.clone();
            let gd = g.data();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        r.data_mut()[(o * n + k) * inner + i] *= gd[o * inner + i];
                    }
                }
            }
            r
        })
    }

    /// LayerNorm over the last axis with affine `weight`/`bias` of that width.
    pub fn layer_norm(self, weight: Var<'g>, bias: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let c = *x.shape().last().unwrap();
        assert_eq!(wv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in x.data().chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * wv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.graph().custom(
            &[self, weight, bias],
            Tensor::new(shape.clone(), out),
            move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut r = vec![0.0; rows * c];
                    for row in 0..rows {
                        let gh: Vec<f64> = (0..c).map(|j| gd[row * c + j] * wv.data()[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghx = (0..c).map(|j| gh[j] * xhat[row * c + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            r[row * c + j] = rstd[row] * (gh[j] - mean_gh - xhat[row * c + j] * mean_ghx);
                        }
                    }
                    Tensor::new(shape.clone(), r)
                });
                let gw = need[1].then(|| {
                    let mut r = vec![0.0; c];
                    for row in 0..rows {
                        for j in 0..c {
                            r[j] += gd[row * c + j] * xhat[row * c + j];
                        }
                    }
                    Tensor::new(vec![c], r)
                });
                let gb = need[2].then(|| sum_leading(g, &[c]));
                vec![gx, gw, gb]
            },
        )
    }

    /// Bilinear upsampling of `[B,C,H,W]` by an integer factor (half-pixel centres).
    pub fn upsample_bilinear(self, factor: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 4, "upsample expects NCHW");
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = (h * factor, w * factor);
        let ty = interp_taps(h, oh);
        let tx = interp_taps(w, ow);
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        let xd = x.data();
        let mut rows = vec![0.0; oh * w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for ix in 0..w {
                    rows[oy * w + ix] = src[y0 * w + ix] * (1.0 - ly) + src[y1 * w + ix] * ly;
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = rows[oy * w + x0] * (1.0 - lx) + rows[oy * w + x1] * lx;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.unary(Tensor::new(vec![b, c, oh, ow], out), move |g| {
            let gd = g.data();
            let mut r = vec![0.0; planes * h * w];
            let mut rows = vec![0.0; oh * w];
            for p in 0..planes {
                rows.iter_mut().for_each(|v| *v = 0.0);
                let gsrc = &gd[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let v = gsrc[oy * ow + ox];
                        rows[oy * w + x0] += v * (1.0 - lx);
                        rows[oy * w + x1] += v * lx;
                    }
                }
                let dst = &mut r[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for ix in 0..w {
                        let v = rows[oy * w + ix];
                        dst[y0 * w + ix] += v * (1.0 - ly);
                        dst[y1 * w + ix] += v * ly;
                    }
                }
            }
            Tensor::new(shape.clone(), r)
        })
    }

    /// Per-channel 2-D correlation of `[B,C,H,W]` with a fixed odd-sized kernel, zero padded.
    pub fn conv2d_fixed(self, kernel: &Tensor) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 4);
        let out = correlate_same(&x, kernel, false);
        let k = kernel.clone();
        self.unary(out, move |g| correlate_same(g, &k, true))
    }
}

/// Zero-padded "same" correlation per plane; `adjoint` applies the transpose.
pub(crate) fn correlate_same(x: &Tensor, kernel: &Tensor, adjoint: bool) -> Tensor {
    let (kh, kw) = (kernel.dim(0), kernel.dim(1));
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel must be odd-sized");
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let (h, w) = (x.dim(2), x.dim(3));
    let planes = x.dim(0) * x.dim(1);
    let kd = kernel.data();
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for dy in -ry..=ry {
                    let sy = if adjoint { y - dy } else { y + dy };
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in -rx..=rx {
                        let sx = if adjoint { xx - dx } else { xx + dx };
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let kv = kd[((dy + ry) as usize) * kw + (dx + rx) as usize];
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y as usize * w + xx as usize] = acc;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Source taps `(i0, i1, weight_of_i1)` for half-pixel bilinear resampling.
pub(crate) fn interp_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

pub fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    if inner == 1 {
        for (src, dst) in d.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                s += *o;
            }
            dst.iter_mut().for_each(|v| *v /= s);
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (d[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn log_softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|k| (d[idx(k)] - m).exp()).sum();
            let lse = m + s.ln();
            for k in 0..n {
                out[idx(k)] = d[idx(k)] - lse;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}
