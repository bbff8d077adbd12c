//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance-id raster pair at most 32x32: ground truth rectangles and
/// a prediction that jitters, drops and adds rectangles.
pub fn random_pair(seed: u64) -> (usize, usize, Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(4..=32);
    let w = rng.random_range(4..=32);
    let mut gt = vec![0u32; h * w];
    let mut pred = vec![0u32; h * w];
    let paint = |m: &mut [u32], id: u32, y0: i64, x0: i64, rh: i64, rw: i64| {
        for y in y0.max(0)..(y0 + rh).min(h as i64) {
            for x in x0.max(0)..(x0 + rw).min(w as i64) {
                m[y as usize * w + x as usize] = id;
            }
        }
    };
    let n = rng.random_range(0..=6);
    let mut next_pred = 1;
    for id in 1..=n {
        let rh = rng.random_range(1..=(h as i64 / 2).max(1));
        let rw = rng.random_range(1..=(w as i64 / 2).max(1));
        let y0 = rng.random_range(0..h as i64);
        let x0 = rng.random_range(0..w as i64);
        paint(&mut gt, id, y0, x0, rh, rw);
        if rng.random_bool(0.8) {
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-1..=1);
            let (dy, dx, dh, dw) = (j(&mut rng), j(&mut rng), j(&mut rng), j(&mut rng));
            paint(&mut pred, next_pred, y0 + dy, x0 + dx, (rh + dh).max(1), (rw + dw).max(1));
            next_pred += 1;
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        let rh = rng.random_range(1..=4);
        let rw = rng.random_range(1..=4);
        let (y0, x0) = (rng.random_range(0..h as i64), rng.random_range(0..w as i64));
        paint(&mut pred, next_pred, y0, x0, rh, rw);
        next_pred += 1;
    }
    (h, w, gt, pred)
}

pub fn ids(m: &[u32]) -> Vec<u32> {
    let mut v: Vec<u32> = m.iter().copied().filter(|&x| x != 0).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// `(intersection, union)` by direct pixel count.
pub fn overlap(gt: &[u32], pred: &[u32], g: u32, p: u32) -> (usize, usize) {
    let mut i = 0;
    let mut u = 0;
    for (&a, &b) in gt.iter().zip(pred) {
        i += (a == g && b == p) as usize;
        u += (a == g || b == p) as usize;
    }
    (i, u)
}

/// Largest set of one-to-one pairs with IoU above one half, found by trying
/// every assignment. Returns the matched IoUs.
pub fn exhaustive_matching(gt: &[u32], pred: &[u32]) -> Vec<f64> {
    let gs = ids(gt);
    let ps = ids(pred);
    let iou: Vec<Vec<f64>> = gs
        .iter()
        .map(|&g| {
            ps.iter()
                .map(|&p| {
                    let (i, u) = overlap(gt, pred, g, p);
                    i as f64 / u as f64
                })
                .collect()
        })
        .collect();
    fn go(k: usize, iou: &[Vec<f64>], used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Vec<f64>) {
        if k == iou.len() {
            let sum = |v: &[f64]| v.iter().sum::<f64>();
            if cur.len() > best.len() || (cur.len() == best.len() && sum(cur) > sum(best)) {
                *best = cur.clone();
            }
            return;
        }
        go(k + 1, iou, used, cur, best);
        for j in 0..used.len() {
            if !used[j] && iou[k][j] > 0.5 {
                used[j] = true;
                cur.push(iou[k][j]);
                go(k + 1, iou, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = Vec::new();
    go(0, &iou, &mut vec![false; ps.len()], &mut Vec::new(), &mut best);
    best
}

pub fn oracle_f1(gt: &[u32], pred: &[u32]) -> f64 {
    let tp = exhaustive_matching(gt, pred).len();
    let (ng, np) = (ids(gt).len(), ids(pred).len());
    if ng + np == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (ng + np) as f64
}

/// `(pq, sq, rq)`
pub fn oracle_pq(gt: &[u32], pred: &[u32]) -> (f64, f64, f64) {
    let m = exhaustive_matching(gt, pred);
    let tp = m.len() as f64;
    let (ng, np) = (ids(gt).len() as f64, ids(pred).len() as f64);
    if ng + np == 0.0 {
        return (1.0, 1.0, 1.0);
    }
    let sq = if tp > 0.0 { m.iter().sum::<f64>() / tp } else { 0.0 };
    let rq = tp / (tp + 0.5 * (np - tp) + 0.5 * (ng - tp));
    (sq * rq, sq, rq)
}

/// Aggregated Jaccard index: repeatedly take the overlapping pair with the
/// highest IoU among unused instances.
pub fn oracle_aji(gt: &[u32], pred: &[u32]) -> f64 {
    let (gs, ps) = (ids(gt), ids(pred));
    if gs.is_empty() && ps.is_empty() {
        return 1.0;
    }
    let area = |m: &[u32], id: u32| m.iter().filter(|&&v| v == id).count();
    let mut gu = vec![false; gs.len()];
    let mut pu = vec![false; ps.len()];
    let (mut num, mut den) = (0, 0);
    loop {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (a, &g) in gs.iter().enumerate() {
            for (b, &p) in ps.iter().enumerate() {
                if gu[a] || pu[b] {
                    continue;
                }
                let (i, u) = overlap(gt, pred, g, p);
                let v = i as f64 / u as f64;
                if i > 0 && best.is_none_or(|x| v > x.0) {
                    best = Some((v, a, b, i, u));
                }
            }
        }
        let Some((_, a, b, i, u)) = best else { break };
        gu[a] = true;
        pu[b] = true;
        num += i;
        den += u;
    }
    den += gs.iter().zip(&gu).filter(|(_, &u)| !u).map(|(&g, _)| area(gt, g)).sum::<usize>();
    den += ps.iter().zip(&pu).filter(|(_, &u)| !u).map(|(&p, _)| area(pred, p)).sum::<usize>();
    num as f64 / den as f64
}

/// Symmetric Hausdorff distance between mask contours by checking every
/// pair of contour pixels. Pixels outside the image count as background.
pub fn oracle_hausdorff(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let contour = |m: &[bool]| {
        let mut v = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !m[y * w + x] {
                    continue;
                }
                let inside = |yy: i64, xx: i64| yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && m[yy as usize * w + xx as usize];
                let (yi, xi) = (y as i64, x as i64);
                if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let (ca, cb) = (contour(a), contour(b));
    if ca.is_empty() || cb.is_empty() {
        return None;
    }
    let directed = |s: &[(f64, f64)], t: &[(f64, f64)]| {
        s.iter()
            .map(|p| t.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&ca, &cb).max(directed(&cb, &ca)))
}

/// Per-pixel sequential evaluation of the selective state-space recurrence.
#[allow(clippy::too_many_arguments)]
pub fn scan_oracle(x: &[f64], delta: &[f64], a: &[f64], bm: &[f64], cm: &[f64], dskip: &[f64], l: usize, d: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * d];
    for ch in 0..d {
        let mut s = vec![0.0; n];
        for t in 0..l {
            let dt = delta[t * d + ch];
            let xt = x[t * d + ch];
            let mut out = dskip[ch] * xt;
            for k in 0..n {
                s[k] = (dt * a[ch * n + k]).exp() * s[k] + dt * bm[t * n + k] * xt;
                out += cm[t * n + k] * s[k];
            }
            y[t * d + ch] = out;
        }
    }
    y
}
