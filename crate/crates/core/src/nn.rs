//! Named parameter storage and the small layer vocabulary shared by the
//! encoder, prompt encoder and decoder.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Rc<Tensor>,
    pub trainable: bool,
}

/// Flat, ordered registry of every model tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value: Rc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let slot = &mut self.params[id.0];
        assert_eq!(slot.value.shape(), value.shape(), "shape change for {}", slot.name);
        slot.value = Rc::new(value);
    }

    /// Mutable access for in-place optimiser updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix) && (!trainable_only || p.trainable))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Which leaves of a forward pass should collect gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Pure inference; no backward closures are recorded.
    None,
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter, including frozen ones (used by gradient probes).
    All,
}

/// Binds store parameters into a graph, once per parameter per graph.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    mode: GradMode,
    bound: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Binder<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, mode: GradMode) -> Self {
        Self {
            graph,
            store,
            mode,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let param = self.store.param(id);
        let rg = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => param.trainable,
            GradMode::All => true,
        };
        let v = self.graph.leaf_rc(param.value.clone(), rg);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Parameters bound so far, with their graph handles.
    pub fn bound(&self) -> Vec<(ParamId, Var<'g>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| d.sample(&mut self.rng))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform(&[in_dim, out_dim], bound), trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.uniform(&[out_dim], bound), trainable));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] but with all-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, trainable: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]), trainable);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.linear(b.p(self.weight), self.bias.map(|id| b.p(id)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable),
            eps: LN_EPS,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(b.p(self.weight), b.p(self.bias), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize, trainable: bool) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true, trainable),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true, trainable),
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.fc2.forward(b, self.fc1.forward(b, x).gelu())
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output maps.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, trainable: bool) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true, trainable),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true, trainable),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true, trainable),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true, trainable),
            heads,
        }
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Var<'g> {
        self.forward_with_weights(b, q, k, v).0
    }

    /// Returns the output and the softmaxed attention weights `[B*heads, Nq, Nk]`.
    pub fn forward_with_weights<'g>(
        &self,
        b: &Binder<'g, '_>,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
    ) -> (Var<'g>, Var<'g>) {
        let qs = q.shape();
        let ks = k.shape();
        let (bs, nq, c) = (qs[0], qs[1], qs[2]);
        let nk = ks[1];
        let h = self.heads;
        let d = c / h;
        let split = |x: Var<'g>, n: usize| x.reshape(&[bs, n, h, d]).permute(&[0, 2, 1, 3]).reshape(&[bs * h, n, d]);
        let qh = split(self.q.forward(b, q), nq);
        let kh = split(self.k.forward(b, k), nk);
        let vh = split(self.v.forward(b, v), nk);
        let weights = qh.bmm(kh, true).scale(1.0 / (d as f64).sqrt()).softmax(2);
        let out = weights
            .bmm(vh, false)
            .reshape(&[bs, h, nq, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[bs, nq, c]);
        (self.out.forward(b, out), weights)
    }
}

/// `[B, K, H, W]` to non-overlapping patch tokens `[B, (H/p)(W/p), K*p*p]`,
/// raster order over the patch grid.
pub fn patchify<'g>(x: Var<'g>, p: usize) -> Var<'g> {
    let s = x.shape();
    let (bs, k, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % p == 0 && w % p == 0, "{h}x{w} not divisible by {p}");
    let (gy, gx) = (h / p, w / p);
    x.reshape(&[bs, k, gy, p, gx, p])
        .permute(&[0, 2, 4, 1, 3, 5])
        .reshape(&[bs, gy * gx, k * p * p])
}

/// Bottleneck residual adapter; the up-projection starts at zero so an
/// inserted adapter leaves the host network's function unchanged.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, reduction: usize) -> Self {
        let hidden = (dim / reduction).max(1);
        Self {
            down: Linear::new(store, init, &format!("{name}.down"), dim, hidden, true, true),
            up: Linear::zeros(store, &format!("{name}.up"), hidden, dim, true),
        }
    }

    /// `x + up(gelu(down(x)))`
    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.add(self.up.forward(b, self.down.forward(b, x).gelu()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_leaf_per_parameter() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let lin = Linear::new(&mut store, &mut init, "l", 3, 2, true, true);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::Trainable);
        assert_eq!(b.p(lin.weight).id(), b.p(lin.weight).id());
        assert!(b.p(lin.weight).requires_grad());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let attn = Attention::new(&mut store, &mut init, "a", 8, 2, true);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::None);
        let x = g.constant(init.normal(&[2, 5, 8], 1.0));
        let y = g.constant(init.normal(&[2, 7, 8], 1.0));
        let (out, w) = attn.forward_with_weights(&b, x, y, y);
        assert_eq!(out.shape(), vec![2, 5, 8]);
        let w = w.value();
        for row in w.data().chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adapter_is_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2);
        let ad = Adapter::new(&mut store, &mut init, "ad", 8, 4);
        let g = Graph::new();
        let b = Binder::new(&g, &store, GradMode::None);
        let x = init.normal(&[3, 8], 1.0);
        let y = ad.forward(&b, g.constant(x.clone())).value();
        assert_eq!(*y, x);
    }
}
