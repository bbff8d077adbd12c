//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

/// Compares autodiff against central differences for every coordinate of
/// every input. The output of `f` is contracted with a fixed random tensor
/// so that all output elements contribute to the checked scalar.
///
/// Passes when `|ad - fd| <= atol + rtol * max(|ad|, |fd|)` everywhere.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g>,
    h: f64,
    atol: f64,
    rtol: f64,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&vars);
        Tensor::from_fn(&y.shape(), |_| rng.random_range(-1.0..1.0))
    };
    let eval = |xs: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&vars).mul_const(&proj).sum_all().item()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let grads = g.backward(f(&vars).mul_const(&proj).sum_all());
    for (j, v) in vars.iter().enumerate() {
        let ad = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[j].shape()));
        for i in 0..inputs[j].numel() {
            let mut xs = inputs.to_vec();
            xs[j].data_mut()[i] += h;
            let fp = eval(&xs);
            xs[j].data_mut()[i] -= 2.0 * h;
            let fm = eval(&xs);
            let fd = (fp - fm) / (2.0 * h);
            let a = ad.data()[i];
            if (a - fd).abs() > atol + rtol * fd.abs().max(a.abs()) {
                return Err(format!("input {j} coord {i}: autodiff {a} vs finite difference {fd}"));
            }
        }
    }
    Ok(())
}
