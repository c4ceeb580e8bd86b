//! Central finite differences against reverse-mode gradients.

use dynamic_etm::numcore::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of `f` at `x` by central differences.
pub fn numeric(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Worst per-input relative error between the graph gradient of the scalar
/// `build(g, inputs)` and finite differences.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars);
    let grads = g.backward(out).expect("backward");
    let eval = |ts: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        g.scalar(build(&g, &vars))
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|x| x.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let num = numeric(t.data(), |x| {
            let mut ts = inputs.to_vec();
            ts[i] = Tensor::new(t.shape(), x.to_vec()).unwrap();
            eval(&ts)
        });
        worst = worst.max(rel_err(&analytic, &num));
    }
    worst
}

/// `sum(x * w)` for fixed weights, so every output entry gets a distinct
/// upstream gradient.
pub fn weighted_sum(g: &Graph, x: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone().reshape(&g.shape(x)).unwrap());
    g.sum(g.mul(x, w).unwrap())
}
