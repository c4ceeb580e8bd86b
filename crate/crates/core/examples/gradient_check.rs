//! Compares reverse-mode gradients from the autodiff graph with central
//! finite differences on a small softmax regression with a Gaussian KL term.
//!
//! cargo run --example gradient_check

use dynamic_etm::numcore::{kl_diag_normal, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn loss(x: &Tensor, w: &Tensor, mu: &Tensor, logvar: &Tensor, y: &[usize]) -> (f64, Vec<Tensor>) {
    let g = Graph::new();
    let (xv, wv, mv, lv) = (g.constant(x.clone()), g.param(w.clone()), g.param(mu.clone()), g.param(logvar.clone()));
    let logp = g.log_softmax(g.matmul(xv, wv).unwrap(), 1).unwrap();
    let mut mask = Tensor::zeros(&[y.len(), w.shape()[1]]);
    for (i, &c) in y.iter().enumerate() {
        mask.row_slice_mut(i)[c] = 1.0;
    }
    let nll = g.scale(g.sum(g.mul(logp, g.constant(mask)).unwrap()), -1.0);
    let kl = g.sum(kl_diag_normal(&g, mv, lv, None, 1.0).unwrap());
    let total = g.add(nll, kl).unwrap();
    let grads = g.backward(total).unwrap();
    let value = g.scalar(total);
    let get = |v, t: &Tensor| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
    (value, vec![get(wv, w), get(mv, mu), get(lv, logvar)])
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let params = [Tensor::randn(&[4, 3], 0.5, &mut rng), Tensor::randn(&[1, 5], 1.0, &mut rng), Tensor::randn(&[1, 5], 0.3, &mut rng)];
    let y = [0, 2, 1, 1, 0, 2];
    let f = |p: &[Tensor]| loss(&x, &p[0], &p[1], &p[2], &y);
    let (value, analytic) = f(&params);
    println!("loss {value:.6}");

    for (i, name) in ["weights", "mu", "logvar"].iter().enumerate() {
        let mut p = params.to_vec();
        let mut numeric = Vec::new();
        for j in 0..params[i].len() {
            let orig = params[i].data()[j];
            p[i].data_mut()[j] = orig + H;
            let up = f(&p).0;
            p[i].data_mut()[j] = orig - H;
            let down = f(&p).0;
            p[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let a = analytic[i].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        println!("{name:>8}: relative error {:.2e}", diff / norm);
    }
}
