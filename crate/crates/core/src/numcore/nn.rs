//! Layers whose weights live in a [`ParamStore`] under a name prefix.

use rand::Rng;

use super::graph::{Graph, Var};
use super::optim::{Bound, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Affine map `x W + b`, `W: in x out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Registers weights with uniform(+-1/sqrt(input)) init.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        store.insert(
            format!("{prefix}/w"),
            Tensor::uniform(&[input, output], bound, rng),
            ParamKind::Network,
        );
        store.insert(
            format!("{prefix}/b"),
            Tensor::uniform(&[1, output], bound, rng),
            ParamKind::Network,
        );
        Linear {
            prefix: prefix.to_string(),
            input,
            output,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&format!("{}/w", self.prefix))?;
        let b = p.var(&format!("{}/b", self.prefix))?;
        let xw = g.matmul(x, w)?;
        g.bias_add(xw, b)
    }
}

/// Stacked LSTM. Gate column order in the fused weights is
/// input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Lstm {
    /// Weights uniform(+-1/sqrt(hidden)), forget-gate bias +1.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            store.insert(
                format!("{prefix}/l{l}/w_ih"),
                Tensor::uniform(&[inp, 4 * hidden], bound, rng),
                ParamKind::Network,
            );
            store.insert(
                format!("{prefix}/l{l}/w_hh"),
                Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
                ParamKind::Network,
            );
            let mut b = Tensor::uniform(&[1, 4 * hidden], bound, rng);
            for j in hidden..2 * hidden {
                b.data_mut()[j] += 1.0;
            }
            store.insert(format!("{prefix}/l{l}/b"), b, ParamKind::Network);
        }
        Lstm {
            prefix: prefix.to_string(),
            input,
            hidden,
            layers,
        }
    }

    /// One step of one layer. Returns `(h, c)`.
    pub fn cell(
        &self,
        g: &Graph,
        p: &Bound,
        layer: usize,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_ih = p.var(&format!("{}/l{layer}/w_ih", self.prefix))?;
        self.gates(g, p, layer, g.matmul(x, w_ih)?, h, c)
    }

    /// The cell given the already projected input `x * w_ih`.
    fn gates(&self, g: &Graph, p: &Bound, layer: usize, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_hh = p.var(&format!("{}/l{layer}/w_hh", self.prefix))?;
        let b = p.var(&format!("{}/l{layer}/b", self.prefix))?;
        let hd = self.hidden;
        let pre = g.add(xw, g.matmul(h, w_hh)?)?;
        let pre = g.bias_add(pre, b)?;
        let i = g.sigmoid(g.slice_cols(pre, 0, hd)?);
        let f = g.sigmoid(g.slice_cols(pre, hd, 2 * hd)?);
        let cand = g.tanh(g.slice_cols(pre, 2 * hd, 3 * hd)?);
        let o = g.sigmoid(g.slice_cols(pre, 3 * hd, 4 * hd)?);
        let c_next = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
        let h_next = g.mul(o, g.tanh(c_next))?;
        Ok((h_next, c_next))
    }

    /// Runs the stack over a sequence of `B x input` matrices, returning the
    /// top layer's `B x hidden` output at each step.
    pub fn forward(&self, g: &Graph, p: &Bound, inputs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let batch = g.value_ref(first).rows();
        for &x in inputs {
            let v = g.value_ref(x);
            if v.rows() != batch || v.cols() != self.input {
                return Err(Error::shape(
                    "lstm",
                    format!(
                        "expected {batch} x {} inputs, got {:?}",
                        self.input,
                        v.shape()
                    ),
                ));
            }
        }
        let mut seq = inputs.to_vec();
        for l in 0..self.layers {
            let mut h = g.constant(Tensor::zeros(&[batch, self.hidden]));
            let mut c = g.constant(Tensor::zeros(&[batch, self.hidden]));
            // One projection for the whole sequence, then a row block per step.
            let w_ih = p.var(&format!("{}/l{l}/w_ih", self.prefix))?;
            let xw = g.matmul(g.concat(&seq, 0)?, w_ih)?;
            let mut out = Vec::with_capacity(seq.len());
            for step in 0..seq.len() {
                let rows: Vec<usize> = (step * batch..(step + 1) * batch).collect();
                (h, c) = self.gates(g, p, l, g.gather_rows(xw, &rows)?, h, c)?;
                out.push(h);
            }
            seq = out;
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::init(&mut store, "lstm", 3, 4, 2, &mut rng);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let xs: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng)))
            .collect();
        for h in lstm.forward(&g, &p, &xs).unwrap() {
            assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lstm = Lstm::init(&mut store, "lstm", 2, 3, 2, &mut rng);
        let seqs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3, 2], 1.0, &mut rng)).collect();
        let perm = [2usize, 0, 1];
        let run = |order: &[usize]| -> Vec<Tensor> {
            let g = Graph::new();
            let p = store.bind(&g);
            let xs: Vec<Var> = seqs
                .iter()
                .map(|s| {
                    let rows: Vec<Vec<f64>> =
                        order.iter().map(|&r| s.row_slice(r).to_vec()).collect();
                    g.constant(Tensor::from_rows(&rows).unwrap())
                })
                .collect();
            lstm.forward(&g, &p, &xs)
                .unwrap()
                .into_iter()
                .map(|h| (*g.value(h)).clone())
                .collect()
        };
        let base = run(&[0, 1, 2]);
        let permuted = run(&perm);
        for (b, q) in base.iter().zip(&permuted) {
            for (i, &src) in perm.iter().enumerate() {
                assert_eq!(q.row_slice(i), b.row_slice(src));
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lstm = Lstm::init(&mut store, "lstm", 2, 3, 1, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros(&[1, 5]));
        assert!(lstm.forward(&g, &p, &[x]).is_err());
    }
}
