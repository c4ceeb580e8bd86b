//! Reparameterized Gaussian sampling and closed-form KL divergences.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Log-variances are clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `mu + exp(0.5 * logvar) * eps`, `eps ~ N(0, I)` drawn from `rng`.
pub fn reparam_sample<R: Rng + ?Sized>(
    g: &Graph,
    mu: Var,
    logvar: Var,
    rng: &mut R,
) -> Result<Var> {
    let shape = g.shape(mu);
    if shape != g.shape(logvar) {
        return Err(Error::shape(
            "reparam_sample",
            format!("mu {shape:?} vs logvar {:?}", g.shape(logvar)),
        ));
    }
    let eps = g.constant(standard_normal(&shape, rng));
    reparam_with_noise(g, mu, logvar, eps)
}

/// Same as [`reparam_sample`] with explicit noise.
pub fn reparam_with_noise(g: &Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let lv = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
    let std = g.exp(g.scale(lv, 0.5));
    g.add(mu, g.mul(std, eps)?)
}

/// `KL(N(mu_q, diag exp(logvar_q)) || N(mu_p, var_p I))`, summed over all
/// entries. `mu_p = None` means a zero prior mean.
pub fn kl_diag_normal(
    g: &Graph,
    mu_q: Var,
    logvar_q: Var,
    mu_p: Option<Var>,
    var_p: f64,
) -> Result<Var> {
    if !(var_p > 0.0) {
        return Err(Error::Config(format!("prior variance must be > 0, got {var_p}")));
    }
    let n = g.value_ref(mu_q).len() as f64;
    let lv = g.clamp(logvar_q, LOGVAR_MIN, LOGVAR_MAX);
    let diff = match mu_p {
        Some(m) => g.sub(mu_q, m)?,
        None => mu_q,
    };
    let quad = g.add(g.exp(lv), g.mul(diff, diff)?)?;
    let per = g.sub(g.scale(quad, 1.0 / var_p), lv)?;
    let total = g.scale(g.sum(per), 0.5);
    Ok(g.add_scalar(total, 0.5 * n * (var_p.ln() - 1.0)))
}

/// Plain-value version of [`kl_diag_normal`].
pub fn kl_diag_normal_values(
    mu_q: &[f64],
    logvar_q: &[f64],
    mu_p: &[f64],
    var_p: f64,
) -> Result<f64> {
    if !(var_p > 0.0) {
        return Err(Error::Config(format!("prior variance must be > 0, got {var_p}")));
    }
    if mu_q.len() != logvar_q.len() || mu_q.len() != mu_p.len() {
        return Err(Error::shape("kl_diag_normal", "length mismatch"));
    }
    Ok(mu_q
        .iter()
        .zip(logvar_q)
        .zip(mu_p)
        .map(|((&m, &lv), &mp)| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            0.5 * ((lv.exp() + (m - mp) * (m - mp)) / var_p - 1.0 + var_p.ln() - lv)
        })
        .sum())
}

/// One standard-normal draw.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
