//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Relative error with a floor so that tiny gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the tape's gradients of `sum(w * f(inputs))` against central
/// differences with step `eps`, where `w` is a fixed random projection.
/// Returns the largest relative error over all input entries.
pub fn gradient_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let project = |values: &[Tensor], tape: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
        let w = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod);
        let value = g.value(loss).item();
        if !tape {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = ids
            .iter()
            .zip(values)
            .map(|(&id, t)| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = project(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (up, _) = project(&probe, false)?;
            probe[i].data_mut()[j] = orig - eps;
            let (down, _) = project(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

type Taped = (Tensor, BTreeMap<String, Tensor>, Vec<String>);

/// Like [`gradient_check`], but differentiates with respect to the input `x`
/// and every tensor of `params` that `f` binds as a parameter. Unbound
/// tensors (running statistics and other buffers) are not probed.
pub fn param_gradient_check<F>(params: &ParamStore, x: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, NodeId) -> Result<NodeId>,
{
    let project = |p: &ParamStore, xv: &Tensor, tape: bool| -> Result<(f64, Option<Taped>)> {
        let mut g = Graph::new();
        let xi = g.input(xv.clone());
        let out = f(&mut g, p, xi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
        let w = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod);
        let value = g.value(loss).item();
        if !tape {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let gx = grads.wrt(xi).cloned().unwrap_or_else(|| Tensor::zeros(xv.shape()));
        Ok((value, Some((gx, grads.by_param(), g.param_names()))))
    };
    let (_, tape) = project(params, x, true)?;
    let (gx, gp, bound) = tape.expect("taped");
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + eps;
        let (up, _) = project(params, &xp, false)?;
        xp.data_mut()[j] = orig - eps;
        let (down, _) = project(params, &xp, false)?;
        xp.data_mut()[j] = orig;
        worst = worst.max(relative_error(gx.data()[j], (up - down) / (2.0 * eps)));
    }
    let mut probe = params.clone();
    for name in &bound {
        let t = params.get(name)?;
        let zero = Tensor::zeros(t.shape());
        let analytic = gp.get(name).unwrap_or(&zero);
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe.get_mut(name)?.data_mut()[j] = orig + eps;
            let (up, _) = project(&probe, x, false)?;
            probe.get_mut(name)?.data_mut()[j] = orig - eps;
            let (down, _) = project(&probe, x, false)?;
            probe.get_mut(name)?.data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic.data()[j], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
