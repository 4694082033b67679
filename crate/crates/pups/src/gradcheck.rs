//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to check.

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares backward-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for which in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[which].numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let base = inputs[which].data()[j];
            let mut d = inputs[which].data().to_vec();
            d[j] = base + h;
            work[which].assign(&d)?;
            let plus = eval(&work)?;
            d[j] = base - h;
            work[which].assign(&d)?;
            let minus = eval(&work)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        work[which] = inputs[which].clone();
        numeric.push(grad);
    }

    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n))
        .collect();
    Ok(GradCheck {
        relative_errors,
        analytic,
        numeric,
    })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(1e-12)
}

/// Like [`check`], but perturbs parameters of a store. `f` receives the
/// whole store bound on a fresh graph.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    g.backward(out)?;
    let all = store.grads(&g, &bound);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| all[store.ids().position(|x| x == id).unwrap()].clone()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let out = f(&mut g, &bound)?;
        Ok(g.value(out).data()[0])
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.get(id).data().to_vec();
        let mut grad = vec![0.0; base.len()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let mut d = base.clone();
            d[j] = base[j] + h;
            work.get_mut(id).assign(&d)?;
            let plus = eval(&work)?;
            d[j] = base[j] - h;
            work.get_mut(id).assign(&d)?;
            let minus = eval(&work)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        work.get_mut(id).assign(&base)?;
        numeric.push(grad);
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n))
        .collect();
    Ok(GradCheck {
        relative_errors,
        analytic,
        numeric,
    })
}
