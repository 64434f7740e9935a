use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{KwsError, Result};
use crate::par;

/// Relative error used by [`grad_check`]:
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (param index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(KwsError::Usage(format!(
            "grad_check function returned shape {:?}, expected a scalar",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|v| grads.wrt(*v)).collect())
}

/// Compares backward gradients of the scalar program `f` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on every parameter element.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Sync,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    Ok(grad_check_elements(&f, params, eps, &all)?.max_rel_error)
}

/// Like [`grad_check`] on a seeded random subsample of at most `max_elements`
/// parameter elements.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Sync,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    let chosen = if all.len() <= max_elements {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, all.len(), max_elements).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| all[i]).collect()
    };
    grad_check_elements(&f, params, eps, &chosen)
}

fn grad_check_elements<F>(f: &F, params: &[Tensor], eps: f64, elements: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Sync,
{
    let analytic = analytic_gradients(f, params)?;
    let numeric = par::map(elements, |&(p, e)| -> Result<f64> {
        let mut shifted = params.to_vec();
        let base = shifted[p].data()[e];
        shifted[p].data_mut()[e] = base + eps;
        let plus = evaluate(f, &shifted)?;
        shifted[p].data_mut()[e] = base - eps;
        let minus = evaluate(f, &shifted)?;
        Ok((plus - minus) / (2.0 * eps))
    });
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: elements.len(),
    };
    for (&(p, e), n) in elements.iter().zip(numeric) {
        let err = relative_error(analytic[p].data()[e], n?);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = Some((p, e));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(3.0))),
            &[Tensor::ones(&[2, 2])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }
}
