//! Central finite-difference verification of graph gradients.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Which coordinates to probe: all of them, or up to `per_param` per
/// parameter drawn without replacement from a seeded stream.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    Sampled { per_param: usize, seed: u64 },
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p + h) - f(p - h)) / 2h`.
    Central,
    /// `(f(p - 2h) - 8 f(p - h) + 8 f(p + h) - f(p + 2h)) / 12h`. Its
    /// truncation error is fourth order, so a larger `h` can be used and
    /// cancellation noise on tiny gradients shrinks accordingly.
    FivePoint,
}

/// Compares analytic gradients of the scalar built by `loss` against
/// `(f(p + h) - f(p - h)) / 2h`, reporting the maximum of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<F>(params: &mut ParamStore, h: f64, coverage: Coverage, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(params, h, coverage, Stencil::Central, loss)
}

/// [`grad_check`] with a choice of difference formula.
pub fn grad_check_with<F>(
    params: &mut ParamStore,
    h: f64,
    coverage: Coverage,
    stencil: Stencil,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    g.backward_into(out, params)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for id in ids {
        let n = params.get(id).value.len();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { per_param, seed } => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut rng = Rng::new(seed, id.0 as u64);
                for i in (1..n).rev() {
                    idx.swap(i, rng.below(i + 1));
                }
                idx.truncate(per_param);
                idx
            }
        };
        for c in coords {
            let analytic = params.get(id).grad.data()[c];
            let orig = params.get(id).value.data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                params.get_mut(id).value.data_mut()[c] = orig + offset;
                let v = eval(params);
                params.get_mut(id).value.data_mut()[c] = orig;
                v
            };
            let cd = match stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h),
            };
            let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.get(id).name.clone(), c));
                report.worst_values = (analytic, cd);
            }
        }
    }
    Ok(report)
}
