//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) - f(p-h)) / 2h`, step in `[1e-6, 1e-4]`.
    Central2,
    /// `(f(p-2h) - 8f(p-h) + 8f(p+h) - f(p+2h)) / 12h`, step in `[1e-4, 1e-2]`.
    Central4,
}

impl Stencil {
    fn step_range(self) -> std::ops::RangeInclusive<f64> {
        match self {
            Stencil::Central2 => 1e-6..=1e-4,
            Stencil::Central4 => 1e-4..=1e-2,
        }
    }
}

/// Compare `backward` against `(f(p+h) - f(p-h)) / 2h` for every coordinate
/// of every tensor in `params`.
///
/// `f` builds a scalar on a fresh graph from the parameter leaves it is given.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, h, Stencil::Central2)
}

/// [`grad_check`] with a choice of central-difference stencil.
pub fn grad_check_with<F>(f: F, params: &[Tensor], h: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !stencil.step_range().contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside {:?} for {stencil:?}", stencil.step_range())));
    }
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let root = f(&mut g, &vars)?;
        Ok((g, vars, root))
    };

    let (g, vars, root) = eval(params)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for pi in 0..work.len() {
        for ci in 0..work[pi].len() {
            let orig = work[pi].data()[ci];
            let mut at = |d: f64| -> Result<f64> {
                work[pi].data_mut()[ci] = orig + d;
                let (g, _, r) = eval(&work)?;
                g.value(r).item()
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h),
            };
            work[pi].data_mut()[ci] = orig;

            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
