use super::{Tape, Var};
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Knobs for [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Tensors up to this many elements are checked at every coordinate.
    pub exhaustive_limit: usize,
    /// Coordinates sampled from larger tensors.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tol: 1e-4, exhaustive_limit: 10_000, samples: 32, seed: 0 }
    }
}

/// Result for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f(params)` with central
/// differences. `f` records its computation on the tape it is given, with
/// the parameters already recorded as leaves.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with(f, params, &GradCheckOptions { eps, tol, ..GradCheckOptions::default() })
}

pub fn grad_check_with<F>(f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(opts.eps > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::invalid("grad_check", "eps and tol must be positive"));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(params)?;
    let grads = tape.backward(loss)?;
    let mut report = GradReport { params: Vec::with_capacity(params.len()), tol: opts.tol };
    for (pi, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(v)?;
        let coords = coordinates(p.len(), pi, opts);
        let numeric: Vec<Result<f64>> = par::map_range(coords.len(), |ci| {
            let idx = coords[ci];
            let probe = |delta: f64| -> Result<f64> {
                let mut ps = params.to_vec();
                ps[pi].data_mut()[idx] += delta;
                let (t, l, _) = eval(&ps)?;
                Ok(t.value(l)?.data()[0])
            };
            Ok((probe(opts.eps)? - probe(-opts.eps)?) / (2.0 * opts.eps))
        });
        let mut check = ParamCheck {
            param: pi,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (&idx, num) in coords.iter().zip(numeric) {
            let (a, n) = (analytic.data()[idx], num?);
            let e = relative_error(a, n);
            if e >= check.max_rel_error {
                check = ParamCheck { max_rel_error: e, worst_index: idx, analytic: a, numeric: n, ..check };
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

fn coordinates(len: usize, param: usize, opts: &GradCheckOptions) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len <= opts.exhaustive_limit || len <= opts.samples {
        return all;
    }
    let mut rng = Rng::stream(opts.seed, param as u64);
    rng.shuffle(&mut all);
    all.truncate(opts.samples);
    all.sort_unstable();
    all
}
