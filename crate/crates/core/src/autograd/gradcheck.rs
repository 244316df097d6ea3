use super::{Tape, TapeOptions, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Magnitude below which gradients are compared absolutely. Central
/// differences carry roughly `1e-16 / h` of rounding noise, so smaller
/// values cannot be resolved relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(p+h) - f(p-h)) / 2h`.
///
/// `coords` lists `(tensor, element)` pairs to probe; `None` probes every
/// element of every tensor. `f` receives one leaf per tensor in `params`.
pub fn finite_diff_check<F>(
    params: &mut [Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
    options: TapeOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new(options);
        let vars: Vec<Var<'_>> = params
            .iter()
            .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
            .collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params.iter())
            .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect()
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new(TapeOptions { fault: None, ..options });
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    for &(pi, ci) in coords {
        let orig = params[pi].data()[ci];
        params[pi].data_mut()[ci] = orig + h;
        let plus = eval(params);
        params[pi].data_mut()[ci] = orig - h;
        let minus = eval(params);
        params[pi].data_mut()[ci] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic[pi][ci];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(Worst {
                param: pi,
                coord: ci,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut params = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let r = finite_diff_check(&mut params, None, 1e-4, 1e-6, TapeOptions::wide(), |_, v| {
            Ok(v[0].mul(v[0])?.sum())
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -3.0])];
        let r = finite_diff_check(&mut params, None, 1e-4, 1e-6, TapeOptions::wide(), |tape, _| {
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        let w = r.worst.unwrap();
        assert_eq!((w.analytic, w.numeric), (0.0, 0.0));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut params = vec![Tensor::scalar(1.0)];
        let r = finite_diff_check(&mut params, None, 0.0, 1e-6, TapeOptions::wide(), |_, v| Ok(v[0]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
