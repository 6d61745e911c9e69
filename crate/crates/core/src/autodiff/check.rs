//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct GradProbe {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h`. `entries[i]` lists the coordinates of input `i` to probe; `None`
/// probes every coordinate.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    entries: Option<&[Vec<usize>]>,
    h: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let coords: &[usize] = match entries {
            Some(e) => &e[i],
            None => {
                all = (0..input.len()).collect();
                &all
            }
        };
        for &k in coords {
            let x0 = input.data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[k];
            report.probes.push(GradProbe {
                input: i,
                entry: k,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}
