//! Central finite-difference gradient checking.

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Probe at most this many coordinates per input (chosen at random);
    /// `None` probes every coordinate.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tol: 1e-5,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Max relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub probes: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|e| *e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute
/// below unit magnitude where finite differences carry absolute noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck target must be scalar, got {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numerical("target is non-finite at a probe point".into()));
    }
    Ok(x)
}

pub fn gradcheck<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(
        f,
        inputs,
        &GradcheckOptions {
            tol,
            ..Default::default()
        },
    )
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::Numerical("target is non-finite at the base point".into()));
    }
    let grads = tape.backward(out)?;
    let mut rng = Rng::new(opts.seed);
    let mut probes = 0;
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].len();
        let coords: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for c in coords {
            let x0 = inputs[i].data()[c];
            work[i].data_mut()[c] = x0 + opts.step;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[c] = x0 - opts.step;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
            probes += 1;
        }
        max_rel_error.push(worst);
    }
    Ok(GradcheckReport {
        max_rel_error,
        probes,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let r = gradcheck(
            |t, _| Ok(t.scalar(3.0)),
            &[Tensor::from_vec(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.worst(), 0.0);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_target_is_a_numerical_error() {
        let r = gradcheck(
            |t, x| {
                let l = t.log(x[0]);
                Ok(t.sum(l))
            },
            &[Tensor::from_vec(vec![-1.0])],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
